//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! The trend, ablation and determinism criteria train the full grid on the
//! default dataset (15 runs), which takes tens of minutes on one core.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use compohoi::autodiff::gradcheck::{check, check_params, DEFAULT_STEP};
use compohoi::autodiff::{Tape, Var};
use compohoi::boxes::{giou_corners, iou_corners, Corners};
use compohoi::eval::{average_precision, evaluate_triplets, gt_triplets, iou, GtTriplet, ScoredTriplet, MATCH_IOU};
use compohoi::experiment::{
    ablate, ablation_table, run, step_objective, train, ExperimentConfig, Method, Mode, RunRecord, Schedule,
    TrainImage, TrainOptions,
};
use compohoi::losses::{batch_loss, read_loss_log, total_loss, LossWeights};
use compohoi::matching::{brute_force, hungarian, GroundTruthSet, GtInstance};
use compohoi::model::{ActionHeadInput, FeatureGrid, FeatureMap, HoiModel, ModelConfig};
use compohoi::param::ParamId;
use compohoi::recompose::{build_recomposed_batch, FeasibilityTable, HoLabel, MatchedSample, RecompositionPlan};
use compohoi::synth::{build_dataset, DatasetSpec};
use compohoi::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn timed(name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let mut o = f();
    let took = start.elapsed();
    if let Some(l) = limit {
        if took > l {
            o.pass = false;
            o.detail = format!("{}; over the {:?} limit", o.detail, l);
        }
    }
    println!(
        "{} {name}: {} ({:.1}s)",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        took.as_secs_f64()
    );
    o.pass
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn rand_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    [
        rng.random_range(0.3..0.7),
        rng.random_range(0.3..0.7),
        rng.random_range(0.2..0.5),
        rng.random_range(0.2..0.5),
    ]
}

/// Queries start small, so the first layer norm magnifies a query
/// perturbation about fiftyfold; a 1e-5 step then crosses feed-forward ReLU
/// kinks in some seeds.
const TRAINING_OBJECTIVE_STEP: f64 = 1e-6;

type OpCase = (&'static str, Vec<Vec<usize>>, fn(&mut Tape<f64>, &[Var]) -> compohoi::Result<Var>);

fn weighted_sum(t: &mut Tape<f64>, x: Var, seed: u64) -> compohoi::Result<Var> {
    let w = rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), t.shape(x));
    let c = t.constant(w);
    let y = t.mul(x, c)?;
    Ok(t.sum(y))
}

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 1)
        }),
        ("matmul_t", vec![vec![3, 4], vec![5, 4]], |t, v| {
            let y = t.matmul_t(v[0], v[1])?;
            weighted_sum(t, y, 2)
        }),
        ("add", vec![vec![3, 4], vec![3, 4]], |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, 3)
        }),
        ("add_row", vec![vec![3, 4], vec![4]], |t, v| {
            let y = t.add_row(v[0], v[1])?;
            weighted_sum(t, y, 4)
        }),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, 5)
        }),
        ("scale", vec![vec![3, 4]], |t, v| {
            let y = t.scale(v[0], -1.7);
            weighted_sum(t, y, 6)
        }),
        ("relu", vec![vec![3, 4]], |t, v| {
            let y = t.relu(v[0]);
            weighted_sum(t, y, 7)
        }),
        ("sigmoid", vec![vec![3, 4]], |t, v| {
            let y = t.sigmoid(v[0]);
            weighted_sum(t, y, 8)
        }),
        ("softmax rows", vec![vec![3, 5]], |t, v| {
            let y = t.softmax(v[0], 1)?;
            weighted_sum(t, y, 9)
        }),
        ("softmax columns", vec![vec![3, 5]], |t, v| {
            let y = t.softmax(v[0], 0)?;
            weighted_sum(t, y, 10)
        }),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(t, y, 11)
        }),
        ("concat", vec![vec![2, 3], vec![2, 2]], |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            weighted_sum(t, y, 12)
        }),
        ("slice", vec![vec![4, 5]], |t, v| {
            let y = t.slice(v[0], 1, 1, 3)?;
            weighted_sum(t, y, 13)
        }),
        ("gather_rows", vec![vec![4, 3]], |t, v| {
            let y = t.gather_rows(v[0], &[2, 0, 2, 3])?;
            weighted_sum(t, y, 14)
        }),
        ("mean", vec![vec![3, 4]], |t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.mean(y))
        }),
        ("softmax_cross_entropy", vec![vec![4, 5]], |t, v| t.softmax_cross_entropy(v[0], &[0, 4, 2, 4])),
        ("bce_with_logits", vec![vec![3, 4]], |t, v| {
            let targets = Tensor::new(vec![3, 4], vec![1., 0., 0., 1., 1., 1., 0., 0., 0., 1., 0., 1.]).unwrap();
            t.bce_with_logits(v[0], &targets)
        }),
    ]
}

fn box_cases(rng: &mut ChaCha8Rng) -> compohoi::Result<Vec<f64>> {
    let pred = Tensor::new(vec![3, 4], (0..3).flat_map(|_| rand_box(rng)).collect())?;
    let target = Tensor::new(vec![3, 4], (0..3).flat_map(|_| rand_box(rng)).collect())?;
    let l1 = check(std::slice::from_ref(&pred), DEFAULT_STEP, |t, v| t.l1_sum(v[0], &target))?;
    let giou = check(&[pred], DEFAULT_STEP, |t, v| t.giou_loss_sum(v[0], &target))?;
    Ok(vec![l1.max_rel_error(), giou.max_rel_error()])
}

fn tiny_step_problem(rng: &mut ChaCha8Rng) -> (HoiModel<f64>, Vec<TrainImage>, FeasibilityTable) {
    let cfg = ModelConfig {
        num_queries: 3,
        query_dim: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        attention_heads: 2,
        num_object_classes: 3,
        num_action_classes: 2,
        feature_grid: FeatureGrid {
            height: 2,
            width: 2,
            channels: 8,
        },
        action_head: ActionHeadInput::Concat,
    };
    let model = HoiModel::new(cfg, rng).unwrap();
    let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
    let table = FeasibilityTable::new(names("o", 3), names("a", 2), vec![(0, 0), (0, 1), (1, 0), (2, 1)]).unwrap();
    let images = (0..2u64)
        .map(|id| {
            let instances = (0..rng.random_range(1..3))
                .map(|_| GtInstance {
                    human_box: rand_box(rng),
                    object_box: rand_box(rng),
                    object_class: rng.random_range(0..3),
                    actions: vec![rng.random_bool(0.5), true],
                })
                .collect();
            TrainImage {
                image_id: id,
                features: FeatureMap::new(rand_tensor(rng, &[2, 2, 8])).unwrap(),
                gt: GroundTruthSet::new(3, 2, instances).unwrap(),
            }
        })
        .collect();
    (model, images, table)
}

fn gradient_correctness() -> Outcome {
    let seeds = 20u64;
    let mut worst_op: (f64, &str) = (0.0, "");
    let mut worst_e2e = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, shapes, f) in op_cases() {
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            let e = match check(&inputs, DEFAULT_STEP, f) {
                Ok(r) => r.max_rel_error(),
                Err(e) => return outcome(false, format!("{name}: {e}")),
            };
            if e > worst_op.0 {
                worst_op = (e, name);
            }
        }
        match box_cases(&mut rng) {
            Ok(errs) => {
                for (e, name) in errs.into_iter().zip(["l1_sum", "giou_loss_sum"]) {
                    if e > worst_op.0 {
                        worst_op = (e, name);
                    }
                }
            }
            Err(e) => return outcome(false, format!("box losses: {e}")),
        }

        let (mut model, images, table) = tiny_step_problem(&mut rng);
        let template = model.clone();
        let opts = TrainOptions {
            mode: Mode::Compo,
            rho: 0.5,
            weights: LossWeights::default(),
            detach_recomposed: false,
            schedule: Schedule::default(),
        };
        let ids: Vec<ParamId> = model.store().iter().map(|(id, _)| id).collect();
        let r = check_params(model.store_mut(), &ids, TRAINING_OBJECTIVE_STEP, |t, s| {
            let mut m = template.clone();
            m.load_parameters(s)?;
            let (_, batch) = step_objective(&m, t, &[&images[0], &images[1]], &table, &opts)?;
            Ok(batch)
        });
        match r {
            Ok(r) => worst_e2e = worst_e2e.max(r.max_rel_error()),
            Err(e) => return outcome(false, format!("training objective: {e}")),
        }
    }
    outcome(
        worst_op.0 < 1e-5 && worst_e2e < 1e-4,
        format!(
            "{seeds} seeds, worst per-op {:.2e} ({}), worst training objective {worst_e2e:.2e}",
            worst_op.0, worst_op.1
        ),
    )
}

fn hungarian_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut mismatches = 0;
    for case in 0..200 {
        let g = rng.random_range(1..=6usize);
        let q = rng.random_range(g..=8usize);
        let cost: Vec<Vec<f64>> = if case % 2 == 0 {
            (0..g).map(|_| (0..q).map(|_| rng.random_range(-5.0..5.0)).collect()).collect()
        } else {
            (0..g).map(|_| (0..q).map(|_| rng.random_range(0..4) as f64).collect()).collect()
        };
        let a = match hungarian(&cost, q) {
            Ok(a) => a,
            Err(e) => return outcome(false, format!("case {case}: {e}")),
        };
        let (best, _) = brute_force(&cost, q).expect("g <= q");
        let total: f64 = a.total(&cost);
        let exact = if case % 2 == 0 {
            (total - best).abs() <= 1e-12 * best.abs().max(1.0)
        } else {
            total == best
        };
        if !exact {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("200 matrices up to 6x8, {mismatches} cost mismatches against brute force"),
    )
}

fn random_table(rng: &mut ChaCha8Rng, no: usize, na: usize) -> FeasibilityTable {
    let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
    let mut cats = Vec::new();
    for o in 0..no {
        for a in 0..na {
            if rng.random_bool(0.5) {
                cats.push((o, a));
            }
        }
    }
    FeasibilityTable::new(names("o", no), names("a", na), cats).unwrap()
}

fn random_samples(rng: &mut ChaCha8Rng, images: usize, no: usize, na: usize, dim: usize) -> Vec<Vec<MatchedSample<f64>>> {
    (0..images)
        .map(|img| {
            (0..rng.random_range(0..=4))
                .map(|_| MatchedSample {
                    ho: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    int: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    label: HoLabel {
                        human_box: rand_box(rng),
                        object_box: rand_box(rng),
                        object_class: rng.random_range(0..no),
                    },
                    actions: (0..na).map(|_| rng.random_bool(0.5)).collect(),
                    source_image: img,
                })
                .collect()
        })
        .collect()
}

fn recomposition_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut shape_bad, mut infeasible, mut self_bad) = (0, 0usize, 0);
    for _ in 0..500 {
        let (no, na, dim) = (rng.random_range(1..=6), rng.random_range(1..=5), rng.random_range(1..=6));
        let table = random_table(&mut rng, no, na);
        let images = rng.random_range(1..=3);
        let samples = random_samples(&mut rng, images, no, na, dim);

        // Enumeration count: every ordered (pair source, interaction source)
        // across the batch, minus an instance meeting itself.
        let flat: Vec<(usize, usize)> = samples
            .iter()
            .enumerate()
            .flat_map(|(i, s)| (0..s.len()).map(move |k| (i, k)))
            .collect();
        let enumerated = flat.iter().flat_map(|p| flat.iter().map(move |q| (p, q))).filter(|(p, q)| p != q).count();
        let batch = build_recomposed_batch(&samples, &table, false).unwrap();
        let counts: Vec<usize> = samples.iter().map(Vec::len).collect();
        if batch.len() != enumerated
            || RecompositionPlan::expected_len(&counts, false) != enumerated
            || (enumerated > 0 && batch.features.shape() != [enumerated, 2 * dim].as_slice())
        {
            shape_bad += 1;
        }
        for (r, label) in batch.ho_labels.iter().enumerate() {
            for a in 0..na {
                if batch.action_labels.data()[r * na + a] != 0.0 && !table.is_feasible(label.object_class, a) {
                    infeasible += 1;
                }
            }
        }

        // Self-composition of a single image: the diagonal rows are the
        // original samples with their own feasible labels.
        let one = vec![samples.iter().flatten().cloned().collect::<Vec<_>>()];
        let own = build_recomposed_batch(&one, &table, true).unwrap();
        let n = one[0].len();
        for (m, s) in one[0].iter().enumerate() {
            let row = m * n + m;
            let feats = &own.features.data()[row * 2 * dim..(row + 1) * 2 * dim];
            let expect: Vec<f64> = s.ho.iter().chain(&s.int).copied().collect();
            let labels: Vec<bool> = own.action_labels.data()[row * na..(row + 1) * na].iter().map(|&v| v == 1.0).collect();
            let masked: Vec<bool> = s
                .actions
                .iter()
                .enumerate()
                .map(|(a, &on)| on && table.is_feasible(s.label.object_class, a))
                .collect();
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            if bits(feats) != bits(&expect) || own.ho_labels[row] != s.label || labels != masked {
                self_bad += 1;
            }
        }
    }
    outcome(
        shape_bad == 0 && infeasible == 0 && self_bad == 0,
        format!(
            "500 batches: {shape_bad} shape-law mismatches, {infeasible} infeasible positives, {self_bad} self-composition mismatches"
        ),
    )
}

/// Area under the precision envelope, enumerated over every score
/// threshold.
fn pr_enumeration_ap(dets: &[ScoredTriplet], gts: &[GtTriplet]) -> f64 {
    let mut thresholds: Vec<f64> = dets.iter().map(|d| d.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut order: Vec<&ScoredTriplet> = dets.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut taken = vec![false; gts.len()];
    let mut hit = Vec::new();
    for d in &order {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(g, t)| !taken[*g] && t.image_id == d.image_id && t.category == d.category)
            .map(|(g, t)| (g, iou(d.human_box, t.human_box).min(iou(d.object_box, t.object_box))))
            .filter(|&(_, o)| o > MATCH_IOU)
            .fold(None::<(usize, f64)>, |acc, (g, o)| match acc {
                Some((_, b)) if b >= o => acc,
                _ => Some((g, o)),
            });
        if let Some((g, _)) = best {
            taken[g] = true;
        }
        hit.push(best.is_some());
    }
    let mut curve = Vec::new();
    for &t in &thresholds {
        let kept = order.iter().take_while(|d| d.score >= t).count();
        let tp = hit[..kept].iter().filter(|&&h| h).count() as f64;
        curve.push((tp / gts.len() as f64, tp / kept as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..curve.len() {
        let envelope = curve[k..].iter().map(|p| p.1).fold(0.0, f64::max);
        ap += (curve[k].0 - prev_recall) * envelope;
        prev_recall = curve[k].0;
    }
    ap
}

fn evaluator_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let mut gts = Vec::new();
        for img in 0..rng.random_range(1..4u64) {
            for _ in 0..rng.random_range(1..4) {
                gts.push(GtTriplet {
                    image_id: img,
                    human_box: rand_box(&mut rng),
                    object_box: rand_box(&mut rng),
                    category: 0,
                });
            }
        }
        let mut dets = Vec::new();
        for _ in 0..rng.random_range(0..15) {
            let g = gts[rng.random_range(0..gts.len())].clone();
            let s = rng.random_range(0.0..0.15);
            let j = |b: [f64; 4], rng: &mut ChaCha8Rng| {
                [b[0] + rng.random_range(-s..s), b[1] + rng.random_range(-s..s), b[2], b[3]]
            };
            dets.push(ScoredTriplet {
                image_id: g.image_id,
                human_box: j(g.human_box, &mut rng),
                object_box: j(g.object_box, &mut rng),
                category: 0,
                score: rng.random(),
            });
        }
        let ap = average_precision(&dets, &gts).unwrap();
        worst = worst.max((ap - pr_enumeration_ap(&dets, &gts)).abs());
    }

    let d = build_dataset(&DatasetSpec::default()).unwrap();
    let gts: Vec<GtTriplet> = d.test.iter().flat_map(|s| gt_triplets(s, &d.table)).collect();
    let injected: Vec<ScoredTriplet> = gts
        .iter()
        .map(|g| ScoredTriplet {
            image_id: g.image_id,
            human_box: g.human_box,
            object_box: g.object_box,
            category: g.category,
            score: 1.0,
        })
        .collect();
    let report = evaluate_triplets(&injected, &gts, &d.census, d.table.num_categories(), d.test.len());

    let g: f64 = giou_corners(&Corners::new(0.0, 0.0, 1.0, 1.0), &Corners::new(1.0, 1.0, 2.0, 2.0)).unwrap();
    let i: f64 = iou_corners(&Corners::new(0.0, 0.0, 2.0, 2.0), &Corners::new(1.0, 1.0, 3.0, 3.0));
    let hand = (g + 0.5).abs() < 1e-12 && (i - 1.0 / 7.0).abs() < 1e-12;
    outcome(
        worst < 1e-12 && report.map_full == 1.0 && hand,
        format!(
            "50 AP cases max |delta| {worst:.1e}; injected mAP {}; GIoU {g}, IoU {i}",
            report.map_full
        ),
    )
}

fn loss_identities_and_rho_one(ablation_dir: &Path, cfg: &ExperimentConfig) -> Outcome {
    let mut rows = 0;
    let mut worst = 0.0f64;
    let weights = &cfg.weights;
    for method in compohoi::experiment::method_grid(&cfg.rho_grid) {
        for seed in &cfg.seeds {
            let dir = ablation_dir.join("runs").join(method.dir_name()).join(format!("seed-{seed}"));
            let (log, record) = match (read_loss_log(&dir.join("loss_log.csv")), RunRecord::load(&dir.join("run.json"))) {
                (Ok(l), Ok(r)) => (l, r),
                _ => return outcome(false, format!("missing loss log or record in {}", dir.display())),
            };
            for s in &log {
                worst = worst.max((s.original - total_loss(&s.parts, weights)).abs());
                worst = worst.max((s.batch - batch_loss(s.original, s.recomposed, record.rho)).abs());
                rows += 1;
            }
        }
    }

    let d = build_dataset(&DatasetSpec {
        train_images: 40,
        test_images: 40,
        min_test_per_category: 1,
        ..DatasetSpec::default()
    })
    .unwrap();
    let small = |mode, rho| ExperimentConfig {
        mode,
        rho,
        schedule: Schedule::scaled(3),
        ..cfg.clone()
    };
    let trained = |c: &ExperimentConfig| {
        let m = c.model_config(&d).unwrap();
        let images = compohoi::experiment::prepare_images(&d, &m).unwrap();
        train(&m, &images, &d.table, &TrainOptions::from_config(c), 4, None).unwrap()
    };
    let a = trained(&small(Mode::Compo, Some(1.0)));
    let b = trained(&small(Mode::BaselineStar, None));
    let bitwise = a.steps.len() == b.steps.len()
        && a
            .steps
            .iter()
            .zip(&b.steps)
            .all(|(x, y)| x.batch.to_bits() == y.batch.to_bits() && x.parts == y.parts)
        && a.model.store().checksum("") == b.model.store().checksum("");
    outcome(
        worst <= 1e-12 && rows > 0 && bitwise,
        format!(
            "{rows} logged steps, max identity residual {worst:.1e}; compo rho=1 vs baseline_star bitwise {bitwise} over {} steps",
            a.steps.len()
        ),
    )
}

fn rows_for(rows: &[compohoi::experiment::AblationRow], m: Method) -> Option<&compohoi::experiment::AblationRow> {
    rows.iter().find(|r| r.method == m)
}

fn trend(rows: &[compohoi::experiment::AblationRow], seeds: usize) -> Outcome {
    let base = match rows_for(rows, Method { mode: Mode::Baseline, rho: None }) {
        Some(r) if r.failed.is_empty() && r.seeds.len() == seeds => r,
        _ => return outcome(false, "baseline row incomplete"),
    };
    let best = rows
        .iter()
        .filter(|r| r.method.mode == Mode::Compo && r.failed.is_empty() && r.seeds.len() == seeds)
        .max_by(|a, b| a.rare.unwrap().mean.total_cmp(&b.rare.unwrap().mean));
    let Some(best) = best else {
        return outcome(false, "no complete compo row");
    };
    let (br, bf) = (base.rare.unwrap().mean, base.full.unwrap().mean);
    let (cr, cf) = (best.rare.unwrap().mean, best.full.unwrap().mean);
    outcome(
        cr > br && cf >= bf - 0.02,
        format!(
            "{seeds} seeds; baseline rare {br:.4} full {bf:.4}; {} rare {cr:.4} full {cf:.4}",
            best.method.label()
        ),
    )
}

fn ablation_structure(rows: &[compohoi::experiment::AblationRow], table: &str) -> Outcome {
    let complete = rows.iter().all(|r| r.failed.is_empty() && r.full.is_some() && r.rare.is_some() && r.nonrare.is_some());
    let rhos: Vec<f64> = rows.iter().filter_map(|r| r.method.rho).collect();
    let body = table.lines().filter(|l| l.starts_with("| ")).count();
    outcome(
        rows.len() == 5 && complete && rhos == [0.5, 0.75, 0.9] && body == 6 && table.contains('±'),
        format!("{} rows, all complete {complete}, rho {rhos:?}", rows.len()),
    )
}

fn determinism(cfg: &ExperimentConfig, ablation_dir: &Path, scratch: &Path) -> Outcome {
    let d = build_dataset(&DatasetSpec::default()).unwrap();
    let method = Method {
        mode: Mode::Compo,
        rho: Some(0.75),
    };
    let again = scratch.join("again");
    let c = ExperimentConfig {
        mode: method.mode,
        rho: method.rho,
        ..cfg.clone()
    };
    if let Err(e) = run(&c, &d, 0, Some(&again)) {
        return outcome(false, format!("rerun failed: {e}"));
    }
    let first = ablation_dir.join("runs").join(method.dir_name()).join("seed-0");
    let same = |f: &str| fs::read(first.join(f)).ok().is_some_and(|a| fs::read(again.join(f)).ok() == Some(a));
    let files = ["run.json", "eval.csv", "predictions.jsonl", "checkpoint.txt", "loss_log.csv"];
    let differing: Vec<&str> = files.iter().copied().filter(|f| !same(f)).collect();
    outcome(
        differing.is_empty(),
        format!("{} rerun against the ablation run: differing files {differing:?}", method.label()),
    )
}

fn main() {
    let mut all = true;
    all &= timed("gradient correctness", Some(Duration::from_secs(60)), gradient_correctness);
    all &= timed("hungarian optimality", Some(Duration::from_secs(10)), hungarian_optimality);
    all &= timed("re-composition algebra", Some(Duration::from_secs(30)), recomposition_algebra);
    all &= timed("evaluator fidelity", None, evaluator_fidelity);

    let cfg = ExperimentConfig::default();
    let scratch = tempfile::tempdir().unwrap();
    let dir = scratch.path().join("ablation");
    let start = Instant::now();
    let dataset = build_dataset(&DatasetSpec::default()).unwrap();
    let rows = ablate(&cfg, &dataset, Some(&dir));
    let took = start.elapsed();
    match rows {
        Ok(rows) => {
            let table = ablation_table(&rows);
            println!("{table}");
            all &= timed("loss identities", None, || loss_identities_and_rho_one(&dir, &cfg));
            all &= timed("trend", None, || {
                let mut o = trend(&rows, cfg.seeds.len());
                o.pass &= took <= Duration::from_secs(2 * 3600);
                o.detail = format!("{}; grid took {:.0}s", o.detail, took.as_secs_f64());
                o
            });
            all &= timed("rho sensitivity table", None, || ablation_structure(&rows, &table));
            all &= timed("determinism", None, || determinism(&cfg, &dir, scratch.path()));
        }
        Err(e) => {
            for name in ["loss identities", "trend", "rho sensitivity table", "determinism"] {
                println!("FAIL {name}: ablation failed: {e}");
            }
            all = false;
        }
    }
    if !all {
        std::process::exit(1);
    }
}
