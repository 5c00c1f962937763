//! Training loss terms, their weighted sum and the original/re-composed mix.

use std::fs::{File, OpenOptions};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matching::{Assignment, GroundTruthSet};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights<T> {
    pub box_l1: T,
    pub giou: T,
    pub object: T,
    pub action: T,
    /// Share of the original-sample loss in the batch loss.
    pub rho: T,
}

impl<T: Real> Default for LossWeights<T> {
    fn default() -> Self {
        Self {
            box_l1: T::lit(2.5),
            giou: T::one(),
            object: T::one(),
            action: T::one(),
            rho: T::lit(0.75),
        }
    }
}

impl<T: Real> LossWeights<T> {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("box_l1", self.box_l1),
            ("giou", self.giou),
            ("object", self.object),
            ("action", self.action),
        ] {
            if !(v >= T::zero() && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be non-negative")));
            }
        }
        if !(self.rho >= T::zero() && self.rho <= T::one()) {
            return Err(Error::Config(format!("rho = {} outside [0, 1]", self.rho)));
        }
        Ok(())
    }
}

/// Values of the four loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts<T> {
    pub box_l1: T,
    pub giou: T,
    pub object: T,
    pub action: T,
}

/// The four terms as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub box_l1: Var,
    pub giou: Var,
    pub object: Var,
    pub action: Var,
}

impl LossVars {
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> LossParts<T> {
        LossParts {
            box_l1: tape.scalar(self.box_l1),
            giou: tape.scalar(self.giou),
            object: tape.scalar(self.object),
            action: tape.scalar(self.action),
        }
    }

    /// Element-wise mean of several term sets.
    pub fn mean<T: Real>(tape: &mut Tape<T>, sets: &[LossVars]) -> Result<LossVars> {
        if sets.is_empty() {
            return Err(Error::Domain("mean of zero loss sets".into()));
        }
        let k = T::one() / T::from_usize(sets.len()).unwrap();
        let mut fold = |pick: fn(&LossVars) -> Var| -> Result<Var> {
            let mut acc = pick(&sets[0]);
            for s in &sets[1..] {
                acc = tape.add(acc, pick(s))?;
            }
            Ok(if sets.len() == 1 { acc } else { tape.scale(acc, k) })
        };
        Ok(LossVars {
            box_l1: fold(|s| s.box_l1)?,
            giou: fold(|s| s.giou)?,
            object: fold(|s| s.object)?,
            action: fold(|s| s.action)?,
        })
    }
}

/// One logged training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport<T> {
    pub parts: LossParts<T>,
    /// Weighted sum of `parts`.
    pub weighted: T,
    pub original: T,
    pub recomposed: T,
    pub batch: T,
    /// Mixing weight actually applied; 1 when the batch had no re-composed rows.
    pub rho: T,
}

/// `λ_b·L_b + λ_u·L_u + λ_o·L_o + λ_a·L_a`, evaluated left to right.
pub fn total_loss<T: Real>(parts: &LossParts<T>, weights: &LossWeights<T>) -> T {
    weights.box_l1 * parts.box_l1 + weights.giou * parts.giou + weights.object * parts.object + weights.action * parts.action
}

/// `ρ·L_orig + (1 − ρ)·L_compo`.
pub fn batch_loss<T: Real>(original: T, recomposed: T, rho: T) -> T {
    rho * original + (T::one() - rho) * recomposed
}

/// Tape form of [`total_loss`]; produces the same floating-point result.
pub fn weighted_total<T: Real>(tape: &mut Tape<T>, parts: &LossVars, weights: &LossWeights<T>) -> Result<Var> {
    let b = tape.scale(parts.box_l1, weights.box_l1);
    let u = tape.scale(parts.giou, weights.giou);
    let o = tape.scale(parts.object, weights.object);
    let a = tape.scale(parts.action, weights.action);
    let s = tape.add(b, u)?;
    let s = tape.add(s, o)?;
    tape.add(s, a)
}

/// Tape form of [`batch_loss`].
pub fn mixed_batch_loss<T: Real>(tape: &mut Tape<T>, original: Var, recomposed: Var, rho: T) -> Result<Var> {
    let a = tape.scale(original, rho);
    let b = tape.scale(recomposed, T::one() - rho);
    tape.add(a, b)
}

/// `(L_b, L_u)` over matched pairs: mean per pair of the summed human and
/// object L1 distances, and of the summed `1 − GIoU` terms. Zero when there
/// are no pairs.
pub fn box_losses<T: Real>(
    tape: &mut Tape<T>,
    human_pred: Var,
    object_pred: Var,
    human_target: &Tensor<T>,
    object_target: &Tensor<T>,
) -> Result<(Var, Var)> {
    let n = tape.shape(human_pred).first().copied().unwrap_or(0);
    if tape.shape(object_pred) != tape.shape(human_pred) {
        return Err(Error::shape("box_losses", tape.shape(human_pred), tape.shape(object_pred)));
    }
    let l1h = tape.l1_sum(human_pred, human_target)?;
    let l1o = tape.l1_sum(object_pred, object_target)?;
    let gh = tape.giou_loss_sum(human_pred, human_target)?;
    let go = tape.giou_loss_sum(object_pred, object_target)?;
    let l1 = tape.add(l1h, l1o)?;
    let g = tape.add(gh, go)?;
    if n == 0 {
        return Ok((l1, g));
    }
    let k = T::one() / T::from_usize(n).unwrap();
    Ok((tape.scale(l1, k), tape.scale(g, k)))
}

/// Softmax cross-entropy over every query: matched queries target their
/// ground-truth class, the rest the trailing "no object" class.
pub fn object_loss<T: Real>(
    tape: &mut Tape<T>,
    object_logits: Var,
    assignment: &Assignment,
    gts: &GroundTruthSet<T>,
) -> Result<Var> {
    let (rows, classes) = (tape.shape(object_logits)[0], tape.shape(object_logits)[1]);
    if classes != gts.num_object_classes + 1 {
        return Err(Error::shape("object_loss", tape.shape(object_logits), &[rows, gts.num_object_classes + 1]));
    }
    let mut targets = vec![gts.num_object_classes; rows];
    for &(g, q) in &assignment.pairs {
        targets[q] = gts.instances[g].object_class;
    }
    tape.softmax_cross_entropy(object_logits, &targets)
}

/// Mean per-element sigmoid cross-entropy of multi-hot targets.
pub fn action_loss<T: Real>(tape: &mut Tape<T>, action_logits: Var, targets: &Tensor<T>) -> Result<Var> {
    if let Some(bad) = targets.data().iter().find(|&&t| t != T::zero() && t != T::one()) {
        return Err(Error::Domain(format!("action target {bad} is not 0 or 1")));
    }
    tape.bce_with_logits(action_logits, targets)
}

/// The four terms for one image's original samples.
pub fn original_losses<T: Real>(
    tape: &mut Tape<T>,
    preds: &crate::model::PredictionVars,
    assignment: &Assignment,
    gts: &GroundTruthSet<T>,
) -> Result<LossVars> {
    let queries = assignment.queries();
    let hb = tape.gather_rows(preds.human_boxes, &queries)?;
    let ob = tape.gather_rows(preds.object_boxes, &queries)?;
    let (box_l1, giou) = box_losses(tape, hb, ob, &gts.human_boxes(), &gts.object_boxes())?;
    let object = object_loss(tape, preds.object_logits, assignment, gts)?;
    let al = tape.gather_rows(preds.action_logits, &queries)?;
    let action = action_loss(tape, al, &gts.action_targets())?;
    Ok(LossVars {
        box_l1,
        giou,
        object,
        action,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct LossLogRow {
    step: u64,
    #[serde(rename = "L_b")]
    l_b: f64,
    #[serde(rename = "L_u")]
    l_u: f64,
    #[serde(rename = "L_o")]
    l_o: f64,
    #[serde(rename = "L_a")]
    l_a: f64,
    #[serde(rename = "L_orig")]
    l_orig: f64,
    #[serde(rename = "L_compo")]
    l_compo: f64,
    #[serde(rename = "L_batch")]
    l_batch: f64,
}

/// One logged row read back from a loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoggedStep {
    pub step: u64,
    pub parts: LossParts<f64>,
    pub original: f64,
    pub recomposed: f64,
    pub batch: f64,
}

/// Append-only per-step loss CSV.
pub struct LossLog {
    writer: csv::Writer<File>,
}

impl LossLog {
    /// Opens `path` for appending; a header is written when the file is new
    /// or empty.
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let fresh = file.metadata()?.len() == 0;
        let writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self { writer })
    }

    pub fn append<T: Real>(&mut self, step: u64, report: &LossReport<T>) -> Result<()> {
        let p = &report.parts;
        self.writer.serialize(LossLogRow {
            step,
            l_b: p.box_l1.to_f64_lossy(),
            l_u: p.giou.to_f64_lossy(),
            l_o: p.object.to_f64_lossy(),
            l_a: p.action.to_f64_lossy(),
            l_orig: report.original.to_f64_lossy(),
            l_compo: report.recomposed.to_f64_lossy(),
            l_batch: report.batch.to_f64_lossy(),
        })?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LoggedStep>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let r: LossLogRow = row?;
        out.push(LoggedStep {
            step: r.step,
            parts: LossParts {
                box_l1: r.l_b,
                giou: r.l_u,
                object: r.l_o,
                action: r.l_a,
            },
            original: r.l_orig,
            recomposed: r.l_compo,
            batch: r.l_batch,
        });
    }
    Ok(out)
}

/// Writes rows of `(step, report)` to a fresh CSV.
pub fn write_loss_log<T: Real>(path: &Path, rows: &[LossReport<T>]) -> Result<()> {
    if path.exists() {
        std::fs::remove_file(path)?;
    }
    let mut log = LossLog::open(path)?;
    for (i, r) in rows.iter().enumerate() {
        log.append(i as u64, r)?;
    }
    log.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check, DEFAULT_STEP};
    use crate::matching::GtInstance;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    fn gts(n: usize) -> GroundTruthSet<f64> {
        let inst = |k: usize| GtInstance {
            human_box: [0.3, 0.4, 0.2, 0.3],
            object_box: [0.6, 0.5, 0.1, 0.2],
            object_class: k % 3,
            actions: vec![true, k % 2 == 1],
        };
        GroundTruthSet::new(3, 2, (0..n).map(inst).collect()).unwrap()
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::<f64>::default();
        assert_eq!((w.box_l1, w.giou, w.object, w.action), (2.5, 1.0, 1.0, 1.0));
        let ones = LossParts {
            box_l1: 1.0,
            giou: 1.0,
            object: 1.0,
            action: 1.0,
        };
        assert_eq!(total_loss(&ones, &w), 5.5);
        assert_eq!(total_loss(&LossParts::default(), &w), 0.0);
        assert!(LossWeights { rho: 1.5, ..w }.validate().is_err());
        assert!(LossWeights { giou: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn batch_mix_values() {
        assert_eq!(batch_loss(2.0, 4.0, 0.75), 2.5);
        assert_eq!(batch_loss(2.0, 4.0, 1.0), 2.0);
        assert_eq!(batch_loss(2.0, 4.0, 0.5), 3.0);
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::scalar(1.3));
        let b = tape.constant(Tensor::scalar(0.7));
        let m = mixed_batch_loss(&mut tape, a, b, 0.9).unwrap();
        assert_eq!(tape.scalar(m), batch_loss(1.3, 0.7, 0.9));
    }

    #[test]
    fn box_loss_hand_values() {
        let mut tape = Tape::<f64>::new();
        let target_h = Tensor::new(vec![1, 4], vec![0.5, 0.5, 0.2, 0.2]).unwrap();
        let target_o = Tensor::new(vec![1, 4], vec![0.3, 0.3, 0.2, 0.4]).unwrap();
        let ph = tape.constant(Tensor::new(vec![1, 4], vec![0.6, 0.5, 0.2, 0.2]).unwrap());
        let po = tape.constant(target_o.clone());
        let (b, u) = box_losses(&mut tape, ph, po, &target_h, &target_o).unwrap();
        assert!((tape.scalar(b) - 0.1).abs() < 1e-15);
        // Human boxes [0.4,0.6]x[0.4,0.6] vs [0.5,0.7]x[0.4,0.6]: IoU 1/3, enclosing = union.
        assert!((tape.scalar(u) - 2.0 / 3.0).abs() < 1e-12);

        let (b, u) = box_losses(&mut tape, po, po, &target_o, &target_o).unwrap();
        assert_eq!((tape.scalar(b), tape.scalar(u)), (0.0, 0.0));
    }

    #[test]
    fn empty_matches_give_zero() {
        let mut tape = Tape::<f64>::new();
        let e = tape.constant(Tensor::zeros(&[0, 4]));
        let (b, u) = box_losses(&mut tape, e, e, &Tensor::zeros(&[0, 4]), &Tensor::zeros(&[0, 4])).unwrap();
        assert_eq!((tape.scalar(b), tape.scalar(u)), (0.0, 0.0));
        let al = tape.constant(Tensor::zeros(&[0, 5]));
        let a = action_loss(&mut tape, al, &Tensor::zeros(&[0, 5])).unwrap();
        assert_eq!(tape.scalar(a), 0.0);
    }

    #[test]
    fn object_loss_uniform_and_confident() {
        let mut tape = Tape::<f64>::new();
        let g = gts(2);
        let a = Assignment::new(vec![(0, 3), (1, 1)], 2, 5).unwrap();
        let uniform = tape.constant(Tensor::zeros(&[5, 4]));
        let l = object_loss(&mut tape, uniform, &a, &g).unwrap();
        assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-12);

        let mut logits = Tensor::filled(&[5, 4], -50.0);
        for q in 0..5 {
            let t = match q {
                3 => 0,
                1 => 1,
                _ => 3,
            };
            logits.data_mut()[q * 4 + t] = 50.0;
        }
        let v = tape.constant(logits);
        let l = object_loss(&mut tape, v, &a, &g).unwrap();
        assert!(tape.scalar(l) < 1e-40);
    }

    #[test]
    fn action_loss_values() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let l = action_loss(&mut tape, z, &Tensor::zeros(&[2, 3])).unwrap();
        assert!((tape.scalar(l) - 2f64.ln()).abs() < 1e-15);
        let sure = tape.constant(Tensor::new(vec![1, 2], vec![800.0, -800.0]).unwrap());
        let l = action_loss(&mut tape, sure, &Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let bad = Tensor::new(vec![2, 3], vec![0.0, 0.5, 1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(action_loss(&mut tape, z, &bad), Err(Error::Domain(_))));
    }

    #[test]
    fn loss_terms_pass_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = gts(3);
        let a = Assignment::new(vec![(0, 4), (1, 0), (2, 2)], 3, 6).unwrap();
        let th = g.human_boxes();
        let to = g.object_boxes();
        let boxes = [rand_tensor(&mut rng, &[3, 4], 0.15, 0.6), rand_tensor(&mut rng, &[3, 4], 0.15, 0.6)];
        let r = check(&boxes, DEFAULT_STEP, |t, v| {
            let (b, u) = box_losses(t, v[0], v[1], &th, &to)?;
            let b = t.scale(b, 0.7);
            t.add(b, u)
        })
        .unwrap();
        assert!(r.max_rel_error() < 1e-5, "{r:?}");

        let r = check(&[rand_tensor(&mut rng, &[6, 4], -2.0, 2.0)], DEFAULT_STEP, |t, v| object_loss(t, v[0], &a, &g)).unwrap();
        assert!(r.max_rel_error() < 1e-5, "{r:?}");

        let targets = g.action_targets();
        let r = check(&[rand_tensor(&mut rng, &[3, 2], -2.0, 2.0)], DEFAULT_STEP, |t, v| action_loss(t, v[0], &targets)).unwrap();
        assert!(r.max_rel_error() < 1e-5, "{r:?}");
    }

    #[test]
    fn doubling_action_weight_doubles_head_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
        let targets = gts(3).action_targets();
        let grad_for = |lambda: f64| {
            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(x.clone());
            let wv = tape.leaf(w.clone(), true);
            let logits = tape.matmul(xv, wv).unwrap();
            let action = action_loss(&mut tape, logits, &targets).unwrap();
            let zero = tape.constant(Tensor::scalar(0.3));
            let parts = LossVars {
                box_l1: zero,
                giou: zero,
                object: zero,
                action,
            };
            let weights = LossWeights {
                action: lambda,
                ..LossWeights::default()
            };
            let l = weighted_total(&mut tape, &parts, &weights).unwrap();
            tape.backward(l).unwrap();
            tape.grad(wv).unwrap().to_vec()
        };
        let (g1, g2) = (grad_for(1.0), grad_for(2.0));
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn tape_totals_equal_closed_form_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let mut tape = Tape::<f64>::new();
            let vals: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..3.0)).collect();
            let v: Vec<Var> = vals.iter().map(|&x| tape.constant(Tensor::scalar(x))).collect();
            let parts = LossVars {
                box_l1: v[0],
                giou: v[1],
                object: v[2],
                action: v[3],
            };
            let w = LossWeights::default();
            let l = weighted_total(&mut tape, &parts, &w).unwrap();
            assert_eq!(tape.scalar(l), total_loss(&parts.values(&tape), &w));
        }
    }

    #[test]
    fn loss_log_roundtrip_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let report = LossReport {
            parts: LossParts {
                box_l1: 0.1,
                giou: 0.2,
                object: 1.0 / 3.0,
                action: 0.4,
            },
            weighted: 1.183,
            original: 1.183,
            recomposed: 0.9,
            batch: 1.11225,
            rho: 0.75,
        };
        write_loss_log(&path, &[report]).unwrap();
        let mut log = LossLog::open(&path).unwrap();
        log.append(1, &report).unwrap();
        log.flush().unwrap();
        let rows = read_loss_log(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].step, 1);
        assert_eq!(rows[0].parts, report.parts);
        assert_eq!(rows[0].batch, report.batch);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,L_b,L_u,L_o,L_a,L_orig,L_compo,L_batch\n"));
    }

    proptest! {
        #[test]
        fn giou_term_is_bounded(
            cx in 0.1f64..0.9, cy in 0.1f64..0.9, w in 0.01f64..0.5, h in 0.01f64..0.5,
            dx in -0.5f64..0.5, dy in -0.5f64..0.5, w2 in 0.01f64..0.5, h2 in 0.01f64..0.5,
        ) {
            let mut tape = Tape::<f64>::new();
            let a = Tensor::new(vec![1, 4], vec![cx, cy, w, h]).unwrap();
            let b = Tensor::new(vec![1, 4], vec![cx + dx, cy + dy, w2, h2]).unwrap();
            let pa = tape.constant(a.clone());
            let pb = tape.constant(b.clone());
            let (_, u) = box_losses(&mut tape, pa, pb, &b, &a).unwrap();
            let u = tape.scalar(u);
            prop_assert!((0.0..=4.0).contains(&u));
        }

        #[test]
        fn object_loss_is_permutation_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = rand_tensor(&mut rng, &[5, 4], -3.0, 3.0);
            let g = gts(2);
            let a = Assignment::new(vec![(0, 1), (1, 4)], 2, 5).unwrap();
            let perm = [3usize, 0, 4, 1, 2];
            // new row r holds old query perm[r]
            let inverse = |q: usize| perm.iter().position(|&p| p == q).unwrap();
            let pa = Assignment::new(a.pairs.iter().map(|&(g, q)| (g, inverse(q))).collect(), 2, 5).unwrap();
            let mut tape = Tape::<f64>::new();
            let v = tape.constant(logits.clone());
            let l1 = object_loss(&mut tape, v, &a, &g).unwrap();
            let vp = tape.constant(logits.gather_rows(&perm));
            let l2 = object_loss(&mut tape, vp, &pa, &g).unwrap();
            prop_assert!((tape.scalar(l1) - tape.scalar(l2)).abs() < 1e-12);
        }

        #[test]
        fn rho_above_half_favours_originals(rho in 0.5001f64..1.0) {
            let d_orig = batch_loss(1.0, 0.0, rho) - batch_loss(0.0, 0.0, rho);
            let d_compo = batch_loss(0.0, 1.0, rho) - batch_loss(0.0, 0.0, rho);
            prop_assert!(d_orig > d_compo);
        }
    }
}
