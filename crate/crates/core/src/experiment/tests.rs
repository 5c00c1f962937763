use super::*;
use crate::losses::batch_loss;
use crate::model::FeatureGrid;

fn tiny_dataset() -> Dataset {
    build_dataset(&DatasetSpec {
        train_images: 12,
        test_images: 20,
        min_test_per_category: 1,
        grid: FeatureGrid {
            height: 6,
            width: 6,
            channels: 24,
        },
        ..DatasetSpec::default()
    })
    .unwrap()
}

fn tiny_config(mode: Mode, rho: Option<f64>) -> ExperimentConfig {
    ExperimentConfig {
        mode,
        rho,
        schedule: Schedule {
            phase1_epochs: 2,
            phase2_epochs: 1,
            lr_drop_epoch: 1,
            ..Schedule::default()
        },
        model: Some(ModelConfig {
            num_queries: 4,
            query_dim: 24,
            encoder_layers: 1,
            decoder_layers: 1,
            attention_heads: 2,
            num_object_classes: 6,
            num_action_classes: 5,
            feature_grid: FeatureGrid {
                height: 6,
                width: 6,
                channels: 24,
            },
            action_head: ActionHeadInput::Concat,
        }),
        ..ExperimentConfig::default()
    }
}

fn train_tiny(cfg: &ExperimentConfig, d: &Dataset, seed: u64) -> Trained {
    let m = cfg.model_config(d).unwrap();
    let images = prepare_images(d, &m).unwrap();
    train(&m, &images, &d.table, &TrainOptions::from_config(cfg), seed, None).unwrap()
}

#[test]
fn config_toml_roundtrip_and_validation() {
    let cfg = tiny_config(Mode::Compo, Some(0.5));
    let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    assert!(ExperimentConfig::from_toml("unknown = 1").is_err());
    assert!(ExperimentConfig::from_toml("rho = 1.5").is_err());
    assert!(ExperimentConfig::from_toml("rho_grid = [0.5, -0.1]").is_err());
    assert!(ExperimentConfig::from_toml("[schedule]\nlearning_rate = 0.0").is_err());
    let cfg = ExperimentConfig::from_toml("mode = \"baseline_star\"\nrho = 0.5").unwrap();
    assert_eq!(cfg.effective_rho(), 1.0);
}

#[test]
fn modes_parse_and_fix_the_action_head() {
    assert_eq!("baseline".parse::<Mode>().unwrap(), Mode::Baseline);
    assert_eq!("baseline_star".parse::<Mode>().unwrap(), Mode::BaselineStar);
    assert_eq!("compo".parse::<Mode>().unwrap(), Mode::Compo);
    assert!("other".parse::<Mode>().is_err());
    let d = tiny_dataset();
    assert_eq!(
        tiny_config(Mode::Baseline, None).model_config(&d).unwrap().action_head,
        ActionHeadInput::Interaction
    );
    assert_eq!(
        tiny_config(Mode::Compo, None).model_config(&d).unwrap().action_head,
        ActionHeadInput::Concat
    );
    let mut wrong = tiny_config(Mode::Compo, None);
    wrong.model.as_mut().unwrap().num_object_classes = 5;
    assert!(wrong.model_config(&d).is_err());
}

#[test]
fn schedule_scaling_keeps_ratios() {
    let s = Schedule::scaled(90);
    assert_eq!((s.phase1_epochs, s.phase2_epochs, s.lr_drop_epoch), (90, 10, 60));
    let s = Schedule::scaled(30);
    assert_eq!((s.phase1_epochs, s.phase2_epochs, s.lr_drop_epoch), (30, 4, 20));
    let d = Schedule::default();
    assert_eq!((d.phase1_epochs, d.phase2_epochs, d.lr_drop_epoch), (30, 4, 20));
    assert_eq!(d.phase1_lr(19), 2e-3);
    assert_eq!(d.phase1_lr(20), 2e-3 * 0.1);
    assert_eq!(d.phase2_lr(), 2e-3 * 0.1);
}

#[test]
fn step_report_satisfies_loss_identities() {
    let d = tiny_dataset();
    for (mode, rho) in [(Mode::Compo, Some(0.5)), (Mode::BaselineStar, None), (Mode::Baseline, None)] {
        let cfg = tiny_config(mode, rho);
        let m = cfg.model_config(&d).unwrap();
        let images = prepare_images(&d, &m).unwrap();
        let model = HoiModel::new(m, &mut stream(0, MODEL_STREAM, 0)).unwrap();
        let opts = TrainOptions::from_config(&cfg);
        for pair in images.chunks_exact(2) {
            let mut tape = Tape::new();
            let r = step_loss(&model, &mut tape, &[&pair[0], &pair[1]], &d.table, &opts).unwrap();
            assert_eq!(r.weighted, r.original);
            assert!((r.original - total_loss(&r.parts, &opts.weights)).abs() < 1e-12);
            assert!((r.batch - batch_loss(r.original, r.recomposed, r.rho)).abs() < 1e-12);
            if mode == Mode::Compo {
                assert_eq!(r.rho, 0.5);
                assert!(r.recomposed > 0.0);
            } else {
                assert_eq!((r.rho, r.recomposed, r.batch), (1.0, 0.0, r.original));
            }
        }
    }
}

#[test]
fn compo_at_rho_one_reproduces_baseline_star() {
    let d = tiny_dataset();
    let a = train_tiny(&tiny_config(Mode::Compo, Some(1.0)), &d, 3);
    let b = train_tiny(&tiny_config(Mode::BaselineStar, None), &d, 3);
    assert_eq!(a.steps.len(), b.steps.len());
    for (x, y) in a.steps.iter().zip(&b.steps) {
        assert_eq!(x.batch.to_bits(), y.batch.to_bits());
        assert_eq!(x.parts, y.parts);
        assert!(x.recomposed > 0.0);
    }
    assert_eq!(a.model.store().checksum(""), b.model.store().checksum(""));
}

#[test]
fn fine_tuning_freezes_the_encoder_only() {
    let d = tiny_dataset();
    let t = train_tiny(&tiny_config(Mode::Compo, Some(0.5)), &d, 1);
    let (start, end) = t.frozen_checksums.clone().unwrap();
    assert_eq!(start, end);
    let fresh = HoiModel::<f64>::new(
        tiny_config(Mode::Compo, None).model_config(&d).unwrap(),
        &mut stream(1, MODEL_STREAM, 0),
    )
    .unwrap();
    assert_ne!(fresh.store().checksum(ENCODER_PREFIX), end);
    assert_eq!(t.epochs.iter().filter(|e| e.phase == Phase::FineTune).count(), 1);
    assert_eq!(t.epochs[2].learning_rate, 2e-3 * 0.1);
}

#[test]
fn runs_are_deterministic() {
    let d = tiny_dataset();
    let cfg = tiny_config(Mode::Compo, Some(0.75));
    let a = run(&cfg, &d, 5, None).unwrap();
    let b = run(&cfg, &d, 5, None).unwrap();
    assert_eq!(a.record.to_json().unwrap(), b.record.to_json().unwrap());
    assert_eq!(a.predictions, b.predictions);
    let c = run(&cfg, &d, 6, None).unwrap();
    assert_eq!(a.record.config_hash, c.record.config_hash);
    assert_ne!(a.record.parameter_checksum, c.record.parameter_checksum);
    let other = run(&tiny_config(Mode::Compo, Some(0.5)), &d, 5, None).unwrap();
    assert_ne!(a.record.config_hash, other.record.config_hash);
}

#[test]
fn diverging_training_reports_the_step() {
    let d = tiny_dataset();
    let mut cfg = tiny_config(Mode::BaselineStar, None);
    cfg.schedule.learning_rate = 1e300;
    cfg.schedule.grad_clip = None;
    let m = cfg.model_config(&d).unwrap();
    let images = prepare_images(&d, &m).unwrap();
    let err = train(&m, &images, &d.table, &TrainOptions::from_config(&cfg), 0, None).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
}

#[test]
fn gradient_clipping_bounds_the_norm() {
    let mut store = ParamStore::new();
    let id = store.add("w", crate::tensor::Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()).unwrap();
    store.accumulate_grad(id, &[3.0, 4.0]);
    assert_eq!(clip_grad_norm(&mut store, 10.0), 5.0);
    assert_eq!(store.get(id).grad.as_ref().unwrap().data(), &[3.0, 4.0]);
    assert_eq!(clip_grad_norm(&mut store, 1.0), 5.0);
    let g = store.get(id).grad.as_ref().unwrap().data().to_vec();
    assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
}

#[test]
fn mean_std_uses_sample_deviation() {
    assert_eq!(MeanStd::of(&[]), None);
    assert_eq!(MeanStd::of(&[2.0]), Some(MeanStd { mean: 2.0, std: 0.0 }));
    let m = MeanStd::of(&[1.0, 2.0, 3.0]).unwrap();
    assert_eq!((m.mean, m.std), (2.0, 1.0));
}

#[test]
fn ablation_table_has_one_row_per_method() {
    let grid = method_grid(&[0.5, 0.75, 0.9]);
    assert_eq!(grid.len(), 5);
    let rows: Vec<AblationRow> = grid
        .iter()
        .map(|&m| AblationRow {
            method: m,
            seeds: vec![0, 1, 2],
            failed: vec![],
            full: MeanStd::of(&[0.1, 0.2, 0.3]),
            rare: MeanStd::of(&[0.1, 0.1, 0.1]),
            nonrare: MeanStd::of(&[0.2, 0.2, 0.5]),
        })
        .collect();
    let table = ablation_table(&rows);
    assert_eq!(table.lines().filter(|l| l.starts_with("| ")).count(), 6);
    assert!(table.contains("| compo (rho=0.9) | 20.00 ± 10.00 | 10.00 ± 0.00 | 30.00 ± 17.32 | 3 |"));
    assert!(table.contains(REWEIGHTING_FOOTNOTE));
    let csv = ablation_csv(&rows).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.starts_with("method,mode,rho,seeds,failed,full_mean"));
}

#[test]
fn ablation_rows_recompute_from_stored_records() {
    let d = tiny_dataset();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(Mode::Compo, None);
    cfg.schedule.phase1_epochs = 1;
    cfg.schedule.phase2_epochs = 0;
    cfg.seeds = vec![0, 1];
    cfg.rho_grid = vec![0.5];
    let rows = ablate(&cfg, &d, Some(dir.path())).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.failed.is_empty() && r.seeds == vec![0, 1]));
    let back = collect_ablation(dir.path(), &cfg.rho_grid, &cfg.seeds).unwrap();
    assert_eq!(back, rows);
    assert!(dir.path().join("ablation.md").exists());
    let run_dir = dir.path().join("runs/compo-rho0.5/seed-1");
    for f in ["checkpoint.txt", "model.toml", "run.json", "timing.json", "loss_log.csv", "eval.csv", "predictions.jsonl"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let logged = crate::losses::read_loss_log(&run_dir.join("loss_log.csv")).unwrap();
    assert_eq!(logged.len(), 6);
    let missing = collect_ablation(dir.path(), &cfg.rho_grid, &[0, 1, 2]).unwrap();
    assert_eq!(missing[0].failed.len(), 1);
    assert_eq!(missing[0].seeds, vec![0, 1]);
}
