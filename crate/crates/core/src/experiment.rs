//! Training runs, the method grid and run records.
//!
//! A step draws one pair of training images, matches both, and trains on the
//! original-sample loss. In compositional mode the matched rows of the two
//! images are re-composed across instances and the two objectives are mixed
//! with `rho`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport, ScoredTriplet};
use crate::losses::{
    mixed_batch_loss, original_losses, total_loss, weighted_total, LossLog, LossParts, LossReport,
    LossVars, LossWeights,
};
use crate::matching::{cost_matrix, hungarian, Assignment, GroundTruthSet};
use crate::model::{ActionHeadInput, FeatureMap, ForwardVars, HoiModel, ModelConfig, PredictionSet, ENCODER_PREFIX};
use crate::optim::AdamW;
use crate::param::ParamStore;
use crate::recompose::{recompose_on_tape, recomposed_losses, FeasibilityTable, HoLabel, MatchedImage};
use crate::synth::{build_dataset, rasterize, stream, Dataset, DatasetSpec};

const MODEL_STREAM: u64 = 16;
const SHUFFLE_STREAM: u64 = 17;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Actions from interaction representations only, original samples only.
    Baseline,
    /// Actions from concatenated pair and interaction representations,
    /// original samples only.
    BaselineStar,
    /// As `BaselineStar`, plus re-composed samples mixed in with `rho`.
    Compo,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::BaselineStar => "baseline_star",
            Mode::Compo => "compo",
        }
    }

    pub fn action_head(self) -> ActionHeadInput {
        match self {
            Mode::Baseline => ActionHeadInput::Interaction,
            Mode::BaselineStar | Mode::Compo => ActionHeadInput::Concat,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "baseline_star" | "baseline*" => Ok(Mode::BaselineStar),
            "compo" => Ok(Mode::Compo),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Two-phase schedule. Phase 1 trains everything and drops the learning
/// rate at `lr_drop_epoch`; phase 2 freezes the encoder and fine-tunes the
/// rest at `phase2_lr_factor` times the base rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub learning_rate: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub phase2_lr_factor: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            phase1_epochs: 30,
            phase2_epochs: 4,
            learning_rate: 2e-3,
            lr_drop_epoch: 20,
            lr_drop_factor: 0.1,
            phase2_lr_factor: 0.1,
            weight_decay: 1e-4,
            grad_clip: Some(1.0),
        }
    }
}

impl Schedule {
    /// Phase-1 epochs scaled to `n`, with the drop at two thirds and phase 2
    /// one ninth as long.
    pub fn scaled(n: usize) -> Self {
        Self {
            phase1_epochs: n,
            phase2_epochs: n.div_ceil(9),
            lr_drop_epoch: (2 * n).div_ceil(3),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.learning_rate) || !positive(self.lr_drop_factor) || !positive(self.phase2_lr_factor) {
            return Err(Error::Config("learning rate and its factors must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.grad_clip.is_some_and(|c| !positive(c)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate of a phase-1 epoch.
    pub fn phase1_lr(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.learning_rate * self.lr_drop_factor
        } else {
            self.learning_rate
        }
    }

    pub fn phase2_lr(&self) -> f64 {
        self.learning_rate * self.phase2_lr_factor
    }
}

/// Everything one experiment needs. Relative paths are resolved against the
/// directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Mixing weight of compo runs; baseline modes ignore it.
    pub rho: Option<f64>,
    pub rho_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub schedule: Schedule,
    pub weights: LossWeights<f64>,
    /// Stop gradients at the matched representations before re-composition.
    pub detach_recomposed: bool,
    pub eval: EvalOptions,
    /// Generated in memory when `dataset_file` is unset.
    pub dataset: DatasetSpec,
    pub dataset_file: Option<PathBuf>,
    /// Desk defaults sized to the dataset when unset.
    pub model: Option<ModelConfig>,
    pub model_file: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Compo,
            rho: None,
            rho_grid: vec![0.5, 0.75, 0.9],
            seeds: vec![0, 1, 2],
            schedule: Schedule::default(),
            weights: LossWeights::default(),
            detach_recomposed: false,
            eval: EvalOptions::default(),
            dataset: DatasetSpec::default(),
            dataset_file: None,
            model: None,
            model_file: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset_file, &mut cfg.model_file].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.weights.validate()?;
        for &r in self.rho.iter().chain(&self.rho_grid) {
            check_rho(r)?;
        }
        Ok(())
    }

    /// The mixing weight this run applies: compo runs use `rho` or the
    /// loss-weight default, baseline modes always use 1.
    pub fn effective_rho(&self) -> f64 {
        match self.mode {
            Mode::Compo => self.rho.unwrap_or(self.weights.rho),
            _ => 1.0,
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset_file {
            Some(p) => Dataset::load(p),
            None => build_dataset(&self.dataset),
        }
    }

    /// Model config for `dataset`, with the action head fixed by the mode.
    pub fn model_config(&self, dataset: &Dataset) -> Result<ModelConfig> {
        let mut cfg = match (&self.model_file, &self.model) {
            (Some(p), _) => ModelConfig::from_toml(&fs::read_to_string(p)?)?,
            (None, Some(m)) => m.clone(),
            (None, None) => {
                let mut m = ModelConfig::desk(dataset.table.num_objects(), dataset.table.num_actions());
                m.feature_grid = dataset.spec.grid;
                m
            }
        };
        cfg.action_head = self.mode.action_head();
        if cfg.num_object_classes != dataset.table.num_objects() || cfg.num_action_classes != dataset.table.num_actions() {
            return Err(Error::Config(format!(
                "model is sized for {}x{} classes, dataset has {}x{}",
                cfg.num_object_classes,
                cfg.num_action_classes,
                dataset.table.num_objects(),
                dataset.table.num_actions()
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn check_rho(r: f64) -> Result<()> {
    if (0.0..=1.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::Config(format!("rho must lie in [0, 1], got {r}")))
    }
}

/// A training image with its feature map rasterized once.
#[derive(Clone, Debug)]
pub struct TrainImage {
    pub image_id: u64,
    pub features: FeatureMap<f64>,
    pub gt: GroundTruthSet<f64>,
}

pub fn prepare_images(dataset: &Dataset, config: &ModelConfig) -> Result<Vec<TrainImage>> {
    dataset
        .train
        .iter()
        .map(|s| {
            Ok(TrainImage {
                image_id: s.image_id,
                features: rasterize(s, config.feature_grid, dataset.table.num_objects())?,
                gt: s.gt.clone(),
            })
        })
        .collect()
}

/// Per-run training options derived from an [`ExperimentConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub mode: Mode,
    pub rho: f64,
    pub weights: LossWeights<f64>,
    pub detach_recomposed: bool,
    pub schedule: Schedule,
}

impl TrainOptions {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            mode: cfg.mode,
            rho: cfg.effective_rho(),
            weights: cfg.weights.clone(),
            detach_recomposed: cfg.detach_recomposed,
            schedule: cfg.schedule.clone(),
        }
    }
}

fn matched_image(
    tape: &mut Tape<f64>,
    fwd: &ForwardVars,
    assignment: &Assignment,
    gt: &GroundTruthSet<f64>,
    detach: bool,
) -> Result<MatchedImage<f64>> {
    let q = assignment.queries();
    let (mut ho_rows, mut int_rows) = (fwd.ho_reps.rows, fwd.int_reps.rows);
    if detach {
        ho_rows = tape.detach(ho_rows);
        int_rows = tape.detach(int_rows);
    }
    Ok(MatchedImage {
        ho: tape.gather_rows(ho_rows, &q)?,
        int: tape.gather_rows(int_rows, &q)?,
        human_pred: tape.gather_rows(fwd.preds.human_boxes, &q)?,
        object_pred: tape.gather_rows(fwd.preds.object_boxes, &q)?,
        object_logits: tape.gather_rows(fwd.preds.object_logits, &q)?,
        labels: gt
            .instances
            .iter()
            .map(|g| HoLabel {
                human_box: g.human_box,
                object_box: g.object_box,
                object_class: g.object_class,
            })
            .collect(),
        actions: gt.instances.iter().map(|g| g.actions.clone()).collect(),
    })
}

/// Forward, match and loss for one image pair. Leaves the gradients of the
/// batch loss on `tape` and returns the step's report. Non-finite predictions are a
/// `NonFinite` error with step 0; `train` fills in the step.
pub fn step_loss(
    model: &HoiModel<f64>,
    tape: &mut Tape<f64>,
    images: &[&TrainImage],
    table: &FeasibilityTable,
    opts: &TrainOptions,
) -> Result<LossReport<f64>> {
    let (report, batch) = step_objective(model, tape, images, table, opts)?;
    tape.backward(batch)?;
    Ok(report)
}

/// [`step_loss`] without the backward pass: returns the report and the batch
/// loss node.
pub fn step_objective(
    model: &HoiModel<f64>,
    tape: &mut Tape<f64>,
    images: &[&TrainImage],
    table: &FeasibilityTable,
    opts: &TrainOptions,
) -> Result<(LossReport<f64>, Var)> {
    let compo = opts.mode == Mode::Compo;
    let mut per_image = Vec::with_capacity(images.len());
    let mut matched = Vec::new();
    for img in images {
        let fwd = model.forward(tape, &img.features)?;
        let preds = PredictionSet::from_tape(tape, &fwd.preds);
        let finite = [&preds.human_boxes, &preds.object_boxes, &preds.object_logits, &preds.action_logits]
            .iter()
            .all(|t| t.data().iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NonFinite {
                step: 0,
                detail: format!("predictions for image {}", img.image_id),
            });
        }
        let assignment = hungarian(&cost_matrix(&preds, &img.gt, &opts.weights), preds.num_queries())?;
        per_image.push(original_losses(tape, &fwd.preds, &assignment, &img.gt)?);
        if compo {
            matched.push(matched_image(tape, &fwd, &assignment, &img.gt, opts.detach_recomposed)?);
        }
    }
    let parts_vars = LossVars::mean(tape, &per_image)?;
    let original = weighted_total(tape, &parts_vars, &opts.weights)?;
    let parts = parts_vars.values(tape);

    let mut batch = original;
    let mut recomposed = 0.0;
    let mut rho = 1.0;
    if compo {
        match recompose_on_tape(tape, &matched, table, false)? {
            Some(rv) => {
                let compo_parts = recomposed_losses(tape, model, &rv)?;
                let compo_loss = weighted_total(tape, &compo_parts, &opts.weights)?;
                recomposed = tape.scalar(compo_loss);
                rho = opts.rho;
                batch = mixed_batch_loss(tape, original, compo_loss, rho)?;
            }
            None => log::debug!("no re-composed rows in this pair; rho = 1"),
        }
    }
    let report = LossReport {
        parts,
        weighted: total_loss(&parts, &opts.weights),
        original: tape.scalar(original),
        recomposed,
        batch: tape.scalar(batch),
        rho,
    };
    Ok((report, batch))
}

/// Scales all gradients so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore<f64>, max_norm: f64) -> f64 {
    let sq: f64 = store
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.data().iter().map(|v| v * v))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in store.params_mut() {
            if let Some(g) = &mut p.grad {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Full,
    FineTune,
}

/// Mean of one epoch's step reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub phase: Phase,
    pub learning_rate: f64,
    pub steps: usize,
    pub loss: LossReport<f64>,
}

fn mean_report(rows: &[LossReport<f64>]) -> LossReport<f64> {
    let n = rows.len().max(1) as f64;
    let m = |f: &dyn Fn(&LossReport<f64>) -> f64| rows.iter().map(f).sum::<f64>() / n;
    LossReport {
        parts: LossParts {
            box_l1: m(&|r| r.parts.box_l1),
            giou: m(&|r| r.parts.giou),
            object: m(&|r| r.parts.object),
            action: m(&|r| r.parts.action),
        },
        weighted: m(&|r| r.weighted),
        original: m(&|r| r.original),
        recomposed: m(&|r| r.recomposed),
        batch: m(&|r| r.batch),
        rho: m(&|r| r.rho),
    }
}

/// Output of [`train`].
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: HoiModel<f64>,
    pub steps: Vec<LossReport<f64>>,
    pub epochs: Vec<EpochLoss>,
    /// Encoder checksum at the start and end of phase 2.
    pub frozen_checksums: Option<(String, String)>,
}

/// Trains a freshly initialised model. When `log` is given every step is
/// appended to it.
pub fn train(
    model_config: &ModelConfig,
    images: &[TrainImage],
    table: &FeasibilityTable,
    opts: &TrainOptions,
    seed: u64,
    mut log: Option<&mut LossLog>,
) -> Result<Trained> {
    check_rho(opts.rho)?;
    opts.schedule.validate()?;
    if images.len() < 2 {
        return Err(Error::Config("training needs at least two images".into()));
    }
    let mut model = HoiModel::new(model_config.clone(), &mut stream(seed, MODEL_STREAM, 0))?;
    let sched = &opts.schedule;
    let mut optimizer = AdamW::new(model.store(), sched.learning_rate, sched.weight_decay);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut frozen = None;
    let total = sched.phase1_epochs + sched.phase2_epochs;
    for epoch in 0..total {
        let phase = if epoch < sched.phase1_epochs { Phase::Full } else { Phase::FineTune };
        if phase == Phase::FineTune && frozen.is_none() {
            frozen = Some(model.store().checksum(ENCODER_PREFIX));
        }
        let lr = match phase {
            Phase::Full => sched.phase1_lr(epoch),
            Phase::FineTune => sched.phase2_lr(),
        };
        optimizer.learning_rate = lr;
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut stream(seed, SHUFFLE_STREAM, epoch as u64));
        let first = steps.len();
        for pair in order.chunks_exact(2) {
            let step = steps.len();
            let batch = [&images[pair[0]], &images[pair[1]]];
            let mut tape = Tape::new();
            let report = step_loss(&model, &mut tape, &batch, table, opts).map_err(|e| match e {
                Error::NonFinite { detail, .. } => Error::NonFinite { step, detail },
                e => e,
            })?;
            if ![report.batch, report.original, report.recomposed].iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    step,
                    detail: format!("images {} and {}: {report:?}", batch[0].image_id, batch[1].image_id),
                });
            }
            let store = model.store_mut();
            store.zero_grad();
            tape.accumulate_param_grads(store);
            if let Some(c) = sched.grad_clip {
                clip_grad_norm(store, c);
            }
            match phase {
                Phase::Full => optimizer.step(store)?,
                Phase::FineTune => optimizer.step_where(store, |n| !n.starts_with(ENCODER_PREFIX))?,
            }
            if let Some(l) = log.as_deref_mut() {
                l.append(step as u64, &report)?;
            }
            steps.push(report);
        }
        let row = EpochLoss {
            epoch,
            phase,
            learning_rate: lr,
            steps: steps.len() - first,
            loss: mean_report(&steps[first..]),
        };
        log::info!(
            "epoch {epoch} ({:?}) lr {lr:e}: L_orig {:.4} L_compo {:.4} L_batch {:.4}",
            phase,
            row.loss.original,
            row.loss.recomposed,
            row.loss.batch
        );
        epochs.push(row);
    }
    if let Some(l) = log {
        l.flush()?;
    }
    let frozen_checksums = frozen.map(|start| (start, model.store().checksum(ENCODER_PREFIX)));
    Ok(Trained {
        model,
        steps,
        epochs,
        frozen_checksums,
    })
}

/// Everything a run emits except wall time, which is stored separately so
/// that records of repeated runs compare byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub mode: Mode,
    pub rho: f64,
    pub seed: u64,
    pub steps: usize,
    pub epochs: Vec<EpochLoss>,
    pub eval: EvalReport,
    pub parameter_checksum: String,
}

impl RunRecord {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[derive(Serialize)]
struct HashedConfig<'a> {
    mode: Mode,
    rho: f64,
    schedule: &'a Schedule,
    weights: &'a LossWeights<f64>,
    detach_recomposed: bool,
    eval: &'a EvalOptions,
    model: &'a ModelConfig,
    dataset_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 over every setting that influences a run's numbers, seed and
/// output paths excluded.
pub fn config_hash(cfg: &ExperimentConfig, model: &ModelConfig, dataset: &Dataset) -> Result<String> {
    let h = HashedConfig {
        mode: cfg.mode,
        rho: cfg.effective_rho(),
        schedule: &cfg.schedule,
        weights: &cfg.weights,
        detach_recomposed: cfg.detach_recomposed,
        eval: &cfg.eval,
        model,
        dataset_sha256: sha256_hex(dataset.to_text().as_bytes()),
    };
    Ok(sha256_hex(serde_json::to_string(&h)?.as_bytes()))
}

/// A finished run in memory.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub record: RunRecord,
    pub trained: Trained,
    pub predictions: Vec<ScoredTriplet>,
    pub wall_time_secs: f64,
}

/// Trains and evaluates one `(config, seed)` cell. With `out` set, writes
/// the checkpoint, model config, loss log, run record, timing, evaluation
/// CSV and prediction dump there.
pub fn run(cfg: &ExperimentConfig, dataset: &Dataset, seed: u64, out: Option<&Path>) -> Result<RunOutput> {
    let start = std::time::Instant::now();
    cfg.validate()?;
    let model_cfg = cfg.model_config(dataset)?;
    let images = prepare_images(dataset, &model_cfg)?;
    let opts = TrainOptions::from_config(cfg);
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let p = dir.join("loss_log.csv");
            if p.exists() {
                fs::remove_file(&p)?;
            }
            Some(LossLog::open(&p)?)
        }
        None => None,
    };
    let trained = train(&model_cfg, &images, &dataset.table, &opts, seed, log.as_mut())?;
    let (report, predictions) = evaluate(&trained.model, &dataset.test, &dataset.table, &dataset.census, &cfg.eval)?;
    let record = RunRecord {
        config_hash: config_hash(cfg, &model_cfg, dataset)?,
        mode: cfg.mode,
        rho: opts.rho,
        seed,
        steps: trained.steps.len(),
        epochs: trained.epochs.clone(),
        eval: report,
        parameter_checksum: trained.model.store().checksum(""),
    };
    let wall_time_secs = start.elapsed().as_secs_f64();
    if let Some(dir) = out {
        trained.model.store().save(&dir.join("checkpoint.txt"))?;
        fs::write(dir.join("model.toml"), model_cfg.to_toml()?)?;
        fs::write(dir.join("run.json"), record.to_json()?)?;
        fs::write(
            dir.join("timing.json"),
            serde_json::to_string_pretty(&serde_json::json!({ "wall_time_secs": wall_time_secs }))? + "\n",
        )?;
        record.eval.save_csv(&dir.join("eval.csv"), &dataset.table)?;
        let mut w = std::io::BufWriter::new(fs::File::create(dir.join("predictions.jsonl"))?);
        crate::eval::write_predictions(&mut w, &predictions)?;
    }
    log::info!(
        "{} rho {} seed {seed}: mAP full {:.4} rare {:.4} non-rare {:.4} ({wall_time_secs:.1}s)",
        cfg.mode.name(),
        opts.rho,
        record.eval.map_full,
        record.eval.map_rare,
        record.eval.map_nonrare
    );
    Ok(RunOutput {
        record,
        trained,
        predictions,
        wall_time_secs,
    })
}

/// One row of the method grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub mode: Mode,
    pub rho: Option<f64>,
}

impl Method {
    pub fn label(&self) -> String {
        match self.rho {
            Some(r) => format!("{} (rho={r})", self.mode.name()),
            None => self.mode.name().to_string(),
        }
    }

    pub fn dir_name(&self) -> String {
        match self.rho {
            Some(r) => format!("{}-rho{r}", self.mode.name()),
            None => self.mode.name().to_string(),
        }
    }
}

/// Baseline, baseline*, then compo at every grid value.
pub fn method_grid(rho_grid: &[f64]) -> Vec<Method> {
    let mut m = vec![
        Method {
            mode: Mode::Baseline,
            rho: None,
        },
        Method {
            mode: Mode::BaselineStar,
            rho: None,
        },
    ];
    m.extend(rho_grid.iter().map(|&r| Method {
        mode: Mode::Compo,
        rho: Some(r),
    }));
    m
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub failed: Vec<(u64, String)>,
    pub full: Option<MeanStd>,
    pub rare: Option<MeanStd>,
    pub nonrare: Option<MeanStd>,
}

impl AblationRow {
    /// Aggregates the records of the seeds that completed.
    pub fn from_records(method: Method, records: &[RunRecord], failed: Vec<(u64, String)>) -> Self {
        let col = |f: fn(&EvalReport) -> f64| MeanStd::of(&records.iter().map(|r| f(&r.eval)).collect::<Vec<_>>());
        Self {
            method,
            seeds: records.iter().map(|r| r.seed).collect(),
            failed,
            full: col(|e| e.map_full),
            rare: col(|e| e.map_rare),
            nonrare: col(|e| e.map_nonrare),
        }
    }
}

pub const REWEIGHTING_FOOTNOTE: &str =
    "Dynamic loss re-weighting is not applied: no definition of it is available, so every run uses the fixed weights.";

fn cell(m: Option<MeanStd>) -> String {
    match m {
        Some(m) => format!("{:.2} ± {:.2}", 100.0 * m.mean, 100.0 * m.std),
        None => "n/a".into(),
    }
}

/// Markdown table of mAP (in percent) per method, with footnotes.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("| Method | Full | Rare | Non-Rare | Seeds |\n|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            r.method.label(),
            cell(r.full),
            cell(r.rare),
            cell(r.nonrare),
            r.seeds.len()
        ));
    }
    s.push_str("\nmAP in percent, mean ± sample std over seeds.\n");
    for r in rows {
        for (seed, err) in &r.failed {
            s.push_str(&format!("{} seed {seed} failed: {err}\n", r.method.label()));
        }
    }
    s.push_str(REWEIGHTING_FOOTNOTE);
    s.push('\n');
    s
}

#[derive(Serialize)]
struct AblationCsvRow {
    method: String,
    mode: &'static str,
    rho: Option<f64>,
    seeds: usize,
    failed: usize,
    full_mean: Option<f64>,
    full_std: Option<f64>,
    rare_mean: Option<f64>,
    rare_std: Option<f64>,
    nonrare_mean: Option<f64>,
    nonrare_std: Option<f64>,
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(AblationCsvRow {
            method: r.method.label(),
            mode: r.method.mode.name(),
            rho: r.method.rho,
            seeds: r.seeds.len(),
            failed: r.failed.len(),
            full_mean: r.full.map(|m| m.mean),
            full_std: r.full.map(|m| m.std),
            rare_mean: r.rare.map(|m| m.mean),
            rare_std: r.rare.map(|m| m.std),
            nonrare_mean: r.nonrare.map(|m| m.mean),
            nonrare_std: r.nonrare.map(|m| m.std),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Runs every method of the grid over every seed. Failed runs are recorded
/// and the rest of the grid still runs. With `out` set, each run writes to
/// `runs/<method>/seed-<n>/` and the table and CSV go to `out`.
pub fn ablate(cfg: &ExperimentConfig, dataset: &Dataset, out: Option<&Path>) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    if cfg.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for method in method_grid(&cfg.rho_grid) {
        let run_cfg = ExperimentConfig {
            mode: method.mode,
            rho: method.rho,
            ..cfg.clone()
        };
        let mut records = Vec::new();
        let mut failed = Vec::new();
        for &seed in &cfg.seeds {
            let dir = out.map(|o| o.join("runs").join(method.dir_name()).join(format!("seed-{seed}")));
            match run(&run_cfg, dataset, seed, dir.as_deref()) {
                Ok(r) => records.push(r.record),
                Err(e) => {
                    log::error!("{} seed {seed}: {e}", method.label());
                    failed.push((seed, e.to_string()));
                }
            }
        }
        rows.push(AblationRow::from_records(method, &records, failed));
        if let Some(o) = out {
            write_ablation(o, &rows)?;
        }
    }
    Ok(rows)
}

pub fn write_ablation(out: &Path, rows: &[AblationRow]) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("ablation.md"), ablation_table(rows))?;
    fs::write(out.join("ablation.csv"), ablation_csv(rows)?)?;
    Ok(())
}

/// Rebuilds the ablation rows from the run records under `out/runs`.
pub fn collect_ablation(out: &Path, rho_grid: &[f64], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for method in method_grid(rho_grid) {
        let mut records = Vec::new();
        let mut failed = Vec::new();
        for &seed in seeds {
            let p = out.join("runs").join(method.dir_name()).join(format!("seed-{seed}")).join("run.json");
            match RunRecord::load(&p) {
                Ok(r) => records.push(r),
                Err(e) => failed.push((seed, format!("{}: {e}", p.display()))),
            }
        }
        rows.push(AblationRow::from_records(method, &records, failed));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests;
