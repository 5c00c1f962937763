use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use compohoi::eval::{evaluate, evaluate_triplets, gt_triplets, read_predictions, write_predictions, ScoredTriplet};
use compohoi::experiment::{self, ExperimentConfig, Method, Mode, RunRecord};
use compohoi::losses::read_loss_log;
use compohoi::model::{HoiModel, ModelConfig};
use compohoi::report::{self, Series};
use compohoi::synth::{build_dataset, stream, Dataset, DatasetSpec};
use compohoi::ParamStore;

#[derive(Parser)]
#[command(name = "compohoi", version, about = "Compositional HOI learning on synthetic long-tailed scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed (dataset seed for `generate`, run seed otherwise).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with its feasibility table and census.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model and evaluate it on the test split.
    Train {
        #[command(flatten)]
        common: Common,
        /// baseline, baseline_star or compo.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        rho: Option<f64>,
        /// Dataset file from `generate`; overrides the config.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        no_nms: bool,
    },
    /// Evaluate a checkpoint, or a prediction dump, on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Run directory holding checkpoint.txt and model.toml.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Score the ground truth itself as predictions.
        #[arg(long, conflicts_with = "predictions")]
        oracle: bool,
        /// Score a prediction dump instead of running a model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        no_nms: bool,
    },
    /// Run baseline, baseline_star and compo over the rho grid and seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Replaces the rho grid; repeatable.
        #[arg(long)]
        rho: Vec<f64>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        no_nms: bool,
    },
    /// Write SVG plots and tables for a run or ablation directory.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Makes the dataset and model paths absolute so that a config copied into
/// an output directory still resolves.
fn absolutize(cfg: &mut ExperimentConfig) -> Result<()> {
    for p in [&mut cfg.dataset_file, &mut cfg.model_file].into_iter().flatten() {
        *p = fs::canonicalize(&*p).with_context(|| format!("resolving {}", p.display()))?;
    }
    Ok(())
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.load_dataset().context("loading dataset")
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn generate(common: &Common) -> Result<()> {
    let mut spec = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            match ExperimentConfig::from_toml(&text) {
                Ok(cfg) => cfg.dataset,
                Err(_) => DatasetSpec::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?,
            }
        }
        None => DatasetSpec::default(),
    };
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    fs::create_dir_all(&out)?;
    let dataset = build_dataset(&spec)?;
    dataset.save(&out.join("dataset.jsonl"))?;
    dataset.table.save(&out.join("feasibility.json"))?;
    write(&out.join("census.csv"), &dataset.census_table())?;
    write(&out.join("dataset.toml"), &spec.to_toml()?)?;
    println!(
        "{} train / {} test scenes, {} categories ({} rare, {} non-rare) -> {}",
        dataset.train.len(),
        dataset.test.len(),
        dataset.table.num_categories(),
        dataset.census.rare.len(),
        dataset.census.non_rare.len(),
        out.display()
    );
    Ok(())
}

fn train(common: &Common, mode: Option<&str>, rho: Option<f64>, dataset: Option<PathBuf>, no_nms: bool) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(m) = mode {
        cfg.mode = m.parse::<Mode>()?;
    }
    if rho.is_some() {
        cfg.rho = rho;
    }
    if dataset.is_some() {
        cfg.dataset_file = dataset;
    }
    if no_nms {
        cfg.eval.nms_threshold = None;
    }
    cfg.validate()?;
    absolutize(&mut cfg)?;
    let seed = common.seed.or(cfg.seeds.first().copied()).unwrap_or(0);
    let method = Method {
        mode: cfg.mode,
        rho: (cfg.mode == Mode::Compo).then(|| cfg.effective_rho()),
    };
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(method.dir_name()).join(format!("seed-{seed}")));
    let data = load_dataset(&cfg)?;
    fs::create_dir_all(&out)?;
    write(&out.join("config.toml"), &cfg.to_toml()?)?;
    let run = experiment::run(&cfg, &data, seed, Some(&out))?;
    let e = &run.record.eval;
    println!(
        "{} seed {seed}: mAP full {:.4} rare {:.4} non-rare {:.4} in {:.1}s -> {}",
        method.label(),
        e.map_full,
        e.map_rare,
        e.map_nonrare,
        run.wall_time_secs,
        out.display()
    );
    Ok(())
}

struct EvalArgs {
    run: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    model_config: Option<PathBuf>,
    dataset: Option<PathBuf>,
    oracle: bool,
    predictions: Option<PathBuf>,
    no_nms: bool,
}

fn eval(common: &Common, args: EvalArgs) -> Result<()> {
    let mut cfg = match (&common.config, &args.run) {
        (None, Some(run)) if run.join("config.toml").exists() => ExperimentConfig::load(&run.join("config.toml"))?,
        _ => load_config(common)?,
    };
    if args.dataset.is_some() {
        cfg.dataset_file = args.dataset.clone();
    }
    if args.no_nms {
        cfg.eval.nms_threshold = None;
    }
    let data = load_dataset(&cfg)?;
    let out = common
        .out
        .clone()
        .or_else(|| args.run.clone())
        .unwrap_or_else(|| PathBuf::from("eval"));
    fs::create_dir_all(&out)?;
    let gts: Vec<_> = data.test.iter().flat_map(|s| gt_triplets(s, &data.table)).collect();
    let k = data.table.num_categories();

    let (report, dets) = if args.oracle {
        let dets: Vec<ScoredTriplet> = gts
            .iter()
            .map(|g| ScoredTriplet {
                image_id: g.image_id,
                human_box: g.human_box,
                object_box: g.object_box,
                category: g.category,
                score: 1.0,
            })
            .collect();
        (evaluate_triplets(&dets, &gts, &data.census, k, data.test.len()), dets)
    } else if let Some(p) = &args.predictions {
        let file = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
        let dets = read_predictions(std::io::BufReader::new(file))?;
        (evaluate_triplets(&dets, &gts, &data.census, k, data.test.len()), dets)
    } else {
        let dir = args.run.clone().unwrap_or_else(|| out.clone());
        let ckpt = args.checkpoint.clone().unwrap_or_else(|| dir.join("checkpoint.txt"));
        let mcfg_path = args.model_config.clone().unwrap_or_else(|| dir.join("model.toml"));
        let model_cfg = if mcfg_path.exists() {
            ModelConfig::from_toml(&fs::read_to_string(&mcfg_path)?)?
        } else {
            cfg.model_config(&data)?
        };
        let store = ParamStore::load(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
        let mut model = HoiModel::new(model_cfg, &mut stream(0, 0, 0))?;
        model
            .load_parameters(&store)
            .with_context(|| format!("checkpoint {} does not fit the model config", ckpt.display()))?;
        evaluate(&model, &data.test, &data.table, &data.census, &cfg.eval)?
    };
    report.save_csv(&out.join("eval.csv"), &data.table)?;
    let mut w = std::io::BufWriter::new(fs::File::create(out.join("predictions.jsonl"))?);
    write_predictions(&mut w, &dets)?;
    println!(
        "mAP full {:.4} rare {:.4} ({}) non-rare {:.4} ({}) over {} images -> {}",
        report.map_full,
        report.map_rare,
        report.num_rare,
        report.map_nonrare,
        report.num_nonrare,
        report.num_images,
        out.display()
    );
    Ok(())
}

fn ablate(common: &Common, rho: Vec<f64>, dataset: Option<PathBuf>, no_nms: bool) -> Result<()> {
    let mut cfg = load_config(common)?;
    if !rho.is_empty() {
        cfg.rho_grid = rho;
    }
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if dataset.is_some() {
        cfg.dataset_file = dataset;
    }
    if no_nms {
        cfg.eval.nms_threshold = None;
    }
    cfg.validate()?;
    absolutize(&mut cfg)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    fs::create_dir_all(&out)?;
    write(&out.join("config.toml"), &cfg.to_toml()?)?;
    let data = load_dataset(&cfg)?;
    let rows = experiment::ablate(&cfg, &data, Some(&out))?;
    write(&out.join("ablation.svg"), &report::ablation_plot(&rows))?;
    print!("{}", experiment::ablation_table(&rows));
    Ok(())
}

fn report_cmd(common: &Common) -> Result<()> {
    let dir = common.out.clone().context("report needs --out pointing at a run or ablation directory")?;
    let mut wrote = Vec::new();
    let log = dir.join("loss_log.csv");
    if log.exists() {
        let rows = read_loss_log(&log)?;
        write(&dir.join("loss.svg"), &report::loss_plot(&rows))?;
        wrote.push("loss.svg");
    }
    let preds = dir.join("predictions.jsonl");
    let cfg_path = common.config.clone().unwrap_or_else(|| dir.join("config.toml"));
    if preds.exists() && cfg_path.exists() {
        let cfg = ExperimentConfig::load(&cfg_path)?;
        let data = load_dataset(&cfg)?;
        let dets = read_predictions(std::io::BufReader::new(fs::File::open(&preds)?))?;
        let gts: Vec<_> = data.test.iter().flat_map(|s| gt_triplets(s, &data.table)).collect();
        let k = data.table.num_categories();
        let curve = report::pooled_pr_curve(&dets, &gts, k);
        let name = RunRecord::load(&dir.join("run.json"))
            .map(|r| r.mode.name().to_string())
            .unwrap_or_else(|_| "predictions".into());
        write(&dir.join("pr.svg"), &report::pr_plot(vec![Series { name, points: curve }]))?;
        wrote.push("pr.svg");
    }
    if dir.join("runs").is_dir() && cfg_path.exists() {
        let cfg = ExperimentConfig::load(&cfg_path)?;
        let rows = experiment::collect_ablation(&dir, &cfg.rho_grid, &cfg.seeds)?;
        experiment::write_ablation(&dir, &rows)?;
        write(&dir.join("ablation.svg"), &report::ablation_plot(&rows))?;
        wrote.extend(["ablation.md", "ablation.csv", "ablation.svg"]);
        print!("{}", experiment::ablation_table(&rows));
    }
    if wrote.is_empty() {
        bail!("nothing to report in {}", dir.display());
    }
    println!("wrote {} in {}", wrote.join(", "), dir.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Generate { common } => generate(&common),
        Command::Train {
            common,
            mode,
            rho,
            dataset,
            no_nms,
        } => train(&common, mode.as_deref(), rho, dataset, no_nms),
        Command::Eval {
            common,
            run,
            checkpoint,
            model_config,
            dataset,
            oracle,
            predictions,
            no_nms,
        } => eval(
            &common,
            EvalArgs {
                run,
                checkpoint,
                model_config,
                dataset,
                oracle,
                predictions,
                no_nms,
            },
        ),
        Command::Ablate {
            common,
            rho,
            dataset,
            no_nms,
        } => ablate(&common, rho, dataset, no_nms),
        Command::Report { common } => report_cmd(&common),
    }
}
