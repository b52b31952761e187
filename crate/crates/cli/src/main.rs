use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use probdet::config::RunConfig;
use probdet::detector::Checkpoint;
use probdet::evalkit::{evaluate, EvalReport, ExperimentKind, ExperimentRunner};
use probdet::probcore::bound_gap_sweep;
use probdet::synthdata::{generate_dataset, SceneDataset};
use probdet::trainer::{grad_check_config, train, write_trace_csv};
use probdet::{Error, TOOL_VERSION};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  invalid command line
  3  file could not be read or written (code=io)
  4  invalid config, dataset or checkpoint contents (code=config)
  5  training loss or parameters became non-finite (code=non_finite)
  6  gradient check failed or other internal error (code=internal)

Failures print one line to stderr: error: code=<name> message=<text>";

#[derive(Parser, Debug)]
#[command(name = "probdet", version, about = "Probabilistic two-stage detection on synthetic scenes", after_help = EXIT_CODES)]
struct Cli {
    /// Cap on worker threads (default: one per core)
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene dataset
    GenData {
        /// Run config, or any artifact embedding one
        #[arg(long, value_name = "F")]
        config: Option<PathBuf>,
        /// Dataset seed (default: experiment.data_seed)
        #[arg(long, value_name = "N")]
        seed: Option<u64>,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Train a detector and write its checkpoint
    Train {
        #[arg(long, value_name = "F")]
        config: Option<PathBuf>,
        /// Dataset written by gen-data
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Checkpoint path
        #[arg(long, value_name = "MODEL")]
        out: PathBuf,
        /// Optional per-iteration loss trace (CSV)
        #[arg(long, value_name = "CSV")]
        trace: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset
    Eval {
        #[arg(long, value_name = "MODEL")]
        model: PathBuf,
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Report path (JSON)
        #[arg(long, value_name = "REPORT")]
        out: PathBuf,
        /// Evaluation settings (default: the config embedded in the checkpoint)
        #[arg(long, value_name = "F")]
        config: Option<PathBuf>,
        /// Proposal budget (default: detector.max_proposals of the checkpoint)
        #[arg(long, value_name = "K")]
        budget: Option<usize>,
    },
    /// Sweep the background bound gap over [eps, 1]^2
    Bounds {
        /// Grid points per axis
        #[arg(long, default_value_t = 1000, value_name = "N")]
        grid: usize,
        /// Lower end of both axes
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
    },
    /// Run a scoring, stage-style or classification-loss comparison
    Ablate {
        #[arg(long, value_enum)]
        kind: AblationKind,
        #[arg(long, value_name = "F")]
        config: Option<PathBuf>,
        /// Output directory for <kind>.csv and <kind>.json
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Evaluate over the configured proposal budgets
    SweepProposals {
        #[arg(long, value_name = "F")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Compare analytic gradients with central finite differences
    GradCheck {
        #[arg(long, value_name = "F")]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum AblationKind {
    ProbAblation,
    StageStyle,
    FedLoss,
}

impl From<AblationKind> for ExperimentKind {
    fn from(k: AblationKind) -> Self {
        match k {
            AblationKind::ProbAblation => ExperimentKind::ProbAblation,
            AblationKind::StageStyle => ExperimentKind::StageStyle,
            AblationKind::FedLoss => ExperimentKind::FedLoss,
        }
    }
}

struct Failure {
    code: u8,
    name: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, name) = match &e {
            Error::Io { .. } | Error::Csv(_) => (3, "io"),
            Error::Config(_)
            | Error::Json(_)
            | Error::Format { .. }
            | Error::Sizing { .. }
            | Error::UnassignableObject { .. }
            | Error::NoPositiveCounts => (4, "config"),
            Error::NonFiniteLoss { .. } => (5, "non_finite"),
            Error::Geometry(_) | Error::ClassOutsideSubset { .. } => (6, "internal"),
        };
        Failure { code, name, message: e.to_string() }
    }
}

type CliResult<T> = Result<T, Failure>;

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => {
            let c = RunConfig::default();
            c.validate()?;
            Ok(c)
        }
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e).into())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure { code: 6, name: "internal", message: e.to_string() })?;
    }
    match cli.command {
        Command::GenData { config, seed, out } => {
            let cfg = load_config(config.as_deref())?;
            let mut ds = generate_dataset(&cfg.data, seed.unwrap_or(cfg.experiment.data_seed))?;
            ds.run_config = Some(cfg.to_value());
            ds.tool_version = Some(TOOL_VERSION.to_string());
            ds.save(&out)?;
            println!("wrote {} scenes to {}", ds.scenes.len(), out.display());
        }
        Command::Train { config, data, out, trace } => {
            let cfg = load_config(config.as_deref())?;
            let ds = SceneDataset::load(&data)?;
            let result = train(&ds, &cfg.pyramid, &cfg.detector, &cfg.fedloss, &cfg.trainer)?;
            Checkpoint::from_detector(&result.model, cfg.to_value()).save(&out)?;
            if let Some(path) = trace {
                write_trace_csv(&result.trace, create(&path)?)?;
            }
            let last = result.trace.last().map(|r| r.total).unwrap_or(f64::NAN);
            println!("trained {} iterations, final loss {last:.6}; wrote {}", result.trace.len(), out.display());
        }
        Command::Eval { model, data, out, config, budget } => {
            let checkpoint = Checkpoint::load(&model)?;
            let detector = checkpoint.to_detector()?;
            let cfg = match config {
                Some(p) => RunConfig::load(p)?,
                None if checkpoint.run_config.is_null() => RunConfig::default(),
                None => RunConfig::from_json(&checkpoint.run_config.to_string())?,
            };
            let ds = SceneDataset::load(&data)?;
            if ds.num_classes() != detector.params.shape.num_classes {
                return Err(Error::Config(format!(
                    "dataset has {} classes but the checkpoint expects {}",
                    ds.num_classes(),
                    detector.params.shape.num_classes
                ))
                .into());
            }
            if ds.config.feature_len() != detector.params.shape.feature_len {
                return Err(Error::Config("dataset feature length does not match the checkpoint".into()).into());
            }
            let features = ds.features(&detector.pyramid);
            let k = budget.unwrap_or(detector.config.max_proposals);
            let report = EvalReport::new(evaluate(&detector, &ds, &features, &cfg, k), &ds, cfg.to_value());
            report.save(&out)?;
            println!("mAP {:.4} AR {:.4} (K = {k}); wrote {}", report.map, report.ar, out.display());
        }
        Command::Bounds { grid, eps, out } => {
            if grid < 2 {
                return Err(Error::Config("--grid must be at least 2".into()).into());
            }
            if !(eps > 0.0 && eps < 1.0) {
                return Err(Error::Config("--eps must lie in (0, 1)".into()).into());
            }
            let surface = bound_gap_sweep(grid, eps);
            surface.write_csv(create(&out)?)?;
            println!(
                "max gap {:.6} at alpha={:e} beta={:e}; min gap {:.3e}; wrote {}",
                surface.max_gap, surface.argmax.0, surface.argmax.1, surface.min_gap, out.display()
            );
        }
        Command::Ablate { kind, config, out } => experiment(kind.into(), config.as_deref(), &out)?,
        Command::SweepProposals { config, out } => experiment(ExperimentKind::ProposalSweep, config.as_deref(), &out)?,
        Command::GradCheck { config, step, tolerance } => {
            let cfg = load_config(config.as_deref())?;
            let report = grad_check_config(&cfg, step, tolerance)?;
            for b in &report.blocks {
                println!("{:<20} max_rel_error {:.3e} {}", b.name, b.max_rel_error, if b.pass { "ok" } else { "FAIL" });
            }
            if !report.pass {
                let failed: Vec<&str> = report.blocks.iter().filter(|b| !b.pass).map(|b| b.name.as_str()).collect();
                return Err(Failure {
                    code: 6,
                    name: "internal",
                    message: format!("gradient check failed for {}", failed.join(", ")),
                });
            }
        }
    }
    Ok(())
}

fn experiment(kind: ExperimentKind, config: Option<&Path>, out: &Path) -> CliResult<()> {
    let cfg = load_config(config)?;
    let report = ExperimentRunner::new(cfg)?.run(kind)?;
    let stem = serde_json::to_value(kind).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
    report.save(out, &stem)?;
    println!("condition,K,mAP,AR,rare_mAP,train_seconds");
    for r in &report.rows {
        println!("{},{},{:.4},{:.4},{:.4},{:.2}", r.condition, r.budget, r.map, r.ar, r.rare_map, r.train_seconds);
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let message = f.message.replace('\n', " ");
            eprintln!("error: code={} message={message}", f.name);
            ExitCode::from(f.code)
        }
    }
}
