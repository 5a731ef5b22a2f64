use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use riverflow::fieldio::read_field;
use riverflow::pcga::PosteriorEnsemble;
use riverflow::pipeline::{self, Config, Predictor};
use riverflow::rng::RngSeed;
use riverflow::surrogates::{Model, ModelKind};
use riverflow::{BoundaryCondition, Error};

#[derive(Parser)]
#[command(name = "riverflow", version, about = "River bathymetry inversion and flow surrogates")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; built-in desk defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a solver dataset under --out.
    GenDataset,
    /// Synthetic-twin inversion; writes the posterior ensemble under --out.
    Invert,
    /// Train one surrogate on a dataset.
    Train {
        #[arg(long)]
        model: ModelKind,
        #[arg(long)]
        data: PathBuf,
    },
    /// RMSE of each checkpoint (and optionally the solver) on every split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint files; defaults to <kind>.rsur under --models-dir.
        #[arg(long = "model", num_args = 1..)]
        models: Vec<PathBuf>,
        #[arg(long)]
        models_dir: Option<PathBuf>,
        #[arg(long)]
        with_solver: bool,
    },
    /// Posterior ensemble statistics through the solver or a checkpoint.
    Uq {
        /// `solver` or a checkpoint path.
        #[arg(long)]
        predictor: String,
        #[arg(long)]
        posterior: PathBuf,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Solver vs surrogate timing on the first test sample.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Check that every file a manifest references exists and is intact.
    ValidateManifest {
        #[arg(long)]
        data: PathBuf,
    },
    /// PGM heatmaps and CSV grids of a field file.
    Plot {
        #[arg(long)]
        field: PathBuf,
    },
}

/// Dataset samples whose retry budget ran out (a numerical failure).
#[derive(Debug)]
struct Incomplete(usize);

impl std::fmt::Display for Incomplete {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} samples exhausted their retries; partial manifest written", self.0)
    }
}

impl std::error::Error for Incomplete {}

fn load_config(c: &Common) -> Result<Config> {
    let mut cfg = match &c.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let out = &cli.common.out;
    rayon_threads(cli.common.jobs);
    match cli.command {
        Command::GenDataset => {
            let m = pipeline::generate_dataset(&cfg, out, cli.common.jobs)?;
            println!("wrote {} samples to {}", m.records.len(), out.display());
            if !m.complete {
                for f in &m.failures {
                    eprintln!("sample {} failed after {} attempts: {}", f.id, f.attempts, f.last_error);
                }
                bail!(Incomplete(m.failures.len()));
            }
        }
        Command::Invert => {
            let a = pipeline::run_inversion(&cfg, Some(out))?;
            println!("{}", serde_json::to_string_pretty(&a.summary)?);
        }
        Command::Train { model, data } => {
            let (_, splits) = pipeline::load_splits(&data)?;
            let (m, history) = pipeline::train_model(&cfg, model, &splits, cfg.seed)?;
            std::fs::create_dir_all(out)?;
            cfg.record(out)?;
            let path = out.join(format!("{}.rsur", model.name()));
            m.save(&path)?;
            let mut csv = String::from("epoch,train_loss,train_mse,train_rmse,val_rmse,best_val_rmse\n");
            for r in &history {
                csv += &format!(
                    "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}\n",
                    r.epoch, r.train_loss, r.train_mse, r.train_rmse, r.val_rmse, r.best_val_rmse
                );
            }
            std::fs::write(out.join(format!("{}_history.csv", model.name())), csv)?;
            let best = history.last().map(|r| r.best_val_rmse).unwrap_or(f64::NAN);
            println!("saved {} (best validation RMSE {best:.4} m/s)", path.display());
        }
        Command::Eval { data, models, models_dir, with_solver } => {
            let (_, splits) = pipeline::load_splits(&data)?;
            let paths: Vec<PathBuf> = if !models.is_empty() {
                models
            } else if let Some(dir) = models_dir {
                ModelKind::ALL.iter().map(|k| dir.join(format!("{}.rsur", k.name()))).collect()
            } else {
                bail!(Error::Config("eval needs --model paths or --models-dir".into()));
            };
            let mut predictors = Vec::new();
            for p in &paths {
                predictors.push(Predictor::Model(Box::new(load_model(p)?)));
            }
            if with_solver {
                predictors.push(Predictor::Solver(cfg.solver));
            }
            let report = pipeline::evaluate(&predictors, &splits, &cfg.hash())?;
            cfg.record(out)?;
            report.write(out)?;
            print!("{}", report.to_csv());
        }
        Command::Uq { predictor, posterior, n } => {
            let post = PosteriorEnsemble::read(&posterior)?;
            let p = if predictor == "solver" {
                Predictor::Solver(cfg.solver)
            } else {
                Predictor::Model(Box::new(load_model(Path::new(&predictor))?))
            };
            let bc = BoundaryCondition::new(cfg.uq.q, cfg.uq.zf)?;
            let rng = RngSeed::new(cfg.seed, 0).purpose("uq");
            let r = pipeline::uq_ensemble(&p, &post, &bc, n.unwrap_or(cfg.uq.n), rng)?;
            cfg.record(out)?;
            r.write(out, p.name())?;
            println!("{} of {} draws succeeded; outputs in {}", r.successes, r.successes + r.failures.len(), out.display());
        }
        Command::Bench { model, data, repeats } => {
            let (_, splits) = pipeline::load_splits(&data)?;
            let s = splits.test.first().or(splits.val.first()).context("dataset has no held-out samples")?;
            let m = load_model(&model)?;
            let r = pipeline::benchmark_speed(&m, &s.bathy, &s.bc, &cfg.solver, repeats.unwrap_or(cfg.bench.repeats))?;
            std::fs::create_dir_all(out)?;
            r.write(&out.join("bench.json"))?;
            println!(
                "median solve {:.4e} s, median predict {:.4e} s, speedup {:.0}x{}",
                r.median_solve,
                r.median_predict,
                r.speedup,
                if r.low_confidence { " (low confidence)" } else { "" }
            );
        }
        Command::ValidateManifest { data } => {
            let check = pipeline::validate_manifest(&data)?;
            for p in &check.problems {
                eprintln!("{p}");
            }
            if !check.ok() {
                bail!(Error::CorruptFile {
                    path: data.display().to_string(),
                    reason: format!("{} problems found", check.problems.len())
                });
            }
            println!("manifest ok: {} records", check.records);
        }
        Command::Plot { field } => {
            let f = read_field(&field)?;
            let stem = field.file_stem().and_then(|s| s.to_str()).unwrap_or("field").to_string();
            std::fs::create_dir_all(out)?;
            let grid = *f.grid();
            let layers: Vec<(String, Vec<f64>)> = match f {
                riverflow::fieldio::Field::Scalar(s) => vec![(stem, s.into_values())],
                riverflow::fieldio::Field::Vector(v) => vec![
                    (format!("{stem}_speed"), v.magnitude().into_values()),
                    (format!("{stem}_easting"), v.easting().to_vec()),
                    (format!("{stem}_northing"), v.northing().to_vec()),
                ],
            };
            for (name, vals) in layers {
                pipeline::write_pgm(&out.join(format!("{name}.pgm")), &grid, &vals)?;
                pipeline::write_csv_grid(&out.join(format!("{name}.csv")), &grid, &vals)?;
                println!("wrote {name}.pgm and {name}.csv");
            }
        }
    }
    Ok(())
}

fn rayon_threads(jobs: usize) {
    // Ignored if a pool already exists.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global();
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::InvalidArgument(_) | Error::Shape(_)) => 2,
        Some(e) if e.is_numerical() => 3,
        Some(Error::StaleTape(_)) => 3,
        Some(Error::Io(_) | Error::CorruptFile { .. } | Error::Missing(_)) => 4,
        _ if err.is::<Incomplete>() => 3,
        _ if err.chain().any(|e| e.is::<std::io::Error>()) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
