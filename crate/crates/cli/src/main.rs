use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ordwae::config::RunConfig;
use ordwae::data::{generate, load_path, Dataset, Split};
use ordwae::gradcheck::{run_suite, MODULES};
use ordwae::metrics::{reports_to_csv, MetricsReport};
use ordwae::model::ModelConfig;
use ordwae::trainer::{evaluate, fit_prior_stage, run_ablation, train_with, Checkpoint, Variant};
use ordwae::Error;

/// Exit status for a gradient check that ran but did not pass.
const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(
    name = "ordwae",
    version,
    about = "Train and evaluate ordinal Wasserstein autoencoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-tailed ordinal dataset.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        /// Config file whose synth keys provide the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        classes: Option<usize>,
        /// Comma-separated per-class sample counts.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        #[arg(long)]
        input_dim: Option<usize>,
        #[arg(long)]
        severity_gap: Option<f64>,
        #[arg(long)]
        noise_sigma: Option<f64>,
        #[arg(long)]
        skew: Option<f64>,
        #[arg(long)]
        nuisance_dims: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the factorized AGGD prior to a checkpoint's training latents.
    FitPrior {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one variant and write checkpoints plus metrics.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on one split and print the report as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train every ladder variant for every seed and tabulate test metrics.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "vae_kl,vae_kl_as,wae_mmd,wae_mmd_as,ag_soft,orm,maoc,full"
        )]
        ladder: Vec<Variant>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Directory for `ablation.csv` and `ablation_runs.csv`.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// One of autodiff, losses, divergences, model.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 100)]
        seeds: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Shape { .. } => EXIT_CONFIG,
        Error::NonFinite { .. } | Error::Domain { .. } => EXIT_NUMERIC,
        Error::Io(_) | Error::Ingest { .. } | Error::Json(_) | Error::Checkpoint(_) => EXIT_IO,
    }
}

fn load_config(path: Option<&Path>) -> ordwae::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Fills data-dependent model dimensions that the config left unset.
fn model_for(cfg: &RunConfig, data: &Dataset) -> ModelConfig {
    let mut m = cfg.model.clone();
    if !cfg.is_explicit("model.input_dim") {
        m.input_dim = data.input_dim();
    }
    if !cfg.is_explicit("model.num_classes") {
        m.num_classes = data.num_classes;
    }
    m
}

fn write(path: &Path, text: &str) -> ordwae::Result<()> {
    fs::write(path, text).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn run(cli: Cli) -> ordwae::Result<u8> {
    match cli.command {
        Command::SynthData {
            out,
            config,
            classes,
            counts,
            input_dim,
            severity_gap,
            noise_sigma,
            skew,
            nuisance_dims,
            seed,
        } => {
            let mut s = load_config(config.as_deref())?.synth;
            if let Some(c) = counts {
                s.num_classes = c.len();
                s.samples_per_class = c;
            }
            if let Some(c) = classes {
                if s.samples_per_class.len() != c {
                    s.samples_per_class = ordwae::data::geometric_counts(300, 0.6, c)?;
                }
                s.num_classes = c;
            }
            s.input_dim = input_dim.unwrap_or(s.input_dim);
            s.severity_gap = severity_gap.unwrap_or(s.severity_gap);
            s.noise_sigma = noise_sigma.unwrap_or(s.noise_sigma);
            s.skew = skew.unwrap_or(s.skew);
            s.nuisance_dims = nuisance_dims.unwrap_or(s.nuisance_dims);
            s.seed = seed.unwrap_or(s.seed);
            let data = generate(&s)?;
            data.write_dir(&out)?;
            println!(
                "wrote {} samples ({} classes, dim {}) to {}; train histogram {:?}",
                data.len(),
                data.num_classes,
                data.input_dim(),
                out.display(),
                data.histogram(Split::Train)
            );
        }
        Command::FitPrior { ckpt, data, out } => {
            let mut ck = Checkpoint::load(&ckpt)?;
            let data = load_path(&data, ck.train_config.seed)?;
            let prior = fit_prior_stage(&mut ck, &data.split(Split::Train))?;
            write(&out, &prior.to_json()?)?;
            println!(
                "wrote {}-coordinate prior to {}",
                prior.dim(),
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            variant,
            seed,
            epochs,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(v) = variant {
                cfg.train.variant = v;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let data = load_path(&data, cfg.train.seed)?;
            let model = model_for(&cfg, &data);
            fs::create_dir_all(&out)?;
            let outcome = train_with(&cfg.train, &data, &model, &mut |end| {
                log::info!(
                    "epoch {}: train loss {:.4}, val qwk {:.4}, lr {:.2e}",
                    end.val.epoch,
                    end.train.loss.total,
                    end.val.qwk,
                    end.val.lr
                );
                Ok(())
            })?;
            outcome.last.save(&out.join("last.json"))?;
            outcome.best.save(&out.join("best.json"))?;
            write(&out.join("metrics.csv"), &reports_to_csv(&outcome.trace))?;
            write(
                &out.join("metrics.json"),
                &serde_json::to_string_pretty(&outcome.trace)?,
            )?;
            match (outcome.best.best_epoch, outcome.best.best_val_qwk) {
                (Some(e), Some(q)) => {
                    println!("{}: best val qwk {q:.4} at epoch {e}", cfg.train.variant)
                }
                _ => println!("{}: no epochs run", cfg.train.variant),
            }
        }
        Command::Eval { ckpt, data, split } => {
            let ck = Checkpoint::load(&ckpt)?;
            let split = Split::parse(&split)?;
            let data = load_path(&data, ck.train_config.seed)?;
            let report: MetricsReport = evaluate(&ck, &data.split(split), split.name())?;
            println!("{}", report.to_json()?);
        }
        Command::Ablate {
            config,
            data,
            ladder,
            seeds,
            out,
            threads,
        } => {
            let cfg = load_config(config.as_deref())?;
            let data = load_path(&data, cfg.train.seed)?;
            let model = model_for(&cfg, &data);
            let threads = threads
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let table = run_ablation(&cfg.train, &model, &data, &ladder, &seeds, threads)?;
            fs::create_dir_all(&out)?;
            let summary = table.summary_csv();
            write(&out.join("ablation.csv"), &summary)?;
            write(&out.join("ablation_runs.csv"), &table.runs_csv())?;
            print!("{summary}");
        }
        Command::Gradcheck { module, seeds } => {
            if let Some(m) = &module {
                if !MODULES.contains(&m.as_str()) {
                    return Err(Error::Config(format!(
                        "unknown module `{m}` (expected one of {})",
                        MODULES.join(", ")
                    )));
                }
            }
            let results = run_suite(module.as_deref(), seeds)?;
            let mut failed = 0;
            for r in &results {
                println!(
                    "{} {}/{}: max relative error {:.3e} (tolerance {:.0e}, {} seeds, worst seed {})",
                    if r.passed() { "ok  " } else { "FAIL" },
                    r.module,
                    r.name,
                    r.max_rel_error,
                    r.tolerance,
                    r.seeds,
                    r.worst_seed
                );
                failed += usize::from(!r.passed());
            }
            println!("{} checks, {failed} failed", results.len());
            if failed > 0 {
                return Ok(EXIT_CHECK_FAILED);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
