use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use voxmim_cli::commands::{self, TrainMode, TrainOptions};
use voxmim_cli::reproduce::reproduce;
use voxmim_cli::{CliResult, RunConfig};

/// Masked image modelling pipeline for volumetric images.
///
/// Every subcommand reads an optional TOML run config (all keys have
/// defaults; `voxmim config` prints them) and writes its artifacts under
/// `paths.run_dir` unless told otherwise, together with a `run.json`
/// provenance record.
#[derive(Parser)]
#[command(name = "voxmim", version)]
struct Cli {
    /// TOML run configuration. Defaults apply to every missing key.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config (default 0).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantoms, manifests and a stratified train/test split.
    Synth {
        /// Output directory [default: <run_dir>/data].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of unlabeled phantoms [default: synth.n_unlabeled = 64].
        #[arg(long)]
        n_unlabeled: Option<usize>,
        /// Number of labeled phantoms [default: synth.n_labeled = 40].
        #[arg(long)]
        n_labeled: Option<usize>,
    },
    /// Resample, clip and normalise every volume of a manifest.
    Preprocess {
        /// Input manifest (labeled or unlabeled).
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory [default: <run_dir>/preprocessed].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Reprocess ids whose output already exists.
        #[arg(long)]
        force: bool,
    },
    /// Pre-train the masked autoencoder on an unlabeled manifest.
    Pretrain {
        /// Unlabeled manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint stem [default: <run_dir>/models/mae].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a classifier on a fraction of a labeled training manifest.
    Train {
        /// Labeled training manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Downstream protocol.
        #[arg(long, value_enum)]
        mode: TrainMode,
        /// Share of the training manifest to use: 0.10, 0.25, 0.50 or 1.00.
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        /// Autoencoder checkpoint (probe, finetune) or encoder source (external).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also train the encoder in random and external modes.
        #[arg(long)]
        unfreeze: bool,
        /// Checkpoint stem [default: <run_dir>/models/<mode>_f<fraction>].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bootstrap metrics of a classifier on a test manifest.
    Evaluate {
        /// Classifier checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled test manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Report stem; writes .json, .csv and .predictions.csv [default: <run_dir>/reports/<checkpoint name>].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired bootstrap comparison of two classifiers with a signed-rank test.
    Compare {
        /// First classifier checkpoint.
        #[arg(long)]
        a: PathBuf,
        /// Second classifier checkpoint.
        #[arg(long)]
        b: PathBuf,
        /// Labeled test manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Test manifest for the second classifier [default: --manifest].
        #[arg(long)]
        manifest_b: Option<PathBuf>,
        /// Output JSON [default: <run_dir>/reports/compare_<a>_<b>.json].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run or resume the full grid of methods, label fractions and seeds.
    Reproduce {
        /// Output directory [default: <run_dir>/reproduce].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective run configuration as TOML.
    Config,
}

fn stem_name(p: &Path) -> String {
    let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.trim_end_matches(".json").trim_end_matches(".ckpt").to_string()
}

fn run(cli: Cli) -> CliResult<()> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let run_dir = config.paths.run_dir.clone();
    match cli.command {
        Command::Synth { out, n_unlabeled, n_labeled } => {
            if let Some(n) = n_unlabeled {
                config.synth.n_unlabeled = n;
            }
            if let Some(n) = n_labeled {
                config.synth.n_labeled = n;
            }
            let out = commands::synth(&config, &out.unwrap_or_else(|| run_dir.join("data")))?;
            for p in [out.unlabeled, out.labeled, out.train, out.test] {
                println!("{}", p.display());
            }
        }
        Command::Preprocess { manifest, out, force } => {
            let out = commands::preprocess(&config, &manifest, &out.unwrap_or_else(|| run_dir.join("preprocessed")), force)?;
            println!("{}", out.manifest.display());
        }
        Command::Pretrain { manifest, out } => {
            let out = commands::pretrain(&config, &manifest, &out.unwrap_or_else(|| run_dir.join("models").join("mae")))?;
            println!("{}", out.checkpoint.display());
            println!("{}", out.loss_csv.display());
        }
        Command::Train {
            manifest,
            mode,
            fraction,
            checkpoint,
            unfreeze,
            out,
        } => {
            let default = run_dir.join("models").join(format!("{}_f{fraction:.2}", format!("{mode:?}").to_lowercase()));
            let options = TrainOptions {
                mode,
                fraction,
                encoder_checkpoint: checkpoint,
                unfreeze,
            };
            let path = commands::train(&config, &manifest, &options, &out.unwrap_or(default))?;
            println!("{}", path.display());
        }
        Command::Evaluate { checkpoint, manifest, out } => {
            let out = out.unwrap_or_else(|| run_dir.join("reports").join(stem_name(&checkpoint)));
            let report = commands::evaluate(&config, &checkpoint, &manifest, &out)?;
            let m = &report.metrics;
            for (name, v) in [("auc", m.auc), ("accuracy", m.accuracy), ("precision", m.precision), ("recall", m.recall), ("f1", m.f1)] {
                let (lo, hi) = v.ci.unwrap_or((v.point, v.point));
                println!("{name:<9} {:.3} [{lo:.3}, {hi:.3}]", v.point);
            }
        }
        Command::Compare {
            a,
            b,
            manifest,
            manifest_b,
            out,
        } => {
            let out = out.unwrap_or_else(|| run_dir.join("reports").join(format!("compare_{}_{}.json", stem_name(&a), stem_name(&b))));
            let r = commands::compare(&config, &a, &b, &manifest, manifest_b.as_deref(), &out)?;
            println!(
                "auc {:.3} vs {:.3}, p = {:.4}{}",
                r.metric_a.point,
                r.metric_b.point,
                r.p_value,
                if r.significant { " (significant at 0.05)" } else { "" }
            );
        }
        Command::Reproduce { out } => {
            let out = reproduce(&config, &out.unwrap_or_else(|| run_dir.join("reproduce")))?;
            println!("{}", out.results.display());
        }
        Command::Config => print!("{}", config.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("voxmim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

