//! Thin argument parser over the library's command functions. Every
//! command exits nonzero on any violated invariant, including a failed
//! gradient check.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cadrec::cli;
use cadrec::config::Config;
use cadrec::evalinfer::Strategy;
use cadrec::Result;

#[derive(Parser)]
#[command(name = "cadrec", about = "Referring-expression counting on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file; built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the stage switches with cumulative preset 1..=7.
    #[arg(long)]
    ablation: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<Config> {
        cli::resolve_config(self.config.as_deref(), self.seed, self.ablation)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generates train/val scene datasets.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains a model; writes checkpoint, metrics log, and manifest.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training dataset.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Metrics log path; defaults to the checkpoint with `.metrics`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluates a checkpoint; writes a per-pair report.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Evaluation dataset.
        #[arg(long)]
        data: PathBuf,
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report output path.
        #[arg(long)]
        out: PathBuf,
        /// Counting strategy: threshold or density.
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Checks analytic gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Exports predicted and ground-truth density maps.
    ExportDensity {
        #[command(flatten)]
        common: Common,
        /// Dataset holding the scene.
        #[arg(long)]
        data: PathBuf,
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene index within the dataset.
        #[arg(long)]
        scene: usize,
        /// Expression index within the scene's pool.
        #[arg(long)]
        expr: usize,
        /// Output path prefix.
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains and evaluates the cumulative stage presets 1..=7.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run() -> Result<bool> {
    match Cli::parse().cmd {
        Cmd::Gen { common, out } => {
            let cfg = common.config()?;
            let g = cli::cmd_gen(&cfg, &out)?;
            println!(
                "wrote {} train / {} val scenes under {}",
                g.n_train,
                g.n_val,
                out.display()
            );
            println!("manifest {}", g.manifest_path.display());
            Ok(true)
        }
        Cmd::Train {
            common,
            data,
            out,
            metrics,
        } => {
            let cfg = common.config()?;
            let t = cli::cmd_train(&cfg, &data, &out, metrics.as_deref())?;
            println!("trained {} steps", t.stats.steps);
            if let Some(last) = t.stats.epoch_mean_total.last() {
                println!("final epoch mean total {last}");
            }
            println!("checkpoint {}", t.checkpoint.display());
            println!("metrics {}", t.metrics.display());
            Ok(true)
        }
        Cmd::Eval {
            common,
            data,
            checkpoint,
            out,
            strategy,
        } => {
            let cfg = common.config()?;
            let strategy: Option<Strategy> = strategy.map(|s| s.parse()).transpose()?;
            let e = cli::cmd_eval(&cfg, &checkpoint, &data, strategy, &out)?;
            let r = &e.result;
            println!(
                "pairs {} strategy {} mae {:.4} rmse {:.4} p {:.4} r {:.4} f1 {:.4}",
                r.pairs.len(),
                r.strategy,
                r.mae,
                r.rmse,
                r.precision,
                r.recall,
                r.f1
            );
            println!("report {}", e.report.display());
            Ok(true)
        }
        Cmd::Gradcheck { common } => {
            let cfg = common.config()?;
            let mut out = std::io::stdout().lock();
            cli::cmd_gradcheck(&cfg, &mut out)
        }
        Cmd::ExportDensity {
            common,
            data,
            checkpoint,
            scene,
            expr,
            out,
        } => {
            let cfg = common.config()?;
            let x = cli::cmd_export_density(&cfg, &checkpoint, &data, scene, expr, &out)?;
            println!("predicted mass {:.6}", x.predicted_count);
            println!("ground-truth mass {:.6}", x.gt_count);
            for p in [&x.pred_tensor, &x.gt_tensor, &x.pred_pgm, &x.gt_pgm] {
                println!("wrote {}", p.display());
            }
            Ok(true)
        }
        Cmd::Ablate { common, out } => {
            let cfg = common.config()?;
            let mut table = std::io::stdout().lock();
            cli::cmd_ablate(&cfg, &out, &mut table)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
