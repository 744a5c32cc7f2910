//! `ltp` command line: a client of the pruning service.

use std::fmt::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ltp_client::{Client, ClientError};
use ltp_core::api::*;
use ltp_core::pruning::{GradMode, PruneError};

#[derive(Debug, Parser)]
#[command(name = "ltp", version, about = "Learned threshold pruning")]
pub struct Cli {
    /// Service base URL.
    #[arg(long, global = true, env = "LTP_SERVER", default_value = "http://127.0.0.1:7878")]
    pub server: String,
    /// Start a private in-process service instead of connecting to --server.
    #[arg(long, global = true)]
    pub embedded: bool,
    /// Print the raw JSON report.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain, then soft-prune with learned thresholds.
    Prune {
        #[arg(long)]
        config: PathBuf,
    },
    /// Hard-prune a checkpoint at its thresholds and finetune with the mask fixed.
    Finetune {
        #[arg(long = "from")]
        from: PathBuf,
        /// Output directory (default: the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evaluate a checkpoint on the validation split of an IDX directory.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write the sparse artifact of a checkpoint.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit CDF and scatter tables of one layer's squared weights.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Layer index or name.
        #[arg(long)]
        layer: String,
        #[arg(long)]
        out: PathBuf,
        /// Reference checkpoint (default: initial.ckpt next to --checkpoint).
        #[arg(long)]
        original: Option<PathBuf>,
    },
    /// Prune once per gradient mode from a shared pretrained model.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "approx,full_unclamped,l0_in_weight_update")]
        modes: String,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Mode(#[from] PruneError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("cannot start embedded service: {0}")]
    Embedded(std::io::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

fn read_config(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("reports serialize")
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

/// Runs one command and returns what to print on stdout.
pub async fn run(cli: Cli) -> Result<String, CliError> {
    let base = if cli.embedded {
        let addr: SocketAddr = "127.0.0.1:0".parse().expect("valid address");
        let local = ltp_server::spawn(addr).await.map_err(CliError::Embedded)?;
        format!("http://{local}")
    } else {
        cli.server.clone()
    };
    let client = Client::new(base);
    let cwd = std::env::current_dir()?;
    let mut out = String::new();
    match cli.command {
        Command::Prune { config } => {
            let req = PruneRequest {
                config: read_config(&config)?,
                cwd,
            };
            let r = client.prune(&req).await?;
            if cli.json {
                return Ok(json(&r));
            }
            for c in &r.trail {
                writeln!(
                    out,
                    "epoch {:>3}  keep {:.4}  lambda {:.3e}  train_loss {:.4}  val_loss {:.4}  top1 {}  top5 {}",
                    c.epoch,
                    c.keep_ratio,
                    c.lambda,
                    c.train_loss,
                    c.val.loss,
                    pct(c.val.top1),
                    pct(c.val.top5)
                )
                .ok();
            }
            writeln!(out, "trail written to {}", r.out_dir.display()).ok();
            if let Some(best) = &r.best_checkpoint {
                writeln!(out, "best checkpoint {} (epoch {})", best.display(), r.best_epoch.unwrap_or(0)).ok();
            }
        }
        Command::Finetune { from, out: dir, epochs, lr } => {
            let req = FinetuneRequest {
                checkpoint: from,
                cwd,
                out_dir: dir,
                epochs,
                lr,
            };
            let r = client.finetune(&req).await?;
            if cli.json {
                return Ok(json(&r));
            }
            writeln!(out, "keep ratio {:.4}", r.keep_ratio).ok();
            writeln!(out, "top1 soft {}  hard {}  finetuned {}", pct(r.soft.top1), pct(r.hard.top1), pct(r.finetuned.top1)).ok();
            writeln!(out, "wrote {} and {}", r.finalized_checkpoint.display(), r.finetuned_checkpoint.display()).ok();
        }
        Command::Eval { model, data } => {
            let req = EvalRequest {
                model,
                data,
                cwd,
                batch_size: None,
            };
            let r = client.eval(&req).await?;
            if cli.json {
                return Ok(json(&r));
            }
            writeln!(
                out,
                "samples {}  loss {:.6}  top1 {}  top5 {}  keep_ratio {:.4}",
                r.samples,
                r.result.loss,
                pct(r.result.top1),
                pct(r.result.top5),
                r.keep_ratio
            )
            .ok();
        }
        Command::Export { checkpoint, out: path } => {
            let r = client.export(&ExportRequest { checkpoint, out: path, cwd }).await?;
            if cli.json {
                return Ok(json(&r));
            }
            writeln!(
                out,
                "wrote {}: kept {}/{} weights, compression {:.3}x ({})",
                r.out.display(),
                r.kept_weights,
                r.total_weights,
                r.compression_rate,
                r.compression_rate_exact
            )
            .ok();
        }
        Command::Analyze {
            checkpoint,
            layer,
            out: dir,
            original,
        } => {
            let req = AnalyzeRequest {
                checkpoint,
                original,
                layer,
                out: dir,
                cwd,
            };
            let r = client.analyze(&req).await?;
            if cli.json {
                return Ok(json(&r));
            }
            writeln!(
                out,
                "layer {} ({}) tau {:e}: {} kept though small, {} pruned though large",
                r.layer_id, r.layer, r.tau, r.kept_though_small, r.pruned_though_large
            )
            .ok();
            writeln!(out, "wrote {} and {}", r.cdf.display(), r.scatter.display()).ok();
        }
        Command::Sweep { config, modes } => {
            let modes = GradMode::parse_list(&modes)?;
            let req = SweepRequest {
                config: read_config(&config)?,
                cwd,
                modes,
            };
            let r = client.sweep(&req).await?;
            if cli.json {
                return Ok(json(&r));
            }
            for m in &r.results {
                writeln!(
                    out,
                    "{:<22} keep {:.4}  transitional {:.6}  top1 {}",
                    m.mode.as_str(),
                    m.final_keep_ratio,
                    m.transitional_occupancy,
                    pct(m.final_val_top1)
                )
                .ok();
            }
            writeln!(out, "per-mode trails under {}", r.out_dir.display()).ok();
        }
    }
    Ok(out)
}
