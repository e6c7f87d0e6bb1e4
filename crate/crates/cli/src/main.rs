use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand};
use piclick_core::data::synth_ambiguity_dataset;
use piclick_core::eval::{EvalConfig, SelectionMode};
use piclick_core::{ModelConfig, PiClickF32};
use piclick_data::{save_folder, Format};
use piclick_service::{router, AppState, ServiceConfig};

use piclick_cli::{desk, load_samples, run_eval, run_training, Report, RunConfig};

#[derive(Parser)]
#[command(name = "piclick", version, about = "Click-driven multi-proposal segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing one checkpoint per epoch and metrics.jsonl.
    Train {
        /// TOML with optional [model] and [train] tables.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "folder")]
        format: Format,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the automatic click protocol and write a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "folder")]
        format: Format,
        #[arg(long, value_delimiter = ',', default_value = "0.85,0.90")]
        thresholds: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        max_clicks: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
        k: Vec<usize>,
        /// product, iou_only or conf_only.
        #[arg(long, default_value = "product")]
        mode: String,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Write the synthetic nested-shape corpus in the folder format.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2200)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train one of the small-scale reference models on the synthetic corpus.
    Desk {
        /// n7_random, n1_random or n7_largest_iou.
        #[arg(long)]
        variant: desk::Variant,
        #[arg(long)]
        out: PathBuf,
    },
    /// Start the annotation HTTP API.
    Serve {
        /// Without a checkpoint an untrained model is served.
        #[arg(long, env = "PICLICK_CKPT")]
        ckpt: Option<PathBuf>,
        #[arg(long, env = "PICLICK_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "PICLICK_HOST", default_value = "127.0.0.1")]
        host: String,
        #[arg(long, env = "PICLICK_MAX_SIDE", default_value_t = 1024)]
        max_side: u32,
        #[arg(long, env = "PICLICK_MAX_UPLOAD_BYTES", default_value_t = 16 << 20)]
        max_upload_bytes: usize,
        /// Query count of the untrained model; must match the checkpoint if both are given.
        #[arg(long, env = "PICLICK_QUERIES")]
        queries: Option<usize>,
        #[arg(long, env = "PICLICK_WORKERS", default_value_t = 1)]
        workers: usize,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train {
            config,
            data,
            format,
            out,
            resume,
        } => {
            let config = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let samples = load_samples(&data, format)?;
            let outcome = run_training(&config, &samples, &out, resume.as_deref())?;
            match outcome.checkpoints.last() {
                Some(p) => println!("{}", p.display()),
                None => log::warn!("nothing to do: already at epoch {}", config.train.epochs),
            }
        }
        Command::Eval {
            ckpt,
            data,
            format,
            thresholds,
            max_clicks,
            k,
            mode,
            out,
        } => {
            let selection_mode: SelectionMode =
                serde_json::from_value(serde_json::Value::String(mode.clone())).with_context(|| format!("unknown mode {mode:?}"))?;
            let config = EvalConfig {
                iou_thresholds: thresholds,
                max_clicks,
                k_list: k,
                selection_mode,
                ..EvalConfig::default()
            };
            let samples = load_samples(&data, format)?;
            let result = run_eval(&ckpt, &samples, &config)?;
            for t in &result.noc {
                println!("NoC@{:.2} {:.3} ({} failures)", t.threshold, t.noc, t.failures);
            }
            for m in &result.miou {
                println!("mIoU@{} {:.4}", m.k, m.miou);
            }
            let report = Report {
                checkpoint: ckpt,
                dataset: data,
                result,
            };
            std::fs::write(&out, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Synth { out, n, size, seed } => {
            let samples = synth_ambiguity_dataset(n, size, seed)?;
            save_folder(&samples, &out)?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Desk { variant, out } => {
            let (train, _) = desk::split()?;
            let model = desk::train_variant(variant, &train)?;
            std::fs::create_dir_all(&out)?;
            let path = variant.checkpoint(&out);
            model.save(&path)?;
            println!("{}", path.display());
        }
        Command::Serve {
            ckpt,
            port,
            host,
            max_side,
            max_upload_bytes,
            queries,
            workers,
        } => {
            let model = match ckpt {
                Some(p) => {
                    let m = PiClickF32::load(&p).with_context(|| format!("loading {}", p.display()))?;
                    if let Some(q) = queries.filter(|q| *q != m.num_queries()) {
                        anyhow::bail!("checkpoint has {} queries, --queries asked for {q}", m.num_queries());
                    }
                    m
                }
                None => {
                    log::warn!("no checkpoint given; serving an untrained model");
                    let mut c = ModelConfig::default();
                    if let Some(q) = queries {
                        c.num_queries = q;
                    }
                    PiClickF32::new(c)?
                }
            };
            let state = AppState::new(
                Arc::new(model),
                ServiceConfig {
                    max_upload_bytes,
                    max_side,
                    max_concurrent_inference: workers,
                },
            );
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                log::info!("listening on {}", listener.local_addr()?);
                axum::serve(listener, router(state))
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}
