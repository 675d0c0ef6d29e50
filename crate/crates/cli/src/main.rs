//! `remote-fusion`: synthetic data generation, training, evaluation,
//! gradient checking and transport-plan inspection.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure.

use clap::{Parser, Subcommand};
use remote_core::checkpoint;
use remote_core::config::RunConfig;
use remote_core::data;
use remote_core::encoder::Modality;
use remote_core::error::{Error, Result};
use remote_core::eval::{evaluate, write_expert_csv, write_metrics, write_plan_dumps, write_predictions};
use remote_core::gradcheck::grad_check;
use remote_core::model::Model;
use remote_core::synth::generate_synthetic;
use remote_core::tape::Tape;
use remote_core::train::{history_csv, train};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "remote-fusion", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic JSONL dataset with planted relation rules.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Train on a dataset; writes checkpoint, config copy and history CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Config override; defaults to config.json beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write metrics JSON here (also printed to stdout).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Write per-pair prediction JSONL here.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, value_name = "CSV")]
        dump_expert_weights: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        dump_plans: Option<PathBuf>,
    },
    /// Compare analytic gradients against central finite differences.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Dump the transport plan for one sample as CSV plus a JSON sidecar.
    InspectPlan {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample_id: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Which modality's plan to dump.
        #[arg(long, default_value = "vision")]
        modality: String,
        /// Target layer (1-based within the stack; 0 means all layers).
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Output directory for the CSV/JSON pair.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn sidecar_config(ckpt: &Path, explicit: Option<&PathBuf>) -> Result<RunConfig> {
    match explicit {
        Some(path) => RunConfig::from_file(path),
        None => {
            let dir = ckpt.parent().unwrap_or_else(|| Path::new("."));
            let path = dir.join("config.json");
            if !path.exists() {
                return Err(Error::Config(format!(
                    "no config.json beside checkpoint {}; pass --config",
                    ckpt.display()
                )));
            }
            RunConfig::from_file(&path)
        }
    }
}

fn load_model(ckpt: &Path, config: RunConfig) -> Result<Model<f32>> {
    let mut model = Model::<f32>::new(config, 0)?;
    checkpoint::apply(&mut model.params, ckpt)?;
    Ok(model)
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate {
            config,
            out,
            n,
            seed,
        } => {
            let config = RunConfig::from_file(&config)?;
            let samples = generate_synthetic(&config, n, seed)?;
            data::write_jsonl(&out, &samples)?;
            println!("wrote {} samples to {}", samples.len(), out.display());
        }
        Command::Train { config, data: data_path, out } => {
            let config = RunConfig::from_file(&config)?;
            let samples = data::load_dataset(&data_path, &config)?;
            let mut model = Model::<f32>::new(config.clone(), config.seed)?;
            let outcome = train(&mut model, &samples)?;
            std::fs::create_dir_all(&out)?;
            checkpoint::save(&model.params, &out.join("final"))?;
            std::fs::write(
                out.join("config.json"),
                serde_json::to_string_pretty(&config).map_err(Error::from)?,
            )?;
            std::fs::write(out.join("history.csv"), history_csv(&outcome.history))?;
            if let Some(m) = &outcome.final_metrics {
                write_metrics(&out.join("metrics.json"), m)?;
                println!(
                    "trained on {} samples ({} holdout): accuracy {:.4}, f1 {:.4}",
                    outcome.train_samples, outcome.holdout_samples, m.accuracy, m.f1
                );
            } else {
                println!(
                    "trained on {} samples (no holdout split)",
                    outcome.train_samples
                );
            }
            println!("checkpoint: {}", out.join("final").display());
        }
        Command::Eval {
            ckpt,
            data: data_path,
            config,
            metrics,
            predictions,
            dump_expert_weights,
            dump_plans,
        } => {
            let config = sidecar_config(&ckpt, config.as_ref())?;
            let samples = data::load_dataset(&data_path, &config)?;
            let model = load_model(&ckpt, config)?;
            let output = evaluate(&model, &samples, dump_plans.is_some())?;
            let rendered = serde_json::to_string_pretty(&output.metrics).map_err(Error::from)?;
            println!("{rendered}");
            if let Some(path) = metrics {
                write_metrics(&path, &output.metrics)?;
            }
            if let Some(path) = predictions {
                write_predictions(&path, &output.predictions)?;
            }
            if let Some(path) = dump_expert_weights {
                write_expert_csv(&path, &output.expert_rows)?;
            }
            if let Some(dir) = dump_plans {
                write_plan_dumps(&dir, &output.plans)?;
            }
        }
        Command::GradCheck { config, seed } => {
            let config = RunConfig::from_file(&config)?;
            let report = grad_check(&config, seed, None)?;
            println!("{report}");
            if !report.pass {
                return Err(Error::Numerical(
                    "gradient check failed; see report above".into(),
                ));
            }
        }
        Command::InspectPlan {
            ckpt,
            data: data_path,
            sample_id,
            config,
            modality,
            layer,
            out,
        } => {
            let config = sidecar_config(&ckpt, config.as_ref())?;
            let samples = data::load_dataset(&data_path, &config)?;
            let sample = samples
                .iter()
                .find(|s| s.sample_id == sample_id)
                .ok_or_else(|| Error::Data(format!("sample {sample_id} not found in dataset")))?;
            let model = load_model(&ckpt, config)?;
            let want = match modality.as_str() {
                "text" => Modality::Text,
                "vision" => Modality::Vision,
                other => {
                    return Err(Error::Config(format!(
                        "unknown modality {other}; expected text or vision"
                    )))
                }
            };
            let mut tape = Tape::<f32>::new(0, false);
            let fwd = model.forward_sample(&mut tape, sample)?;
            if fwd.plans.is_empty() {
                return Err(Error::Config(
                    "no transport plans: fusion is disabled or using the cross-attention variant"
                        .into(),
                ));
            }
            let selected: Vec<_> = fwd
                .plans
                .iter()
                .filter(|p| p.modality == want && (layer == 0 || p.layer == layer))
                .collect();
            if selected.is_empty() {
                return Err(Error::Config(format!(
                    "no plan for modality {modality} layer {layer}"
                )));
            }
            std::fs::create_dir_all(&out)?;
            for record in selected {
                let stem = format!("{sample_id}_{modality}_layer{}", record.layer);
                std::fs::write(out.join(format!("{stem}.csv")), record.plan.to_csv())?;
                std::fs::write(
                    out.join(format!("{stem}.json")),
                    serde_json::to_string_pretty(&record.plan.summary()).map_err(Error::from)?,
                )?;
                println!(
                    "{}: {} iterations, residual {:.3e}, cost {:.6}, entropy {:.6}",
                    stem,
                    record.plan.iterations,
                    record.plan.marginal_residual,
                    record.plan.transport_cost,
                    record.plan.entropy
                );
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
