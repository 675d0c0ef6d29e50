//! Evaluation: enumerate candidate pairs, classify with dropout disabled,
//! score, and produce the optional dump artifacts (prediction JSONL, expert
//! weight CSV, transport plan CSVs).

use crate::data::{candidate_pairs, ItemRef, SampleRecord};
use crate::error::Result;
use crate::fusion::PlanRecord;
use crate::model::Model;
use crate::relation::{predict, score, Metrics};
use crate::scalar::Scalar;
use crate::tape::Tape;
use serde::Serialize;
use std::io::Write;
use std::path::Path;

#[derive(Clone, Debug, Serialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub head_ref: ItemRef,
    pub tail_ref: ItemRef,
    pub gold: usize,
    pub pred: usize,
    pub logits: Vec<f64>,
}

/// One CSV row per scored pair: that sample's expert weights.
#[derive(Clone, Debug)]
pub struct ExpertRow {
    pub sample_id: String,
    pub gold: String,
    pub pred: String,
    pub weights: Vec<f64>,
}

pub struct EvalOutput {
    pub metrics: Metrics,
    pub predictions: Vec<PredictionRecord>,
    pub expert_rows: Vec<ExpertRow>,
    pub plans: Vec<(String, PlanRecord)>,
}

/// Evaluate a model over samples. Deterministic: dropout is off and tapes
/// are seeded per sample index. `collect_plans` keeps transport diagnostics
/// for dumping (they are produced anyway; collection just retains them).
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    samples: &[SampleRecord],
    collect_plans: bool,
) -> Result<EvalOutput> {
    let mut predictions = Vec::new();
    let mut expert_rows = Vec::new();
    let mut plans = Vec::new();
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    for (idx, sample) in samples.iter().enumerate() {
        let mut tape = Tape::<S>::new(idx as u64, false);
        let fwd = model.forward_sample(&mut tape, sample)?;
        for pair in candidate_pairs(sample, model.config.self_relations) {
            let logits_var = model.pair_logits(&mut tape, &fwd, sample, pair)?;
            let logits: Vec<f64> = tape
                .value(logits_var)
                .data()
                .iter()
                .map(|v| v.to_f64_lossy())
                .collect();
            let gold = sample.gold_relation(pair.0, pair.1);
            let pred = predict(&logits);
            preds.push(pred);
            golds.push(gold);
            expert_rows.push(ExpertRow {
                sample_id: sample.sample_id.clone(),
                gold: model.config.relation_name(gold).to_string(),
                pred: model.config.relation_name(pred).to_string(),
                weights: fwd.expert_weights.clone(),
            });
            predictions.push(PredictionRecord {
                sample_id: sample.sample_id.clone(),
                head_ref: pair.0,
                tail_ref: pair.1,
                gold,
                pred,
                logits,
            });
        }
        if collect_plans {
            for record in fwd.plans {
                plans.push((sample.sample_id.clone(), record));
            }
        }
    }
    let metrics = score(&preds, &golds, &model.config)?;
    Ok(EvalOutput {
        metrics,
        predictions,
        expert_rows,
        plans,
    })
}

pub fn write_predictions(path: &Path, predictions: &[PredictionRecord]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in predictions {
        serde_json::to_writer(&mut file, p)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

pub fn write_metrics(path: &Path, metrics: &Metrics) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(metrics)?)?;
    Ok(())
}

/// CSV schema: `sample_id, relation_gold, relation_pred, w_0 .. w_{2L+1}`.
pub fn write_expert_csv(path: &Path, rows: &[ExpertRow]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let n = rows.first().map_or(0, |r| r.weights.len());
    let header: Vec<String> = ["sample_id", "relation_gold", "relation_pred"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..n).map(|i| format!("w_{i}")))
        .collect();
    writeln!(file, "{}", header.join(","))?;
    for r in rows {
        let ws: Vec<String> = r.weights.iter().map(|w| w.to_string()).collect();
        writeln!(file, "{},{},{},{}", r.sample_id, r.gold, r.pred, ws.join(","))?;
    }
    file.flush()?;
    Ok(())
}

/// One CSV plus one JSON sidecar per (sample, modality, layer).
pub fn write_plan_dumps(dir: &Path, plans: &[(String, PlanRecord)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (sample_id, record) in plans {
        let modality = match record.modality {
            crate::encoder::Modality::Text => "text",
            crate::encoder::Modality::Vision => "vision",
        };
        let stem = format!("{sample_id}_{modality}_layer{}", record.layer);
        std::fs::write(dir.join(format!("{stem}.csv")), record.plan.to_csv())?;
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&record.plan.summary())?,
        )?;
    }
    Ok(())
}
