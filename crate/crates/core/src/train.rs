//! Training loop: balanced pair sampling, per-sample tapes, fixed-order
//! gradient reduction and AdamW updates. Deterministic in (seed, config,
//! data).

use crate::config::NONE_RELATION;
use crate::data::{candidate_pairs, is_holdout, ItemRef, SampleRecord};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::Model;
use crate::optim::AdamW;
use crate::relation::Metrics;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Periodic holdout evaluation alongside the running train loss.
#[derive(Clone, Debug)]
pub struct HistoryRow {
    pub step: usize,
    pub train_loss: f64,
    pub metrics: Metrics,
}

pub struct TrainOutcome {
    pub history: Vec<HistoryRow>,
    /// Metrics of the final history row (holdout split).
    pub final_metrics: Option<Metrics>,
    pub train_samples: usize,
    pub holdout_samples: usize,
}

struct PairPools {
    gold: Vec<((ItemRef, ItemRef), usize)>,
    none: Vec<(ItemRef, ItemRef)>,
}

fn build_pools(sample: &SampleRecord, self_relations: bool) -> PairPools {
    let mut gold = Vec::new();
    let mut none = Vec::new();
    for pair in candidate_pairs(sample, self_relations) {
        let rel = sample.gold_relation(pair.0, pair.1);
        if rel == NONE_RELATION {
            none.push(pair);
        } else {
            gold.push((pair, rel));
        }
    }
    PairPools { gold, none }
}

fn mix_seed(base: u64, step: usize, sample: usize) -> u64 {
    let mut h = base ^ 0x517cc1b727220a95;
    h = h.wrapping_mul(0x9e3779b97f4a7c15) ^ (step as u64).wrapping_shl(17);
    h = h.wrapping_mul(0x9e3779b97f4a7c15) ^ (sample as u64);
    h
}

/// Split samples into (train, holdout) by id hash.
pub fn split_samples(
    samples: &[SampleRecord],
    holdout_fraction: f64,
) -> (Vec<&SampleRecord>, Vec<&SampleRecord>) {
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for s in samples {
        if is_holdout(&s.sample_id, holdout_fraction) {
            holdout.push(s);
        } else {
            train.push(s);
        }
    }
    (train, holdout)
}

/// Run `config.steps` optimizer steps on the train split; evaluate the
/// holdout split every `config.eval_every` steps and at the end.
pub fn train<S: Scalar>(model: &mut Model<S>, samples: &[SampleRecord]) -> Result<TrainOutcome> {
    let config = model.config.clone();
    let (train_set, holdout) = split_samples(samples, config.holdout_fraction);
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let pools: Vec<PairPools> = train_set
        .iter()
        .map(|s| build_pools(s, config.self_relations))
        .collect();
    if pools.iter().all(|p| p.gold.is_empty()) {
        return Err(Error::Data(
            "no gold relation pairs anywhere in the training split".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x747261696e);
    let mut optimizer = AdamW::new(&config, &model.params);
    let mut history = Vec::new();
    let mut loss_accum = 0.0f64;
    let mut loss_pairs = 0usize;

    for step in 0..config.steps {
        // Draw a balanced batch: for each picked sample, up to two gold and
        // two none pairs, until batch_size pairs are queued.
        let mut batch: BTreeMap<usize, Vec<((ItemRef, ItemRef), usize)>> = BTreeMap::new();
        let mut queued = 0usize;
        let mut guard = 0usize;
        while queued < config.batch_size && guard < config.batch_size * 64 {
            guard += 1;
            let si = rng.random_range(0..train_set.len());
            let pool = &pools[si];
            if pool.gold.is_empty() {
                continue;
            }
            let slot = batch.entry(si).or_default();
            for _ in 0..2 {
                if queued < config.batch_size {
                    let (pair, rel) = pool.gold[rng.random_range(0..pool.gold.len())];
                    slot.push((pair, rel));
                    queued += 1;
                }
                if queued < config.batch_size && !pool.none.is_empty() {
                    let pair = pool.none[rng.random_range(0..pool.none.len())];
                    slot.push((pair, NONE_RELATION));
                    queued += 1;
                }
            }
        }

        let mut batch_grads: Vec<Option<Vec<S>>> = vec![None; model.params.len()];
        let mut step_loss = 0.0f64;
        let mut step_pairs = 0usize;
        for (si, pairs) in &batch {
            let sample = train_set[*si];
            let mut tape = Tape::<S>::new(mix_seed(config.seed, step, *si), true);
            let fwd = model.forward_sample(&mut tape, sample)?;
            let mut total: Option<Var> = None;
            for (pair, rel) in pairs {
                let l = model.pair_loss(&mut tape, &fwd, sample, *pair, *rel)?;
                total = Some(match total {
                    None => l,
                    Some(acc) => tape.add(acc, l)?,
                });
            }
            let total = total.expect("non-empty pair group");
            let value = tape.value(total).item().to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at step {step} on sample {}{}",
                    sample.sample_id,
                    offending_group(model, &batch_grads)
                )));
            }
            step_loss += value;
            step_pairs += pairs.len();
            tape.backward(total)?;
            for &(pid, var) in tape.params_used() {
                if let Some(g) = tape.grad(var) {
                    let slot = batch_grads[pid.0]
                        .get_or_insert_with(|| vec![S::zero(); g.len()]);
                    for (s, &gv) in slot.iter_mut().zip(g) {
                        *s += gv;
                    }
                }
            }
        }
        if step_pairs == 0 {
            return Err(Error::Data(format!("empty batch at step {step}")));
        }
        let inv = S::from_f64(1.0 / step_pairs as f64);
        for g in batch_grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v = *v * inv;
            }
        }
        if let Some(group) = non_finite_group(model, &batch_grads) {
            return Err(Error::Numerical(format!(
                "non-finite gradient at step {step} in parameter group {group}"
            )));
        }
        optimizer.step(&mut model.params, &batch_grads);

        loss_accum += step_loss;
        loss_pairs += step_pairs;

        let last = step + 1 == config.steps;
        if (step + 1) % config.eval_every == 0 || last {
            let eval_set: Vec<SampleRecord> = holdout.iter().map(|s| (*s).clone()).collect();
            let metrics = if eval_set.is_empty() {
                None
            } else {
                Some(evaluate(model, &eval_set, false)?.metrics)
            };
            if let Some(metrics) = metrics {
                history.push(HistoryRow {
                    step: step + 1,
                    train_loss: loss_accum / loss_pairs.max(1) as f64,
                    metrics,
                });
            }
            loss_accum = 0.0;
            loss_pairs = 0;
        }
    }

    let final_metrics = history.last().map(|h| h.metrics.clone());
    Ok(TrainOutcome {
        history,
        final_metrics,
        train_samples: train_set.len(),
        holdout_samples: holdout.len(),
    })
}

fn non_finite_group<S: Scalar>(model: &Model<S>, grads: &[Option<Vec<S>>]) -> Option<String> {
    for (idx, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.iter().any(|v| !v.is_finite()) {
                return Some(
                    model
                        .params
                        .group(crate::params::ParamId(idx))
                        .to_string(),
                );
            }
        }
    }
    None
}

fn offending_group<S: Scalar>(model: &Model<S>, grads: &[Option<Vec<S>>]) -> String {
    match non_finite_group(model, grads) {
        Some(g) => format!(" (parameter group {g})"),
        None => String::new(),
    }
}

/// `step,train_loss,accuracy,precision,recall,f1` per history row.
pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from("step,train_loss,accuracy,precision,recall,f1\n");
    for row in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.step,
            row.train_loss,
            row.metrics.accuracy,
            row.metrics.precision,
            row.metrics.recall,
            row.metrics.f1
        ));
    }
    out
}
