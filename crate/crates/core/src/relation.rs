//! Relation head: pair representations, the shared MLP classifier,
//! cross-entropy loss and evaluation metrics.
//!
//! Entity representations pool the mixed text-side rows over the span
//! interior (markers excluded; a config switch selects the opening-marker
//! row instead). Object representations concatenate the caption-span pool
//! with the pool of that object's visual rows. One MLP serves every pair
//! kind: entity vectors are zero-padded to object width so the four
//! head/tail width combinations share parameters.

use crate::config::{RunConfig, SpanRepr, NONE_RELATION};
use crate::error::{Error, Result};
use crate::moe::MixedRepresentation;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug)]
pub struct ClassifierParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Pool a span of text-side rows into a `d` vector.
pub fn entity_repr<S: Scalar>(
    tape: &mut Tape<S>,
    mixed: &MixedRepresentation,
    span: (usize, usize),
    span_repr: SpanRepr,
) -> Result<Var> {
    let (start, end) = span;
    let rows = tape.shape(mixed.text_side)[0];
    if start >= end || end > rows {
        return Err(Error::Contract(format!(
            "empty or out-of-bounds span ({start}, {end}) over {rows} rows"
        )));
    }
    match span_repr {
        SpanRepr::Mean => {
            let slice = tape.narrow(mixed.text_side, start, end - start)?;
            tape.mean_axis(slice, 0)
        }
        SpanRepr::Marker => {
            // interior starts one past the opening marker
            let marker = start.checked_sub(1).ok_or_else(|| {
                Error::Contract(format!("span ({start}, {end}) has no opening marker"))
            })?;
            let row = tape.narrow(mixed.text_side, marker, 1)?;
            let d = tape.shape(row)[1];
            tape.reshape(row, vec![d])
        }
    }
}

/// Caption-span pool concatenated with the pool of the object's visual rows:
/// a `2d` vector.
pub fn object_repr<S: Scalar>(
    tape: &mut Tape<S>,
    mixed: &MixedRepresentation,
    caption_span: (usize, usize),
    object_index: usize,
    rows_per_object: usize,
    span_repr: SpanRepr,
) -> Result<Var> {
    let text_part = entity_repr(tape, mixed, caption_span, span_repr)?;
    let vis_rows = tape.shape(mixed.vision_side)[0];
    let start = object_index * rows_per_object;
    if start + rows_per_object > vis_rows {
        return Err(Error::Contract(format!(
            "object {object_index} rows [{start}, {}) exceed {vis_rows} visual rows",
            start + rows_per_object
        )));
    }
    let block = tape.narrow(mixed.vision_side, start, rows_per_object)?;
    let vis_part = tape.mean_axis(block, 0)?;
    tape.concat(&[text_part, vis_part])
}

/// Zero-pad a `d` entity vector to the `2d` object width so one classifier
/// serves all pair kinds.
pub fn pad_entity<S: Scalar>(tape: &mut Tape<S>, v: Var, d: usize) -> Result<Var> {
    let zeros = tape.constant(Tensor::zeros(vec![d]));
    tape.concat(&[v, zeros])
}

/// Two-layer MLP over `[h_head, h_tail]`: logits over the relation
/// vocabulary. Dropout applies to the hidden layer in train mode.
pub fn classify<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    head: Var,
    tail: Var,
    params: &ClassifierParams,
    dropout: f64,
) -> Result<Var> {
    let pair = tape.concat(&[head, tail])?;
    let w1 = tape.param(store, params.w1);
    let in_width = tape.shape(w1)[0];
    if tape.shape(pair) != [in_width] {
        return Err(Error::Config(format!(
            "classifier input width {:?} does not match parameters {:?}",
            tape.shape(pair),
            tape.shape(w1)
        )));
    }
    let row = tape.reshape(pair, vec![1, in_width])?;
    let b1 = tape.param(store, params.b1);
    let w2 = tape.param(store, params.w2);
    let b2 = tape.param(store, params.b2);
    let h = tape.matmul(row, w1)?;
    let h = tape.add(h, b1)?;
    let h = tape.tanh(h);
    let h = tape.dropout(h, dropout)?;
    let logits = tape.matmul(h, w2)?;
    let logits = tape.add(logits, b2)?;
    let n = tape.shape(logits)[1];
    tape.reshape(logits, vec![n])
}

/// Argmax with lowest-id tie-break.
pub fn predict<S: Scalar>(logits: &[S]) -> usize {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy against the gold relation id: `-log softmax(logits)[gold]`.
pub fn loss<S: Scalar>(tape: &mut Tape<S>, logits: Var, gold: usize) -> Result<Var> {
    let n = tape.shape(logits)[0];
    if gold >= n {
        return Err(Error::Data(format!(
            "gold relation id {gold} outside vocabulary of {n}"
        )));
    }
    let logp = tape.log_softmax(logits)?;
    let picked = tape.narrow(logp, gold, 1)?;
    Ok(tape.neg(picked))
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct RelationCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub support: usize,
}

/// Accuracy over all pairs, micro precision/recall/F1 treating `none` as the
/// negative class, plus macro variants and per-relation counts.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub total: usize,
    pub correct: usize,
    pub per_relation: BTreeMap<String, RelationCounts>,
}

/// Score aligned prediction/gold lists.
pub fn score(predictions: &[usize], golds: &[usize], config: &RunConfig) -> Result<Metrics> {
    if predictions.len() != golds.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} golds",
            predictions.len(),
            golds.len()
        )));
    }
    let n_rel = config.relation_count();
    let mut counts: Vec<RelationCounts> = (0..n_rel)
        .map(|_| RelationCounts {
            tp: 0,
            fp: 0,
            fn_: 0,
            support: 0,
        })
        .collect();
    let mut correct = 0usize;
    for (&p, &g) in predictions.iter().zip(golds) {
        if p >= n_rel || g >= n_rel {
            return Err(Error::Data(format!(
                "relation id out of range: pred {p}, gold {g}, vocabulary {n_rel}"
            )));
        }
        if p == g {
            correct += 1;
        }
        counts[g].support += 1;
        if g != NONE_RELATION && p == g {
            counts[g].tp += 1;
        }
        if p != NONE_RELATION && p != g {
            counts[p].fp += 1;
        }
        if g != NONE_RELATION && p != g {
            counts[g].fn_ += 1;
        }
    }
    let total = predictions.len();
    let accuracy = if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    };

    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (id, c) in counts.iter().enumerate() {
        if id == NONE_RELATION {
            continue;
        }
        tp += c.tp;
        fp += c.fp;
        fn_ += c.fn_;
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };

    let mut macro_p = 0.0;
    let mut macro_r = 0.0;
    let mut macro_f = 0.0;
    let mut macro_n = 0usize;
    for (id, c) in counts.iter().enumerate() {
        if id == NONE_RELATION {
            continue;
        }
        let p = ratio(c.tp, c.tp + c.fp);
        let r = ratio(c.tp, c.tp + c.fn_);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        macro_p += p;
        macro_r += r;
        macro_f += f;
        macro_n += 1;
    }
    let macro_n = macro_n.max(1) as f64;

    let per_relation = counts
        .iter()
        .enumerate()
        .map(|(id, c)| (config.relation_name(id).to_string(), c.clone()))
        .collect();

    Ok(Metrics {
        accuracy,
        precision,
        recall,
        f1,
        macro_precision: macro_p / macro_n,
        macro_recall: macro_r / macro_n,
        macro_f1: macro_f / macro_n,
        total,
        correct,
        per_relation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mixed(tape: &mut Tape<f64>, text: Tensor<f64>, vision: Tensor<f64>) -> MixedRepresentation {
        MixedRepresentation {
            text_side: tape.constant(text),
            vision_side: tape.constant(vision),
        }
    }

    #[test]
    fn entity_repr_single_row_span() {
        let mut tape = Tape::<f64>::new(0, false);
        let m = mixed(
            &mut tape,
            Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap(),
            Tensor::zeros(vec![2, 2]),
        );
        let v = entity_repr(&mut tape, &m, (1, 2), SpanRepr::Mean).unwrap();
        assert_eq!(tape.value(v).data(), &[3.0, 4.0]);
    }

    #[test]
    fn entity_repr_mean_over_span() {
        let mut tape = Tape::<f64>::new(0, false);
        let m = mixed(
            &mut tape,
            Tensor::from_rows(&[
                vec![0.0, 0.0],
                vec![0.0, 0.0],
                vec![2.0, 8.0],
                vec![4.0, 2.0],
                vec![0.0, 0.0],
            ])
            .unwrap(),
            Tensor::zeros(vec![2, 2]),
        );
        let v = entity_repr(&mut tape, &m, (2, 4), SpanRepr::Mean).unwrap();
        assert_eq!(tape.value(v).data(), &[3.0, 5.0]);
    }

    #[test]
    fn entity_repr_rejects_empty_span() {
        let mut tape = Tape::<f64>::new(0, false);
        let m = mixed(&mut tape, Tensor::zeros(vec![3, 2]), Tensor::zeros(vec![2, 2]));
        assert!(entity_repr(&mut tape, &m, (1, 1), SpanRepr::Mean).is_err());
    }

    #[test]
    fn marker_mode_reads_opening_marker_row() {
        let mut tape = Tape::<f64>::new(0, false);
        let m = mixed(
            &mut tape,
            Tensor::from_rows(&[vec![9.0, 9.0], vec![1.0, 2.0], vec![7.0, 7.0]]).unwrap(),
            Tensor::zeros(vec![2, 2]),
        );
        let v = entity_repr(&mut tape, &m, (2, 3), SpanRepr::Marker).unwrap();
        assert_eq!(tape.value(v).data(), &[1.0, 2.0], "row before interior");
    }

    #[test]
    fn object_repr_concatenates_pools() {
        let mut tape = Tape::<f64>::new(0, false);
        let m = mixed(
            &mut tape,
            Tensor::from_rows(&[vec![1.0, 1.0], vec![5.0, 7.0]]).unwrap(),
            Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 2.0], vec![10.0, 10.0], vec![20.0, 30.0]]).unwrap(),
        );
        let v = object_repr(&mut tape, &m, (1, 2), 0, 2, SpanRepr::Mean).unwrap();
        assert_eq!(tape.value(v).data(), &[5.0, 7.0, 2.0, 1.0]);
        let v1 = object_repr(&mut tape, &m, (1, 2), 1, 2, SpanRepr::Mean).unwrap();
        assert_eq!(tape.value(v1).data(), &[5.0, 7.0, 15.0, 20.0]);
    }

    #[test]
    fn zero_classifier_predicts_relation_zero_by_tie_break() {
        let mut store = ParamStore::<f64>::new();
        let params = ClassifierParams {
            w1: store.register("c.w1", Tensor::zeros(vec![4, 3])),
            b1: store.register("c.b1", Tensor::zeros(vec![3])),
            w2: store.register("c.w2", Tensor::zeros(vec![3, 5])),
            b2: store.register("c.b2", Tensor::zeros(vec![5])),
        };
        let mut tape = Tape::<f64>::new(0, false);
        let head = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let tail = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let logits = classify(&mut tape, &store, head, tail, &params, 0.0).unwrap();
        let vals = tape.value(logits).data();
        assert!(vals.iter().all(|&v| v == 0.0), "uniform logits");
        assert_eq!(predict(vals), 0);
    }

    #[test]
    fn crafted_weights_isolate_one_relation() {
        let mut store = ParamStore::<f64>::new();
        let mut w2 = Tensor::zeros(vec![2, 3]);
        w2.data_mut()[0 * 3 + 2] = 5.0; // hidden unit 0 votes for relation 2
        let params = ClassifierParams {
            w1: store.register("c.w1", {
                let mut t = Tensor::zeros(vec![2, 2]);
                t.data_mut()[0] = 10.0; // input 0 drives hidden 0
                t
            }),
            b1: store.register("c.b1", Tensor::zeros(vec![2])),
            w2: store.register("c.w2", w2),
            b2: store.register("c.b2", Tensor::zeros(vec![3])),
        };
        let mut tape = Tape::<f64>::new(0, false);
        let head = tape.constant(Tensor::vector(vec![1.0]));
        let tail = tape.constant(Tensor::vector(vec![0.0]));
        let logits = classify(&mut tape, &store, head, tail, &params, 0.0).unwrap();
        assert_eq!(predict(tape.value(logits).data()), 2);
    }

    #[test]
    fn loss_closed_forms() {
        let mut tape = Tape::<f64>::new(0, false);
        for r in [2usize, 3, 28] {
            let logits = tape.constant(Tensor::vector(vec![0.0; r]));
            let l = loss(&mut tape, logits, 0).unwrap();
            assert!(
                (tape.value(l).item() - (r as f64).ln()).abs() < 1e-12,
                "uniform logits give ln(R)"
            );
        }
        // saturated correct
        let mut logits = vec![0.0; 4];
        logits[2] = 30.0;
        let logits = tape.constant(Tensor::vector(logits));
        let l = loss(&mut tape, logits, 2).unwrap();
        assert!(tape.value(l).item() < 1e-9);
        // scripted value
        let logits = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let l = loss(&mut tape, logits, 2).unwrap();
        assert!((tape.value(l).item() - 0.40760596444438).abs() < 1e-9);
    }

    #[test]
    fn loss_rejects_out_of_range_gold() {
        let mut tape = Tape::<f64>::new(0, false);
        let logits = tape.constant(Tensor::vector(vec![0.0; 3]));
        assert!(loss(&mut tape, logits, 3).is_err());
    }

    #[test]
    fn logit_shift_preserves_argmax_and_loss_gaps() {
        let mut tape = Tape::<f64>::new(0, false);
        let base = vec![0.3, -1.2, 2.0, 0.9];
        let shifted: Vec<f64> = base.iter().map(|v| v + 57.25).collect();
        assert_eq!(predict(&base), predict(&shifted));
        let a = tape.constant(Tensor::vector(base));
        let b = tape.constant(Tensor::vector(shifted));
        let la = loss(&mut tape, a, 2).unwrap();
        let lb = loss(&mut tape, b, 2).unwrap();
        assert!((tape.value(la).item() - tape.value(lb).item()).abs() < 1e-9);
    }

    fn test_config() -> RunConfig {
        RunConfig::default()
    }

    #[test]
    fn score_all_correct() {
        let cfg = test_config();
        let m = score(&[1, 2, 3, 1], &[1, 2, 3, 1], &cfg).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.f1, 1.0);
    }

    #[test]
    fn score_all_none_predictions_degenerate() {
        let cfg = test_config();
        let m = score(&[0, 0, 0], &[1, 2, 0], &cfg).unwrap();
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.precision, 0.0, "undefined precision reported as 0");
        assert_eq!(m.f1, 0.0);
        assert!((m.accuracy - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn score_hand_counted_batch() {
        let cfg = test_config();
        // 3 TP (gold 1 pred 1), 1 FP (gold 0 pred 2), 2 FN (gold 3 pred 0)
        let preds = [1, 1, 1, 2, 0, 0];
        let golds = [1, 1, 1, 0, 3, 3];
        let m = score(&preds, &golds, &cfg).unwrap();
        assert!((m.precision - 0.75).abs() < 1e-12);
        assert!((m.recall - 0.6).abs() < 1e-12);
        assert!((m.f1 - 2.0 * 0.75 * 0.6 / 1.35).abs() < 1e-9);
    }

    #[test]
    fn score_is_order_invariant() {
        let cfg = test_config();
        let preds = [1, 0, 2, 2, 3, 0];
        let golds = [1, 2, 2, 0, 3, 0];
        let a = score(&preds, &golds, &cfg).unwrap();
        let perm = [3usize, 0, 5, 2, 4, 1];
        let pp: Vec<usize> = perm.iter().map(|&i| preds[i]).collect();
        let pg: Vec<usize> = perm.iter().map(|&i| golds[i]).collect();
        let b = score(&pp, &pg, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn score_rejects_misaligned_lists() {
        let cfg = test_config();
        assert!(score(&[1, 2], &[1], &cfg).is_err());
    }
}
