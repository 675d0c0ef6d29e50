//! Multilevel fusion: pull low-layer detail into each higher layer.
//!
//! For every layer `l >= 1` the raw layers below it form the source set, the
//! layer itself the target. A solver aligns the two (entropic OT by default,
//! a parameter-free cross-attention variant for the ablation), the aligned
//! source rows are transported onto target rows, and a learnable sigmoid
//! gate mixes the transported features with the originals.
//!
//! The transport plan is treated as a constant during backward: gradients
//! reach the lower layers only through the matrix product `plan . source`
//! and reach the gate through the mix. The Sinkhorn iterations themselves
//! are never differentiated.

use crate::config::MotVariant;
use crate::encoder::MultilevelFeatures;
use crate::error::Result;
use crate::ot::{cosine_cost, sinkhorn, OtProblem, TransportPlan};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Solver settings for one fusion pass.
#[derive(Clone, Copy, Debug)]
pub struct MotConfig {
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub variant: MotVariant,
}

/// Diagnostics for one solve: which modality and target layer it served.
pub struct PlanRecord {
    pub modality: crate::encoder::Modality,
    pub layer: usize,
    pub plan: TransportPlan,
}

/// Barycentric transport of source rows onto target rows, rescaled by the
/// target row count so each output row is a unit-mass convex combination of
/// source rows (plan rows carry mass `1/a` under uniform weights).
pub fn transport_features<S: Scalar>(
    tape: &mut Tape<S>,
    plan: &TransportPlan,
    mu: Var,
) -> Result<Var> {
    let a = plan.plan.shape()[0];
    let plan_const = tape.constant(plan.plan.cast::<S>());
    let moved = tape.matmul(plan_const, mu)?;
    Ok(tape.mul_scalar(moved, S::from_usize(a)))
}

/// Gated mix `sigmoid(alpha_raw) . original + (1 - sigmoid(alpha_raw)) .
/// transported`, per feature dimension.
pub fn fuse<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    original: Var,
    transported: Var,
    alpha_raw: ParamId,
) -> Result<Var> {
    let raw = tape.param(store, alpha_raw);
    let alpha = tape.sigmoid(raw);
    let neg = tape.neg(alpha);
    let one_minus = tape.add_scalar(neg, S::one());
    let kept = tape.mul(alpha, original)?;
    let moved = tape.mul(one_minus, transported)?;
    tape.add(kept, moved)
}

/// Enhance every layer of a feature stack. Layer 0 passes through; each
/// layer `l >= 1` is fused with features transported from the concatenation
/// of raw layers `0..l`. Returns the enhanced stack plus solver diagnostics
/// (empty for the cross-attention variant).
///
/// `frozen` supplies pre-solved plans (one per enhanced layer, in layer
/// order) instead of running the solver; the gradient checker uses this to
/// hold the plan constant across finite-difference evaluations, matching the
/// backward semantics.
pub fn enhance_multilevel<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    features: &MultilevelFeatures,
    alphas: &[ParamId],
    cfg: &MotConfig,
    frozen: Option<&[TransportPlan]>,
) -> Result<(MultilevelFeatures, Vec<PlanRecord>)> {
    let layers = &features.layers;
    assert_eq!(alphas.len(), layers.len() - 1, "one gate per enhanced layer");
    let mut enhanced = vec![layers[0]];
    let mut records = Vec::new();
    for l in 1..layers.len() {
        let source = tape.concat(&layers[..l])?;
        let target = layers[l];
        let transported = match cfg.variant {
            MotVariant::OptimalTransport => {
                let plan = match frozen {
                    Some(plans) => plans
                        .get(l - 1)
                        .ok_or_else(|| {
                            crate::error::Error::Contract(format!(
                                "frozen plan missing for layer {l}"
                            ))
                        })?
                        .clone(),
                    None => {
                        let mu = tape.value(source).cast::<f64>();
                        let nu = tape.value(target).cast::<f64>();
                        let (cost, flagged) = cosine_cost(&mu, &nu)?;
                        let problem = OtProblem::uniform(cost, cfg.lambda)?;
                        let mut plan = sinkhorn(&problem, cfg.max_iter, cfg.tol)?;
                        plan.zero_norm_rows = flagged;
                        plan
                    }
                };
                let moved = transport_features(tape, &plan, source)?;
                records.push(PlanRecord {
                    modality: features.modality,
                    layer: l,
                    plan,
                });
                moved
            }
            MotVariant::CrossAttention => {
                // Source rows are keys and values, target rows queries.
                let d = tape.shape(target)[1];
                let st = tape.transpose(source)?;
                let scores = tape.matmul(target, st)?;
                let scores = tape.mul_scalar(scores, S::from_f64(1.0 / (d as f64).sqrt()));
                let attn = tape.softmax(scores);
                tape.matmul(attn, source)?
            }
        };
        enhanced.push(fuse(tape, store, target, transported, alphas[l - 1])?);
    }
    Ok((
        MultilevelFeatures {
            layers: enhanced,
            modality: features.modality,
        },
        records,
    ))
}
