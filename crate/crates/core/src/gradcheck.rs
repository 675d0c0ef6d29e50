//! Finite-difference gradient verification.
//!
//! Runs the full f64 model on a small fixed sample set, compares the tape's
//! analytic gradients against central finite differences for every
//! parameter, and reports the worst relative error per parameter group.
//!
//! Transport plans are solved once at the base point and frozen for every
//! finite-difference evaluation: the model deliberately treats the plan as a
//! constant during backward, so the derivative being checked is defined with
//! the plan held fixed. Dropout masks are pinned by reusing one tape seed.

use crate::config::RunConfig;
use crate::data::{assemble_sample, ItemRef, RawSample, SampleRecord};
use crate::error::Result;
use crate::model::Model;
use crate::ot::TransportPlan;
use crate::params::ParamId;
use crate::tape::{Tape, Var};
use serde::Serialize;

pub const FD_EPSILON: f64 = 1e-4;
pub const REL_ERR_THRESHOLD: f64 = 1e-3;
const TAPE_SEED: u64 = 0x67726164;

#[derive(Clone, Debug, Serialize)]
pub struct GroupReport {
    pub group: String,
    pub params: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub epsilon: f64,
    pub threshold: f64,
    pub groups: Vec<GroupReport>,
    pub pass: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "loss = {:.6}, epsilon = {:.0e}, threshold = {:.0e}", self.loss, self.epsilon, self.threshold)?;
        for g in &self.groups {
            writeln!(
                f,
                "  {:<12} {:>6} params   max rel err {:>12.3e}   {}",
                g.group,
                g.params,
                g.max_rel_err,
                if g.pass { "PASS" } else { "FAIL" }
            )?;
        }
        write!(f, "grad-check: {}", if self.pass { "PASS" } else { "FAIL" })
    }
}

/// The fixed probe sample: two entities, one object, spanning every pair
/// kind the classifier sees.
pub fn probe_sample(config: &RunConfig) -> Result<SampleRecord> {
    let g = config.grid;
    let mut rgb = Vec::with_capacity(g * g * 3);
    let mut depth = Vec::with_capacity(g * g);
    for y in 0..g {
        for x in 0..g {
            let v = ((x + 2 * y) % 5) as f32 * 0.2;
            rgb.push(v);
            rgb.push((1.0 - v).clamp(0.0, 1.0));
            rgb.push(0.5);
            depth.push(((x * y) % 4) as f32 * 0.25);
        }
    }
    let raw = RawSample {
        sample_id: "gradcheck_probe".into(),
        tokens: vec![10, 11, 12, 13],
        entity_spans: vec![(1, 2), (3, 4)],
        captions: vec![vec![14]],
        objects: vec![crate::data::ObjectDescriptor {
            rgb,
            depth,
            position: [0.5, 0.25, 0.4, 0.6],
            h: g,
            w: g,
        }],
        gold_triplets: vec![],
    };
    assemble_sample(&raw, config)
}

fn probe_pairs(n_relations: usize) -> Vec<((ItemRef, ItemRef), usize)> {
    vec![
        ((ItemRef::Entity(0), ItemRef::Entity(1)), 1 % n_relations),
        ((ItemRef::Entity(1), ItemRef::Entity(0)), 0),
        ((ItemRef::Entity(0), ItemRef::Object(0)), (n_relations - 1).min(3)),
        ((ItemRef::Object(0), ItemRef::Entity(1)), 2 % n_relations),
    ]
}

fn forward_loss(
    model: &Model<f64>,
    sample: &SampleRecord,
    pairs: &[((ItemRef, ItemRef), usize)],
    frozen: Option<&[TransportPlan]>,
) -> Result<(Tape<f64>, Var)> {
    let mut tape = Tape::<f64>::new(TAPE_SEED, true);
    let fwd = model.forward_sample_with_plans(&mut tape, sample, frozen)?;
    let mut total: Option<Var> = None;
    for &(pair, gold) in pairs {
        let l = model.pair_loss(&mut tape, &fwd, sample, pair, gold)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let total = total.expect("probe pairs");
    Ok((tape, total))
}

/// Compare analytic and finite-difference gradients for every parameter
/// group. `corrupt_group` deliberately perturbs one group's analytic
/// gradients (a fault-injection fixture: the report must fail on exactly
/// that group).
pub fn grad_check(
    config: &RunConfig,
    seed: u64,
    corrupt_group: Option<&str>,
) -> Result<GradCheckReport> {
    config.validate()?;
    let mut model = Model::<f64>::new(config.clone(), seed)?;
    let sample = probe_sample(config)?;
    let pairs = probe_pairs(config.relation_count());

    // Base pass: capture plans, loss and analytic gradients.
    let (mut tape, total) = forward_loss(&model, &sample, &pairs, None)?;
    let frozen: Vec<TransportPlan> = {
        let (t2, _) = forward_loss(&model, &sample, &pairs, None)?;
        drop(t2);
        let mut tape_probe = Tape::<f64>::new(TAPE_SEED, true);
        let fwd = model.forward_sample_with_plans(&mut tape_probe, &sample, None)?;
        fwd.plans.into_iter().map(|r| r.plan).collect()
    };
    let loss0 = tape.value(total).item();
    tape.backward(total)?;
    let mut analytic: Vec<Vec<f64>> = model
        .params
        .ids()
        .map(|id| vec![0.0; model.params.tensor(id).numel()])
        .collect();
    for &(pid, var) in tape.params_used() {
        if let Some(g) = tape.grad(var) {
            analytic[pid.0].copy_from_slice(g);
        }
    }
    if let Some(group) = corrupt_group {
        for id in model.params.ids() {
            if model.params.group(id) == group {
                for v in analytic[id.0].iter_mut() {
                    *v = *v * 1.01 + 1e-4;
                }
            }
        }
    }

    // Finite differences with frozen plans and the same dropout seed.
    let ids: Vec<ParamId> = model.params.ids().collect();
    let mut groups: Vec<GroupReport> = Vec::new();
    for id in ids {
        let group_name = model.params.group(id).to_string();
        let numel = model.params.tensor(id).numel();
        let mut worst = 0.0f64;
        for e in 0..numel {
            let orig = model.params.tensor(id).data()[e];
            model.params.tensor_mut(id).data_mut()[e] = orig + FD_EPSILON;
            let (tp, tv) = forward_loss(&model, &sample, &pairs, Some(&frozen))?;
            let up = tp.value(tv).item();
            model.params.tensor_mut(id).data_mut()[e] = orig - FD_EPSILON;
            let (tm, tv) = forward_loss(&model, &sample, &pairs, Some(&frozen))?;
            let down = tm.value(tv).item();
            model.params.tensor_mut(id).data_mut()[e] = orig;
            let fd = (up - down) / (2.0 * FD_EPSILON);
            let a = analytic[id.0][e];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
            }
        }
        match groups.iter_mut().find(|g| g.group == group_name) {
            Some(slot) => {
                slot.params += numel;
                if worst > slot.max_rel_err {
                    slot.max_rel_err = worst;
                    slot.pass = worst < REL_ERR_THRESHOLD;
                }
            }
            None => groups.push(GroupReport {
                group: group_name,
                params: numel,
                max_rel_err: worst,
                pass: worst < REL_ERR_THRESHOLD,
            }),
        }
    }
    let pass = groups.iter().all(|g| g.pass);
    Ok(GradCheckReport {
        loss: loss0,
        epsilon: FD_EPSILON,
        threshold: REL_ERR_THRESHOLD,
        groups,
        pass,
    })
}

/// The tiny configuration the gradient checker is specified against.
pub fn tiny_config() -> RunConfig {
    let mut config = RunConfig::default();
    config.d = 8;
    config.layers = 2;
    config.vocab_size = 16;
    config.grid = 2;
    config.patch_size = 1;
    config.dropout = 0.5;
    config.ffn_hidden = 8;
    config.classifier_hidden = 8;
    config
}
