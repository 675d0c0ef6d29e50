//! End-to-end model: encoders, multilevel fusion, cross-modal interaction,
//! expert routing and the relation head, with every ablation switch wired
//! through the run configuration.

use crate::attention::{interact, CrossAttnParams};
use crate::config::RunConfig;
use crate::data::{ItemRef, SampleRecord, MASK};
use crate::encoder::{
    embed_text, encode_multilevel, patchify_object, BlockParams, Modality,
};
use crate::error::{Error, Result};
use crate::fusion::{enhance_multilevel, MotConfig, PlanRecord};
use crate::moe::{mix, route, uniform_weights, ExpertSet, MixedRepresentation, RouterParams};
use crate::params::{ParamId, ParamStore};
use crate::relation::{classify, entity_repr, loss, object_repr, pad_entity, ClassifierParams};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Layout {
    pub embed: ParamId,
    pub text_blocks: Vec<BlockParams>,
    pub vision_blocks: Vec<BlockParams>,
    pub w_rgb: ParamId,
    pub w_depth: ParamId,
    pub alpha_text: Vec<ParamId>,
    pub alpha_vision: Vec<ParamId>,
    pub text_query: CrossAttnParams,
    pub vision_query: CrossAttnParams,
    pub router: RouterParams,
    pub classifier: ClassifierParams,
}

pub struct Model<S: Scalar> {
    pub config: RunConfig,
    pub params: ParamStore<S>,
    pub layout: Layout,
}

/// Everything a sample's forward pass produces that pair scoring needs.
pub struct SampleForward {
    pub mixed: MixedRepresentation,
    /// Routing distribution values in canonical expert order.
    pub expert_weights: Vec<f64>,
    pub plans: Vec<PlanRecord>,
    pub rows_per_object: usize,
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Tensor::new(shape, data).expect("init shape")
}

impl<S: Scalar> Model<S> {
    /// Deterministic initialization: parameters are drawn in f64 in a fixed
    /// registration order and cast, so every scalar instantiation sees the
    /// same underlying values.
    pub fn new(config: RunConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let hidden = config.ffn_hidden_width();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f64656c);
        let mut store64: ParamStore<f64> = ParamStore::new();
        let s = config.init_scale;
        let gain = config.init_scale * config.encoder_gain;

        let embed = store64.register(
            "embed.table",
            uniform_tensor(&mut rng, vec![config.vocab_size, d], s),
        );

        let make_blocks = |prefix: &str, store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng| {
            (1..config.layers)
                .map(|j| BlockParams {
                    w_q: store.register(
                        format!("{prefix}.block{j}.w_q"),
                        uniform_tensor(rng, vec![d, d], gain),
                    ),
                    w_k: store.register(
                        format!("{prefix}.block{j}.w_k"),
                        uniform_tensor(rng, vec![d, d], gain),
                    ),
                    w_v: store.register(
                        format!("{prefix}.block{j}.w_v"),
                        uniform_tensor(rng, vec![d, d], gain),
                    ),
                    w_ff1: store.register(
                        format!("{prefix}.block{j}.w_ff1"),
                        uniform_tensor(rng, vec![d, hidden], gain),
                    ),
                    b_ff1: store.register(format!("{prefix}.block{j}.b_ff1"), Tensor::zeros(vec![hidden])),
                    w_ff2: store.register(
                        format!("{prefix}.block{j}.w_ff2"),
                        uniform_tensor(rng, vec![hidden, d], gain),
                    ),
                    b_ff2: store.register(format!("{prefix}.block{j}.b_ff2"), Tensor::zeros(vec![d])),
                })
                .collect::<Vec<_>>()
        };
        let text_blocks = make_blocks("text_enc", &mut store64, &mut rng);
        let vision_blocks = make_blocks("vis_enc", &mut store64, &mut rng);

        let p2 = config.patch_size * config.patch_size;
        let w_rgb = store64.register(
            "patch.w_rgb",
            uniform_tensor(&mut rng, vec![3 * p2, d], s),
        );
        let w_depth = store64.register(
            "patch.w_depth",
            uniform_tensor(&mut rng, vec![p2, d], s),
        );

        // raw gates start at 0: alpha = 0.5, an even mix
        let alpha_text = (1..config.layers)
            .map(|l| store64.register(format!("mot_alpha.text.{l}"), Tensor::zeros(vec![d])))
            .collect();
        let alpha_vision = (1..config.layers)
            .map(|l| store64.register(format!("mot_alpha.vision.{l}"), Tensor::zeros(vec![d])))
            .collect();

        let xattn = |tag: &str, store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng| CrossAttnParams {
            w_q: store.register(format!("xattn.{tag}.w_q"), uniform_tensor(rng, vec![d, d], s)),
            w_k: store.register(format!("xattn.{tag}.w_k"), uniform_tensor(rng, vec![d, d], s)),
            w_h: store.register(format!("xattn.{tag}.w_h"), uniform_tensor(rng, vec![d, d], s)),
        };
        let text_query = xattn("text_q", &mut store64, &mut rng);
        let vision_query = xattn("vision_q", &mut store64, &mut rng);

        let experts = config.expert_count();
        let router = RouterParams {
            p_route: store64.register(
                "router.p_route",
                uniform_tensor(&mut rng, vec![experts * d, experts], s),
            ),
        };

        let cls_hidden = config.classifier_hidden_width();
        let n_rel = config.relation_count();
        let classifier = ClassifierParams {
            w1: store64.register(
                "classifier.w1",
                uniform_tensor(&mut rng, vec![4 * d, cls_hidden], s),
            ),
            b1: store64.register("classifier.b1", Tensor::zeros(vec![cls_hidden])),
            w2: store64.register(
                "classifier.w2",
                uniform_tensor(&mut rng, vec![cls_hidden, n_rel], s),
            ),
            b2: store64.register("classifier.b2", Tensor::zeros(vec![n_rel])),
        };

        Ok(Model {
            config,
            params: store64.cast::<S>(),
            layout: Layout {
                embed,
                text_blocks,
                vision_blocks,
                w_rgb,
                w_depth,
                alpha_text,
                alpha_vision,
                text_query,
                vision_query,
                router,
                classifier,
            },
        })
    }

    pub fn rows_per_object(&self) -> usize {
        2 * self.config.patches_per_object()
    }

    /// Expert mask in canonical order from the ablation flags: text-row
    /// cross experts carry vision-to-text information, vision-row cross
    /// experts text-to-vision.
    pub fn expert_mask(&self) -> Vec<bool> {
        let l = self.config.layers;
        let e = self.config.ablation.experts;
        let mut mask = Vec::with_capacity(2 * l + 2);
        mask.extend(std::iter::repeat(e.v2t).take(l));
        mask.extend(std::iter::repeat(e.t2v).take(l));
        mask.push(e.t);
        mask.push(e.v);
        mask
    }

    /// Forward pass for one sample up to the mixed representation.
    pub fn forward_sample(&self, tape: &mut Tape<S>, sample: &SampleRecord) -> Result<SampleForward> {
        self.forward_sample_with_plans(tape, sample, None)
    }

    /// Forward pass with optionally pre-solved transport plans (text layers
    /// first, then vision, each in layer order). The gradient checker pins
    /// plans this way; normal runs pass `None`.
    pub fn forward_sample_with_plans(
        &self,
        tape: &mut Tape<S>,
        sample: &SampleRecord,
        frozen: Option<&[crate::ot::TransportPlan]>,
    ) -> Result<SampleForward> {
        let cfg = &self.config;
        let d = cfg.d;
        let flags = cfg.ablation.features;

        // caption ablation blanks caption interiors before encoding
        let tokens: Vec<usize> = if flags.caption {
            sample.tokens.clone()
        } else {
            let mut t = sample.tokens.clone();
            for &(s, e) in &sample.caption_spans {
                for tok in &mut t[s..e] {
                    *tok = MASK;
                }
            }
            t
        };

        let text0 = embed_text(tape, &self.params, self.layout.embed, &tokens, d)?;
        let text_raw = encode_multilevel(tape, &self.params, text0, &self.layout.text_blocks, Modality::Text)?;

        let mut object_vars = Vec::with_capacity(sample.objects.len());
        for obj in &sample.objects {
            if obj.h != cfg.grid || obj.w != cfg.grid {
                return Err(Error::Data(format!(
                    "sample {}: object grid {}x{} does not match configured grid {}",
                    sample.sample_id, obj.h, obj.w, cfg.grid
                )));
            }
            object_vars.push(patchify_object(
                tape,
                &self.params,
                self.layout.w_rgb,
                self.layout.w_depth,
                obj,
                cfg.patch_size,
                d,
                flags.position,
                flags.depth,
            )?);
        }
        let vision0 = tape.concat(&object_vars)?;
        let vision_raw =
            encode_multilevel(tape, &self.params, vision0, &self.layout.vision_blocks, Modality::Vision)?;

        let mot = MotConfig {
            lambda: cfg.lambda,
            tol: cfg.sinkhorn_tol,
            max_iter: cfg.sinkhorn_max_iter,
            variant: cfg.ablation.mot_variant,
        };
        let mut plans = Vec::new();
        let (text_enh, vision_enh) = if cfg.ablation.disable_mot {
            (text_raw, vision_raw)
        } else {
            let per_modality = cfg.layers - 1;
            let (frozen_t, frozen_v) = match frozen {
                Some(all) => {
                    if all.len() != 2 * per_modality {
                        return Err(Error::Contract(format!(
                            "expected {} frozen plans, got {}",
                            2 * per_modality,
                            all.len()
                        )));
                    }
                    (Some(&all[..per_modality]), Some(&all[per_modality..]))
                }
                None => (None, None),
            };
            let (t, mut pt) = enhance_multilevel(
                tape,
                &self.params,
                &text_raw,
                &self.layout.alpha_text,
                &mot,
                frozen_t,
            )?;
            let (v, mut pv) = enhance_multilevel(
                tape,
                &self.params,
                &vision_raw,
                &self.layout.alpha_vision,
                &mot,
                frozen_v,
            )?;
            plans.append(&mut pt);
            plans.append(&mut pv);
            (t, v)
        };

        let inter = interact(
            tape,
            &self.params,
            &text_enh,
            &vision_enh,
            &self.layout.text_query,
            &self.layout.vision_query,
        )?;
        let set = ExpertSet::new(
            inter.text_rows,
            inter.vision_rows,
            text_enh.top(),
            vision_enh.top(),
        );
        let mask = self.expert_mask();
        let weights = if cfg.ablation.disable_mmoe {
            uniform_weights(tape, &set, &mask)
        } else {
            route(tape, &self.params, &set, &self.layout.router, &mask)?
        };
        let expert_weights = tape
            .value(weights)
            .data()
            .iter()
            .map(|v| v.to_f64_lossy())
            .collect();
        let mixed = mix(tape, &set, weights)?;

        Ok(SampleForward {
            mixed,
            expert_weights,
            plans,
            rows_per_object: self.rows_per_object(),
        })
    }

    /// Representation of one relation argument, padded to the shared width.
    pub fn item_repr(
        &self,
        tape: &mut Tape<S>,
        fwd: &SampleForward,
        sample: &SampleRecord,
        item: ItemRef,
    ) -> Result<Var> {
        match item {
            ItemRef::Entity(i) => {
                let span = *sample.entity_spans.get(i).ok_or_else(|| {
                    Error::Contract(format!("entity {i} missing in sample {}", sample.sample_id))
                })?;
                let v = entity_repr(tape, &fwd.mixed, span, self.config.span_repr)?;
                pad_entity(tape, v, self.config.d)
            }
            ItemRef::Object(i) => {
                let span = *sample.caption_spans.get(i).ok_or_else(|| {
                    Error::Contract(format!("object {i} missing in sample {}", sample.sample_id))
                })?;
                object_repr(
                    tape,
                    &fwd.mixed,
                    span,
                    i,
                    fwd.rows_per_object,
                    self.config.span_repr,
                )
            }
        }
    }

    /// Relation logits for one candidate pair.
    pub fn pair_logits(
        &self,
        tape: &mut Tape<S>,
        fwd: &SampleForward,
        sample: &SampleRecord,
        pair: (ItemRef, ItemRef),
    ) -> Result<Var> {
        let head = self.item_repr(tape, fwd, sample, pair.0)?;
        let tail = self.item_repr(tape, fwd, sample, pair.1)?;
        classify(
            tape,
            &self.params,
            head,
            tail,
            &self.layout.classifier,
            self.config.dropout,
        )
    }

    /// Cross-entropy loss for one candidate pair.
    pub fn pair_loss(
        &self,
        tape: &mut Tape<S>,
        fwd: &SampleForward,
        sample: &SampleRecord,
        pair: (ItemRef, ItemRef),
        gold: usize,
    ) -> Result<Var> {
        let logits = self.pair_logits(tape, fwd, sample, pair)?;
        loss(tape, logits, gold)
    }
}
