//! Hierarchical bidirectional cross-modal attention.
//!
//! The top enhanced level of one modality queries every enhanced level of
//! the other. Output row counts follow the query side, which is what lets
//! the downstream mixture keep text-row and vision-row experts separate:
//! text-row experts come from text queries attending to vision levels, and
//! vice versa. One projection triple is shared across levels per query
//! direction.

use crate::encoder::MultilevelFeatures;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct CrossAttnParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_h: ParamId,
}

/// Cross-modal interaction features, named by their row space: `text_rows[j]`
/// has text-query rows attending to vision level `j`, `vision_rows[j]` the
/// reverse. Both lists have length `L`.
pub struct InteractionFeatures {
    pub text_rows: Vec<Var>,
    pub vision_rows: Vec<Var>,
}

/// Single-head scaled dot-product cross-attention:
/// `softmax(query W_q (kv W_k)^T / sqrt(d)) . (kv W_h)`.
pub fn cross_attend<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    query_src: Var,
    kv_src: Var,
    params: &CrossAttnParams,
) -> Result<Var> {
    let (dq, dk) = (tape.shape(query_src)[1], tape.shape(kv_src)[1]);
    if dq != dk {
        return Err(Error::dimension(
            "cross_attend",
            tape.shape(query_src),
            tape.shape(kv_src),
        ));
    }
    let w_q = tape.param(store, params.w_q);
    let w_k = tape.param(store, params.w_k);
    let w_h = tape.param(store, params.w_h);
    let q = tape.matmul(query_src, w_q)?;
    let k = tape.matmul(kv_src, w_k)?;
    let h = tape.matmul(kv_src, w_h)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.mul_scalar(scores, S::from_f64(1.0 / (dq as f64).sqrt()));
    let attn = tape.softmax(scores);
    tape.matmul(attn, h)
}

/// Build all `2L` interaction tensors from the two enhanced stacks.
pub fn interact<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    text: &MultilevelFeatures,
    vision: &MultilevelFeatures,
    text_query: &CrossAttnParams,
    vision_query: &CrossAttnParams,
) -> Result<InteractionFeatures> {
    if text.depth() != vision.depth() {
        return Err(Error::Config(format!(
            "modalities disagree on level count: {} vs {}",
            text.depth(),
            vision.depth()
        )));
    }
    let text_top = text.top();
    let vision_top = vision.top();
    let mut text_rows = Vec::with_capacity(vision.depth());
    let mut vision_rows = Vec::with_capacity(text.depth());
    for j in 0..text.depth() {
        text_rows.push(cross_attend(tape, store, text_top, vision.layers[j], text_query)?);
        vision_rows.push(cross_attend(tape, store, vision_top, text.layers[j], vision_query)?);
    }
    Ok(InteractionFeatures {
        text_rows,
        vision_rows,
    })
}
