//! Toy multilevel encoders standing in for the pretrained text/vision stacks.
//!
//! Layer 0 is the raw embedding (token embeddings plus sinusoidal positions
//! for text; patch projections plus deterministic position encodings for
//! vision). Each later layer applies a single-head self-attention block with
//! residuals and a two-layer feed-forward, so upper layers mix positions and
//! progressively blur per-position detail — the phenomenon the multilevel
//! fusion module is built to counteract.
//!
//! The text position encoding deliberately includes a few exact short
//! integer periods (2, 3, 4, 6) ahead of the usual geometric frequencies,
//! so nearby-position structure is linearly readable at layer 0.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Exact integer periods occupying the first channels of the text position
/// encoding (sin/cos per period).
pub const TEXT_PERIODIC: [f64; 4] = [2.0, 3.0, 4.0, 6.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Text,
    Vision,
}

/// Per-layer feature stack for one modality of one sample.
pub struct MultilevelFeatures {
    pub layers: Vec<Var>,
    pub modality: Modality,
}

impl MultilevelFeatures {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn top(&self) -> Var {
        *self.layers.last().expect("at least one layer")
    }
}

/// One toy transformer block: self-attention + residual, feed-forward +
/// residual. No layer norm.
#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_ff1: ParamId,
    pub b_ff1: ParamId,
    pub w_ff2: ParamId,
    pub b_ff2: ParamId,
}

/// Sinusoidal text position encoding, `n x d`. The first
/// `2 * TEXT_PERIODIC.len()` channels hold the exact short periods; the rest
/// follow the usual geometric frequency ladder.
pub fn text_position_encoding<S: Scalar>(n: usize, d: usize) -> Tensor<S> {
    let periodic = 2 * TEXT_PERIODIC.len();
    assert!(d >= periodic, "d must fit the periodic channels");
    let mut data = Vec::with_capacity(n * d);
    let tail = d - periodic;
    for p in 0..n {
        let pos = p as f64;
        for (k, period) in TEXT_PERIODIC.iter().enumerate() {
            let angle = 2.0 * std::f64::consts::PI * pos / period;
            data.push(S::from_f64(angle.sin()));
            data.push(S::from_f64(angle.cos()));
            let _ = k;
        }
        for j in 0..tail {
            let pair = j / 2;
            let freq = 1.0 / 10_000f64.powf(2.0 * pair as f64 / tail.max(1) as f64);
            let angle = pos * freq;
            data.push(S::from_f64(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![n, d], data).expect("position encoding shape")
}

/// Deterministic position encoding for one object's patches, `u x d`:
/// sinusoids over (patch row, patch col, cx, cy, w, h), one attribute per
/// channel round-robin with geometrically growing frequencies.
pub fn object_position_encoding<S: Scalar>(
    patches_per_side: usize,
    bbox: [f32; 4],
    d: usize,
) -> Tensor<S> {
    let u = patches_per_side * patches_per_side;
    let mut data = Vec::with_capacity(u * d);
    let denom = patches_per_side.max(1) as f64;
    for patch in 0..u {
        let pr = (patch / patches_per_side) as f64 / denom;
        let pc = (patch % patches_per_side) as f64 / denom;
        let attrs = [
            pr,
            pc,
            bbox[0] as f64,
            bbox[1] as f64,
            bbox[2] as f64,
            bbox[3] as f64,
        ];
        for j in 0..d {
            let a = attrs[j % 6];
            let k = j / 6;
            let freq = std::f64::consts::PI * (1 << (k % 6).min(5)) as f64;
            let angle = a * freq;
            data.push(S::from_f64(if (k / 6) % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![u, d], data).expect("object position encoding shape")
}

/// Flatten an object's grids into per-patch rows.
/// RGB rows are `3 * P^2` wide (pixel row-major, channels innermost), depth
/// rows `P^2` wide. Patches are ordered row-major over the patch grid.
fn patch_rows(obj: &crate::data::ObjectDescriptor, patch: usize) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
    let (h, w) = (obj.h, obj.w);
    let per_side_r = h / patch;
    let per_side_c = w / patch;
    let mut rgb_rows = Vec::with_capacity(per_side_r * per_side_c);
    let mut depth_rows = Vec::with_capacity(per_side_r * per_side_c);
    for pr in 0..per_side_r {
        for pc in 0..per_side_c {
            let mut rgb = Vec::with_capacity(patch * patch * 3);
            let mut dep = Vec::with_capacity(patch * patch);
            for py in 0..patch {
                for px in 0..patch {
                    let y = pr * patch + py;
                    let x = pc * patch + px;
                    let base = (y * w + x) * 3;
                    rgb.extend_from_slice(&obj.rgb[base..base + 3]);
                    dep.push(obj.depth[y * w + x]);
                }
            }
            rgb_rows.push(rgb);
            depth_rows.push(dep);
        }
    }
    (rgb_rows, depth_rows)
}

/// Patch features for one object: `2u x d` rows, the RGB half stacked over
/// the depth half, both carrying the shared position encoding by element-wise
/// addition. `use_position` / `use_depth` zero the corresponding channel.
#[allow(clippy::too_many_arguments)]
pub fn patchify_object<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    w_rgb: ParamId,
    w_depth: ParamId,
    obj: &crate::data::ObjectDescriptor,
    patch: usize,
    d: usize,
    use_position: bool,
    use_depth: bool,
) -> Result<Var> {
    if patch == 0 || obj.h % patch != 0 || obj.w % patch != 0 {
        return Err(Error::Config(format!(
            "grid {}x{} not divisible by patch size {patch}",
            obj.h, obj.w
        )));
    }
    if obj.h != obj.w {
        return Err(Error::Data(format!(
            "object grids must be square, got {}x{}",
            obj.h, obj.w
        )));
    }
    let (rgb_rows, depth_rows) = patch_rows(obj, patch);
    let to_tensor = |rows: &[Vec<f32>]| -> Result<Tensor<S>> {
        Tensor::from_rows(
            &rows
                .iter()
                .map(|r| r.iter().map(|&v| S::from_f64(v as f64)).collect())
                .collect::<Vec<_>>(),
        )
    };
    let rgb_in = tape.constant(to_tensor(&rgb_rows)?);
    let depth_src = if use_depth {
        to_tensor(&depth_rows)?
    } else {
        Tensor::zeros(vec![depth_rows.len(), depth_rows[0].len()])
    };
    let depth_in = tape.constant(depth_src);

    let w_rgb = tape.param(store, w_rgb);
    let w_depth = tape.param(store, w_depth);
    let e_rgb = tape.matmul(rgb_in, w_rgb)?;
    let e_depth = tape.matmul(depth_in, w_depth)?;

    let per_side = obj.h / patch;
    let e_pos = if use_position {
        object_position_encoding::<S>(per_side, obj.position, d)
    } else {
        Tensor::zeros(vec![per_side * per_side, d])
    };
    let e_pos = tape.constant(e_pos);

    let rgb_half = tape.add(e_rgb, e_pos)?;
    let depth_half = tape.add(e_depth, e_pos)?;
    tape.concat(&[rgb_half, depth_half])
}

/// Token embedding plus position encoding: the text layer-0 features.
pub fn embed_text<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    table: ParamId,
    tokens: &[usize],
    d: usize,
) -> Result<Var> {
    let table = tape.param(store, table);
    let embedded = tape.embed(table, tokens)?;
    let pos = tape.constant(text_position_encoding::<S>(tokens.len(), d));
    tape.add(embedded, pos)
}

/// Run the toy block stack: layer 0 is the input, each further layer applies
/// attention + residual then feed-forward + residual.
pub fn encode_multilevel<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    input: Var,
    blocks: &[BlockParams],
    modality: Modality,
) -> Result<MultilevelFeatures> {
    if blocks.is_empty() {
        return Err(Error::Config("encoder needs at least 2 layers".into()));
    }
    let d = tape.shape(input)[1];
    let scale = S::from_f64(1.0 / (d as f64).sqrt());
    let mut layers = vec![input];
    let mut x = input;
    for block in blocks {
        let w_q = tape.param(store, block.w_q);
        let w_k = tape.param(store, block.w_k);
        let w_v = tape.param(store, block.w_v);
        let q = tape.matmul(x, w_q)?;
        let k = tape.matmul(x, w_k)?;
        let v = tape.matmul(x, w_v)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.mul_scalar(scores, scale);
        let attn = tape.softmax(scores);
        let mixed = tape.matmul(attn, v)?;
        let h = tape.add(x, mixed)?;

        let w1 = tape.param(store, block.w_ff1);
        let b1 = tape.param(store, block.b_ff1);
        let w2 = tape.param(store, block.w_ff2);
        let b2 = tape.param(store, block.b_ff2);
        let ff = tape.matmul(h, w1)?;
        let ff = tape.add(ff, b1)?;
        let ff = tape.tanh(ff);
        let ff = tape.matmul(ff, w2)?;
        let ff = tape.add(ff, b2)?;
        let out = tape.add(h, ff)?;
        layers.push(out);
        x = out;
    }
    Ok(MultilevelFeatures { layers, modality })
}
