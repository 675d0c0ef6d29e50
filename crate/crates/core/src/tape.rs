//! Tape-based reverse-mode automatic differentiation over [`Tensor`].
//!
//! A [`Tape`] records operations during the forward pass (define-by-run, so
//! the node list is topologically ordered by construction) and replays them
//! in reverse to accumulate gradients. One training step builds and consumes
//! one tape; tapes are single-writer and never shared across samples.
//!
//! Broadcasting is deliberately narrow: scalar–tensor and row-vector–matrix
//! only. Every other shape mismatch is an error naming both shapes.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    ScalarLhs,
    ScalarRhs,
    RowLhs,
    RowRhs,
}

enum Op<S> {
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var),
    Mul(Var, Var, Broadcast),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, S),
    Matmul(Var, Var),
    Transpose(Var),
    Concat(Vec<Var>),
    Narrow(Var, usize, usize),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    MeanAxis(Var, usize),
    SumAll(Var),
    Embed(Var, Vec<usize>),
    Dropout(Var, Vec<S>),
}

struct Node<S> {
    value: Tensor<S>,
    needs_grad: bool,
    op: Op<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    rng: ChaCha8Rng,
    train_mode: bool,
    params_used: Vec<(ParamId, Var)>,
    param_lookup: HashMap<ParamId, Var>,
}

impl<S: Scalar> Tape<S> {
    /// `seed` drives dropout masks; `train_mode = false` makes dropout the
    /// identity.
    pub fn new(seed: u64, train_mode: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            train_mode,
            params_used: Vec::new(),
            param_lookup: HashMap::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train_mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, needs_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    /// Leaf carrying a value that participates in differentiation.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf treated as a constant: no gradient ever flows into it.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Trainable parameter leaf, memoized so repeated uses share one node and
    /// fan-out accumulates into a single gradient buffer.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.param_lookup.get(&id) {
            return v;
        }
        let v = self.leaf(store.tensor(id).clone(), true);
        self.param_lookup.insert(id, v);
        self.params_used.push((id, v));
        v
    }

    /// Parameters touched by this tape, in first-use order.
    pub fn params_used(&self) -> &[(ParamId, Var)] {
        &self.params_used
    }

    // ---- elementwise and broadcast arithmetic ------------------------------

    fn classify_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Broadcast::None);
        }
        if self.value(a).numel() == 1 {
            return Ok(Broadcast::ScalarLhs);
        }
        if self.value(b).numel() == 1 {
            return Ok(Broadcast::ScalarRhs);
        }
        if sa.len() == 1 && sb.len() == 2 && sa[0] == sb[1] {
            return Ok(Broadcast::RowLhs);
        }
        if sb.len() == 1 && sa.len() == 2 && sb[0] == sa[1] {
            return Ok(Broadcast::RowRhs);
        }
        Err(Error::dimension(op, sa, sb))
    }

    fn broadcast_zip(
        &self,
        a: Var,
        b: Var,
        bc: Broadcast,
        f: impl Fn(S, S) -> S,
    ) -> Tensor<S> {
        let (ta, tb) = (self.value(a), self.value(b));
        match bc {
            Broadcast::None => {
                let data = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect();
                Tensor::new(ta.shape().to_vec(), data).unwrap()
            }
            Broadcast::ScalarLhs => {
                let s = ta.item();
                tb.map(|y| f(s, y))
            }
            Broadcast::ScalarRhs => {
                let s = tb.item();
                ta.map(|x| f(x, s))
            }
            Broadcast::RowLhs => {
                let c = ta.numel();
                let data = tb
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| f(ta.data()[i % c], y))
                    .collect();
                Tensor::new(tb.shape().to_vec(), data).unwrap()
            }
            Broadcast::RowRhs => {
                let c = tb.numel();
                let data = ta
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, tb.data()[i % c]))
                    .collect();
                Tensor::new(ta.shape().to_vec(), data).unwrap()
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.classify_broadcast("add", a, b)?;
        let value = self.broadcast_zip(a, b, bc, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, ng, Op::Add(a, b, bc)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dimension("sub", self.shape(a), self.shape(b)));
        }
        let value = self.broadcast_zip(a, b, Broadcast::None, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, ng, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.classify_broadcast("mul", a, b)?;
        let value = self.broadcast_zip(a, b, bc, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, ng, Op::Mul(a, b, bc)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dimension("div", self.shape(a), self.shape(b)));
        }
        let value = self.broadcast_zip(a, b, Broadcast::None, |x, y| x / y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, ng, Op::Div(a, b)))
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let value = self.value(a).map(|x| x + c);
        let ng = self.needs(a);
        self.push(value, ng, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: S) -> Var {
        let value = self.value(a).map(|x| x * c);
        let ng = self.needs(a);
        self.push(value, ng, Op::MulScalar(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -S::one())
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dimension("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let ta = self.value(a);
        let tb = self.value(b);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let arow = ta.row(i);
            let orow = &mut out[i * n..(i + 1) * n];
            for (l, &ail) in arow.iter().enumerate().take(k) {
                if ail == S::zero() {
                    continue;
                }
                let brow = tb.row(l);
                for j in 0..n {
                    orow[j] += ail * brow[j];
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, ng, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::dimension("transpose", sa, &[]));
        }
        let (r, c) = (sa[0], sa[1]);
        let ta = self.value(a);
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ta.at(i, j);
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        let ng = self.needs(a);
        Ok(self.push(value, ng, Op::Transpose(a)))
    }

    // ---- structure ---------------------------------------------------------

    /// Concatenate along axis 0 (vectors end to end, matrices by rows).
    pub fn concat(&mut self, vars: &[Var]) -> Result<Var> {
        if vars.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let first = self.shape(vars[0]).to_vec();
        let inner: usize = first.iter().skip(1).product();
        let rank = first.len();
        let mut rows = 0usize;
        for &v in vars {
            let s = self.shape(v);
            if s.len() != rank || s.iter().skip(1).product::<usize>() != inner {
                return Err(Error::dimension("concat", &first, s));
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * inner.max(1));
        for &v in vars {
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = first;
        shape[0] = rows;
        let value = Tensor::new(shape, data)?;
        let ng = vars.iter().any(|&v| self.needs(v));
        Ok(self.push(value, ng, Op::Concat(vars.to_vec())))
    }

    /// Slice `len` entries along axis 0 starting at `start`.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() || start + len > sa[0] {
            return Err(Error::Contract(format!(
                "narrow [{start}, {}) out of bounds for shape {:?}",
                start + len,
                sa
            )));
        }
        let inner: usize = sa.iter().skip(1).product();
        let data = self.value(a).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = sa;
        shape[0] = len;
        let value = Tensor::new(shape, data)?;
        let ng = self.needs(a);
        Ok(self.push(value, ng, Op::Narrow(a, start, len)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let ng = self.needs(a);
        Ok(self.push(value, ng, Op::Reshape(a)))
    }

    // ---- reductions --------------------------------------------------------

    /// Mean along `axis`. 2-D: axis 0 pools rows to a vector, axis 1 pools
    /// columns. 1-D: axis 0 yields a scalar.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let ta = self.value(a);
        let value = match (sa.len(), axis) {
            (1, 0) => {
                let n = S::from_usize(sa[0]);
                Tensor::scalar(ta.data().iter().copied().sum::<S>() / n)
            }
            (2, 0) => {
                let (r, c) = (sa[0], sa[1]);
                let mut out = vec![S::zero(); c];
                for i in 0..r {
                    for (j, o) in out.iter_mut().enumerate() {
                        *o += ta.at(i, j);
                    }
                }
                let n = S::from_usize(r);
                Tensor::vector(out.into_iter().map(|v| v / n).collect())
            }
            (2, 1) => {
                let (r, c) = (sa[0], sa[1]);
                let n = S::from_usize(c);
                let out = (0..r)
                    .map(|i| ta.row(i).iter().copied().sum::<S>() / n)
                    .collect();
                Tensor::vector(out)
            }
            _ => return Err(Error::dimension("mean_axis", &sa, &[axis])),
        };
        let ng = self.needs(a);
        Ok(self.push(value, ng, Op::MeanAxis(a, axis)))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum::<S>();
        let ng = self.needs(a);
        self.push(Tensor::scalar(total), ng, Op::SumAll(a))
    }

    // ---- nonlinearities ----------------------------------------------------

    /// Softmax along the last axis (per row for matrices), stabilized by max
    /// subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_tensor(self.value(a));
        let ng = self.needs(a);
        self.push(value, ng, Op::Softmax(a))
    }

    /// Log-softmax over a vector, stabilized; used by the cross-entropy loss.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 1 {
            return Err(Error::dimension("log_softmax", self.shape(a), &[]));
        }
        let ta = self.value(a);
        let max = ta
            .data()
            .iter()
            .copied()
            .fold(S::neg_infinity(), |m, v| if v > m { v } else { m });
        let lse = ta
            .data()
            .iter()
            .map(|&v| (v - max).exp())
            .sum::<S>()
            .ln()
            + max;
        let value = ta.map(|v| v - lse);
        let ng = self.needs(a);
        Ok(self.push(value, ng, Op::LogSoftmax(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = S::one();
        let value = self.value(a).map(|x| one / (one + (-x).exp()));
        let ng = self.needs(a);
        self.push(value, ng, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        let ng = self.needs(a);
        self.push(value, ng, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.exp());
        let ng = self.needs(a);
        self.push(value, ng, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.ln());
        let ng = self.needs(a);
        self.push(value, ng, Op::Log(a))
    }

    // ---- lookups and regularization -----------------------------------------

    /// Gather rows of `table` at `indices`; backward scatter-adds.
    pub fn embed(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::dimension("embed", &st, &[indices.len()]));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::Data(format!(
                "token id {bad} out of vocabulary range {v}"
            )));
        }
        let tt = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(tt.row(i));
        }
        let value = Tensor::new(vec![indices.len(), d], data)?;
        let ng = self.needs(table);
        Ok(self.push(value, ng, Op::Embed(table, indices.to_vec())))
    }

    /// Inverted dropout: train mode zeroes entries with probability `rate`
    /// and rescales survivors by 1/(1-rate); eval mode is the identity. The
    /// mask is recorded on the tape so backward sees the same pattern.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.train_mode || rate == 0.0 {
            return Ok(a);
        }
        let keep = S::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<S> = (0..self.value(a).numel())
            .map(|_| {
                if self.rng.random::<f64>() < rate {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a);
        Ok(self.push(value, ng, Op::Dropout(a, mask)))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss. Populates the gradient of every
    /// `requires_grad` leaf reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![S::one()]);

        let nodes = &self.nodes;
        let grads = &mut self.grads;

        for i in (0..nodes.len()).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b, bc) => {
                    accum_broadcast(nodes, grads, *a, &g, *bc, Side::Lhs, |_x, _y| S::one());
                    accum_broadcast(nodes, grads, *b, &g, *bc, Side::Rhs, |_x, _y| S::one());
                }
                Op::Sub(a, b) => {
                    accum(nodes, grads, *a, g.iter().copied());
                    accum(nodes, grads, *b, g.iter().map(|&v| -v));
                }
                Op::Mul(a, b, bc) => {
                    let (va, vb) = (*a, *b);
                    {
                        let other = nodes[vb.0].value.clone();
                        accum_mul(nodes, grads, va, &g, *bc, Side::Lhs, &other);
                    }
                    {
                        let other = nodes[va.0].value.clone();
                        accum_mul(nodes, grads, vb, &g, *bc, Side::Rhs, &other);
                    }
                }
                Op::Div(a, b) => {
                    let ta = nodes[a.0].value.data().to_vec();
                    let tb = nodes[b.0].value.data().to_vec();
                    accum(
                        nodes,
                        grads,
                        *a,
                        g.iter().zip(&tb).map(|(&gv, &bv)| gv / bv),
                    );
                    accum(
                        nodes,
                        grads,
                        *b,
                        g.iter()
                            .zip(ta.iter().zip(&tb))
                            .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv)),
                    );
                }
                Op::AddScalar(a) => accum(nodes, grads, *a, g.iter().copied()),
                Op::MulScalar(a, c) => {
                    let c = *c;
                    accum(nodes, grads, *a, g.iter().map(|&v| v * c));
                }
                Op::Matmul(a, b) => {
                    let (m, k) = {
                        let s = nodes[a.0].value.shape();
                        (s[0], s[1])
                    };
                    let n = nodes[b.0].value.shape()[1];
                    if nodes[a.0].needs_grad {
                        let tb = &nodes[b.0].value;
                        let mut da = vec![S::zero(); m * k];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            let darow = &mut da[i * k..(i + 1) * k];
                            for (l, slot) in darow.iter_mut().enumerate() {
                                let brow = tb.row(l);
                                let mut acc = S::zero();
                                for j in 0..n {
                                    acc += grow[j] * brow[j];
                                }
                                *slot += acc;
                            }
                        }
                        accum(nodes, grads, *a, da.into_iter());
                    }
                    if nodes[b.0].needs_grad {
                        let ta = &nodes[a.0].value;
                        let mut db = vec![S::zero(); k * n];
                        for i in 0..m {
                            let arow = ta.row(i);
                            let grow = &g[i * n..(i + 1) * n];
                            for (l, &ail) in arow.iter().enumerate() {
                                if ail == S::zero() {
                                    continue;
                                }
                                let dbrow = &mut db[l * n..(l + 1) * n];
                                for j in 0..n {
                                    dbrow[j] += ail * grow[j];
                                }
                            }
                        }
                        accum(nodes, grads, *b, db.into_iter());
                    }
                }
                Op::Transpose(a) => {
                    let (c, r) = {
                        let s = nodes[i].value.shape();
                        (s[0], s[1])
                    };
                    // output is c x r; input was r x c
                    let mut da = vec![S::zero(); r * c];
                    for j in 0..c {
                        for ii in 0..r {
                            da[ii * c + j] = g[j * r + ii];
                        }
                    }
                    accum(nodes, grads, *a, da.into_iter());
                }
                Op::Concat(vars) => {
                    let mut offset = 0usize;
                    let vars = vars.clone();
                    for v in vars {
                        let n = nodes[v.0].value.numel();
                        let slice = g[offset..offset + n].to_vec();
                        accum(nodes, grads, v, slice.into_iter());
                        offset += n;
                    }
                }
                Op::Narrow(a, start, _len) => {
                    let inner: usize = nodes[a.0].value.shape().iter().skip(1).product();
                    let offset = start * inner.max(1);
                    let total = nodes[a.0].value.numel();
                    let mut da = vec![S::zero(); total];
                    da[offset..offset + g.len()].copy_from_slice(&g);
                    accum(nodes, grads, *a, da.into_iter());
                }
                Op::Reshape(a) => accum(nodes, grads, *a, g.iter().copied()),
                Op::MeanAxis(a, axis) => {
                    let sa = nodes[a.0].value.shape().to_vec();
                    match (sa.len(), axis) {
                        (1, 0) => {
                            let n = S::from_usize(sa[0]);
                            let gv = g[0] / n;
                            accum(nodes, grads, *a, std::iter::repeat(gv).take(sa[0]));
                        }
                        (2, 0) => {
                            let (r, c) = (sa[0], sa[1]);
                            let n = S::from_usize(r);
                            let da: Vec<S> =
                                (0..r * c).map(|idx| g[idx % c] / n).collect();
                            accum(nodes, grads, *a, da.into_iter());
                        }
                        (2, 1) => {
                            let (r, c) = (sa[0], sa[1]);
                            let n = S::from_usize(c);
                            let da: Vec<S> =
                                (0..r * c).map(|idx| g[idx / c] / n).collect();
                            accum(nodes, grads, *a, da.into_iter());
                        }
                        _ => unreachable!("validated at record time"),
                    }
                }
                Op::SumAll(a) => {
                    let n = nodes[a.0].value.numel();
                    accum(nodes, grads, *a, std::iter::repeat(g[0]).take(n));
                }
                Op::Softmax(a) => {
                    let y = nodes[i].value.clone();
                    let cols = y.cols();
                    let mut da = vec![S::zero(); y.numel()];
                    for row in 0..y.numel() / cols {
                        let ys = &y.data()[row * cols..(row + 1) * cols];
                        let gs = &g[row * cols..(row + 1) * cols];
                        let dot = ys
                            .iter()
                            .zip(gs)
                            .map(|(&yv, &gv)| yv * gv)
                            .sum::<S>();
                        for j in 0..cols {
                            da[row * cols + j] = ys[j] * (gs[j] - dot);
                        }
                    }
                    accum(nodes, grads, *a, da.into_iter());
                }
                Op::LogSoftmax(a) => {
                    let y = &nodes[i].value;
                    let gsum = g.iter().copied().sum::<S>();
                    let da: Vec<S> = y
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&lv, &gv)| gv - lv.exp() * gsum)
                        .collect();
                    accum(nodes, grads, *a, da.into_iter());
                }
                Op::Sigmoid(a) => {
                    let y = nodes[i].value.data().to_vec();
                    accum(
                        nodes,
                        grads,
                        *a,
                        g.iter()
                            .zip(&y)
                            .map(|(&gv, &yv)| gv * yv * (S::one() - yv)),
                    );
                }
                Op::Tanh(a) => {
                    let y = nodes[i].value.data().to_vec();
                    accum(
                        nodes,
                        grads,
                        *a,
                        g.iter()
                            .zip(&y)
                            .map(|(&gv, &yv)| gv * (S::one() - yv * yv)),
                    );
                }
                Op::Exp(a) => {
                    let y = nodes[i].value.data().to_vec();
                    accum(nodes, grads, *a, g.iter().zip(&y).map(|(&gv, &yv)| gv * yv));
                }
                Op::Log(a) => {
                    let x = nodes[a.0].value.data().to_vec();
                    accum(nodes, grads, *a, g.iter().zip(&x).map(|(&gv, &xv)| gv / xv));
                }
                Op::Embed(table, indices) => {
                    let d = nodes[table.0].value.shape()[1];
                    let total = nodes[table.0].value.numel();
                    let mut dt = vec![S::zero(); total];
                    for (row, &idx) in indices.iter().enumerate() {
                        let gs = &g[row * d..(row + 1) * d];
                        let slot = &mut dt[idx * d..(idx + 1) * d];
                        for j in 0..d {
                            slot[j] += gs[j];
                        }
                    }
                    accum(nodes, grads, *table, dt.into_iter());
                }
                Op::Dropout(a, mask) => {
                    let da: Vec<S> = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                    accum(nodes, grads, *a, da.into_iter());
                }
            }
        }
        Ok(())
    }
}

enum Side {
    Lhs,
    Rhs,
}

fn accum<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    v: Var,
    contribution: impl Iterator<Item = S>,
) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let numel = nodes[v.0].value.numel();
    let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); numel]);
    for (s, c) in slot.iter_mut().zip(contribution) {
        *s += c;
    }
}

/// Backward of broadcast `add`: the broadcast side receives a reduced
/// gradient (full sum for scalars, column sums for row vectors).
fn accum_broadcast<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    v: Var,
    g: &[S],
    bc: Broadcast,
    side: Side,
    _unit: impl Fn(S, S) -> S,
) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let reduced = matches!(
        (bc, &side),
        (Broadcast::ScalarLhs, Side::Lhs)
            | (Broadcast::ScalarRhs, Side::Rhs)
            | (Broadcast::RowLhs, Side::Lhs)
            | (Broadcast::RowRhs, Side::Rhs)
    );
    if !reduced {
        accum(nodes, grads, v, g.iter().copied());
        return;
    }
    let numel = nodes[v.0].value.numel();
    if numel == 1 {
        let total = g.iter().copied().sum::<S>();
        accum(nodes, grads, v, std::iter::once(total));
    } else {
        let mut cols = vec![S::zero(); numel];
        for (i, &gv) in g.iter().enumerate() {
            cols[i % numel] += gv;
        }
        accum(nodes, grads, v, cols.into_iter());
    }
}

/// Backward of broadcast `mul`: chain with the other operand's value, then
/// reduce like broadcast `add` if this side was broadcast.
fn accum_mul<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    v: Var,
    g: &[S],
    bc: Broadcast,
    side: Side,
    other: &Tensor<S>,
) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let this_broadcast = matches!(
        (bc, &side),
        (Broadcast::ScalarLhs, Side::Lhs)
            | (Broadcast::ScalarRhs, Side::Rhs)
            | (Broadcast::RowLhs, Side::Lhs)
            | (Broadcast::RowRhs, Side::Rhs)
    );
    let other_broadcast = bc != Broadcast::None && !this_broadcast;

    if !this_broadcast {
        // Full-shape side: multiply g by the (possibly broadcast) other value.
        let numel = nodes[v.0].value.numel();
        if other_broadcast {
            if other.numel() == 1 {
                let s = other.item();
                accum(nodes, grads, v, g.iter().map(|&gv| gv * s));
            } else {
                let c = other.numel();
                let od = other.data();
                accum(
                    nodes,
                    grads,
                    v,
                    g.iter().enumerate().map(|(idx, &gv)| gv * od[idx % c]),
                );
            }
        } else {
            debug_assert_eq!(other.numel(), numel);
            accum(
                nodes,
                grads,
                v,
                g.iter().zip(other.data()).map(|(&gv, &ov)| gv * ov),
            );
        }
        return;
    }

    // Broadcast side: elementwise chain then reduce.
    let numel = nodes[v.0].value.numel();
    if numel == 1 {
        let total = g
            .iter()
            .zip(other.data())
            .map(|(&gv, &ov)| gv * ov)
            .sum::<S>();
        accum(nodes, grads, v, std::iter::once(total));
    } else {
        let mut cols = vec![S::zero(); numel];
        for (i, (&gv, &ov)) in g.iter().zip(other.data()).enumerate() {
            cols[i % numel] += gv * ov;
        }
        accum(nodes, grads, v, cols.into_iter());
    }
}

/// Softmax along the last axis with max-subtraction stabilization.
pub fn softmax_tensor<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let cols = t.cols();
    let mut out = Vec::with_capacity(t.numel());
    for row in 0..t.numel() / cols {
        let xs = &t.data()[row * cols..(row + 1) * cols];
        let max = xs
            .iter()
            .copied()
            .fold(S::neg_infinity(), |m, v| if v > m { v } else { m });
        let exps: Vec<S> = xs.iter().map(|&v| (v - max).exp()).collect();
        let total = exps.iter().copied().sum::<S>();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    Tensor::new(t.shape().to_vec(), out).expect("softmax shape")
}
