//! Entropy-regularized optimal transport between feature sets.
//!
//! The solver aligns a source feature set (rows of `mu`) with a target set
//! (rows of `nu`) under a cosine cost, minimizing `<C, Pi> - lambda * H(Pi)`
//! subject to fixed marginals, via Sinkhorn-Knopp scaling. Marginals are
//! uniform probability vectors over feature rows; the features themselves
//! enter only through the cost and the downstream barycentric transport.
//!
//! Everything here runs in `f64` regardless of the model scalar: the scaling
//! vectors under- and overflow in `f32` at small regularization strength.
//! Below [`LOG_DOMAIN_LAMBDA`] the solver switches to log-domain updates.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::Serialize;

/// Regularization strength below which standard-domain scaling is unsafe.
pub const LOG_DOMAIN_LAMBDA: f64 = 0.05;

/// Norm floor substituted for zero-norm rows in the cosine cost.
const NORM_EPSILON: f64 = 1e-8;

/// One entropic OT instance: cost orientation is target rows x source
/// columns, weights are probability vectors.
#[derive(Clone, Debug)]
pub struct OtProblem {
    /// Cost matrix, `a x b` (target rows, source columns).
    pub cost: Tensor<f64>,
    /// Target-side weights, length `a`, positive, summing to 1.
    pub target_weights: Vec<f64>,
    /// Source-side weights, length `b`, positive, summing to 1.
    pub source_weights: Vec<f64>,
    /// Entropy regularization strength, > 0.
    pub lambda: f64,
}

impl OtProblem {
    /// Uniform-marginal problem over the given cost matrix.
    pub fn uniform(cost: Tensor<f64>, lambda: f64) -> Result<Self> {
        let (a, b) = matrix_dims(&cost)?;
        OtProblem::new(
            cost,
            vec![1.0 / a as f64; a],
            vec![1.0 / b as f64; b],
            lambda,
        )
    }

    pub fn new(
        cost: Tensor<f64>,
        target_weights: Vec<f64>,
        source_weights: Vec<f64>,
        lambda: f64,
    ) -> Result<Self> {
        let (a, b) = matrix_dims(&cost)?;
        if target_weights.len() != a || source_weights.len() != b {
            return Err(Error::Contract(format!(
                "weight lengths ({}, {}) do not match cost shape {}x{}",
                target_weights.len(),
                source_weights.len(),
                a,
                b
            )));
        }
        for (label, w) in [("target", &target_weights), ("source", &source_weights)] {
            if w.iter().any(|&v| v <= 0.0) {
                return Err(Error::Contract(format!("{label} weights must be positive")));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!(
                    "{label} weights sum to {sum}, expected 1 within 1e-9"
                )));
            }
        }
        if lambda <= 0.0 {
            return Err(Error::Contract(format!(
                "entropy strength lambda must be positive, got {lambda}"
            )));
        }
        Ok(OtProblem {
            cost,
            target_weights,
            source_weights,
            lambda,
        })
    }
}

/// Converged (or truncated) Sinkhorn output with diagnostics.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    /// Coupling, `a x b`, non-negative, total mass 1.
    pub plan: Tensor<f64>,
    /// Cost matrix the plan was solved against.
    pub cost: Tensor<f64>,
    pub lambda: f64,
    pub iterations: usize,
    /// Max of the two L1 marginal deviations (rows vs target, columns vs
    /// source).
    pub marginal_residual: f64,
    pub converged: bool,
    /// `sum_ij C_ij Pi_ij`.
    pub transport_cost: f64,
    /// `H(Pi) = -sum_ij Pi_ij log Pi_ij`.
    pub entropy: f64,
    /// True when the cosine cost had to floor a zero-norm feature row.
    pub zero_norm_rows: bool,
}

/// Sidecar summary for plan dumps.
#[derive(Serialize)]
pub struct PlanSummary {
    pub lambda: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub transport_cost: f64,
    pub entropy: f64,
}

impl TransportPlan {
    pub fn summary(&self) -> PlanSummary {
        PlanSummary {
            lambda: self.lambda,
            iterations: self.iterations,
            residual: self.marginal_residual,
            converged: self.converged,
            transport_cost: self.transport_cost,
            entropy: self.entropy,
        }
    }

    /// CSV dump, header `row,col,plan,cost`, one line per entry.
    pub fn to_csv(&self) -> String {
        let (a, b) = (self.plan.shape()[0], self.plan.shape()[1]);
        let mut out = String::from("row,col,plan,cost\n");
        for i in 0..a {
            for j in 0..b {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    i,
                    j,
                    self.plan.at(i, j),
                    self.cost.at(i, j)
                ));
            }
        }
        out
    }
}

fn matrix_dims(t: &Tensor<f64>) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Contract(format!(
            "expected a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Cosine distance cost `C_ij = 1 - cos(nu_i, mu_j)`, oriented target rows x
/// source columns so it matches the plan. Zero-norm rows are floored at
/// `1e-8` and flagged. Values lie in `[0, 2]`.
///
/// Returns `(cost, zero_norm_flag)`.
pub fn cosine_cost<S: Scalar>(mu: &Tensor<S>, nu: &Tensor<S>) -> Result<(Tensor<f64>, bool)> {
    if mu.rank() != 2 || nu.rank() != 2 || mu.shape()[1] != nu.shape()[1] {
        return Err(Error::dimension("cosine_cost", mu.shape(), nu.shape()));
    }
    let (b, a) = (mu.shape()[0], nu.shape()[0]);
    let mut flagged = false;
    let mut norm = |row: &[S]| -> f64 {
        let n = row
            .iter()
            .map(|&v| v.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt();
        if n < NORM_EPSILON {
            flagged = true;
            NORM_EPSILON
        } else {
            n
        }
    };
    let mu_norms: Vec<f64> = (0..b).map(|j| norm(mu.row(j))).collect();
    let nu_norms: Vec<f64> = (0..a).map(|i| norm(nu.row(i))).collect();
    let mut data = Vec::with_capacity(a * b);
    for i in 0..a {
        let nrow = nu.row(i);
        for j in 0..b {
            let mrow = mu.row(j);
            let dot: f64 = nrow
                .iter()
                .zip(mrow)
                .map(|(&x, &y)| x.to_f64_lossy() * y.to_f64_lossy())
                .sum();
            let c = 1.0 - dot / (nu_norms[i] * mu_norms[j]);
            // cosine can drift a hair outside [-1, 1] in floating point
            data.push(c.clamp(0.0, 2.0));
        }
    }
    Ok((Tensor::new(vec![a, b], data)?, flagged))
}

/// Sinkhorn-Knopp solver. Alternates marginal rescalings of
/// `exp(-C/lambda)` until the L1 marginal residual drops below `tol` or
/// `max_iter` is reached (the plan is then returned with `converged =
/// false`). Log-domain updates are used when `lambda <
/// LOG_DOMAIN_LAMBDA`.
pub fn sinkhorn(problem: &OtProblem, max_iter: usize, tol: f64) -> Result<TransportPlan> {
    let (a, b) = matrix_dims(&problem.cost)?;
    let lambda = problem.lambda;
    let c = problem.cost.data();
    let p = &problem.target_weights;
    let q = &problem.source_weights;

    let log_domain = lambda < LOG_DOMAIN_LAMBDA;
    let mut plan = vec![0.0f64; a * b];
    let mut iterations = 0usize;
    let mut residual = f64::INFINITY;

    if log_domain {
        // Potentials f (target side) and g (source side):
        // Pi_ij = exp((f_i + g_j - C_ij) / lambda).
        //
        // Plain iteration stalls at small lambda (the contraction factor
        // approaches 1), so the potentials are warm-started by halving the
        // regularization from 0.5 down to the target before the final
        // stage iterates to tolerance. Every fixed point depends only on
        // the target lambda; annealing changes the path, not the answer.
        let mut f = vec![0.0f64; a];
        let mut g = vec![0.0f64; b];
        let log_p: Vec<f64> = p.iter().map(|v| v.ln()).collect();
        let log_q: Vec<f64> = q.iter().map(|v| v.ln()).collect();

        let mut update = |f: &mut Vec<f64>, g: &mut Vec<f64>, lam: f64| {
            for i in 0..a {
                let row = &c[i * b..(i + 1) * b];
                let m = logsumexp(row.iter().zip(g.iter()).map(|(&cij, &gj)| (gj - cij) / lam));
                f[i] = lam * (log_p[i] - m);
            }
            for j in 0..b {
                let m = logsumexp((0..a).map(|i| (f[i] - c[i * b + j]) / lam));
                g[j] = lam * (log_q[j] - m);
            }
        };

        let mut stage = 0.5f64;
        let mut schedule = Vec::new();
        while stage > 1.5 * lambda {
            schedule.push(stage);
            stage *= 0.5;
        }
        const WARM_ITERS: usize = 30;
        for &lam in &schedule {
            for _ in 0..WARM_ITERS {
                if iterations >= max_iter {
                    break;
                }
                iterations += 1;
                update(&mut f, &mut g, lam);
            }
        }

        while iterations < max_iter {
            iterations += 1;
            update(&mut f, &mut g, lambda);
            if f.iter().chain(g.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "sinkhorn scaling produced a non-finite potential at lambda = {lambda}"
                )));
            }
            for i in 0..a {
                for j in 0..b {
                    plan[i * b + j] = ((f[i] + g[j] - c[i * b + j]) / lambda).exp();
                }
            }
            residual = marginal_residual(&plan, a, b, p, q);
            if residual < tol {
                break;
            }
        }
    } else {
        let kernel: Vec<f64> = c.iter().map(|&v| (-v / lambda).exp()).collect();
        let mut u = vec![1.0f64; a];
        let mut v = vec![1.0f64; b];
        for iter in 0..max_iter {
            iterations = iter + 1;
            for i in 0..a {
                let krow = &kernel[i * b..(i + 1) * b];
                let denom: f64 = krow.iter().zip(&v).map(|(&k, &vj)| k * vj).sum();
                u[i] = p[i] / denom;
            }
            for j in 0..b {
                let denom: f64 = (0..a).map(|i| kernel[i * b + j] * u[i]).sum();
                v[j] = q[j] / denom;
            }
            if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "sinkhorn scaling produced a non-finite factor at lambda = {lambda}"
                )));
            }
            for i in 0..a {
                for j in 0..b {
                    plan[i * b + j] = u[i] * kernel[i * b + j] * v[j];
                }
            }
            residual = marginal_residual(&plan, a, b, p, q);
            if residual < tol {
                break;
            }
        }
    }

    if plan.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "sinkhorn plan contains non-finite entries at lambda = {lambda}"
        )));
    }

    let transport_cost: f64 = plan.iter().zip(c).map(|(&pi, &cij)| pi * cij).sum();
    let entropy: f64 = -plan
        .iter()
        .map(|&pi| if pi > 0.0 { pi * pi.ln() } else { 0.0 })
        .sum::<f64>();

    Ok(TransportPlan {
        plan: Tensor::new(vec![a, b], plan)?,
        cost: problem.cost.clone(),
        lambda,
        iterations,
        marginal_residual: residual,
        converged: residual < tol,
        transport_cost,
        entropy,
        zero_norm_rows: false,
    })
}

fn marginal_residual(plan: &[f64], a: usize, b: usize, p: &[f64], q: &[f64]) -> f64 {
    let mut row_dev = 0.0;
    for i in 0..a {
        let sum: f64 = plan[i * b..(i + 1) * b].iter().sum();
        row_dev += (sum - p[i]).abs();
    }
    let mut col_dev = 0.0;
    for j in 0..b {
        let sum: f64 = (0..a).map(|i| plan[i * b + j]).sum();
        col_dev += (sum - q[j]).abs();
    }
    row_dev.max(col_dev)
}

fn logsumexp(vals: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = vals.collect();
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + vals.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Exhaustive assignment oracle for square uniform-marginal instances: the
/// optimum of the transport LP is attained at a scaled permutation, so the
/// minimum over all `n!` permutations of `(1/n) * sum_i C[i][perm(i)]` is the
/// exact optimal cost. Refuses `n > 8`.
pub fn exact_ot_oracle(cost: &Tensor<f64>) -> Result<(Vec<usize>, f64)> {
    let (a, b) = matrix_dims(cost)?;
    if a != b {
        return Err(Error::Contract(format!(
            "oracle requires a square cost, got {a}x{b}"
        )));
    }
    if a > 8 {
        return Err(Error::Contract(format!(
            "oracle refuses n = {a} > 8 (combinatorial explosion)"
        )));
    }
    let n = a;
    let mut best_cost = f64::INFINITY;
    let mut best: Vec<usize> = (0..n).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    // Heap's algorithm, iterative.
    let mut counters = vec![0usize; n];
    let eval = |perm: &[usize], best_cost: &mut f64, best: &mut Vec<usize>| {
        let total: f64 = perm
            .iter()
            .enumerate()
            .map(|(i, &j)| cost.at(i, j))
            .sum();
        if total < *best_cost {
            *best_cost = total;
            best.copy_from_slice(perm);
        }
    };
    eval(&perm, &mut best_cost, &mut best);
    let mut i = 0;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(counters[i], i);
            }
            eval(&perm, &mut best_cost, &mut best);
            counters[i] += 1;
            i = 0;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    Ok((best, best_cost / n as f64))
}
