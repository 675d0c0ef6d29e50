//! Finite-difference oracles for every differentiable tape operation.
//!
//! Each check evaluates the op inside a scalar-valued graph, runs the tape
//! backward, then compares every input gradient against a central difference
//! of the same graph. Graphs are rebuilt per evaluation with a fixed tape
//! seed so dropout masks stay pinned.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use remote_core::tape::{Tape, Var};
use remote_core::tensor::Tensor;

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-3;
const TAPE_SEED: u64 = 42;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::new(shape, data).unwrap()
}

fn rand_positive(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(0.2..3.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Weighted sum of the output so the loss is scalar but no gradient entry
/// collapses to an uninformative constant.
fn spread_loss(tape: &mut Tape<f64>, out: Var) -> Var {
    let n = tape.value(out).numel();
    let weights: Vec<f64> = (0..n).map(|i| 0.25 + 0.5 * (i as f64 % 7.0)).collect();
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(Tensor::new(shape, weights).unwrap());
    let prod = tape.mul(out, w).unwrap();
    tape.sum_all(prod)
}

fn check_gradients(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) {
    let eval = |points: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::<f64>::new(TAPE_SEED, true);
        let vars: Vec<Var> = points.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        let loss = spread_loss(&mut tape, out);
        tape.value(loss).item()
    };

    let mut tape = Tape::<f64>::new(TAPE_SEED, true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    let loss = spread_loss(&mut tape, out);
    tape.backward(loss).unwrap();

    for (i, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(vars[i]) {
            Some(g) => g.to_vec(),
            None => vec![0.0; input.numel()],
        };
        for e in 0..input.numel() {
            let mut up = inputs.to_vec();
            up[i].data_mut()[e] += EPS;
            let mut down = inputs.to_vec();
            down[i].data_mut()[e] -= EPS;
            let fd = (eval(&up) - eval(&down)) / (2.0 * EPS);
            let a = analytic[e];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(
                rel < TOL,
                "input {i} element {e}: analytic {a}, fd {fd}, rel {rel}"
            );
        }
    }
}

fn with_random_points(n: usize, f: impl Fn(&mut ChaCha8Rng)) {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    for _ in 0..n {
        f(&mut rng);
    }
}

#[test]
fn matmul_gradients() {
    with_random_points(10, |rng| {
        let a = rand_tensor(rng, vec![3, 4]);
        let b = rand_tensor(rng, vec![4, 2]);
        check_gradients(&[a, b], |tape, v| tape.matmul(v[0], v[1]).unwrap());
    });
}

#[test]
fn add_sub_gradients() {
    with_random_points(5, |rng| {
        let a = rand_tensor(rng, vec![2, 3]);
        let b = rand_tensor(rng, vec![2, 3]);
        check_gradients(&[a.clone(), b.clone()], |tape, v| tape.add(v[0], v[1]).unwrap());
        check_gradients(&[a, b], |tape, v| tape.sub(v[0], v[1]).unwrap());
    });
}

#[test]
fn broadcast_add_gradients() {
    with_random_points(5, |rng| {
        let m = rand_tensor(rng, vec![3, 4]);
        let row = rand_tensor(rng, vec![4]);
        check_gradients(&[m.clone(), row.clone()], |tape, v| tape.add(v[0], v[1]).unwrap());
        check_gradients(&[row, m.clone()], |tape, v| tape.add(v[0], v[1]).unwrap());
        let s = rand_tensor(rng, vec![1]);
        check_gradients(&[m, s], |tape, v| tape.add(v[0], v[1]).unwrap());
    });
}

#[test]
fn mul_gradients_with_broadcasts() {
    with_random_points(5, |rng| {
        let a = rand_tensor(rng, vec![2, 3]);
        let b = rand_tensor(rng, vec![2, 3]);
        check_gradients(&[a.clone(), b], |tape, v| tape.mul(v[0], v[1]).unwrap());
        let row = rand_tensor(rng, vec![3]);
        check_gradients(&[row.clone(), a.clone()], |tape, v| tape.mul(v[0], v[1]).unwrap());
        check_gradients(&[a.clone(), row], |tape, v| tape.mul(v[0], v[1]).unwrap());
        let s = rand_tensor(rng, vec![1]);
        check_gradients(&[s, a], |tape, v| tape.mul(v[0], v[1]).unwrap());
    });
}

#[test]
fn div_gradients() {
    with_random_points(5, |rng| {
        let a = rand_tensor(rng, vec![2, 2]);
        let b = rand_positive(rng, vec![2, 2]);
        check_gradients(&[a, b], |tape, v| tape.div(v[0], v[1]).unwrap());
    });
}

#[test]
fn scalar_op_gradients() {
    with_random_points(5, |rng| {
        let a = rand_tensor(rng, vec![4]);
        check_gradients(&[a.clone()], |tape, v| tape.add_scalar(v[0], 1.7));
        check_gradients(&[a], |tape, v| tape.mul_scalar(v[0], -0.37));
    });
}

#[test]
fn transpose_concat_narrow_reshape_gradients() {
    with_random_points(5, |rng| {
        let a = rand_tensor(rng, vec![3, 2]);
        check_gradients(&[a.clone()], |tape, v| tape.transpose(v[0]).unwrap());
        let b = rand_tensor(rng, vec![2, 2]);
        check_gradients(&[a.clone(), b], |tape, v| tape.concat(&[v[0], v[1]]).unwrap());
        check_gradients(&[a.clone()], |tape, v| tape.narrow(v[0], 1, 2).unwrap());
        check_gradients(&[a], |tape, v| tape.reshape(v[0], vec![2, 3]).unwrap());
    });
}

#[test]
fn reduction_gradients() {
    with_random_points(5, |rng| {
        let a = rand_tensor(rng, vec![3, 4]);
        check_gradients(&[a.clone()], |tape, v| tape.mean_axis(v[0], 0).unwrap());
        check_gradients(&[a.clone()], |tape, v| tape.mean_axis(v[0], 1).unwrap());
        let vec1 = rand_tensor(rng, vec![5]);
        check_gradients(&[vec1], |tape, v| tape.mean_axis(v[0], 0).unwrap());
        check_gradients(&[a], |tape, v| {
            let s = tape.sum_all(v[0]);
            // wrap so spread_loss sees a [1] tensor
            tape.reshape(s, vec![1]).unwrap()
        });
    });
}

#[test]
fn nonlinearity_gradients() {
    with_random_points(10, |rng| {
        let a = rand_tensor(rng, vec![2, 3]);
        check_gradients(&[a.clone()], |tape, v| tape.softmax(v[0]));
        check_gradients(&[a.clone()], |tape, v| tape.sigmoid(v[0]));
        check_gradients(&[a.clone()], |tape, v| tape.tanh(v[0]));
        check_gradients(&[a], |tape, v| tape.exp(v[0]));
        let vec1 = rand_tensor(rng, vec![6]);
        check_gradients(&[vec1.clone()], |tape, v| tape.softmax(v[0]));
        check_gradients(&[vec1], |tape, v| tape.log_softmax(v[0]).unwrap());
        let pos = rand_positive(rng, vec![4]);
        check_gradients(&[pos], |tape, v| tape.log(v[0]));
    });
}

#[test]
fn embed_gradients() {
    with_random_points(5, |rng| {
        let table = rand_tensor(rng, vec![6, 3]);
        // repeated indices exercise scatter-add accumulation
        check_gradients(&[table], |tape, v| {
            tape.embed(v[0], &[0, 2, 2, 5, 1]).unwrap()
        });
    });
}

#[test]
fn dropout_gradients_with_pinned_mask() {
    with_random_points(5, |rng| {
        let a = rand_tensor(rng, vec![4, 4]);
        check_gradients(&[a], |tape, v| tape.dropout(v[0], 0.5).unwrap());
    });
}

#[test]
fn composed_graph_gradient_matches_fd() {
    // attention-like composition touching most ops at once
    with_random_points(10, |rng| {
        let x = rand_tensor(rng, vec![3, 4]);
        let w = rand_tensor(rng, vec![4, 4]);
        let gate = rand_tensor(rng, vec![4]);
        check_gradients(&[x, w, gate], |tape, v| {
            let q = tape.matmul(v[0], v[1]).unwrap();
            let kt = tape.transpose(q).unwrap();
            let scores = tape.matmul(v[0], kt).unwrap();
            let scores = tape.mul_scalar(scores, 0.5);
            let attn = tape.softmax(scores);
            let mixed = tape.matmul(attn, v[0]).unwrap();
            let g = tape.sigmoid(v[2]);
            let gated = tape.mul(g, mixed).unwrap();
            let res = tape.add(gated, v[0]).unwrap();
            tape.tanh(res)
        });
    });
}

#[test]
fn forward_determinism_same_seed_bit_identical() {
    let run = |seed: u64| -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, vec![4, 4]);
        let mut tape = Tape::<f64>::new(seed, true);
        let v = tape.leaf(x, true);
        let d = tape.dropout(v, 0.3).unwrap();
        let s = tape.softmax(d);
        let out = tape.sum_all(s);
        tape.value(out)
            .data()
            .iter()
            .map(|f| f.to_bits())
            .collect()
    };
    assert_eq!(run(9), run(9));
    assert_ne!(run(9), run(10));
}
