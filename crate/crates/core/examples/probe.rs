use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use remote_core::ot::{sinkhorn, OtProblem};
use remote_core::tensor::Tensor;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for lambda in [0.01f64, 1e-3] {
        let mut worst = 0usize;
        let t = std::time::Instant::now();
        for _ in 0..6 {
            let a = rng.random_range(2..=6usize);
            let b = rng.random_range(2..=6usize);
            let data: Vec<f64> = (0..a*b).map(|_| rng.random_range(0.0..2.0)).collect();
            let cost = Tensor::new(vec![a, b], data).unwrap();
            let problem = OtProblem::uniform(cost, lambda).unwrap();
            let plan = sinkhorn(&problem, 3_000_000, 1e-9).unwrap();
            worst = worst.max(plan.iterations);
            if !plan.converged { println!("  lambda {lambda} {a}x{b} STUCK residual {:.2e}", plan.marginal_residual); }
        }
        println!("lambda {lambda}: worst iters {worst} over 6 instances ({:?})", t.elapsed());
    }
}
