mod common;

use lifelong_diffusion::rng::stream;
use lifelong_diffusion::sampler::{sample, GaussianOracle};
use lifelong_diffusion::schedule::{make_schedule, Spacing};

#[test]
fn oracle_sampling_recovers_the_gaussian() {
    let (mean_err, var_err) = common::oracle_errors(10_000, 0);
    assert!(mean_err < 0.05, "mean error {mean_err}");
    assert!(var_err < 0.10, "variance error {var_err}");
}

#[test]
fn coarse_schedule_shrinks_the_variance() {
    // Exact predictor, 50 coarse steps: the β̃ sampler under-disperses.
    let sched = make_schedule(50, 1e-4, 0.2, Spacing::Linear).unwrap();
    let oracle = GaussianOracle::new(vec![0.0, 0.0], 1.0, &sched);
    let n = 10_000;
    let xs = sample(&oracle, 1, &sched, 1.0, &mut stream(2, "coarse"), n).unwrap();
    let v = xs.iter().map(|x| x[0] * x[0]).sum::<f64>() / n as f64;
    assert!(v < 0.95 && v > 0.8, "variance {v}");
}

#[test]
fn library_oracle_agrees_with_the_test_oracle() {
    let sched = make_schedule(30, 1e-4, 0.2, Spacing::Linear).unwrap();
    let a = GaussianOracle::new(vec![0.5, -1.0], 1.3, &sched);
    let b = common::Oracle::new(vec![0.5, -1.0], 1.3, &sched);
    let xa = sample(&a, 1, &sched, 1.0, &mut stream(4, "o"), 50).unwrap();
    let xb = sample(&b, 1, &sched, 1.0, &mut stream(4, "o"), 50).unwrap();
    for (p, q) in xa.iter().zip(&xb) {
        for d in 0..2 {
            assert!((p[d] - q[d]).abs() < 1e-9);
        }
    }
}

#[test]
fn strided_schedule_keeps_the_oracle_exact() {
    // Sampling on every other step still targets the same data distribution.
    let full = make_schedule(1000, 1e-4, 0.02, Spacing::Linear).unwrap();
    let sched = full.strided(500).unwrap();
    let oracle = GaussianOracle::new(vec![-2.0, 1.0], 0.5, &full);
    let n = 10_000;
    let xs = sample(&oracle, 1, &sched, 1.0, &mut stream(1, "strided"), n).unwrap();
    let m = xs.iter().map(|x| x[0]).sum::<f64>() / n as f64;
    let v = xs.iter().map(|x| (x[0] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((m + 2.0).abs() < 0.1, "mean {m}");
    assert!((v - 0.25).abs() < 0.025, "variance {v}");
}
