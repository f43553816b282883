//! Ancestral sampling with the exact noise predictor of a Gaussian recovers
//! that Gaussian on a fine schedule; on a coarse one the variance shrinks.
//!
//!     cargo run --example gaussian_oracle

use lifelong_diffusion::rng::stream;
use lifelong_diffusion::sampler::{sample, GaussianOracle};
use lifelong_diffusion::schedule::{make_schedule, Spacing};

fn main() -> lifelong_diffusion::Result<()> {
    let (mean, std) = (vec![1.5, -2.0], 0.7);
    let n = 10_000;
    for (steps, b0, b1) in [(1000, 1e-4, 0.02), (50, 1e-4, 0.2)] {
        let sched = make_schedule(steps, b0, b1, Spacing::Linear)?;
        let oracle = GaussianOracle::new(mean.clone(), std, &sched);
        let xs = sample(&oracle, 1, &sched, 1.0, &mut stream(0, "oracle"), n)?;
        println!("T = {steps}, β in [{b0}, {b1}]");
        for d in 0..mean.len() {
            let m = xs.iter().map(|x| x[d]).sum::<f64>() / n as f64;
            let v = xs.iter().map(|x| (x[d] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            println!("  dim {d}: mean {m:+.4} (target {:+.4})  var {v:.4} (target {:.4})", mean[d], std * std);
        }
    }
    Ok(())
}
