//! The baseline matrix on one seed: plain fine-tuning, the current-data
//! distillation baseline, and data-free distillation with and without ICGen.
//! Writes run directories and the merged report under `out/`.
//!
//!     cargo run --example method_matrix [workers]

use std::path::Path;

use lifelong_diffusion::config::{ExperimentConfig, Method};
use lifelong_diffusion::harness::{emit_report, run_matrix};

fn main() -> lifelong_diffusion::Result<()> {
    let workers = std::env::args().nth(1).and_then(|w| w.parse().ok()).unwrap_or(1);
    let mut config = ExperimentConfig::default();
    config.icgen.guidance = 1.0;
    config.eval.n_samples = 300;
    let out = Path::new("out");
    let outcomes = run_matrix(&config, &Method::MATRIX, &[0], Some(out), workers)?;

    let last = config.world.sessions.len();
    println!("{:<15} {:>8} {}", "method", "TA@last", "IAD by session");
    for o in &outcomes {
        let iad: Vec<String> = o.iad_series().iter().map(|(s, v)| format!("s{s} {v:6.2}")).collect();
        println!("{:<15} {:>8.3} {}", o.manifest.method, o.mean_ta(last).unwrap_or(f64::NAN), iad.join("  "));
    }
    let manifests: Vec<_> = outcomes.into_iter().map(|o| o.manifest).collect();
    let files = emit_report(&manifests, &out.join("report"))?;
    println!("report: {}", files.dir.display());
    Ok(())
}
