//! Compose several learned concepts into one layout: each placement moves and
//! rescales a token's stored contexts, and ICGen regenerates them in place.
//!
//!     cargo run --example multi_concept

use lifelong_diffusion::config::{ExperimentConfig, Method};
use lifelong_diffusion::harness::run_experiment;
use lifelong_diffusion::icgen::{generate_layout, Layout, Placement};
use lifelong_diffusion::latent::centroid;
use lifelong_diffusion::rng::stream;

fn main() -> lifelong_diffusion::Result<()> {
    let mut config = ExperimentConfig::default();
    config.icgen.guidance = 1.0;
    config.world.sessions.truncate(3);
    let outcome = run_experiment(&config, Method::Ours, 0, None)?;
    let model = outcome.final_model.expect("run completed");
    let sched = config.train_schedule()?;

    let layout = Layout {
        placements: vec![
            Placement { token: 6, shift: [-4.0, 0.0], scale_mul: 1.0 },
            Placement { token: 7, shift: [0.0, 0.0], scale_mul: 0.6 },
            Placement { token: 8, shift: [4.0, 0.0], scale_mul: 1.0 },
        ],
    };
    let points = generate_layout(&model, &outcome.bank, &layout, 0.6, &sched, 1.0, &mut stream(0, "layout"), 200)?;
    for (i, placement) in layout.placements.iter().enumerate() {
        let target = layout.target(&outcome.bank, i)?;
        let mine: Vec<_> = points.iter().filter(|(t, _)| *t == placement.token).map(|(_, x)| x.clone()).collect();
        let c = centroid(&mine).unwrap();
        println!(
            "token {}: target ({:+.2}, {:+.2})  generated centroid ({:+.2}, {:+.2})",
            placement.token, target[0], target[1], c[0], c[1]
        );
    }
    Ok(())
}
