//! Pretrain the base denoiser on the five base concepts, then check it with
//! the frozen probe (TA) and the energy-distance alignment (IA).
//!
//!     cargo run --example pretrain_base

use lifelong_diffusion::concepts::{default_base_concepts, sample_concept};
use lifelong_diffusion::eval::{image_alignment, text_alignment, ProbeClassifier, ProbeConfig};
use lifelong_diffusion::nn::DenoiserConfig;
use lifelong_diffusion::rng::stream;
use lifelong_diffusion::sampler::sample;
use lifelong_diffusion::schedule::{make_schedule, Spacing};
use lifelong_diffusion::trainer::{pretrain_base, PretrainConfig};

fn main() -> lifelong_diffusion::Result<()> {
    let base = default_base_concepts();
    let sched = make_schedule(50, 1e-4, 0.2, Spacing::Linear)?;
    let model = pretrain_base(
        DenoiserConfig::default(),
        &PretrainConfig::default(),
        &base,
        &sched,
        &mut stream(0, "pretrain"),
    )?;
    println!("{} parameters", model.param_count());
    let probe = ProbeClassifier::train(&base, &ProbeConfig::default(), &mut stream(0, "probe"))?;
    let refs: Vec<_> = base
        .iter()
        .map(|c| sample_concept(c, 500, &mut stream(0, "ref")))
        .collect::<Result<_, _>>()?;

    print!("token   TA  ");
    for c in &base {
        print!("  IA vs {}", c.token);
    }
    println!();
    for c in &base {
        let gen = sample(&model, c.token, &sched, 1.0, &mut stream(0, "gen"), 500)?;
        print!("{:>5} {:.3} ", c.token, text_alignment(&probe, &gen, c.token)?);
        for r in &refs {
            print!("  {:>7.3}", image_alignment(&gen, r)?);
        }
        println!();
    }
    Ok(())
}
