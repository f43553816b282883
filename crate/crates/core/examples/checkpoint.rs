//! Save a model and a context bank to the LFSD container, read them back and
//! confirm the parameters are bit-identical.
//!
//!     cargo run --example checkpoint

use lifelong_diffusion::checkpoint::{load_bank, load_denoiser, save_bank, save_denoiser, Container};
use lifelong_diffusion::icgen::ContextBank;
use lifelong_diffusion::nn::{Denoiser, DenoiserConfig};
use lifelong_diffusion::rng::stream;
use lifelong_diffusion::Latent;

fn main() -> lifelong_diffusion::Result<()> {
    let dir = std::env::temp_dir().join("lfsd-checkpoint-example");
    std::fs::create_dir_all(&dir)?;

    let model = Denoiser::init(DenoiserConfig::default(), &mut stream(0, "init"))?;
    let path = dir.join("model.lfsd");
    save_denoiser(&model, &path)?;
    let back = load_denoiser(&path)?;
    let identical = model.params().iter().zip(back.params()).all(|(a, b)| a.to_bits() == b.to_bits());
    println!("{} params, {} bytes, bit-identical: {identical}", model.param_count(), std::fs::metadata(&path)?.len());

    let mut bank = ContextBank::new();
    bank.insert(1, 6, vec![Latent(vec![0.5, 1.0]), Latent(vec![0.25, -1.5])])?;
    let bank_path = dir.join("bank.lfsd");
    save_bank(&bank, &bank_path)?;
    println!("bank round trip equal: {}", load_bank(&bank_path)? == bank);

    let container = Container::load(&path)?;
    println!("kind {:?}, arrays: {:?}", container.kind(), container.arrays.iter().map(|a| &a.name).collect::<Vec<_>>());

    let mut bytes = std::fs::read(&path)?;
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&path, &bytes)?;
    println!("truncated file: {}", load_denoiser(&path).unwrap_err());
    Ok(())
}
