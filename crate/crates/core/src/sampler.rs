//! Ancestral sampling with classifier-free guidance.

use rand::Rng;

use crate::error::Result;
use crate::latent::Latent;
use crate::rng;
use crate::schedule::{cfg_combine_slice, NoiseSchedule};

/// Token id reserved for the unconditional branch.
pub const NULL_TOKEN: usize = 0;

/// Anything that predicts the noise in a batch of noisy latents.
///
/// `z` holds `tokens.len()` rows of `data_dim()` values, row-major; every row
/// is queried at the same denoiser time index.
pub trait NoisePredictor {
    fn data_dim(&self) -> usize;

    fn predict_rows(&self, z: &[f64], model_t: usize, tokens: &[usize]) -> Result<Vec<f64>>;
}

/// Guided prediction for a batch. `g == 1` skips the unconditional pass.
pub fn guided_prediction<P: NoisePredictor + ?Sized>(
    model: &P,
    z: &[f64],
    model_t: usize,
    tokens: &[usize],
    guidance: f64,
) -> Result<Vec<f64>> {
    let mut eps = model.predict_rows(z, model_t, tokens)?;
    if guidance != 1.0 {
        let null = vec![NULL_TOKEN; tokens.len()];
        let uncond = model.predict_rows(z, model_t, &null)?;
        cfg_combine_slice(&mut eps, &uncond, guidance);
    }
    Ok(eps)
}

/// Runs reverse steps `steps-1, …, 0` on a batch of latents in place.
pub fn denoise_rows<P: NoisePredictor + ?Sized, R: Rng>(
    model: &P,
    z: &mut [f64],
    tokens: &[usize],
    sched: &NoiseSchedule,
    steps: usize,
    guidance: f64,
    rng: &mut R,
) -> Result<()> {
    for t in (0..steps).rev() {
        let eps = guided_prediction(model, z, sched.model_timestep(t), tokens, guidance)?;
        if t > 0 {
            let noise = rng::normal_vec(rng, z.len());
            sched.ddpm_step_slice(z, t, &eps, Some(&noise));
        } else {
            sched.ddpm_step_slice(z, t, &eps, None);
        }
    }
    Ok(())
}

pub(crate) fn rows_to_latents(z: Vec<f64>, dim: usize) -> Vec<Latent> {
    z.chunks(dim).map(|c| Latent(c.to_vec())).collect()
}

/// Draws `n` samples for `token` by ancestral sampling from pure noise.
pub fn sample<P: NoisePredictor + ?Sized, R: Rng>(
    model: &P,
    token: usize,
    sched: &NoiseSchedule,
    guidance: f64,
    rng: &mut R,
    n: usize,
) -> Result<Vec<Latent>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let dim = model.data_dim();
    let mut z = rng::normal_vec(rng, n * dim);
    let tokens = vec![token; n];
    denoise_rows(model, &mut z, &tokens, sched, sched.len(), guidance, rng)?;
    Ok(rows_to_latents(z, dim))
}

/// Exact noise predictor for data drawn from `N(mean, std²·I)`, ignoring the
/// token. Under the forward process `z_t ~ N(√ᾱ·mean, (ᾱ·std² + 1 − ᾱ)·I)`
/// and `E[ε | z_t] = √(1 − ᾱ)·(z_t − √ᾱ·mean) / (ᾱ·std² + 1 − ᾱ)`.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    pub mean: Vec<f64>,
    pub std: f64,
    /// ᾱ table indexed by denoiser time.
    pub alpha_bars: Vec<f64>,
}

impl GaussianOracle {
    pub fn new(mean: Vec<f64>, std: f64, sched: &NoiseSchedule) -> Self {
        Self {
            mean,
            std,
            alpha_bars: sched.alpha_bars().to_vec(),
        }
    }
}

impl NoisePredictor for GaussianOracle {
    fn data_dim(&self) -> usize {
        self.mean.len()
    }

    fn predict_rows(&self, z: &[f64], model_t: usize, _tokens: &[usize]) -> Result<Vec<f64>> {
        let ab = self.alpha_bars[model_t];
        let var = ab * self.std * self.std + 1.0 - ab;
        let dim = self.mean.len();
        Ok(z.iter()
            .enumerate()
            .map(|(i, &v)| (1.0 - ab).sqrt() * (v - ab.sqrt() * self.mean[i % dim]) / var)
            .collect())
    }
}
