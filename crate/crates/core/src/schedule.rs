//! Noise schedules and the closed-form DDPM operations built on them.
//!
//! Step indices are zero-based: index `t` carries `alpha_bars[t]`, and one
//! reverse step from index `t` lands on index `t - 1` (or on clean data when
//! `t == 0`). A schedule also records which denoiser time index each of its
//! steps corresponds to, so a coarse schedule can be carved out of the
//! training schedule and still query the network at matching noise levels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    model_timesteps: Vec<usize>,
}

/// Linear beta schedule over `steps` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64, spacing: Spacing) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::config("steps", "must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start < 1.0) {
        return Err(Error::config("beta_start", format!("must lie in (0, 1), got {beta_start}")));
    }
    if !(beta_end < 1.0) || beta_end < beta_start {
        return Err(Error::config(
            "beta_end",
            format!("must lie in [beta_start, 1), got {beta_end}"),
        ));
    }
    let betas: Vec<f64> = match spacing {
        Spacing::Linear => {
            if steps == 1 {
                vec![beta_start]
            } else {
                let span = beta_end - beta_start;
                (0..steps)
                    .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
                    .collect()
            }
        }
    };
    Ok(NoiseSchedule::from_betas(betas, (0..steps).collect()))
}

impl NoiseSchedule {
    fn from_betas(betas: Vec<f64>, model_timesteps: Vec<usize>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Self {
            betas,
            alphas,
            alpha_bars,
            model_timesteps,
        }
    }

    /// A `steps`-step schedule that visits an evenly strided subset of this
    /// schedule's indices, ending on the noisiest one. Its betas are derived
    /// so that its cumulative products equal this schedule's at the visited
    /// indices.
    pub fn strided(&self, steps: usize) -> Result<NoiseSchedule> {
        let total = self.len();
        if steps == 0 || steps > total {
            return Err(Error::config(
                "distill_steps",
                format!("must lie in 1..={total}, got {steps}"),
            ));
        }
        let picked: Vec<usize> = (0..steps).map(|k| (k + 1) * total / steps - 1).collect();
        let mut betas = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for &t in &picked {
            let ab = self.alpha_bars[t];
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        let model_timesteps = picked.iter().map(|&t| self.model_timesteps[t]).collect();
        Ok(NoiseSchedule::from_betas(betas, model_timesteps))
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Denoiser time index for step `t` of this schedule.
    pub fn model_timestep(&self, t: usize) -> usize {
        self.model_timesteps[t]
    }

    pub fn check_index(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Index {
                what: "schedule step",
                index: t,
                len: self.len(),
            });
        }
        Ok(())
    }

    fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Posterior standard deviation sqrt(beta_tilde_t); zero at `t == 0`.
    pub fn posterior_std(&self, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        let var = self.betas[t] * (1.0 - self.alpha_bar_prev(t)) / (1.0 - self.alpha_bars[t]);
        var.sqrt()
    }

    /// `z_t = sqrt(ab)·z0 + sqrt(1-ab)·eps` over flat buffers of any length.
    pub fn forward_noise_slice(&self, z0: &[f64], t: usize, eps: &[f64], out: &mut [f64]) {
        let ab = self.alpha_bars[t];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for ((o, x), e) in out.iter_mut().zip(z0).zip(eps) {
            *o = a * x + b * e;
        }
    }

    /// In-place reverse step over a flat buffer: posterior mean plus
    /// `sigma_t · noise` when `t > 0` and noise is supplied.
    pub fn ddpm_step_slice(&self, z: &mut [f64], t: usize, eps_pred: &[f64], noise: Option<&[f64]>) {
        let ab = self.alpha_bars[t];
        let inv_sqrt_alpha = 1.0 / self.alphas[t].sqrt();
        let coef = self.betas[t] / (1.0 - ab).sqrt();
        let sigma = self.posterior_std(t);
        for (i, (zi, e)) in z.iter_mut().zip(eps_pred).enumerate() {
            let mean = inv_sqrt_alpha * (*zi - coef * e);
            *zi = match noise {
                Some(n) if t > 0 => mean + sigma * n[i],
                _ => mean,
            };
        }
    }

    /// Derivative of the reverse-step output with respect to the noise
    /// prediction (the same scalar for every coordinate).
    pub fn step_eps_jacobian(&self, t: usize) -> f64 {
        -self.betas[t] / ((1.0 - self.alpha_bars[t]).sqrt() * self.alphas[t].sqrt())
    }
}

pub fn forward_noise(z0: &Latent, t: usize, eps: &Latent, sched: &NoiseSchedule) -> Result<Latent> {
    sched.check_index(t)?;
    eps.ensure_dim(z0.dim(), "forward_noise eps")?;
    let mut out = vec![0.0; z0.dim()];
    sched.forward_noise_slice(z0, t, eps, &mut out);
    Ok(Latent(out))
}

pub fn ddpm_step(
    z_t: &Latent,
    t: usize,
    eps_pred: &Latent,
    sched: &NoiseSchedule,
    noise: Option<&Latent>,
) -> Result<Latent> {
    sched.check_index(t)?;
    eps_pred.ensure_dim(z_t.dim(), "ddpm_step eps_pred")?;
    if let Some(n) = noise {
        n.ensure_dim(z_t.dim(), "ddpm_step noise")?;
    }
    let mut out = z_t.0.clone();
    sched.ddpm_step_slice(&mut out, t, eps_pred, noise.map(|n| &n.0[..]));
    Ok(Latent(out))
}

/// Classifier-free guidance: `uncond + g·(cond − uncond)`.
pub fn cfg_combine(eps_cond: &Latent, eps_uncond: &Latent, g: f64) -> Result<Latent> {
    eps_uncond.ensure_dim(eps_cond.dim(), "cfg_combine")?;
    let mut out = eps_cond.0.clone();
    cfg_combine_slice(&mut out, eps_uncond, g);
    Ok(Latent(out))
}

/// In-place guidance: `cond` is overwritten with the guided prediction.
pub fn cfg_combine_slice(cond: &mut [f64], uncond: &[f64], g: f64) {
    for (c, u) in cond.iter_mut().zip(uncond) {
        *c = u + g * (*c - u);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lin(t: usize, a: f64, b: f64) -> NoiseSchedule {
        make_schedule(t, a, b, Spacing::Linear).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = lin(1, 0.1, 0.1);
        assert_eq!(s.betas(), &[0.1]);
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn two_step_schedule() {
        let s = lin(2, 0.1, 0.2);
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn hundred_step_default_range_is_monotone() {
        // Direct product of (1 - beta) over the 100 linear betas, computed
        // independently: 0.3635632480554922. The terminal value is far from
        // pure noise, which is why short schedules use wider beta ranges.
        let s = lin(100, 1e-4, 0.02);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        let last = *s.alpha_bars().last().unwrap();
        assert!((last - 0.363_563_248_055_492_2).abs() < 1e-12, "{last}");
    }

    #[test]
    fn invalid_ranges_name_the_field() {
        let err = make_schedule(10, 0.0, 0.1, Spacing::Linear).unwrap_err();
        assert!(err.to_string().contains("beta_start"));
        let err = make_schedule(10, 0.2, 0.1, Spacing::Linear).unwrap_err();
        assert!(err.to_string().contains("beta_end"));
        let err = make_schedule(10, 0.1, 1.0, Spacing::Linear).unwrap_err();
        assert!(err.to_string().contains("beta_end"));
        let err = make_schedule(0, 0.1, 0.2, Spacing::Linear).unwrap_err();
        assert!(err.to_string().contains("steps"));
    }

    #[test]
    fn forward_noise_closed_form() {
        // A single step with beta = 0.75 gives alpha_bar = 0.25.
        let s = lin(1, 0.75, 0.75);
        let z = forward_noise(&Latent(vec![1.0, 0.0]), 0, &Latent(vec![0.0, 1.0]), &s).unwrap();
        assert!((z[0] - 0.5).abs() < 1e-15);
        assert!((z[1] - 0.866_025_403_784_438_6).abs() < 1e-15);

        let zero = forward_noise(&Latent(vec![2.0, -1.0]), 0, &Latent::zeros(2), &s).unwrap();
        assert_eq!(zero.0, vec![1.0, -0.5]);

        let tiny = lin(3, 1e-9, 1e-9);
        let z0 = Latent(vec![0.3, -0.7]);
        let z = forward_noise(&z0, 0, &Latent(vec![1.0, 1.0]), &tiny).unwrap();
        assert!(z.distance(&z0) < 1e-4);

        assert!(matches!(
            forward_noise(&z0, 3, &z0, &tiny),
            Err(Error::Index { index: 3, len: 3, .. })
        ));
    }

    #[test]
    fn perfect_single_step_denoiser_recovers_data() {
        let s = lin(1, 0.1, 0.1);
        let z0 = Latent(vec![0.37, -1.25, 2.5]);
        let eps = Latent(vec![-0.4, 1.1, 0.05]);
        let zt = forward_noise(&z0, 0, &eps, &s).unwrap();
        let back = ddpm_step(&zt, 0, &eps, &s, None).unwrap();
        for (a, b) in back.iter().zip(z0.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_in_zero_out() {
        let s = lin(10, 1e-3, 0.2);
        let z = ddpm_step(&Latent::zeros(2), 5, &Latent::zeros(2), &s, Some(&Latent::zeros(2))).unwrap();
        assert_eq!(z.0, vec![0.0, 0.0]);
    }

    #[test]
    fn final_step_adds_no_noise() {
        let s = lin(10, 1e-3, 0.2);
        let z = Latent(vec![0.5, 0.5]);
        let e = Latent(vec![0.1, -0.1]);
        let with = ddpm_step(&z, 0, &e, &s, Some(&Latent(vec![9.0, 9.0]))).unwrap();
        let without = ddpm_step(&z, 0, &e, &s, None).unwrap();
        assert_eq!(with, without);
        assert_eq!(s.posterior_std(0), 0.0);
    }

    #[test]
    fn cfg_special_cases() {
        let c = Latent(vec![1.0, 2.0]);
        let u = Latent(vec![-3.0, 0.5]);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&c, &c, 6.0).unwrap(), c);
        assert!(matches!(cfg_combine(&c, &Latent::zeros(3), 2.0), Err(Error::Shape(_))));
    }

    #[test]
    fn strided_schedule_matches_parent_alpha_bars() {
        let parent = lin(50, 1e-3, 0.25);
        let child = parent.strided(25).unwrap();
        assert_eq!(child.len(), 25);
        assert_eq!(child.model_timestep(24), 49);
        assert_eq!(child.model_timestep(0), 1);
        for k in 0..25 {
            let t = child.model_timestep(k);
            assert!((child.alpha_bars()[k] - parent.alpha_bars()[t]).abs() < 1e-14);
        }
        assert!(child.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert_eq!(parent.strided(50).unwrap().alpha_bars(), parent.alpha_bars());
        assert!(parent.strided(51).is_err());
    }
}
