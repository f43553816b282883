//! Oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use lifelong_diffusion::nn::{loss_dm, loss_kd, Activation, Denoiser, DenoiserConfig, Gradients};
use lifelong_diffusion::rng::{normal_vec, stream};
use lifelong_diffusion::sampler::{sample, NoisePredictor};
use lifelong_diffusion::schedule::{make_schedule, NoiseSchedule, Spacing};
use lifelong_diffusion::{Latent, Result};

/// A denoiser small enough for exhaustive finite differences.
pub fn tiny_config() -> DenoiserConfig {
    DenoiserConfig {
        data_dim: 2,
        hidden_dims: vec![12, 10],
        time_embed_dim: 4,
        vocab_size: 4,
        cond_embed_dim: 3,
        activation: Activation::Silu,
    }
}

pub fn workspace_file(rel: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

/// Max relative error between analytic and central-difference gradients of
/// `loss` over every parameter of `model`.
pub fn max_relative_error(model: &Denoiser, h: f64, loss: impl Fn(&Denoiser) -> (f64, Gradients)) -> f64 {
    let (_, analytic) = loss(model);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in 0..model.param_count() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let up = loss(&probe).0;
        probe.params_mut()[i] = orig - h;
        let down = loss(&probe).0;
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.0[i];
        let scale = a.abs().max(numeric.abs());
        if scale > 1e-7 {
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    worst
}

/// Gradient check of both training losses on a fresh tiny model; returns
/// `(param_count, max_rel_err_dm, max_rel_err_kd)`.
pub fn gradient_check(seed: u64) -> (usize, f64, f64) {
    let sched = make_schedule(20, 1e-4, 0.2, Spacing::Linear).unwrap();
    let student = Denoiser::init(tiny_config(), &mut stream(seed, "student")).unwrap();
    let teacher = Denoiser::init(tiny_config(), &mut stream(seed, "teacher")).unwrap();
    let mut r = stream(seed, "data");
    let z0 = Latent(normal_vec(&mut r, 2));
    let eps = Latent(normal_vec(&mut r, 2));
    let z_star = Latent(normal_vec(&mut r, 2));
    let h = 1e-5;
    let dm = max_relative_error(&student, h, |m| loss_dm(m, &z0, 7, 2, &eps, &sched).unwrap());
    let kd = max_relative_error(&student, h, |m| loss_kd(m, &teacher, &z_star, 13, 3, &sched).unwrap());
    (student.param_count(), dm, kd)
}

/// Closed-form noise predictor for `N(mean, std²·I)` data, with its own ᾱ
/// table built directly from the β values.
pub struct Oracle {
    pub mean: Vec<f64>,
    pub std: f64,
    pub alpha_bars: Vec<f64>,
}

impl Oracle {
    pub fn new(mean: Vec<f64>, std: f64, sched: &NoiseSchedule) -> Self {
        let mut prod = 1.0;
        let alpha_bars = sched
            .betas()
            .iter()
            .map(|b| {
                prod *= 1.0 - b;
                prod
            })
            .collect();
        Self { mean, std, alpha_bars }
    }
}

impl NoisePredictor for Oracle {
    fn data_dim(&self) -> usize {
        self.mean.len()
    }

    fn predict_rows(&self, z: &[f64], t: usize, _tokens: &[usize]) -> Result<Vec<f64>> {
        let ab = self.alpha_bars[t];
        let d = self.mean.len();
        let var = ab * self.std.powi(2) + (1.0 - ab);
        Ok(z.iter()
            .enumerate()
            .map(|(i, &x)| (1.0 - ab).sqrt() * (x - ab.sqrt() * self.mean[i % d]) / var)
            .collect())
    }
}

/// Worst relative mean and variance errors of oracle sampling over
/// `n` samples, on the fine 1000-step schedule. Coarse schedules are biased:
/// with posterior variance β̃ the sampler shrinks the data variance by about
/// 15% at 50 steps even with the exact predictor.
pub fn oracle_errors(n: usize, seed: u64) -> (f64, f64) {
    let sched = make_schedule(1000, 1e-4, 0.02, Spacing::Linear).unwrap();
    let (mean, std) = (vec![2.0, -1.5], 0.6);
    let oracle = Oracle::new(mean.clone(), std, &sched);
    let xs = sample(&oracle, 1, &sched, 1.0, &mut stream(seed, "oracle"), n).unwrap();
    let (mut mean_err, mut var_err): (f64, f64) = (0.0, 0.0);
    for d in 0..2 {
        let m = xs.iter().map(|x| x[d]).sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x[d] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        mean_err = mean_err.max((m - mean[d]).abs() / mean[d].abs());
        var_err = var_err.max((v - std * std).abs() / (std * std));
    }
    (mean_err, var_err)
}

/// The exact invariants, each as `(name, holds)`.
pub fn exact_invariants() -> Vec<(&'static str, bool)> {
    use lifelong_diffusion::checkpoint::{load_denoiser, save_denoiser};
    use lifelong_diffusion::eval::{run_pcf_protocol, AlignmentRecord};
    use lifelong_diffusion::icgen::icgen_from_contexts;
    use lifelong_diffusion::schedule::{ddpm_step, forward_noise};

    let mut out = Vec::new();

    let sched = make_schedule(20, 1e-4, 0.2, Spacing::Linear).unwrap();
    let model = Denoiser::init(tiny_config(), &mut stream(0, "inv")).unwrap();
    let z = Latent(vec![0.3, -1.2]);
    let kd_zero = (0..sched.len()).all(|tau| {
        let (l, g) = loss_kd(&model, &model.snapshot(), &z, tau, 2, &sched).unwrap();
        l == 0.0 && g.max_abs() == 0.0
    });
    out.push(("L_KD(student = teacher) = 0", kd_zero));

    let one = make_schedule(1, 0.1, 0.1, Spacing::Linear).unwrap();
    let z0 = Latent(vec![1.7, -0.4]);
    let eps = Latent(vec![0.9, 0.35]);
    let z1 = forward_noise(&z0, 0, &eps, &one).unwrap();
    let back = ddpm_step(&z1, 0, &eps, &one, None).unwrap();
    let recovered = back.iter().zip(z0.iter()).all(|(a, b)| (a - b).abs() <= 1e-12);
    out.push(("perfect one-step denoiser recovers z0 at T=1", recovered));

    let contexts = vec![Latent(vec![1.0, 2.0]), Latent(vec![-3.0, 0.5])];
    let same = icgen_from_contexts(&model, contexts.clone(), &[1, 2], 0.0, &sched, 6.0, &mut stream(0, "s0")).unwrap();
    out.push(("ICGen at s = 0 returns its contexts", same == contexts));

    let records: Vec<AlignmentRecord> = (1..=4)
        .flat_map(|session| {
            (1..=session).map(move |learned| AlignmentRecord {
                token: 10 + learned,
                learned_at: Some(learned),
                session,
                ia: Some(0.73),
                ta: None,
                n_samples: 100,
            })
        })
        .collect();
    let pcf = run_pcf_protocol(&records).unwrap();
    out.push(("IAD = 0 on a constant IA history", pcf.iad.iter().all(|&(_, v)| v == 0.0)));

    let own = [0.8, 0.5, 0.9];
    let last = [0.6, 0.45, 0.3];
    let base = lifelong_diffusion::eval::iad(&own, &last).unwrap();
    let scaled = [0.25, 4.0, 1e3].iter().all(|&c| {
        let o: Vec<f64> = own.iter().map(|v| v * c).collect();
        let l: Vec<f64> = last.iter().map(|v| v * c).collect();
        (lifelong_diffusion::eval::iad(&o, &l).unwrap() - base).abs() <= 1e-12 * base.abs().max(1.0)
    });
    out.push(("IAD invariant under IA → c·IA", scaled));

    let dir = std::env::temp_dir().join(format!("lfsd-inv-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("m.lfsd");
    save_denoiser(&model, &path).unwrap();
    let loaded = load_denoiser(&path).unwrap();
    let exact = loaded.config() == model.config()
        && loaded.params().iter().zip(model.params()).all(|(a, b)| a.to_bits() == b.to_bits());
    std::fs::remove_dir_all(&dir).ok();
    out.push(("checkpoint round trip is bit-exact", exact));
    out
}
