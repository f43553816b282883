//! The conditional noise predictor.
//!
//! Input rows are the concatenation `[z_t, sin/cos(t), embed(token)]`; the
//! MLP maps them to a noise estimate of the same width as `z_t`. Gradients
//! cover the MLP and the token-embedding table; the time embedding has no
//! parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Mlp, MlpTape};
use crate::error::{Error, FieldError, Result};
use crate::latent::Latent;
use crate::rng;
use crate::sampler::NoisePredictor;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub time_embed_dim: usize,
    pub vocab_size: usize,
    pub cond_embed_dim: usize,
    pub activation: Activation,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden_dims: vec![64, 64],
            time_embed_dim: 16,
            vocab_size: 11,
            cond_embed_dim: 8,
            activation: Activation::Silu,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("data_dim", self.data_dim),
            ("time_embed_dim", self.time_embed_dim),
            ("cond_embed_dim", self.cond_embed_dim),
        ] {
            if v == 0 {
                errs.push(FieldError::new(format!("model.{name}"), "must be at least 1"));
            }
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            errs.push(FieldError::new("model.hidden_dims", "every width must be at least 1"));
        }
        if self.vocab_size < 2 {
            errs.push(FieldError::new(
                "model.vocab_size",
                "needs at least one concept token plus the null token",
            ));
        }
        errs
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_embed_dim + self.cond_embed_dim
    }

    fn mlp(&self) -> Mlp {
        let mut dims = vec![self.input_dim()];
        dims.extend(&self.hidden_dims);
        dims.push(self.data_dim);
        Mlp::new(dims, self.activation)
    }

    pub fn embed_len(&self) -> usize {
        self.vocab_size * self.cond_embed_dim
    }

    pub fn param_count(&self) -> usize {
        self.embed_len() + self.mlp().param_count()
    }
}

/// Sinusoidal embedding of an integer time index, written into `out`.
pub fn time_embedding(t: usize, out: &mut [f64]) {
    let dim = out.len();
    let half = dim / 2;
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    if dim % 2 == 1 {
        out[dim - 1] = 0.0;
    }
}

/// Named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Gradient vector laid out exactly like [`Denoiser::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<f64>);

impl Gradients {
    pub fn zeros(n: usize) -> Self {
        Gradients(vec![0.0; n])
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    mlp: Mlp,
    params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DenoiserTape {
    tokens: Vec<usize>,
    mlp: MlpTape,
}

impl Denoiser {
    /// Xavier-normal weights, zero biases, standard-normal token embeddings.
    pub fn init<R: Rng>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mlp = config.mlp();
        let mut params = Vec::with_capacity(config.param_count());
        params.extend(rng::normal_vec(rng, config.embed_len()));
        for l in 0..mlp.layers() {
            let (_, _, i, o) = mlp.layer_offsets(l);
            let std = (2.0 / (i + o) as f64).sqrt();
            params.extend(rng::normal_vec(rng, i * o).into_iter().map(|v| v * std));
            params.extend(std::iter::repeat_n(0.0, o));
        }
        Ok(Self { config, mlp, params })
    }

    pub fn from_params(config: DenoiserConfig, params: Vec<f64>) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        if params.len() != config.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                config.param_count(),
                params.len()
            )));
        }
        let mlp = config.mlp();
        Ok(Self { config, mlp, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    /// Deep, independent copy (used for the frozen teacher).
    pub fn snapshot(&self) -> Denoiser {
        self.clone()
    }

    pub fn layout(&self) -> Vec<ParamEntry> {
        let c = &self.config;
        let mut entries = vec![ParamEntry {
            name: "token_embedding".into(),
            shape: vec![c.vocab_size, c.cond_embed_dim],
            offset: 0,
        }];
        let base = c.embed_len();
        for l in 0..self.mlp.layers() {
            let (w, b, i, o) = self.mlp.layer_offsets(l);
            entries.push(ParamEntry {
                name: format!("mlp.{l}.weight"),
                shape: vec![o, i],
                offset: base + w,
            });
            entries.push(ParamEntry {
                name: format!("mlp.{l}.bias"),
                shape: vec![o],
                offset: base + b,
            });
        }
        entries
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        let e = self.layout().into_iter().find(|e| e.name == name)?;
        Some(&self.params[e.range()])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let e = self.layout().into_iter().find(|e| e.name == name)?;
        Some(&mut self.params[e.range()])
    }

    /// Overwrites the embedding of token `to` with that of token `from`.
    pub fn copy_token_embedding(&mut self, from: usize, to: usize) -> Result<()> {
        self.check_tokens(&[from, to])?;
        let ce = self.config.cond_embed_dim;
        self.params.copy_within(from * ce..(from + 1) * ce, to * ce);
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            Some(&token) => Err(Error::Token {
                token,
                vocab_size: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn build_input(&self, z: &[f64], ts: &[usize], tokens: &[usize]) -> Vec<f64> {
        let c = &self.config;
        let (d, te, ce) = (c.data_dim, c.time_embed_dim, c.cond_embed_dim);
        let width = c.input_dim();
        let mut input = vec![0.0; tokens.len() * width];
        for (r, row) in input.chunks_mut(width).enumerate() {
            row[..d].copy_from_slice(&z[r * d..(r + 1) * d]);
            time_embedding(ts[r], &mut row[d..d + te]);
            let tok = tokens[r];
            row[d + te..].copy_from_slice(&self.params[tok * ce..(tok + 1) * ce]);
        }
        input
    }

    /// Forward pass over rows with per-row time indices, keeping a tape.
    pub fn forward_train(&self, z: &[f64], ts: &[usize], tokens: &[usize]) -> Result<(Vec<f64>, DenoiserTape)> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        if z.len() != n * self.config.data_dim || ts.len() != n {
            return Err(Error::Shape(format!(
                "forward over {n} rows needs {} latent values and {n} time indices",
                n * self.config.data_dim
            )));
        }
        let input = self.build_input(z, ts, tokens);
        let (out, tape) = self.mlp.forward(&self.params[self.config.embed_len()..], &input, n);
        Ok((
            out,
            DenoiserTape {
                tokens: tokens.to_vec(),
                mlp: tape,
            },
        ))
    }

    /// Gradient of `Σ d_output · output` with respect to every parameter.
    pub fn backward(&self, tape: &DenoiserTape, d_output: &[f64]) -> Gradients {
        let c = &self.config;
        let split = c.embed_len();
        let mut grads = Gradients::zeros(self.params.len());
        let (embed_grad, mlp_grad) = grads.0.split_at_mut(split);
        let d_input = self.mlp.backward(&self.params[split..], &tape.mlp, d_output, mlp_grad);
        let (off, ce, width) = (c.data_dim + c.time_embed_dim, c.cond_embed_dim, c.input_dim());
        for (row, &tok) in d_input.chunks(width).zip(&tape.tokens) {
            for (g, d) in embed_grad[tok * ce..(tok + 1) * ce].iter_mut().zip(&row[off..]) {
                *g += d;
            }
        }
        grads
    }

    pub fn predict_noise(&self, z_t: &Latent, t: usize, token: usize) -> Result<Latent> {
        z_t.ensure_dim(self.config.data_dim, "predict_noise z_t")?;
        let (out, _) = self.forward_train(z_t, &[t], &[token])?;
        Ok(Latent(out))
    }
}

impl NoisePredictor for Denoiser {
    fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    fn predict_rows(&self, z: &[f64], model_t: usize, tokens: &[usize]) -> Result<Vec<f64>> {
        let ts = vec![model_t; tokens.len()];
        Ok(self.forward_train(z, &ts, tokens)?.0)
    }
}

fn squared_error_grad(pred: &[f64], target: &[f64], scale: f64) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * scale * d
        })
        .collect();
    (loss, grad)
}

/// Denoising loss `||eps − model(z_t, t, token)||²` and its gradient.
pub fn loss_dm(
    model: &Denoiser,
    z0: &Latent,
    t: usize,
    token: usize,
    eps: &Latent,
    sched: &NoiseSchedule,
) -> Result<(f64, Gradients)> {
    let d = model.config().data_dim;
    z0.ensure_dim(d, "loss_dm z0")?;
    eps.ensure_dim(d, "loss_dm eps")?;
    let z_t = crate::schedule::forward_noise(z0, t, eps, sched)?;
    let (pred, tape) = model.forward_train(&z_t, &[sched.model_timestep(t)], &[token])?;
    let (loss, d_out) = squared_error_grad(&pred, eps, 1.0);
    Ok((loss, model.backward(&tape, &d_out)))
}

/// Distillation loss `||teacher(z*) − student(z*)||²` at step `tau` of
/// `sched`; gradients are taken with respect to the student only.
pub fn loss_kd(
    student: &Denoiser,
    teacher: &Denoiser,
    z_star: &Latent,
    tau: usize,
    token: usize,
    sched: &NoiseSchedule,
) -> Result<(f64, Gradients)> {
    if student.config() != teacher.config() {
        return Err(Error::Shape("student and teacher configurations differ".into()));
    }
    sched.check_index(tau)?;
    let mt = sched.model_timestep(tau);
    let target = teacher.predict_noise(z_star, mt, token)?;
    let (pred, tape) = student.forward_train(z_star, &[mt], &[token])?;
    let (loss, d_out) = squared_error_grad(&pred, &target, 1.0);
    Ok((loss, student.backward(&tape, &d_out)))
}
