//! Base pretraining and the per-session fine-tuning loop with data-free
//! distillation from the previous session's model.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::concepts::{sample_concept, ConceptSpec, FewShotDataset, PromptSets};
use crate::error::{Error, FieldError, Result};
use crate::eval::AlignmentRecord;
use crate::icgen::ContextBank;
use crate::latent::Latent;
use crate::nn::{Adam, AdamConfig, Denoiser, DenoiserConfig, Gradients};
use crate::rng;
use crate::sampler::{NoisePredictor, NULL_TOKEN};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub samples_per_concept: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    pub lr_floor: f64,
    pub cond_dropout: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            samples_per_concept: 2000,
            steps: 5000,
            batch: 128,
            lr: 2e-3,
            lr_floor: 0.05,
            cond_dropout: 0.1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        if self.samples_per_concept == 0 {
            errs.push(FieldError::new("pretrain.samples_per_concept", "must be at least 1"));
        }
        if self.steps == 0 {
            errs.push(FieldError::new("pretrain.steps", "must be at least 1"));
        }
        if self.batch == 0 {
            errs.push(FieldError::new("pretrain.batch", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(FieldError::new("pretrain.lr", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            errs.push(FieldError::new("pretrain.lr_floor", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            errs.push(FieldError::new("pretrain.cond_dropout", "must lie in [0, 1)"));
        }
        errs
    }
}

/// How often the optimizer steps inside one outer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// One update per distillation step `τ`.
    #[default]
    PerTau,
    /// One update per outer step, distillation loss averaged over `τ`.
    PerOuter,
}

/// What the student is distilled on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdMode {
    /// No distillation: plain sequential fine-tuning.
    None,
    /// Noise predictions along the teacher's own reverse rollout from noise.
    #[default]
    TeacherTrajectory,
    /// Latents along the student's rollout, matched to the teacher's.
    StudentTrajectoryLatent,
    /// Noise predictions on noised current-session samples.
    CurrentData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub lambda: f64,
    pub t_tau: usize,
    pub cond_dropout: f64,
    pub batch: usize,
    pub seed: u64,
    pub update_mode: UpdateMode,
    pub kd_mode: KdMode,
    /// Context latents stored per session; all K when unset.
    pub contexts: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 3e-5,
            lambda: 1.0,
            t_tau: 25,
            cond_dropout: 0.1,
            batch: 1,
            seed: 0,
            update_mode: UpdateMode::PerTau,
            kd_mode: KdMode::TeacherTrajectory,
            contexts: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        if self.steps == 0 {
            errs.push(FieldError::new("train.steps", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(FieldError::new("train.lr", "must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            errs.push(FieldError::new("train.lambda", "must be non-negative"));
        }
        if self.t_tau == 0 {
            errs.push(FieldError::new("train.t_tau", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            errs.push(FieldError::new("train.cond_dropout", "must lie in [0, 1)"));
        }
        if self.batch == 0 {
            errs.push(FieldError::new("train.batch", "must be at least 1"));
        }
        if self.contexts == Some(0) {
            errs.push(FieldError::new("train.contexts", "must be at least 1"));
        }
        errs
    }

    fn distills(&self) -> bool {
        self.kd_mode != KdMode::None && self.lambda > 0.0
    }
}

/// Everything that crosses from one session to the next.
#[derive(Debug, Clone)]
pub struct SessionState {
    /// Number of completed sessions.
    pub session_index: usize,
    pub model: Denoiser,
    pub context_bank: ContextBank,
    pub ia_history: Vec<AlignmentRecord>,
}

impl SessionState {
    pub fn new(model: Denoiser) -> Self {
        Self {
            session_index: 0,
            model,
            context_bank: ContextBank::new(),
            ia_history: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub l_dm: f64,
    pub l_kd: f64,
    pub l_train: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub trace: Vec<TraceRow>,
    pub optimizer_steps: u64,
    pub teacher_predictions: usize,
    pub student_kd_predictions: usize,
}

/// Flat cosine decay from `lr` to `floor·lr`.
fn cosine_lr(lr: f64, floor: f64, step: usize, total: usize) -> f64 {
    let progress = step as f64 / total.max(1) as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    lr * (floor + (1.0 - floor) * cos)
}

/// Squared error summed over rows, times `scale`; writes `d loss/d pred`.
fn squared_error(pred: &[f64], target: &[f64], scale: f64, d_out: &mut [f64]) -> f64 {
    let mut loss = 0.0;
    for ((p, t), d) in pred.iter().zip(target).zip(d_out.iter_mut()) {
        let e = p - t;
        loss += e * e;
        *d = 2.0 * scale * e;
    }
    loss * scale
}

fn finite_or_fail(step: usize, what: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Training {
            step,
            message: format!("{what} is {value}"),
        })
    }
}

/// Trains the base model on plentiful samples of every base concept.
pub fn pretrain_base<R: Rng>(
    model_config: DenoiserConfig,
    config: &PretrainConfig,
    base: &[ConceptSpec],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Denoiser> {
    if base.is_empty() {
        return Err(Error::config("base_concepts", "at least one base concept is required"));
    }
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let mut model = Denoiser::init(model_config, rng)?;
    let data = base
        .iter()
        .map(|spec| sample_concept(spec, config.samples_per_concept, rng))
        .collect::<Result<Vec<_>>>()?;
    let d = model.config().data_dim;
    let b = config.batch;
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), model.param_count());
    let (mut z, mut ts, mut tokens, mut eps) = (vec![0.0; b * d], vec![0; b], vec![0; b], vec![0.0; b * d]);
    let mut d_out = vec![0.0; b * d];
    for step in 0..config.steps {
        for r in 0..b {
            let c = rng.random_range(0..base.len());
            let x0 = &data[c][rng.random_range(0..data[c].len())];
            let t = rng.random_range(0..sched.len());
            let row_eps = &mut eps[r * d..(r + 1) * d];
            for e in row_eps.iter_mut() {
                *e = rng::normal(rng);
            }
            sched.forward_noise_slice(x0, t, row_eps, &mut z[r * d..(r + 1) * d]);
            ts[r] = sched.model_timestep(t);
            tokens[r] = if rng.random_bool(config.cond_dropout) {
                NULL_TOKEN
            } else {
                base[c].token
            };
        }
        let (pred, tape) = model.forward_train(&z, &ts, &tokens)?;
        let loss = squared_error(&pred, &eps, 1.0 / b as f64, &mut d_out);
        finite_or_fail(step, "pretraining loss", loss)?;
        let grads = model.backward(&tape, &d_out);
        let lr = cosine_lr(config.lr, config.lr_floor, step, config.steps);
        adam.step_with_lr(model.params_mut(), &grads.0, lr);
    }
    Ok(model)
}

/// Stores `m` of the session's samples (all of them, in order, when
/// `m == K`).
pub fn capture_vision_context<R: Rng>(fewshot: &FewShotDataset, m: usize, rng: &mut R) -> Result<Vec<Latent>> {
    let k = fewshot.k();
    if !(1..=k).contains(&m) {
        return Err(Error::config("contexts", format!("must lie in 1..={k}, got {m}")));
    }
    if m == k {
        return Ok(fewshot.samples().to_vec());
    }
    Ok(fewshot.samples().choose_multiple(rng, m).cloned().collect())
}

/// Denoising rows drawn once per outer step.
struct DmBatch {
    z_t: Vec<f64>,
    ts: Vec<usize>,
    tokens: Vec<usize>,
    eps: Vec<f64>,
}

enum KdTarget {
    /// Match the teacher's noise prediction.
    Noise(Vec<f64>),
    /// Match the teacher's next latent after one reverse step of the
    /// student's own latent at distillation index `tau`.
    Latent { next: Vec<f64>, tau: usize, noise: Option<Vec<f64>> },
}

struct KdRows {
    z: Vec<f64>,
    model_t: usize,
    tokens: Vec<usize>,
    target: KdTarget,
}

struct Evaluated {
    l_dm: f64,
    l_kd: f64,
    grads: Gradients,
    kd_pred: Vec<f64>,
}

/// One student forward/backward over the denoising rows and the
/// distillation rows together. `kd_weight` multiplies the distillation term.
fn evaluate(
    student: &Denoiser,
    dm: Option<&DmBatch>,
    kd: Option<&KdRows>,
    kd_weight: f64,
    distill_sched: &NoiseSchedule,
) -> Result<Evaluated> {
    let d = student.config().data_dim;
    let (mut z, mut ts, mut tokens) = (Vec::new(), Vec::new(), Vec::new());
    if let Some(dm) = dm {
        z.extend_from_slice(&dm.z_t);
        ts.extend_from_slice(&dm.ts);
        tokens.extend_from_slice(&dm.tokens);
    }
    let n_dm = z.len();
    if let Some(kd) = kd {
        z.extend_from_slice(&kd.z);
        ts.extend(std::iter::repeat_n(kd.model_t, kd.tokens.len()));
        tokens.extend_from_slice(&kd.tokens);
    }
    let (pred, tape) = student.forward_train(&z, &ts, &tokens)?;
    let mut d_out = vec![0.0; pred.len()];
    let mut l_dm = 0.0;
    if let Some(dm) = dm {
        l_dm = squared_error(&pred[..n_dm], &dm.eps, 1.0 / dm.tokens.len() as f64, &mut d_out[..n_dm]);
    }
    let mut l_kd = 0.0;
    let kd_pred = pred[n_dm..].to_vec();
    if let Some(kd) = kd {
        let rows = kd.tokens.len() as f64;
        let d_kd = &mut d_out[n_dm..];
        match &kd.target {
            KdTarget::Noise(target) => {
                l_kd = squared_error(&kd_pred, target, 1.0 / rows, d_kd);
            }
            KdTarget::Latent { next, tau, noise } => {
                let mut stepped = kd.z.clone();
                distill_sched.ddpm_step_slice(&mut stepped, *tau, &kd_pred, noise.as_deref());
                l_kd = squared_error(&stepped, next, 1.0 / rows, d_kd);
                let jac = distill_sched.step_eps_jacobian(*tau);
                d_kd.iter_mut().for_each(|g| *g *= jac);
            }
        }
        d_kd.iter_mut().for_each(|g| *g *= kd_weight);
    }
    debug_assert_eq!(d, student.data_dim());
    Ok(Evaluated {
        l_dm,
        l_kd,
        grads: student.backward(&tape, &d_out),
        kd_pred,
    })
}

/// Random-access to distillation prompts and noise, separate from the
/// stream that draws the session's training rows.
struct Rollout<'a> {
    teacher: &'a Denoiser,
    sched: &'a NoiseSchedule,
    rng: rng::Stream,
    batch: usize,
    dim: usize,
}

impl Rollout<'_> {
    fn prompts(&mut self, pool: &[usize]) -> Vec<usize> {
        (0..self.batch)
            .map(|_| *pool.choose(&mut self.rng).expect("prompt pool is non-empty"))
            .collect()
    }

    fn noise(&mut self) -> Vec<f64> {
        rng::normal_vec(&mut self.rng, self.batch * self.dim)
    }
}

/// The distillation loop with an explicit teacher. Only the current
/// session's samples are visible here.
#[allow(clippy::too_many_arguments)]
pub fn distill_session<R: Rng>(
    student: &mut Denoiser,
    teacher: &Denoiser,
    fewshot: &FewShotDataset,
    prompts: &PromptSets,
    config: &TrainConfig,
    train_sched: &NoiseSchedule,
    distill_sched: &NoiseSchedule,
    session_index: usize,
    rng: &mut R,
) -> Result<SessionReport> {
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if fewshot.k() == 0 || prompts.session.is_empty() {
        return Err(Error::Protocol("a session needs training samples and a session prompt".into()));
    }
    if config.distills() && prompts.regularization.is_empty() {
        return Err(Error::config(
            "prompts.regularization",
            "distillation needs at least one regularization prompt",
        ));
    }
    if distill_sched.len() != config.t_tau {
        return Err(Error::config(
            "train.t_tau",
            format!("distillation schedule has {} steps, expected {}", distill_sched.len(), config.t_tau),
        ));
    }
    if !student.is_finite() {
        return Err(Error::Training {
            step: 0,
            message: "incoming model has non-finite parameters".into(),
        });
    }
    let d = student.config().data_dim;
    let b = config.batch;
    let samples = fewshot.samples();
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), student.param_count());
    let mut rollout = Rollout {
        teacher,
        sched: distill_sched,
        rng: rng::indexed_stream(config.seed, "distill", session_index),
        batch: b,
        dim: d,
    };
    let mut report = SessionReport::default();
    let t_tau = config.t_tau;

    for step in 0..config.steps {
        let mut dm = DmBatch {
            z_t: vec![0.0; b * d],
            ts: Vec::with_capacity(b),
            tokens: Vec::with_capacity(b),
            eps: vec![0.0; b * d],
        };
        for r in 0..b {
            let z0 = &samples[rng.random_range(0..samples.len())];
            let token = if rng.random_bool(config.cond_dropout) {
                NULL_TOKEN
            } else {
                *prompts.session.choose(rng).expect("session prompts are non-empty")
            };
            let t = rng.random_range(0..train_sched.len());
            let eps = &mut dm.eps[r * d..(r + 1) * d];
            for e in eps.iter_mut() {
                *e = rng::normal(rng);
            }
            train_sched.forward_noise_slice(z0, t, eps, &mut dm.z_t[r * d..(r + 1) * d]);
            dm.ts.push(train_sched.model_timestep(t));
            dm.tokens.push(token);
        }

        let mut sums = (0.0, 0.0, 0.0);
        let mut updates = 0usize;
        let mut pending = Gradients::zeros(student.param_count());
        let per_tau = config.update_mode == UpdateMode::PerTau;
        let kd_weight = if per_tau {
            config.lambda
        } else {
            config.lambda / t_tau as f64
        };

        // Runs the student on one set of distillation rows, updating right
        // away (per-τ mode) or accumulating the gradient (per-outer mode).
        let mut apply = |student: &mut Denoiser, kd: Option<&KdRows>, adam: &mut Adam| -> Result<Vec<f64>> {
            let ev = evaluate(student, per_tau.then_some(&dm), kd, kd_weight, distill_sched)?;
            let l_train = ev.l_dm + config.lambda * ev.l_kd;
            finite_or_fail(step, "training loss", l_train)?;
            sums.0 += ev.l_dm;
            sums.1 += ev.l_kd;
            sums.2 += l_train;
            updates += 1;
            if per_tau {
                adam.step(student.params_mut(), &ev.grads.0);
            } else {
                pending.0.iter_mut().zip(&ev.grads.0).for_each(|(p, g)| *p += g);
            }
            Ok(ev.kd_pred)
        };

        let mode = if config.distills() { config.kd_mode } else { KdMode::None };
        match mode {
            KdMode::None => {
                if per_tau {
                    for _ in 0..t_tau {
                        apply(student, None, &mut adam)?;
                    }
                }
            }
            KdMode::TeacherTrajectory => {
                let tokens = rollout.prompts(&prompts.regularization);
                let mut z_star = rollout.noise();
                for tau in (0..t_tau).rev() {
                    let model_t = distill_sched.model_timestep(tau);
                    let target = rollout.teacher.predict_rows(&z_star, model_t, &tokens)?;
                    report.teacher_predictions += 1;
                    let kd = KdRows {
                        z: z_star.clone(),
                        model_t,
                        tokens: tokens.clone(),
                        target: KdTarget::Noise(target),
                    };
                    apply(student, Some(&kd), &mut adam)?;
                    report.student_kd_predictions += 1;
                    let KdTarget::Noise(teacher_eps) = kd.target else { unreachable!() };
                    let noise = (tau > 0).then(|| rollout.noise());
                    rollout.sched.ddpm_step_slice(&mut z_star, tau, &teacher_eps, noise.as_deref());
                }
            }
            KdMode::StudentTrajectoryLatent => {
                let tokens = rollout.prompts(&prompts.regularization);
                let mut z_star = rollout.noise();
                let mut z_bar = z_star.clone();
                for tau in (0..t_tau).rev() {
                    let model_t = distill_sched.model_timestep(tau);
                    let teacher_eps = rollout.teacher.predict_rows(&z_star, model_t, &tokens)?;
                    report.teacher_predictions += 1;
                    let noise = (tau > 0).then(|| rollout.noise());
                    rollout.sched.ddpm_step_slice(&mut z_star, tau, &teacher_eps, noise.as_deref());
                    let kd = KdRows {
                        z: z_bar.clone(),
                        model_t,
                        tokens: tokens.clone(),
                        target: KdTarget::Latent {
                            next: z_star.clone(),
                            tau,
                            noise: noise.clone(),
                        },
                    };
                    let student_eps = apply(student, Some(&kd), &mut adam)?;
                    report.student_kd_predictions += 1;
                    rollout.sched.ddpm_step_slice(&mut z_bar, tau, &student_eps, noise.as_deref());
                }
            }
            KdMode::CurrentData => {
                let tokens = rollout.prompts(&prompts.regularization);
                for tau in (0..t_tau).rev() {
                    let model_t = distill_sched.model_timestep(tau);
                    let mut z = vec![0.0; b * d];
                    for r in 0..b {
                        let x0 = samples.choose(&mut rollout.rng).expect("non-empty few-shot set");
                        let eps = rng::normal_vec(&mut rollout.rng, d);
                        rollout.sched.forward_noise_slice(x0, tau, &eps, &mut z[r * d..(r + 1) * d]);
                    }
                    let target = rollout.teacher.predict_rows(&z, model_t, &tokens)?;
                    report.teacher_predictions += 1;
                    let kd = KdRows {
                        z,
                        model_t,
                        tokens: tokens.clone(),
                        target: KdTarget::Noise(target),
                    };
                    apply(student, Some(&kd), &mut adam)?;
                    report.student_kd_predictions += 1;
                }
            }
        }

        if !per_tau {
            let ev = evaluate(student, Some(&dm), None, 0.0, distill_sched)?;
            pending.0.iter_mut().zip(&ev.grads.0).for_each(|(p, g)| *p += g);
            let l_kd = if updates > 0 { sums.1 / updates as f64 } else { 0.0 };
            let l_train = ev.l_dm + config.lambda * l_kd;
            finite_or_fail(step, "training loss", l_train)?;
            adam.step(student.params_mut(), &pending.0);
            sums = (ev.l_dm, l_kd, l_train);
            updates = 1;
        }
        let n = updates.max(1) as f64;
        report.trace.push(TraceRow {
            step,
            l_dm: sums.0 / n,
            l_kd: sums.1 / n,
            l_train: sums.2 / n,
        });
    }
    report.optimizer_steps = adam.steps();
    Ok(report)
}

/// One lifelong session: the incoming model becomes the teacher, a copy of
/// it is fine-tuned on the K-shot set, and part of the set is kept as
/// vision context. The few-shot set is consumed.
pub fn train_session<R: Rng>(
    state: SessionState,
    fewshot: FewShotDataset,
    prompts: &PromptSets,
    config: &TrainConfig,
    train_sched: &NoiseSchedule,
    distill_sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(SessionState, SessionReport)> {
    let SessionState {
        session_index,
        model: teacher,
        mut context_bank,
        ia_history,
    } = state;
    let mut student = teacher.snapshot();
    let report = distill_session(
        &mut student,
        &teacher,
        &fewshot,
        prompts,
        config,
        train_sched,
        distill_sched,
        session_index + 1,
        rng,
    )?;
    let m = config.contexts.unwrap_or(fewshot.k()).min(fewshot.k());
    let contexts = capture_vision_context(&fewshot, m, rng)?;
    context_bank.insert(session_index + 1, fewshot.token(), contexts)?;
    Ok((
        SessionState {
            session_index: session_index + 1,
            model: student,
            context_bank,
            ia_history,
        },
        report,
    ))
}
