//! Experiment configuration: a TOML file where every key has a default.
//!
//! ```toml
//! seeds = [0, 1, 2, 3, 4]
//! method = "ours"
//! methods = ["plain_ft", "lwf", "ours_no_icgen", "ours"]
//!
//! [schedule]    # steps, beta_start, beta_end
//! [model]       # hidden_dims, time_embed_dim, vocab_size, cond_embed_dim, activation
//! [pretrain]    # samples_per_concept, steps, batch, lr, lr_floor, cond_dropout
//! [train]       # steps, lr, lambda, t_tau, cond_dropout, batch, update_mode, contexts
//! [icgen]       # strength, guidance, current_session
//! [eval]        # n_samples, n_reference, probe.{hidden, steps, samples_per_class, batch, lr}
//! [world]       # k, base = [...], sessions = [...]
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::concepts::{
    default_base_concepts, default_session_transforms, derive_session_concept, ConceptSpec, ConceptTransform, MAX_SHOTS,
};
use crate::error::{Error, FieldError, Result};
use crate::eval::ProbeConfig;
use crate::nn::DenoiserConfig;
use crate::sampler::NULL_TOKEN;
use crate::schedule::{make_schedule, NoiseSchedule, Spacing};
use crate::trainer::{KdMode, PretrainConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Sequential fine-tuning, no distillation, no in-context generation.
    PlainFt,
    /// Fine-tuning with output distillation on current-session data.
    Lwf,
    /// Data-free distillation along the teacher's rollout.
    OursNoIcgen,
    /// Data-free distillation plus in-context generation.
    Ours,
    /// Ablation: latent distillation along the student's own rollout.
    StudentTrajectory,
}

impl Method {
    pub const MATRIX: [Method; 4] = [Method::PlainFt, Method::Lwf, Method::OursNoIcgen, Method::Ours];

    pub fn name(self) -> &'static str {
        match self {
            Method::PlainFt => "plain_ft",
            Method::Lwf => "lwf",
            Method::OursNoIcgen => "ours_no_icgen",
            Method::Ours => "ours",
            Method::StudentTrajectory => "student_trajectory",
        }
    }

    pub fn kd_mode(self) -> KdMode {
        match self {
            Method::PlainFt => KdMode::None,
            Method::Lwf => KdMode::CurrentData,
            Method::OursNoIcgen | Method::Ours => KdMode::TeacherTrajectory,
            Method::StudentTrajectory => KdMode::StudentTrajectoryLatent,
        }
    }

    pub fn uses_icgen(self) -> bool {
        self == Method::Ours
    }

    /// Methods whose trained models coincide (they differ only at inference).
    pub fn training_key(self) -> Method {
        match self {
            Method::Ours => Method::OursNoIcgen,
            m => m,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Method::PlainFt,
            Method::Lwf,
            Method::OursNoIcgen,
            Method::Ours,
            Method::StudentTrajectory,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::config("method", format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    /// Linear β range. The default puts ᾱ near 0.005 at the last step and
    /// near 0.035 at 0.8·T, the noise levels large latent-diffusion schedules
    /// reach at those fractions of their horizon.
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcgenConfig {
    pub strength: f64,
    pub guidance: f64,
    /// Also use in-context generation for the concept of the session just
    /// trained.
    pub current_session: bool,
}

impl Default for IcgenConfig {
    fn default() -> Self {
        Self {
            strength: 0.8,
            guidance: 6.0,
            current_session: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Generated samples per (token, session).
    pub n_samples: usize,
    /// Held-out reference samples per concept.
    pub n_reference: usize,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 500,
            n_reference: 500,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionSpec {
    pub token: usize,
    /// Base concept this session specializes.
    pub base: usize,
    pub shift: [f64; 2],
    #[serde(default = "unit")]
    pub scale_mul: f64,
    #[serde(default)]
    pub rot_add: f64,
    /// Overrides `world.k` for this session.
    #[serde(default)]
    pub k: Option<usize>,
}

fn unit() -> f64 {
    1.0
}

impl SessionSpec {
    pub fn transform(&self) -> ConceptTransform {
        ConceptTransform {
            shift: self.shift,
            scale_mul: self.scale_mul,
            rot_add: self.rot_add,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub k: usize,
    pub base: Vec<ConceptSpec>,
    pub sessions: Vec<SessionSpec>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let sessions = default_session_transforms()
            .into_iter()
            .enumerate()
            .map(|(i, (base, transform))| SessionSpec {
                token: 6 + i,
                base,
                shift: transform.shift,
                scale_mul: transform.scale_mul,
                rot_add: transform.rot_add,
                k: None,
            })
            .collect();
        Self {
            k: 5,
            base: default_base_concepts(),
            sessions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub method: Method,
    pub methods: Vec<Method>,
    pub data_dim: usize,
    pub schedule: ScheduleConfig,
    pub model: DenoiserConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub icgen: IcgenConfig,
    pub eval: EvalConfig,
    pub world: WorldConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            method: Method::Ours,
            methods: Method::MATRIX.to_vec(),
            data_dim: 2,
            schedule: ScheduleConfig::default(),
            model: DenoiserConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            icgen: IcgenConfig::default(),
            eval: EvalConfig::default(),
            world: WorldConfig::default(),
        }
    }
}

/// A session with its concept resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedSession {
    pub index: usize,
    pub spec: ConceptSpec,
    pub base_token: usize,
    pub k: usize,
}

impl ExperimentConfig {
    /// Every semantic problem, not just the first.
    pub fn validate(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        if self.seeds.is_empty() {
            errs.push(FieldError::new("seeds", "at least one seed is required"));
        }
        if self.methods.is_empty() {
            errs.push(FieldError::new("methods", "at least one method is required"));
        }
        if self.data_dim != 2 {
            errs.push(FieldError::new("data_dim", "concept generators are 2-D; must be 2"));
        }
        if self.model.data_dim != self.data_dim {
            errs.push(FieldError::new("model.data_dim", "must equal data_dim"));
        }
        errs.extend(self.model.validate().into_iter().map(|e| prefixed("model", e)));
        if let Err(Error::Config(es)) = make_schedule(
            self.schedule.steps,
            self.schedule.beta_start,
            self.schedule.beta_end,
            Spacing::Linear,
        ) {
            errs.extend(es.into_iter().map(|e| prefixed("schedule", e)));
        }
        errs.extend(self.pretrain.validate());
        errs.extend(self.train.validate());
        if self.train.t_tau > self.schedule.steps {
            errs.push(FieldError::new("train.t_tau", "cannot exceed schedule.steps"));
        }
        if !(0.0..=1.0).contains(&self.icgen.strength) {
            errs.push(FieldError::new("icgen.strength", "must lie in [0, 1]"));
        }
        if !(self.icgen.guidance.is_finite() && self.icgen.guidance >= 0.0) {
            errs.push(FieldError::new("icgen.guidance", "must be finite and non-negative"));
        }
        if self.eval.n_samples == 0 {
            errs.push(FieldError::new("eval.n_samples", "must be at least 1"));
        }
        if self.eval.n_reference == 0 {
            errs.push(FieldError::new("eval.n_reference", "must be at least 1"));
        }
        let p = &self.eval.probe;
        for (field, v) in [("hidden", p.hidden), ("steps", p.steps), ("samples_per_class", p.samples_per_class), ("batch", p.batch)] {
            if v == 0 {
                errs.push(FieldError::new(format!("eval.probe.{field}"), "must be at least 1"));
            }
        }
        if !(p.lr > 0.0) {
            errs.push(FieldError::new("eval.probe.lr", "must be positive"));
        }
        self.validate_world(&mut errs);
        errs
    }

    fn validate_world(&self, errs: &mut Vec<FieldError>) {
        let w = &self.world;
        let vocab = self.model.vocab_size;
        let check_k = |field: String, k: usize, errs: &mut Vec<FieldError>| {
            if !(1..=MAX_SHOTS).contains(&k) {
                errs.push(FieldError::new(
                    field,
                    format!("K = {k} is outside the few-shot range 1..={MAX_SHOTS}"),
                ));
            }
        };
        check_k("world.k".into(), w.k, errs);
        if w.base.is_empty() {
            errs.push(FieldError::new("world.base", "at least one base concept is required"));
        }
        if w.sessions.is_empty() {
            errs.push(FieldError::new("world.sessions", "at least one session is required"));
        }
        let mut tokens = BTreeSet::new();
        let mut check_token = |field: String, token: usize, errs: &mut Vec<FieldError>| {
            if token == NULL_TOKEN {
                errs.push(FieldError::new(field.clone(), format!("token {NULL_TOKEN} is reserved for the null prompt")));
            }
            if token >= vocab {
                errs.push(FieldError::new(field.clone(), format!("token {token} exceeds model.vocab_size {vocab}")));
            }
            if !tokens.insert(token) {
                errs.push(FieldError::new(field, format!("duplicate token {token}")));
            }
        };
        for (i, b) in w.base.iter().enumerate() {
            let field = format!("world.base[{i}]");
            errs.extend(b.validate(&field));
            check_token(format!("{field}.token"), b.token, errs);
        }
        let base_tokens: BTreeSet<usize> = w.base.iter().map(|b| b.token).collect();
        for (i, s) in w.sessions.iter().enumerate() {
            let field = format!("world.sessions[{i}]");
            check_token(format!("{field}.token"), s.token, errs);
            if !base_tokens.contains(&s.base) {
                errs.push(FieldError::new(format!("{field}.base"), format!("no base concept with token {}", s.base)));
            }
            if !(s.scale_mul > 0.0 && s.scale_mul.is_finite()) {
                errs.push(FieldError::new(format!("{field}.scale_mul"), "must be positive"));
            }
            if !(s.shift.iter().all(|v| v.is_finite()) && s.rot_add.is_finite()) {
                errs.push(FieldError::new(format!("{field}.shift"), "must be finite"));
            }
            if let Some(k) = s.k {
                check_k(format!("{field}.k"), k, errs);
            }
            let k = s.k.unwrap_or(w.k);
            if let Some(m) = self.train.contexts {
                if m > k {
                    errs.push(FieldError::new(
                        "train.contexts",
                        format!("{m} contexts requested but session {} has K = {k}", i + 1),
                    ));
                }
            }
        }
    }

    pub fn train_schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(
            self.schedule.steps,
            self.schedule.beta_start,
            self.schedule.beta_end,
            Spacing::Linear,
        )
    }

    pub fn distill_schedule(&self) -> Result<NoiseSchedule> {
        self.train_schedule()?.strided(self.train.t_tau)
    }

    pub fn base_tokens(&self) -> Vec<usize> {
        self.world.base.iter().map(|b| b.token).collect()
    }

    pub fn sessions(&self) -> Result<Vec<ResolvedSession>> {
        let mut used: BTreeSet<usize> = self.base_tokens().into_iter().collect();
        self.world
            .sessions
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let base = self
                    .world
                    .base
                    .iter()
                    .find(|b| b.token == s.base)
                    .ok_or_else(|| Error::config(format!("world.sessions[{i}].base"), "unknown base token"))?;
                let spec = derive_session_concept(base, &s.transform(), s.token, &used)?;
                used.insert(s.token);
                Ok(ResolvedSession {
                    index: i + 1,
                    spec,
                    base_token: s.base,
                    k: s.k.unwrap_or(self.world.k),
                })
            })
            .collect()
    }

    /// Training settings for one method and seed.
    pub fn train_config(&self, method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            kd_mode: method.kd_mode(),
            seed,
            ..self.train.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

fn prefixed(section: &str, e: FieldError) -> FieldError {
    FieldError::new(format!("{section}.{}", e.field), e.message)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let errs = config.validate();
    if errs.is_empty() {
        Ok(config)
    } else {
        Err(Error::Config(errs))
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c.train.steps, 1000);
        assert_eq!(c.train.t_tau, 25);
        assert_eq!(c.icgen.strength, 0.8);
        assert_eq!(c.icgen.guidance, 6.0);
        assert_eq!(c.train.lambda, 1.0);
        assert_eq!(c.sessions().unwrap().len(), 5);
        assert_eq!(parse_config("seeds = [3]").unwrap().seeds, vec![3]);
    }

    #[test]
    fn eleven_shots_rejected() {
        match parse_config("[world]\nk = 11\n") {
            Err(Error::Config(errs)) => {
                assert!(errs.iter().any(|e| e.field == "world.k" && e.message.contains("few-shot")), "{errs:?}")
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_tokens_rejected() {
        let text = r#"
[[world.sessions]]
token = 6
base = 1
shift = [1.0, 0.0]

[[world.sessions]]
token = 6
base = 2
shift = [0.0, 1.0]
"#;
        match parse_config(text) {
            Err(Error::Config(errs)) => assert!(errs.iter().any(|e| e.message.contains("duplicate token 6"))),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_errors_are_exhaustive() {
        let text = "seeds = []\n[train]\nsteps = 0\nlambda = -1.0\n[icgen]\nstrength = 1.5\n[schedule]\nbeta_start = 0.5\nbeta_end = 0.1\n";
        match parse_config(text) {
            Err(Error::Config(errs)) => {
                let fields: Vec<_> = errs.iter().map(|e| e.field.as_str()).collect();
                for f in ["seeds", "train.steps", "train.lambda", "icgen.strength", "schedule.beta_end"] {
                    assert!(fields.contains(&f), "{f} missing from {fields:?}");
                }
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_location() {
        match parse_config("seeds = [0,\n[train]\n") {
            Err(Error::Parse(msg)) => assert!(msg.contains("line"), "{msg}"),
            other => panic!("{other:?}"),
        }
        match parse_config("[train]\nstepz = 3\n") {
            Err(Error::Parse(msg)) => assert!(msg.contains("stepz"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip_and_hash() {
        let c = ExperimentConfig::default();
        let back = parse_config(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut d = c.clone();
        d.train.lambda = 0.5;
        assert_ne!(d.hash(), c.hash());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::MATRIX {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("nope".parse::<Method>().is_err());
        assert_eq!(Method::Ours.training_key(), Method::OursNoIcgen);
    }
}
