//! In-context generation.
//!
//! After each session a few of its training latents are kept in a context
//! bank. At inference a stored latent for the prompted token is noised to
//! step `round(T·s)` and denoised from there, so the sample stays anchored to
//! what the session actually saw.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{centroid, Latent};
use crate::rng;
use crate::sampler::{denoise_rows, rows_to_latents, sample, NoisePredictor};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub token: usize,
    pub latents: Vec<Latent>,
}

/// Vision contexts keyed by the session that stored them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContextBank {
    entries: BTreeMap<usize, ContextEntry>,
}

impl ContextBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, session: usize, token: usize, latents: Vec<Latent>) -> Result<()> {
        if latents.is_empty() {
            return Err(Error::Protocol(format!("empty context for session {session}")));
        }
        if self.entries.contains_key(&session) {
            return Err(Error::Protocol(format!("session {session} already has a context entry")));
        }
        if self.contexts(token).is_some() {
            return Err(Error::Protocol(format!("token {token} already has a context entry")));
        }
        self.entries.insert(session, ContextEntry { token, latents });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, &ContextEntry)> {
        self.entries.iter().map(|(s, e)| (*s, e))
    }

    pub fn contexts(&self, token: usize) -> Option<&[Latent]> {
        self.entries
            .values()
            .find(|e| e.token == token)
            .map(|e| &e.latents[..])
    }

    pub fn contains(&self, token: usize) -> bool {
        self.contexts(token).is_some()
    }

    pub fn tokens(&self) -> Vec<usize> {
        self.entries.values().map(|e| e.token).collect()
    }
}

/// One stored context for `token`, drawn uniformly.
pub fn lookup_context<R: Rng>(bank: &ContextBank, token: usize, rng: &mut R) -> Result<Latent> {
    let stored = bank.contexts(token).ok_or(Error::MissingContext(token))?;
    Ok(stored.choose(rng).expect("bank entries are non-empty").clone())
}

/// Number of reverse steps for strength `s`: `T·s` rounded half up.
pub fn strength_steps(total_steps: usize, strength: f64) -> usize {
    ((total_steps as f64 * strength) + 0.5).floor() as usize
}

fn check_strength(strength: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::config("icgen.strength", format!("must lie in [0, 1], got {strength}")));
    }
    Ok(())
}

/// Noises each context to step `round(T·s) − 1` and denoises it, row `i`
/// conditioned on `tokens[i]`.
pub fn icgen_from_contexts<P: NoisePredictor + ?Sized, R: Rng>(
    model: &P,
    contexts: Vec<Latent>,
    tokens: &[usize],
    strength: f64,
    sched: &NoiseSchedule,
    guidance: f64,
    rng: &mut R,
) -> Result<Vec<Latent>> {
    check_strength(strength)?;
    let steps = strength_steps(sched.len(), strength);
    if steps == 0 || contexts.is_empty() {
        return Ok(contexts);
    }
    let dim = model.data_dim();
    let flat: Vec<f64> = contexts.iter().flat_map(|c| c.iter().copied()).collect();
    if flat.len() != tokens.len() * dim {
        return Err(Error::Shape("one token per context row is required".into()));
    }
    let eps = rng::normal_vec(rng, flat.len());
    let mut z = vec![0.0; flat.len()];
    sched.forward_noise_slice(&flat, steps - 1, &eps, &mut z);
    denoise_rows(model, &mut z, tokens, sched, steps, guidance, rng)?;
    Ok(rows_to_latents(z, dim))
}

/// In-context generation of `n` samples for `token`.
#[allow(clippy::too_many_arguments)]
pub fn icgen_generate<P: NoisePredictor + ?Sized, R: Rng>(
    model: &P,
    bank: &ContextBank,
    token: usize,
    strength: f64,
    sched: &NoiseSchedule,
    guidance: f64,
    rng: &mut R,
    n: usize,
) -> Result<Vec<Latent>> {
    check_strength(strength)?;
    let contexts = (0..n)
        .map(|_| lookup_context(bank, token, rng))
        .collect::<Result<Vec<_>>>()?;
    icgen_from_contexts(model, contexts, &vec![token; n], strength, sched, guidance, rng)
}

/// In-context generation when the bank knows `token`, plain sampling
/// otherwise (base tokens never have stored contexts).
#[allow(clippy::too_many_arguments)]
pub fn generate_with_fallback<P: NoisePredictor + ?Sized, R: Rng>(
    model: &P,
    bank: &ContextBank,
    token: usize,
    strength: f64,
    sched: &NoiseSchedule,
    guidance: f64,
    rng: &mut R,
    n: usize,
) -> Result<Vec<Latent>> {
    match icgen_generate(model, bank, token, strength, sched, guidance, rng, n) {
        Err(Error::MissingContext(t)) => {
            log::debug!("no stored context for token {t}; generating from pure noise");
            sample(model, token, sched, guidance, rng, n)
        }
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub token: usize,
    pub shift: [f64; 2],
    #[serde(default = "unit_scale")]
    pub scale_mul: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl Placement {
    /// Scales about `anchor` and then shifts.
    fn apply(&self, x: &Latent, anchor: &Latent) -> Latent {
        Latent(
            x.iter()
                .zip(anchor.iter())
                .zip(self.shift)
                .map(|((v, c), s)| c + self.scale_mul * (v - c) + s)
                .collect(),
        )
    }

    fn invert(&self, x: &Latent, anchor: &Latent) -> Latent {
        Latent(
            x.iter()
                .zip(anchor.iter())
                .zip(self.shift)
                .map(|((v, c), s)| c + (v - s - c) / self.scale_mul)
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub placements: Vec<Placement>,
}

impl Layout {
    fn validate(&self, bank: &ContextBank) -> Result<()> {
        if self.placements.is_empty() {
            return Err(Error::config("layout.placements", "at least one placement is required"));
        }
        for p in &self.placements {
            if !(p.scale_mul > 0.0) {
                return Err(Error::config("layout.scale_mul", "must be positive"));
            }
            if !bank.contains(p.token) {
                return Err(Error::MissingContext(p.token));
            }
            if bank.contexts(p.token).map_or(0, |c| c[0].dim()) != 2 {
                return Err(Error::Shape("layouts place 2-D contexts".into()));
            }
        }
        Ok(())
    }

    /// Where a placement's concept is expected to land: the stored-context
    /// centroid moved by the placement shift.
    pub fn target(&self, bank: &ContextBank, index: usize) -> Result<Latent> {
        let p = &self.placements[index];
        let anchor = bank_anchor(bank, p.token)?;
        Ok(p.apply(&anchor, &anchor))
    }
}

fn bank_anchor(bank: &ContextBank, token: usize) -> Result<Latent> {
    let stored = bank.contexts(token).ok_or(Error::MissingContext(token))?;
    Ok(centroid(stored).expect("bank entries are non-empty"))
}

/// One context per placement, scaled about its token's context centroid
/// and shifted into place. Each element is tagged with its token.
pub fn compose_contexts<R: Rng>(bank: &ContextBank, layout: &Layout, rng: &mut R) -> Result<Vec<(usize, Latent)>> {
    layout.validate(bank)?;
    layout
        .placements
        .iter()
        .map(|p| {
            let v = lookup_context(bank, p.token, rng)?;
            Ok((p.token, p.apply(&v, &bank_anchor(bank, p.token)?)))
        })
        .collect()
}

/// Multi-concept generation: `per_placement` composed contexts for every
/// placement, each denoised in its concept's own frame (the placement
/// undone) under its token and then moved back into place.
#[allow(clippy::too_many_arguments)]
pub fn generate_layout<P: NoisePredictor + ?Sized, R: Rng>(
    model: &P,
    bank: &ContextBank,
    layout: &Layout,
    strength: f64,
    sched: &NoiseSchedule,
    guidance: f64,
    rng: &mut R,
    per_placement: usize,
) -> Result<Vec<(usize, Latent)>> {
    layout.validate(bank)?;
    let mut composed = Vec::with_capacity(per_placement * layout.placements.len());
    for _ in 0..per_placement {
        composed.extend(compose_contexts(bank, layout, rng)?);
    }
    let index_of = |i: usize| i % layout.placements.len();
    let anchors = layout
        .placements
        .iter()
        .map(|p| bank_anchor(bank, p.token))
        .collect::<Result<Vec<_>>>()?;
    let local: Vec<Latent> = composed
        .iter()
        .enumerate()
        .map(|(i, (_, v))| layout.placements[index_of(i)].invert(v, &anchors[index_of(i)]))
        .collect();
    let tokens: Vec<usize> = composed.iter().map(|(t, _)| *t).collect();
    let out = icgen_from_contexts(model, local, &tokens, strength, sched, guidance, rng)?;
    Ok(out
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let k = index_of(i);
            (tokens[i], layout.placements[k].apply(x, &anchors[k]))
        })
        .collect())
}
