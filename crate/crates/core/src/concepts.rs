//! Synthetic 2-D concept distributions.
//!
//! A concept is a point-cloud family (ring, moons, spiral, blob, grid) placed
//! by a center, scale and rotation, with optional isotropic jitter. Base
//! concepts form the pretraining world; each session concept is a
//! specialization of one base concept under a new token.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FieldError, Result};
use crate::latent::Latent;
use crate::rng;

pub const MAX_SHOTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Ring,
    TwoMoons,
    Spiral,
    Blobs,
    Grid,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Ring,
        Family::TwoMoons,
        Family::Spiral,
        Family::Blobs,
        Family::Grid,
    ];

    /// A noiseless point of the unit-scale, origin-centered shape.
    fn unit_point<R: Rng>(self, rng: &mut R) -> [f64; 2] {
        match self {
            Family::Ring => {
                let th = rng.random_range(0.0..2.0 * PI);
                [th.cos(), th.sin()]
            }
            Family::TwoMoons => {
                let th = rng.random_range(0.0..PI);
                if rng.random_bool(0.5) {
                    [th.cos() - 0.5, th.sin() - 0.25]
                } else {
                    [0.5 - th.cos(), 0.25 - th.sin()]
                }
            }
            Family::Spiral => {
                let r: f64 = rng.random_range(0.0f64..1.0).sqrt();
                let th = 3.0 * PI * r;
                [r * th.cos(), r * th.sin()]
            }
            Family::Blobs => [0.0, 0.0],
            Family::Grid => {
                const LEVELS: [f64; 3] = [-1.0, 0.0, 1.0];
                [*LEVELS.choose(rng).unwrap(), *LEVELS.choose(rng).unwrap()]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSpec {
    pub token: usize,
    pub family: Family,
    pub center: [f64; 2],
    pub scale: f64,
    #[serde(default)]
    pub rotation: f64,
    #[serde(default)]
    pub noise_std: f64,
}

impl ConceptSpec {
    pub fn validate(&self, field: &str) -> Vec<FieldError> {
        let mut errs = Vec::new();
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            errs.push(FieldError::new(format!("{field}.scale"), "must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            errs.push(FieldError::new(format!("{field}.noise_std"), "must be non-negative"));
        }
        if !self.center.iter().chain([&self.rotation]).all(|v| v.is_finite()) {
            errs.push(FieldError::new(format!("{field}.center"), "must be finite"));
        }
        errs
    }
}

/// `n` i.i.d. draws from the concept.
pub fn sample_concept<R: Rng>(spec: &ConceptSpec, n: usize, rng: &mut R) -> Result<Vec<Latent>> {
    let errs = spec.validate("concept");
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let (s, c) = spec.rotation.sin_cos();
    Ok((0..n)
        .map(|_| {
            let [u, v] = spec.family.unit_point(rng);
            let mut x = spec.center[0] + spec.scale * (c * u - s * v);
            let mut y = spec.center[1] + spec.scale * (s * u + c * v);
            if spec.noise_std > 0.0 {
                x += spec.noise_std * rng::normal(rng);
                y += spec.noise_std * rng::normal(rng);
            }
            Latent(vec![x, y])
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptTransform {
    pub shift: [f64; 2],
    #[serde(default = "one")]
    pub scale_mul: f64,
    #[serde(default)]
    pub rot_add: f64,
}

fn one() -> f64 {
    1.0
}

impl ConceptTransform {
    pub fn identity() -> Self {
        Self {
            shift: [0.0, 0.0],
            scale_mul: 1.0,
            rot_add: 0.0,
        }
    }
}

/// Specializes `base` into a new concept under `new_token`.
pub fn derive_session_concept(
    base: &ConceptSpec,
    transform: &ConceptTransform,
    new_token: usize,
    used_tokens: &BTreeSet<usize>,
) -> Result<ConceptSpec> {
    if new_token == base.token || used_tokens.contains(&new_token) {
        return Err(Error::config("token", format!("token {new_token} is already in use")));
    }
    if !(transform.scale_mul > 0.0) {
        return Err(Error::config("scale_mul", "must be positive"));
    }
    Ok(ConceptSpec {
        token: new_token,
        family: base.family,
        center: [base.center[0] + transform.shift[0], base.center[1] + transform.shift[1]],
        scale: base.scale * transform.scale_mul,
        rotation: base.rotation + transform.rot_add,
        noise_std: base.noise_std,
    })
}

/// The K-shot training set of one session. Samples are shared behind an
/// `Arc` so callers can observe when a session's data has been released.
#[derive(Debug, Clone)]
pub struct FewShotDataset {
    spec: ConceptSpec,
    samples: Arc<[Latent]>,
}

impl FewShotDataset {
    pub fn spec(&self) -> &ConceptSpec {
        &self.spec
    }

    pub fn token(&self) -> usize {
        self.spec.token
    }

    pub fn samples(&self) -> &[Latent] {
        &self.samples
    }

    pub fn shared_samples(&self) -> &Arc<[Latent]> {
        &self.samples
    }

    pub fn k(&self) -> usize {
        self.samples.len()
    }
}

pub fn make_fewshot<R: Rng>(spec: &ConceptSpec, k: usize, rng: &mut R) -> Result<FewShotDataset> {
    if !(1..=MAX_SHOTS).contains(&k) {
        return Err(Error::config(
            "k",
            format!("K-shot sets hold between 1 and {MAX_SHOTS} samples, got {k}"),
        ));
    }
    Ok(FewShotDataset {
        spec: spec.clone(),
        samples: sample_concept(spec, k, rng)?.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSets {
    /// Tokens trained in the current session.
    pub session: Vec<usize>,
    /// Distillation prompt pool; base tokens only.
    pub regularization: Vec<usize>,
    /// Every token evaluated at this session.
    pub test: Vec<usize>,
}

/// `sessions` lists `(session_token, base_token)` for sessions 1, 2, … in
/// order; at least `session_index` entries are required.
pub fn build_prompt_sets(session_index: usize, base_vocab: &[usize], sessions: &[(usize, usize)]) -> Result<PromptSets> {
    if session_index == 0 {
        return Err(Error::Protocol("sessions are numbered from 1".into()));
    }
    if sessions.len() < session_index {
        return Err(Error::Protocol(format!(
            "session {session_index} requested but only {} sessions are defined",
            sessions.len()
        )));
    }
    let seen = &sessions[..session_index];
    let test: BTreeSet<usize> = seen.iter().flat_map(|&(s, b)| [s, b]).collect();
    Ok(PromptSets {
        session: vec![seen[session_index - 1].0],
        regularization: base_vocab.to_vec(),
        test: test.into_iter().collect(),
    })
}

/// Canonical base world: one concept per family on a pentagon.
pub fn default_base_concepts() -> Vec<ConceptSpec> {
    let radius = 3.0;
    let params: [(Family, f64, f64); 5] = [
        (Family::Ring, 0.8, 0.05),
        (Family::TwoMoons, 0.6, 0.05),
        (Family::Spiral, 0.9, 0.03),
        (Family::Blobs, 1.0, 0.35),
        (Family::Grid, 0.5, 0.08),
    ];
    params
        .iter()
        .enumerate()
        .map(|(i, &(family, scale, noise_std))| {
            let angle = PI / 2.0 + 2.0 * PI * i as f64 / 5.0;
            ConceptSpec {
                token: i + 1,
                family,
                center: [radius * angle.cos(), radius * angle.sin()],
                scale,
                rotation: 0.0,
                noise_std,
            }
        })
        .collect()
}

/// Default session sequence: session `i` specializes base concept `i`,
/// pushed radially outward by 2–4 units and rescaled by 0.5–1.5.
pub fn default_session_transforms() -> Vec<(usize, ConceptTransform)> {
    let shifts = [3.0, 2.5, 3.5, 2.0, 4.0];
    let scale_muls = [0.7, 1.3, 0.6, 1.2, 0.9];
    let rot_adds = [0.0, 0.6, -0.4, 0.0, 0.3];
    (0..5)
        .map(|i| {
            let angle = PI / 2.0 + 2.0 * PI * i as f64 / 5.0;
            (
                i + 1,
                ConceptTransform {
                    shift: [shifts[i] * angle.cos(), shifts[i] * angle.sin()],
                    scale_mul: scale_muls[i],
                    rot_add: rot_adds[i],
                },
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::centroid;
    use crate::rng::stream;

    fn spec(family: Family, center: [f64; 2], noise_std: f64) -> ConceptSpec {
        ConceptSpec {
            token: 1,
            family,
            center,
            scale: 1.0,
            rotation: 0.3,
            noise_std,
        }
    }

    #[test]
    fn noiseless_ring_lies_on_the_circle() {
        let pts = sample_concept(&spec(Family::Ring, [0.0, 0.0], 0.0), 4, &mut stream(0, "t")).unwrap();
        for p in pts {
            assert!((p[0].hypot(p[1]) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_blob_is_its_center() {
        let pts = sample_concept(&spec(Family::Blobs, [2.0, 3.0], 0.0), 20, &mut stream(0, "t")).unwrap();
        assert!(pts.iter().all(|p| p.0 == vec![2.0, 3.0]));
    }

    #[test]
    fn noiseless_families_stay_on_their_manifolds() {
        let mut rng = stream(2, "t");
        let grid = sample_concept(&spec(Family::Grid, [0.0, 0.0], 0.0), 50, &mut rng).unwrap();
        let (s, c) = 0.3f64.sin_cos();
        for p in &grid {
            // undo the rotation; coordinates must be lattice levels
            let u = c * p[0] + s * p[1];
            let v = -s * p[0] + c * p[1];
            for w in [u, v] {
                assert!((w - w.round()).abs() < 1e-12 && w.abs() <= 1.0 + 1e-12);
            }
        }
        let spiral = sample_concept(&spec(Family::Spiral, [0.0, 0.0], 0.0), 50, &mut rng).unwrap();
        for p in &spiral {
            let r = p[0].hypot(p[1]);
            let th = 3.0 * PI * r + 0.3;
            assert!((p[0] - r * th.cos()).abs() < 1e-9 && (p[1] - r * th.sin()).abs() < 1e-9);
        }
        let moons = sample_concept(&spec(Family::TwoMoons, [0.0, 0.0], 0.0), 50, &mut rng).unwrap();
        for p in &moons {
            let u = c * p[0] + s * p[1];
            let v = -s * p[0] + c * p[1];
            let upper = (u + 0.5).hypot(v + 0.25);
            let lower = (u - 0.5).hypot(v - 0.25);
            assert!((upper - 1.0).abs() < 1e-9 || (lower - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ring_mean_converges_to_center() {
        let n = 10_000;
        let s = ConceptSpec {
            noise_std: 0.1,
            ..spec(Family::Ring, [1.5, -2.0], 0.1)
        };
        let pts = sample_concept(&s, n, &mut stream(11, "lln")).unwrap();
        let m = centroid(&pts).unwrap();
        for axis in 0..2 {
            let var = pts.iter().map(|p| (p[axis] - m[axis]).powi(2)).sum::<f64>() / (n - 1) as f64;
            let bound = 3.0 * var.sqrt() / (n as f64).sqrt();
            assert!((m[axis] - s.center[axis]).abs() < bound);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let s = spec(Family::TwoMoons, [0.0, 0.0], 0.1);
        let a = sample_concept(&s, 30, &mut stream(4, "x")).unwrap();
        let b = sample_concept(&s, 30, &mut stream(4, "x")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(Family::Ring, [0.0, 0.0], -1.0);
        s.scale = 0.0;
        match sample_concept(&s, 1, &mut stream(0, "x")) {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn derived_concepts_compose() {
        let base = spec(Family::Blobs, [0.0, 0.0], 0.2);
        let used = BTreeSet::from([1]);
        let same = derive_session_concept(&base, &ConceptTransform::identity(), 6, &used).unwrap();
        assert_eq!(same.token, 6);
        assert_eq!((same.center, same.scale, same.rotation), (base.center, base.scale, base.rotation));

        let shift = ConceptTransform {
            shift: [1.0, 0.0],
            ..ConceptTransform::identity()
        };
        let once = derive_session_concept(&base, &shift, 6, &used).unwrap();
        assert_eq!(once.center, [1.0, 0.0]);
        let twice = derive_session_concept(&once, &shift, 7, &BTreeSet::from([1, 6])).unwrap();
        assert_eq!(twice.center, [2.0, 0.0]);

        assert!(derive_session_concept(&base, &shift, 1, &used).is_err());
        assert!(derive_session_concept(&once, &shift, 6, &BTreeSet::from([1, 6])).is_err());
    }

    #[test]
    fn fewshot_bounds_and_determinism() {
        let s = spec(Family::Ring, [0.0, 0.0], 0.0);
        assert_eq!(make_fewshot(&s, 1, &mut stream(0, "k")).unwrap().k(), 1);
        let a = make_fewshot(&s, 10, &mut stream(1, "k")).unwrap();
        let b = make_fewshot(&s, 10, &mut stream(1, "k")).unwrap();
        assert_eq!(a.samples(), b.samples());
        assert!(a.samples().iter().all(|p| (p[0].hypot(p[1]) - 1.0).abs() < 1e-12));
        assert!(make_fewshot(&s, 0, &mut stream(0, "k")).is_err());
        assert!(make_fewshot(&s, 11, &mut stream(0, "k")).is_err());
    }

    #[test]
    fn prompt_sets_accumulate() {
        let base = [1, 2, 3, 4, 5];
        let sessions = [(6, 1), (7, 2), (8, 3), (9, 4), (10, 5)];
        let p1 = build_prompt_sets(1, &base, &sessions).unwrap();
        assert_eq!(p1.session, vec![6]);
        assert_eq!(p1.test, vec![1, 6]);
        let mut prev = p1.test.clone();
        for i in 2..=5 {
            let p = build_prompt_sets(i, &base, &sessions).unwrap();
            assert!(prev.iter().all(|t| p.test.contains(t)));
            assert!(p.regularization.iter().all(|t| !(6..=10).contains(t)));
            prev = p.test;
        }
        assert!((6..=10).all(|t| prev.contains(&t)));
        assert!(build_prompt_sets(0, &base, &sessions).is_err());
        assert!(build_prompt_sets(6, &base, &sessions).is_err());
    }

    #[test]
    fn default_world_is_well_formed() {
        let base = default_base_concepts();
        assert_eq!(base.len(), 5);
        let families: BTreeSet<_> = base.iter().map(|c| c.family).collect();
        assert_eq!(families.len(), 5);
        for (b, t) in default_session_transforms() {
            let shift = t.shift[0].hypot(t.shift[1]);
            assert!((2.0..=4.0).contains(&shift));
            assert!((0.5..=1.5).contains(&t.scale_mul));
            assert!(base.iter().any(|c| c.token == b));
        }
    }
}
