use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in data space. With no autoencoder in the loop, latents and data
/// samples are the same thing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Latent(pub Vec<f64>);

impl Latent {
    pub fn zeros(dim: usize) -> Self {
        Latent(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn ensure_dim(&self, dim: usize, what: &str) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::Shape(format!(
                "{what}: expected dimension {dim}, got {}",
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn distance(&self, other: &Latent) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl From<Vec<f64>> for Latent {
    fn from(v: Vec<f64>) -> Self {
        Latent(v)
    }
}

impl Deref for Latent {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Latent {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Mean of a set of latents; `None` for an empty set.
pub fn centroid(points: &[Latent]) -> Option<Latent> {
    let first = points.first()?;
    let mut acc = vec![0.0; first.dim()];
    for p in points {
        for (a, v) in acc.iter_mut().zip(p.iter()) {
            *a += v;
        }
    }
    let n = points.len() as f64;
    Some(Latent(acc.into_iter().map(|a| a / n).collect()))
}
