//! Frozen probe classifier used for the text-alignment analog.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::concepts::{sample_concept, ConceptSpec};
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::nn::{Activation, Adam, AdamConfig, Mlp};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub steps: usize,
    pub samples_per_class: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            steps: 2000,
            samples_per_class: 1000,
            batch: 128,
            lr: 1e-2,
        }
    }
}

/// One-hidden-layer softmax classifier over the base tokens. It is trained
/// once by [`ProbeClassifier::train`] and exposes no way to update it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeClassifier {
    classes: Vec<usize>,
    mlp: Mlp,
    params: Vec<f64>,
}

fn softmax_rows(logits: &mut [f64], width: usize) {
    for row in logits.chunks_mut(width) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

impl ProbeClassifier {
    pub fn train<R: Rng>(concepts: &[ConceptSpec], config: &ProbeConfig, rng: &mut R) -> Result<Self> {
        if concepts.is_empty() {
            return Err(Error::config("base_concepts", "the probe needs at least one class"));
        }
        let classes: Vec<usize> = concepts.iter().map(|c| c.token).collect();
        let mlp = Mlp::new(vec![2, config.hidden, classes.len()], Activation::Tanh);
        let mut params = Vec::with_capacity(mlp.param_count());
        for l in 0..mlp.layers() {
            let (_, _, i, o) = mlp.layer_offsets(l);
            let std = (2.0 / (i + o) as f64).sqrt();
            params.extend(rng::normal_vec(rng, i * o).into_iter().map(|v| v * std));
            params.extend(std::iter::repeat_n(0.0, o));
        }
        let mut data: Vec<(Latent, usize)> = Vec::new();
        for (label, c) in concepts.iter().enumerate() {
            for p in sample_concept(c, config.samples_per_class, rng)? {
                data.push((p, label));
            }
        }
        let c = classes.len();
        let mut opt = Adam::new(AdamConfig::with_lr(config.lr), params.len());
        for _ in 0..config.steps {
            let batch: Vec<&(Latent, usize)> = data.choose_multiple(rng, config.batch).collect();
            let x: Vec<f64> = batch.iter().flat_map(|(p, _)| p.iter().copied()).collect();
            let (mut probs, tape) = mlp.forward(&params, &x, batch.len());
            softmax_rows(&mut probs, c);
            let scale = 1.0 / batch.len() as f64;
            for (row, (_, label)) in probs.chunks_mut(c).zip(&batch) {
                row[*label] -= 1.0;
                row.iter_mut().for_each(|v| *v *= scale);
            }
            let mut grad = vec![0.0; params.len()];
            mlp.backward(&params, &tape, &probs, &mut grad);
            opt.step(&mut params, &grad);
        }
        Ok(Self { classes, mlp, params })
    }

    /// A probe that assigns equal probability to every class.
    pub fn uniform(classes: Vec<usize>, hidden: usize) -> Self {
        let mlp = Mlp::new(vec![2, hidden, classes.len()], Activation::Tanh);
        let params = vec![0.0; mlp.param_count()];
        Self { classes, mlp, params }
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        true
    }

    /// Class probabilities, one row per point, columns ordered as `classes()`.
    pub fn predict_proba(&self, points: &[Latent]) -> Vec<Vec<f64>> {
        let x: Vec<f64> = points.iter().flat_map(|p| p.iter().copied()).collect();
        let (mut probs, _) = self.mlp.forward(&self.params, &x, points.len());
        softmax_rows(&mut probs, self.classes.len());
        probs.chunks(self.classes.len()).map(<[f64]>::to_vec).collect()
    }

    pub fn accuracy(&self, points: &[Latent], token: usize) -> Result<f64> {
        let col = self.column(token)?;
        let probs = self.predict_proba(points);
        let hits = probs
            .iter()
            .filter(|row| row.iter().enumerate().all(|(j, &p)| j == col || p < row[col]))
            .count();
        Ok(hits as f64 / points.len().max(1) as f64)
    }

    fn column(&self, token: usize) -> Result<usize> {
        self.classes
            .iter()
            .position(|&c| c == token)
            .ok_or_else(|| Error::Protocol(format!("token {token} is not a base token known to the probe")))
    }
}

/// Mean probe probability of `token`'s class over the generated points.
pub fn text_alignment(probe: &ProbeClassifier, generated: &[Latent], token: usize) -> Result<f64> {
    let col = probe.column(token)?;
    if generated.is_empty() {
        return Err(Error::Metric("text alignment over an empty sample".into()));
    }
    let probs = probe.predict_proba(generated);
    Ok(probs.iter().map(|r| r[col]).sum::<f64>() / probs.len() as f64)
}
