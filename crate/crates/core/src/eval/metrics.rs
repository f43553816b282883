use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::latent::Latent;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_cross(x: &[Latent], y: &[Latent]) -> f64 {
    let mut s = 0.0;
    for a in x {
        for b in y {
            s += dist(a, b);
        }
    }
    s / (x.len() * y.len()) as f64
}

fn mean_within(x: &[Latent]) -> f64 {
    let mut s = 0.0;
    for (i, a) in x.iter().enumerate() {
        for b in &x[i + 1..] {
            s += dist(a, b);
        }
    }
    2.0 * s / (x.len() * x.len()) as f64
}

/// Energy distance `2·E‖x−y‖ − E‖x−x′‖ − E‖y−y′‖`, V-statistic form
/// (within-set means include the zero diagonal), which keeps it
/// non-negative and exactly zero for identical point sets.
pub fn energy_distance(x: &[Latent], y: &[Latent]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Metric("energy distance needs two non-empty sets".into()));
    }
    let d = x[0].dim();
    if x.iter().chain(y).any(|p| p.dim() != d) {
        return Err(Error::Shape("energy distance over points of differing dimension".into()));
    }
    let ed = 2.0 * mean_cross(x, y) - mean_within(x) - mean_within(y);
    Ok(ed.max(0.0))
}

/// Image-alignment analog: `1 / (1 + ED)`.
pub fn image_alignment(generated: &[Latent], reference: &[Latent]) -> Result<f64> {
    Ok(1.0 / (1.0 + energy_distance(generated, reference)?))
}

/// Mean percent drop `(IA_i − IA_n) / IA_i · 100` over earlier concepts.
/// `own[i]` is concept i's alignment at the session it was learned and
/// `last[i]` the same concept's alignment at the final session.
pub fn iad(own: &[f64], last: &[f64]) -> Result<f64> {
    if own.is_empty() {
        return Err(Error::Protocol("IAD needs at least one earlier concept (n ≥ 2)".into()));
    }
    if own.len() != last.len() {
        return Err(Error::Protocol(format!(
            "{} own-session records but {} final-session records",
            own.len(),
            last.len()
        )));
    }
    if let Some(bad) = own.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Protocol(format!("own-session IA must be positive, got {bad}")));
    }
    let total: f64 = own.iter().zip(last).map(|(a, b)| (a - b) / a * 100.0).sum();
    Ok(total / own.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PermutationTest {
    pub statistic: f64,
    /// 95th percentile of the permutation distribution.
    pub threshold_95: f64,
    pub p_value: f64,
}

/// Two-sample energy-distance permutation test. The pooled distance matrix
/// is computed once and relabeled for each permutation.
pub fn energy_permutation_test<R: Rng>(
    x: &[Latent],
    y: &[Latent],
    permutations: usize,
    rng: &mut R,
) -> Result<PermutationTest> {
    let statistic = energy_distance(x, y)?;
    let pooled: Vec<&Latent> = x.iter().chain(y).collect();
    let n = pooled.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = dist(pooled[i], pooled[j]);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let mut labels: Vec<bool> = (0..n).map(|i| i < x.len()).collect();
    let mut stats = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        labels.shuffle(rng);
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let row = &d[i * n..(i + 1) * n];
            for j in i + 1..n {
                match (labels[i], labels[j]) {
                    (true, true) => sxx += row[j],
                    (false, false) => syy += row[j],
                    _ => sxy += row[j],
                }
            }
        }
        stats.push(2.0 * sxy / (nx * ny) - 2.0 * sxx / (nx * nx) - 2.0 * syy / (ny * ny));
    }
    stats.sort_by(|a, b| a.total_cmp(b));
    let idx = ((0.95 * permutations as f64).ceil() as usize).clamp(1, permutations.max(1)) - 1;
    let threshold_95 = stats.get(idx).copied().unwrap_or(f64::INFINITY);
    let exceed = stats.iter().filter(|&&s| s >= statistic).count();
    Ok(PermutationTest {
        statistic,
        threshold_95,
        p_value: (exceed + 1) as f64 / (permutations + 1) as f64,
    })
}
