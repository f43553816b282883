use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::iad;
use super::probe::{text_alignment, ProbeClassifier};
use crate::error::{Error, Result};
use crate::sampler::{sample, NoisePredictor};
use crate::schedule::NoiseSchedule;

/// One alignment measurement of a token at a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub token: usize,
    /// Session that introduced the token; `None` for base tokens.
    pub learned_at: Option<usize>,
    /// Session whose model produced the samples (0 = pretrained model).
    pub session: usize,
    pub ia: Option<f64>,
    pub ta: Option<f64>,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcfReport {
    /// `(base token, TA)` in probe class order.
    pub rows: Vec<(usize, f64)>,
    pub mean: f64,
}

/// Generates every base token with plain sampling and scores it with the
/// frozen probe.
pub fn run_rcf_protocol<P: NoisePredictor + ?Sized, R: Rng>(
    model: &P,
    probe: &ProbeClassifier,
    sched: &NoiseSchedule,
    guidance: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<RcfReport> {
    let mut rows = Vec::with_capacity(probe.classes().len());
    for &token in probe.classes() {
        let generated = sample(model, token, sched, guidance, rng, n_samples)?;
        rows.push((token, text_alignment(probe, &generated, token)?));
    }
    let mean = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
    Ok(RcfReport { rows, mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcfReport {
    /// `(session n, IAD at n)` for n = 2..=last.
    pub iad: Vec<(usize, f64)>,
    /// `(token, session n, per-concept drop in percent)`.
    pub per_concept: Vec<(usize, usize, f64)>,
}

/// IAD for every session from 2 on. For session `n` the concepts learned in
/// sessions `1..n` are compared between their own session and `n`.
pub fn run_pcf_protocol(records: &[AlignmentRecord]) -> Result<PcfReport> {
    let ia_at = |token: usize, session: usize| {
        records
            .iter()
            .find(|r| r.token == token && r.session == session)
            .and_then(|r| r.ia)
    };
    let mut learned: Vec<(usize, usize)> = records
        .iter()
        .filter_map(|r| r.learned_at.map(|s| (s, r.token)))
        .collect();
    learned.sort_unstable();
    learned.dedup();
    let last = learned.iter().map(|l| l.0).max().unwrap_or(0);
    if last < 2 {
        return Err(Error::Protocol("IAD needs at least two sessions".into()));
    }
    let mut report = PcfReport {
        iad: Vec::new(),
        per_concept: Vec::new(),
    };
    for n in 2..=last {
        let mut own = Vec::new();
        let mut now = Vec::new();
        for &(s, token) in learned.iter().filter(|l| l.0 < n) {
            let missing = |at: usize| Error::Protocol(format!("no IA record for token {token} at session {at}"));
            let a = ia_at(token, s).ok_or_else(|| missing(s))?;
            let b = ia_at(token, n).ok_or_else(|| missing(n))?;
            report.per_concept.push((token, n, iad(&[a], &[b])?));
            own.push(a);
            now.push(b);
        }
        report.iad.push((n, iad(&own, &now)?));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(token: usize, learned: usize, session: usize, ia: f64) -> AlignmentRecord {
        AlignmentRecord {
            token,
            learned_at: Some(learned),
            session,
            ia: Some(ia),
            ta: None,
            n_samples: 10,
        }
    }

    #[test]
    fn single_session_is_rejected() {
        assert!(run_pcf_protocol(&[rec(6, 1, 1, 0.5)]).is_err());
    }

    #[test]
    fn constant_history_has_zero_drop() {
        let mut r = Vec::new();
        for n in 1..=4 {
            for i in 1..=n {
                r.push(rec(5 + i, i, n, 0.3 + 0.1 * i as f64));
            }
        }
        let rep = run_pcf_protocol(&r).unwrap();
        assert_eq!(rep.iad.len(), 3);
        assert!(rep.iad.iter().all(|&(_, v)| v == 0.0));
    }

    #[test]
    fn per_concept_drops_average_into_iad() {
        let r = vec![
            rec(6, 1, 1, 0.8),
            rec(6, 1, 2, 0.4),
            rec(7, 2, 2, 0.5),
            rec(6, 1, 3, 0.6),
            rec(7, 2, 3, 0.25),
            rec(8, 3, 3, 0.9),
        ];
        let rep = run_pcf_protocol(&r).unwrap();
        assert_eq!(rep.iad[0], (2, 50.0));
        assert!((rep.iad[1].1 - (25.0 + 50.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn missing_records_are_protocol_errors() {
        let r = vec![rec(6, 1, 1, 0.8), rec(7, 2, 2, 0.5)];
        assert!(matches!(run_pcf_protocol(&r), Err(Error::Protocol(_))));
    }
}
