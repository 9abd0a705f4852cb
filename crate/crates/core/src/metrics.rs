//! Evaluation metrics over scored test samples.

use serde::{Deserialize, Serialize};

use crate::neural::ScoreVector;
use crate::topk::top_k_set;
use crate::{Error, Result};

pub const KL_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub score: ScoreVector,
    pub true_index: usize,
    /// Received power for every beam pair, flattened like the scores.
    pub power_row: Vec<f64>,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        let b = self.score.len();
        if self.true_index >= b {
            return Err(Error::invalid(format!("true index {} out of range {b}", self.true_index)));
        }
        if !self.power_row.is_empty() && self.power_row.len() != b {
            return Err(Error::invalid("power row length differs from the score length"));
        }
        if self.power_row.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::invalid("powers must be nonnegative"));
        }
        Ok(())
    }
}

fn check(records: &[EvalRecord]) -> Result<usize> {
    let first = records.first().ok_or_else(|| Error::invalid("no records"))?;
    let b = first.score.len();
    for r in records {
        r.validate()?;
        if r.score.len() != b {
            return Err(Error::invalid("records disagree on the beam count"));
        }
    }
    Ok(b)
}

/// Fraction of records whose true pair is among the K best-scored pairs.
pub fn acc_at_k(records: &[EvalRecord], k: usize) -> Result<f64> {
    check(records)?;
    let mut hits = 0usize;
    for r in records {
        hits += top_k_set(&r.score, k)?.contains(r.true_index) as usize;
    }
    Ok(hits as f64 / records.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Support-weighted precision, recall and F1 of the argmax predictions.
pub fn weighted_prf(records: &[EvalRecord]) -> Result<Prf> {
    let b = check(records)?;
    let mut tp = vec![0usize; b];
    let mut predicted = vec![0usize; b];
    let mut support = vec![0usize; b];
    for r in records {
        let p = r.score.argmax();
        predicted[p] += 1;
        support[r.true_index] += 1;
        if p == r.true_index {
            tp[p] += 1;
        }
    }
    let n = records.len() as f64;
    let mut out = Prf { precision: 0.0, recall: 0.0, f1: 0.0 };
    for c in 0..b {
        if support[c] == 0 {
            continue;
        }
        let precision = if predicted[c] == 0 { 0.0 } else { tp[c] as f64 / predicted[c] as f64 };
        let recall = tp[c] as f64 / support[c] as f64;
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        let w = support[c] as f64 / n;
        out.precision += w * precision;
        out.recall += w * recall;
        out.f1 += w * f1;
    }
    Ok(out)
}

/// KL(pred || truth) with the truth floored at `epsilon`.
pub fn kl_divergence(pred: &[f64], truth: &[f64], epsilon: f64) -> f64 {
    pred.iter()
        .zip(truth)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, t)| p * (p / t.max(epsilon)).ln())
        .sum()
}

fn one_hot(len: usize, index: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

/// Mean per-sample KL against the one-hot truths.
pub fn mean_kl(records: &[EvalRecord]) -> Result<f64> {
    let b = check(records)?;
    let total: f64 = records
        .iter()
        .map(|r| kl_divergence(&r.score.s, &one_hot(b, r.true_index), KL_EPSILON))
        .sum();
    Ok(total / records.len() as f64)
}

/// KL between the histogram of predicted argmax pairs and the histogram of
/// true pairs.
pub fn label_distribution_kl(records: &[EvalRecord]) -> Result<f64> {
    let b = check(records)?;
    let n = records.len() as f64;
    let mut pred = vec![0.0; b];
    let mut truth = vec![0.0; b];
    for r in records {
        pred[r.score.argmax()] += 1.0 / n;
        truth[r.true_index] += 1.0 / n;
    }
    Ok(kl_divergence(&pred, &truth, KL_EPSILON))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRatio {
    pub ratio: f64,
    pub used: usize,
    /// Records dropped because the optimum power was zero.
    pub skipped: usize,
}

/// Per-record log2(1 + y[best in B_K]) / log2(1 + y[optimum]), averaged.
pub fn record_throughput_ratio(r: &EvalRecord, k: usize) -> Result<Option<f64>> {
    if r.power_row.is_empty() {
        return Err(Error::invalid("record has no power row"));
    }
    let best = r.power_row.iter().copied().fold(0.0, f64::max);
    if best <= 0.0 {
        return Ok(None);
    }
    let inside = top_k_set(&r.score, k)?
        .indices
        .iter()
        .map(|&i| r.power_row[i])
        .fold(0.0, f64::max);
    Ok(Some((1.0 + inside).log2() / (1.0 + best).log2()))
}

pub fn throughput_ratio(records: &[EvalRecord], k: usize) -> Result<ThroughputRatio> {
    check(records)?;
    let mut sum = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for r in records {
        match record_throughput_ratio(r, k)? {
            Some(v) => {
                sum += v;
                used += 1;
            }
            None => skipped += 1,
        }
    }
    let ratio = if used == 0 { 0.0 } else { sum / used as f64 };
    Ok(ThroughputRatio { ratio, used, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(score: &[f64], t: usize, power: &[f64]) -> EvalRecord {
        EvalRecord { score: ScoreVector { s: score.to_vec() }, true_index: t, power_row: power.to_vec() }
    }

    #[test]
    fn accuracy() {
        let perfect = vec![rec(&[0.9, 0.1], 0, &[]), rec(&[0.2, 0.8], 1, &[])];
        assert_eq!(acc_at_k(&perfect, 1).unwrap(), 1.0);
        let rs = vec![
            rec(&[0.5, 0.3, 0.2], 1, &[]),
            rec(&[0.1, 0.2, 0.7], 2, &[]),
            rec(&[0.3, 0.3, 0.4], 1, &[]),
        ];
        // top-1 sets {0},{2},{2}; top-2 sets {0,1},{2,1},{2,0}
        assert!((acc_at_k(&rs, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((acc_at_k(&rs, 2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(acc_at_k(&rs, 3).unwrap(), 1.0);
        assert!(acc_at_k(&[], 1).is_err());
        assert!(acc_at_k(&rs, 4).is_err());
    }

    #[test]
    fn prf() {
        let perfect = vec![rec(&[0.9, 0.1], 0, &[]), rec(&[0.2, 0.8], 1, &[])];
        let p = weighted_prf(&perfect).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));

        let lumped = vec![rec(&[0.9, 0.1], 0, &[]), rec(&[0.9, 0.1], 1, &[])];
        let p = weighted_prf(&lumped).unwrap();
        assert_eq!(p.recall, 0.5);
        // class 0: P=0.5 R=1 F1=2/3; class 1: P=0 R=0 F1=0
        assert!((p.precision - 0.25).abs() < 1e-15);
        assert!((p.f1 - 1.0 / 3.0).abs() < 1e-15);
        assert!(weighted_prf(&[]).is_err());
    }

    #[test]
    fn kl() {
        assert!(kl_divergence(&[1.0, 0.0], &[1.0, 0.0], KL_EPSILON).abs() < 1e-15);
        let v = kl_divergence(&[0.5, 0.5], &[1.0, 0.0], 1e-12);
        let oracle = 0.5 * 0.5f64.ln() + 0.5 * (0.5 / 1e-12f64).ln();
        assert!((v - oracle).abs() < 1e-12);
        assert!(kl_divergence(&[0.2, 0.3, 0.5], &[0.3, 0.3, 0.4], KL_EPSILON) >= 0.0);
        let rs = vec![rec(&[1.0, 0.0], 0, &[]), rec(&[0.0, 1.0], 1, &[])];
        assert_eq!(mean_kl(&rs).unwrap(), 0.0);
        assert_eq!(label_distribution_kl(&rs).unwrap(), 0.0);
    }

    #[test]
    fn throughput() {
        let r = rec(&[0.2, 0.8], 0, &[4.0, 1.0]);
        let t = throughput_ratio(std::slice::from_ref(&r), 1).unwrap();
        assert!((t.ratio - 2f64.log2() / 5f64.log2()).abs() < 1e-15);
        assert!((t.ratio - 0.4307).abs() < 1e-4);
        assert_eq!(throughput_ratio(std::slice::from_ref(&r), 2).unwrap().ratio, 1.0);
        let dead = rec(&[0.5, 0.5], 0, &[0.0, 0.0]);
        let t = throughput_ratio(&[r, dead], 1).unwrap();
        assert_eq!((t.used, t.skipped), (1, 1));
        assert!(throughput_ratio(&[rec(&[1.0], 0, &[])], 1).is_err());
    }
}
