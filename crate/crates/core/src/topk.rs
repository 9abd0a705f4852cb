//! Top-K beam subsets and the empirical-Bayes choice of K.
//!
//! From a training set of score vectors and true labels we store, for every
//! K, the sorted values of c_K (the score mass of the K best beams) over all
//! samples and over the samples whose optimum landed inside their top-K set.
//! At run time the probability that the optimum is inside B_K, given that the
//! observed c_K is at most that of the query, is read off those two CDFs.

use serde::{Deserialize, Serialize};

use crate::latency::{t_df, NrTiming, PipelineTiming};
use crate::neural::ScoreVector;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamSubset {
    /// Flattened beam-pair indices, best score first.
    pub indices: Vec<usize>,
}

impl BeamSubset {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.contains(&index)
    }
}

/// Indices sorted by descending score, ties by ascending index.
pub fn rank_order(s: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    idx
}

/// Prefix sums of the sorted scores: `out[k]` is c_k, `out[0] = 0`.
fn score_mass_prefix(s: &[f64], order: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(order.len() + 1);
    let mut acc = 0.0;
    out.push(acc);
    for &i in order {
        acc += s[i];
        out.push(acc);
    }
    out
}

fn check_k(k: usize, len: usize) -> Result<()> {
    if k < 1 || k > len {
        return Err(Error::invalid(format!("K = {k} outside 1..={len}")));
    }
    Ok(())
}

/// Sum of the K largest scores.
pub fn c_k(s: &ScoreVector, k: usize) -> Result<f64> {
    check_k(k, s.len())?;
    let order = rank_order(&s.s);
    Ok(score_mass_prefix(&s.s, &order[..k])[k])
}

pub fn top_k_set(s: &ScoreVector, k: usize) -> Result<BeamSubset> {
    check_k(k, s.len())?;
    let mut order = rank_order(&s.s);
    order.truncate(k);
    Ok(BeamSubset { indices: order })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KTable {
    pub k: usize,
    /// c_K over all training samples, ascending.
    pub all: Vec<f64>,
    /// c_K over samples whose label was inside their top-K set, ascending.
    pub included: Vec<f64>,
    /// Unconditional inclusion rate.
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalTables {
    pub class_count: usize,
    pub sample_count: usize,
    pub per_k: Vec<KTable>,
}

impl EmpiricalTables {
    pub fn table(&self, k: usize) -> Result<&KTable> {
        check_k(k, self.class_count)?;
        Ok(&self.per_k[k - 1])
    }
}

pub fn build_tables(training_scores: &[ScoreVector], training_labels: &[usize]) -> Result<EmpiricalTables> {
    if training_scores.is_empty() {
        return Err(Error::invalid("no training scores"));
    }
    if training_scores.len() != training_labels.len() {
        return Err(Error::invalid("scores and labels are not aligned"));
    }
    let b = training_scores[0].len();
    if b == 0 || training_scores.iter().any(|s| s.len() != b) {
        return Err(Error::invalid("score vectors must share a nonzero length"));
    }
    if let Some(l) = training_labels.iter().find(|&&l| l >= b) {
        return Err(Error::invalid(format!("label {l} out of range")));
    }
    let n = training_scores.len();
    let mut per_k: Vec<KTable> = (1..=b)
        .map(|k| KTable { k, all: Vec::with_capacity(n), included: Vec::new(), p: 0.0 })
        .collect();
    for (s, &label) in training_scores.iter().zip(training_labels) {
        let order = rank_order(&s.s);
        let prefix = score_mass_prefix(&s.s, &order);
        let rank = order.iter().position(|&i| i == label).expect("label in range");
        for (k0, t) in per_k.iter_mut().enumerate() {
            let c = prefix[k0 + 1];
            t.all.push(c);
            if rank <= k0 {
                t.included.push(c);
            }
        }
    }
    for t in &mut per_k {
        t.all.sort_by(f64::total_cmp);
        t.included.sort_by(f64::total_cmp);
        t.p = t.included.len() as f64 / n as f64;
    }
    Ok(EmpiricalTables { class_count: b, sample_count: n, per_k })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Inclusion {
    pub probability: f64,
    /// The query's c_K was below every training sample, so the unconditional
    /// rate was returned.
    pub fallback: bool,
}

/// Number of sorted samples `<= c`.
fn count_le(sorted: &[f64], c: f64) -> usize {
    sorted.partition_point(|v| *v <= c)
}

/// P(optimum ∈ B_K | c_K(s_I) ≤ c_K(s)) by Bayes rule over the empirical
/// measures. With `a` included and `b` total training samples at or below
/// `c`, the conditional CDF times the prior over the marginal CDF is
/// `(a/n_inc)(n_inc/N)/(b/N) = a/b`, which is evaluated directly.
pub fn inclusion_prob(tables: &EmpiricalTables, k: usize, s: &ScoreVector) -> Result<Inclusion> {
    if s.len() != tables.class_count {
        return Err(Error::invalid("score vector length differs from the tables"));
    }
    let t = tables.table(k)?;
    let c = c_k(s, k)?;
    let below = count_le(&t.all, c);
    if below == 0 {
        return Ok(Inclusion { probability: t.p, fallback: true });
    }
    let included = count_le(&t.included, c);
    Ok(Inclusion { probability: (included as f64 / below as f64).clamp(0.0, 1.0), fallback: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelectionConfig {
    pub alpha: f64,
    pub t_total_ms: f64,
    pub pipeline: PipelineTiming,
    pub nr: NrTiming,
}

impl KSelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.t_total_ms > 0.0) {
            return Err(Error::invalid("alpha must be >= 0 and T_total > 0"));
        }
        Ok(())
    }
}

/// μ(K) = (T_total − T_df(K)) / T_total.
pub fn channel_efficiency(k: usize, cfg: &KSelectionConfig) -> f64 {
    (cfg.t_total_ms - t_df(k, &cfg.pipeline, &cfg.nr)) / cfg.t_total_ms
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub k: usize,
    pub subset: BeamSubset,
    pub objective: f64,
    pub inclusion: Inclusion,
}

/// Maximizes p(K; s) + α·μ(K) over every K with T_df(K) < T_total; ties go to
/// the smallest K.
pub fn select_k(tables: &EmpiricalTables, s: &ScoreVector, cfg: &KSelectionConfig) -> Result<KSelection> {
    cfg.validate()?;
    let mut best: Option<(usize, f64, Inclusion)> = None;
    for k in 1..=tables.class_count {
        if t_df(k, &cfg.pipeline, &cfg.nr) >= cfg.t_total_ms {
            continue;
        }
        let inc = inclusion_prob(tables, k, s)?;
        let objective = inc.probability + cfg.alpha * channel_efficiency(k, cfg);
        if best.as_ref().is_none_or(|(_, o, _)| objective > *o) {
            best = Some((k, objective, inc));
        }
    }
    let (k, objective, inclusion) = best.ok_or(Error::ContactTimeTooShort { t_total_ms: cfg.t_total_ms })?;
    Ok(KSelection { k, subset: top_k_set(s, k)?, objective, inclusion })
}
