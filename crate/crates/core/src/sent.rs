//! Token-selective KL regularization.
//!
//! Tokens are first split by entropy into a low-entropy set; within that set
//! the tokens with the largest centered log-prob × advantage product form the
//! high-covariance subset. Each token then gets a KL coefficient of 0,
//! `beta_low` or `beta_high`, and the objective is GRPO with that per-token
//! coefficient in place of the uniform one.

use alloc::vec::Vec;

use crate::error::config_err;
use crate::math;
use crate::grpo::{evaluate_terms, normalization_weights, Normalization, ObjectiveEval, TokenBatch, TokenRecord, TokenTerm};
use crate::policy::{PolicyParams, ReferencePolicy};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EntropyThreshold {
    /// `H_t < τ_H`.
    Absolute(f64),
    /// The lowest `⌊fraction · N⌋` tokens by `(H_t, index)`.
    Percentile(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovThreshold {
    /// `Cov_t > τ_cov`.
    Absolute(f64),
    /// The largest `⌈fraction · |T_low|⌉` covariances within the low set.
    TopFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdSpec {
    pub entropy: EntropyThreshold,
    pub cov: CovThreshold,
}

impl Default for ThresholdSpec {
    fn default() -> Self {
        Self { entropy: EntropyThreshold::Percentile(0.8), cov: CovThreshold::TopFraction(0.0002) }
    }
}

impl ThresholdSpec {
    pub fn validate(&self) -> Result<()> {
        if let EntropyThreshold::Percentile(f) = self.entropy {
            if !(f > 0.0 && f < 1.0) {
                return Err(config_err("entropy percentile must lie in (0, 1)"));
            }
        }
        if let CovThreshold::TopFraction(f) = self.cov {
            if !(f > 0.0 && f <= 1.0) {
                return Err(config_err("covariance top-fraction must lie in (0, 1]"));
            }
        }
        Ok(())
    }
}

/// Indices sorted ascending by `key`, ties by index.
fn sorted_by(records: &[TokenRecord], key: impl Fn(&TokenRecord) -> f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.sort_by(|&a, &b| key(&records[a]).total_cmp(&key(&records[b])).then(a.cmp(&b)));
    idx
}

/// Flag the low-entropy set.
pub fn select_low_entropy(batch: &mut TokenBatch, spec: &ThresholdSpec) {
    let records = &mut batch.records;
    match spec.entropy {
        EntropyThreshold::Absolute(tau) => {
            for r in records.iter_mut() {
                r.in_low = r.entropy < tau;
            }
        }
        EntropyThreshold::Percentile(fraction) => {
            let take = math::floor_count(fraction, records.len());
            let order = sorted_by(records, |r| r.entropy);
            for r in records.iter_mut() {
                r.in_low = false;
            }
            for &i in order.iter().take(take) {
                records[i].in_low = true;
            }
        }
    }
}

/// `Cov_t = (ln π(o_t) − mean_j ln π(o_j)) · (A_t − mean_j A_j)` over the
/// whole batch, using the current-policy log-probs stored in the records.
pub fn token_covariance(batch: &mut TokenBatch) {
    let n = batch.records.len();
    if n == 0 {
        return;
    }
    let mean_lp = batch.records.iter().map(|r| r.logprob_new).sum::<f64>() / n as f64;
    let mean_a = batch.records.iter().map(|r| r.advantage).sum::<f64>() / n as f64;
    for r in &mut batch.records {
        r.cov = (r.logprob_new - mean_lp) * (r.advantage - mean_a);
    }
}

/// Flag the high-covariance subset of the low-entropy set.
pub fn select_high_cov(batch: &mut TokenBatch, spec: &ThresholdSpec) {
    for r in &mut batch.records {
        r.in_high_cov = false;
    }
    match spec.cov {
        CovThreshold::Absolute(tau) => {
            for r in batch.records.iter_mut().filter(|r| r.in_low) {
                r.in_high_cov = r.cov > tau;
            }
        }
        CovThreshold::TopFraction(fraction) => {
            let low: Vec<usize> = (0..batch.records.len()).filter(|&i| batch.records[i].in_low).collect();
            let take = math::ceil_count(fraction, low.len());
            let mut order = low;
            let recs = &batch.records;
            order.sort_by(|&a, &b| recs[b].cov.total_cmp(&recs[a].cov).then(a.cmp(&b)));
            for &i in order.iter().take(take) {
                batch.records[i].in_high_cov = true;
            }
        }
    }
}

/// Checked coefficient pair. `beta_high > beta_low > 0`, or both zero to
/// switch the regularizer off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlCoefficients {
    pub beta_low: f64,
    pub beta_high: f64,
}

impl KlCoefficients {
    pub fn new(beta_low: f64, beta_high: f64) -> Result<Self> {
        let disabled = beta_low == 0.0 && beta_high == 0.0;
        if !disabled && !(beta_high > beta_low && beta_low > 0.0) {
            return Err(config_err("KL coefficients must satisfy beta_high > beta_low > 0"));
        }
        Ok(Self { beta_low, beta_high })
    }
}

impl Default for KlCoefficients {
    fn default() -> Self {
        Self { beta_low: 0.5, beta_high: 2.0 }
    }
}

/// KL coefficient of one token from its set membership.
pub fn assign_beta(record: &TokenRecord, beta_low: f64, beta_high: f64) -> Result<f64> {
    let coeffs = KlCoefficients::new(beta_low, beta_high)?;
    Ok(beta_for(record, &coeffs))
}

fn beta_for(record: &TokenRecord, coeffs: &KlCoefficients) -> f64 {
    if record.in_high_cov {
        coeffs.beta_high
    } else if record.in_low {
        coeffs.beta_low
    } else {
        0.0
    }
}

/// Per-class counts and means of one selection pass.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SelectionSummary {
    pub tokens: usize,
    pub low: usize,
    pub high_cov: usize,
    pub mean_entropy_low: f64,
    pub mean_cov_low: f64,
    pub mean_entropy_high_cov: f64,
    pub mean_cov_high_cov: f64,
}

fn summarize(batch: &TokenBatch) -> SelectionSummary {
    let mean = |it: &mut dyn Iterator<Item = f64>| {
        let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    };
    let low = || batch.records.iter().filter(|r| r.in_low);
    let high = || batch.records.iter().filter(|r| r.in_high_cov);
    SelectionSummary {
        tokens: batch.len(),
        low: low().count(),
        high_cov: high().count(),
        mean_entropy_low: mean(&mut low().map(|r| r.entropy)),
        mean_cov_low: mean(&mut low().map(|r| r.cov)),
        mean_entropy_high_cov: mean(&mut high().map(|r| r.entropy)),
        mean_cov_high_cov: mean(&mut high().map(|r| r.cov)),
    }
}

/// Covariance, both selections and `beta_con` in one pre-pass. The flags are
/// frozen afterwards, across any number of optimizer passes over the batch.
pub fn prepare_selection(batch: &mut TokenBatch, spec: &ThresholdSpec, coeffs: &KlCoefficients) -> SelectionSummary {
    token_covariance(batch);
    select_low_entropy(batch, spec);
    select_high_cov(batch, spec);
    for r in &mut batch.records {
        r.beta_con = beta_for(r, coeffs);
    }
    summarize(batch)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SentSpec {
    pub epsilon: Option<f64>,
    pub normalization: Normalization,
}

impl Default for SentSpec {
    fn default() -> Self {
        Self { epsilon: Some(0.2), normalization: Normalization::SequenceMean }
    }
}

/// GRPO token terms with each token's own `beta_con`.
pub fn sent_terms(batch: &TokenBatch, spec: &SentSpec) -> Vec<TokenTerm> {
    normalization_weights(batch, spec.normalization)
        .into_iter()
        .zip(&batch.records)
        .map(|(w, rec)| TokenTerm {
            surrogate_weight: w,
            advantage: rec.advantage,
            clip: spec.epsilon,
            kl_ref_weight: rec.beta_con * w,
            ..TokenTerm::default()
        })
        .collect()
}

/// Requires [`prepare_selection`] to have populated `beta_con`.
pub fn sent_objective(
    params: &PolicyParams,
    reference: &ReferencePolicy,
    batch: &TokenBatch,
    spec: &SentSpec,
) -> Result<ObjectiveEval> {
    if batch.is_empty() {
        return Err(config_err("objective needs a non-empty batch"));
    }
    evaluate_terms(params, reference, batch, &sent_terms(batch, spec))
}
