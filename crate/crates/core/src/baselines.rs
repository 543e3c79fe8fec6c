//! Objective modes: plain GRPO, SENT and six entropy-control baselines, all
//! expressed as per-token coefficients for [`evaluate_terms`].

use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;

use crate::error::config_err;
use crate::grpo::{
    evaluate_terms, grpo_terms, GrpoSpec, Normalization, ObjectiveEval, TokenBatch, TokenTerm,
};
use crate::math;
use crate::policy::{PolicyParams, ReferencePolicy};
use crate::rng;
use crate::sent::{sent_terms, KlCoefficients, SentSpec, ThresholdSpec};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BaselineMode {
    Grpo,
    En,
    Adv,
    Mask,
    Clip,
    Cov,
    HighEn,
    Sent,
}

impl BaselineMode {
    pub const ALL: [BaselineMode; 8] = [
        BaselineMode::Grpo,
        BaselineMode::En,
        BaselineMode::Adv,
        BaselineMode::Mask,
        BaselineMode::Clip,
        BaselineMode::Cov,
        BaselineMode::HighEn,
        BaselineMode::Sent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineMode::Grpo => "grpo",
            BaselineMode::En => "en",
            BaselineMode::Adv => "adv",
            BaselineMode::Mask => "mask",
            BaselineMode::Clip => "clip",
            BaselineMode::Cov => "cov",
            BaselineMode::HighEn => "high_en",
            BaselineMode::Sent => "sent",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }

    /// Modes whose token selection reads `Cov_t`.
    pub fn needs_covariance(self) -> bool {
        matches!(self, BaselineMode::Clip | BaselineMode::Cov | BaselineMode::Sent)
    }
}

impl core::fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub mode: BaselineMode,
    /// Clip range and KL coefficient of the GRPO-shaped modes.
    pub grpo: GrpoSpec,
    /// Entropy coefficient of `En` and `HighEn`.
    pub lambda: f64,
    pub alpha: f64,
    pub kappa: f64,
    pub rho: f64,
    pub r_clip: f64,
    pub omega_low: f64,
    pub omega_high: f64,
    pub k_cov: f64,
    /// KL coefficient of the `Cov` penalty.
    pub cov_beta: f64,
    pub tau_he: f64,
    pub thresholds: ThresholdSpec,
    pub kl: KlCoefficients,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            mode: BaselineMode::Grpo,
            grpo: GrpoSpec::default(),
            lambda: 0.001,
            alpha: 0.4,
            kappa: 2.0,
            rho: 0.2,
            r_clip: 2e-4,
            omega_low: 1.0,
            omega_high: 5.0,
            k_cov: 0.0002,
            cov_beta: 1.0,
            tau_he: 1.0,
            thresholds: ThresholdSpec::default(),
            kl: KlCoefficients::default(),
        }
    }
}

impl BaselineConfig {
    pub fn with_mode(mode: BaselineMode) -> Self {
        Self { mode, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self.grpo.epsilon {
            if !(e > 0.0 && e < 1.0) {
                return Err(config_err("clip epsilon must lie in (0, 1)"));
            }
        }
        if !(self.grpo.beta >= 0.0 && self.lambda >= 0.0 && self.alpha >= 0.0 && self.cov_beta >= 0.0) {
            return Err(config_err("coefficients must be non-negative"));
        }
        if !(self.kappa > 0.0) {
            return Err(config_err("kappa must be positive"));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(config_err("mask fraction must lie in (0, 1]"));
        }
        if !(self.r_clip >= 0.0 && self.r_clip < 1.0) {
            return Err(config_err("clip fraction must lie in [0, 1)"));
        }
        if !(self.k_cov >= 0.0 && self.k_cov <= 1.0) {
            return Err(config_err("covariance fraction must lie in [0, 1]"));
        }
        if !(self.omega_low < self.omega_high) {
            return Err(config_err("covariance bounds must satisfy omega_low < omega_high"));
        }
        self.thresholds.validate()?;
        KlCoefficients::new(self.kl.beta_low, self.kl.beta_high)?;
        Ok(())
    }

    fn sent_spec(&self) -> SentSpec {
        SentSpec { epsilon: self.grpo.epsilon, normalization: self.grpo.normalization }
    }
}

/// `A + min(α·H, |A| / κ)` with `H` a constant.
pub fn shaped_advantage(entropy: f64, advantage: f64, alpha: f64, kappa: f64) -> f64 {
    advantage + (alpha * entropy).min(advantage.abs() / kappa)
}

/// Tokens chosen by one mode's selector, kept so a batch can be re-evaluated
/// with the same selection.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Selection {
    pub tokens: Vec<usize>,
}

/// Indices sorted descending by `key`, ties by index.
fn descending(indices: &mut [usize], key: impl Fn(usize) -> f64) {
    indices.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
}

fn token_mean_terms(batch: &TokenBatch) -> Vec<TokenTerm> {
    let w = 1.0 / batch.len().max(1) as f64;
    batch
        .records
        .iter()
        .map(|r| TokenTerm { surrogate_weight: w, advantage: r.advantage, clip: None, ..TokenTerm::default() })
        .collect()
}

/// GRPO plus `λ · mean_t H_t`.
pub fn entropy_bonus_terms(batch: &TokenBatch, config: &BaselineConfig) -> Vec<TokenTerm> {
    let w = config.lambda / batch.len().max(1) as f64;
    let mut terms = grpo_terms(batch, &config.grpo);
    for t in &mut terms {
        t.entropy_weight = w;
    }
    terms
}

/// GRPO with shaped advantages and no KL term.
pub fn advantage_shaping_terms(batch: &TokenBatch, config: &BaselineConfig) -> Vec<TokenTerm> {
    let spec = GrpoSpec { beta: 0.0, ..config.grpo };
    let mut terms = grpo_terms(batch, &spec);
    for (t, r) in terms.iter_mut().zip(&batch.records) {
        t.advantage = shaped_advantage(r.entropy, r.advantage, config.alpha, config.kappa);
    }
    terms
}

/// Top `⌊ρ · N⌋` entropies among tokens of groups with mixed outcomes.
pub fn mask_selection(batch: &TokenBatch, rho: f64) -> Selection {
    let mut eligible: Vec<usize> = (0..batch.len())
        .filter(|&i| {
            let g = &batch.groups[batch.records[i].group];
            let c = g.num_correct();
            c > 0 && c < g.size()
        })
        .collect();
    let take = math::floor_count(rho, eligible.len());
    descending(&mut eligible, |i| batch.records[i].entropy);
    eligible.truncate(take);
    eligible.sort_unstable();
    Selection { tokens: eligible }
}

pub fn entropy_mask_terms(batch: &TokenBatch, config: &BaselineConfig, selection: &Selection) -> Vec<TokenTerm> {
    let mut terms = vec![TokenTerm::default(); batch.len()];
    if selection.tokens.is_empty() {
        log::warn!("entropy mask selected no tokens; the batch contributes nothing");
        return terms;
    }
    let w = 1.0 / selection.tokens.len() as f64;
    for &i in &selection.tokens {
        terms[i] = TokenTerm {
            surrogate_weight: w,
            advantage: batch.records[i].advantage,
            clip: config.grpo.epsilon,
            ..TokenTerm::default()
        };
    }
    terms
}

/// `⌊r · N⌋` tokens drawn uniformly without replacement among those with
/// `Cov_t ∈ [ω_low, ω_high]`. Requires covariances to be populated.
pub fn clip_selection<R: RngCore + ?Sized>(batch: &TokenBatch, config: &BaselineConfig, rng: &mut R) -> Selection {
    let mut candidates: Vec<usize> = (0..batch.len())
        .filter(|&i| {
            let c = batch.records[i].cov;
            c >= config.omega_low && c <= config.omega_high
        })
        .collect();
    let take = math::floor_count(config.r_clip, batch.len()).min(candidates.len());
    // partial Fisher-Yates
    for k in 0..take {
        let j = k + rng::below(rng, (candidates.len() - k) as u64) as usize;
        candidates.swap(k, j);
    }
    candidates.truncate(take);
    candidates.sort_unstable();
    Selection { tokens: candidates }
}

pub fn covariance_clip_terms(batch: &TokenBatch, selection: &Selection) -> Vec<TokenTerm> {
    let mut terms = token_mean_terms(batch);
    for &i in &selection.tokens {
        terms[i] = TokenTerm::default();
    }
    terms
}

/// The `⌈k · N⌉` largest covariances. Requires covariances to be populated.
pub fn cov_selection(batch: &TokenBatch, k: f64) -> Selection {
    let n = batch.len();
    let take = if k <= 0.0 { 0 } else { math::ceil_count(k, n).max(1).min(n) };
    let mut idx: Vec<usize> = (0..n).collect();
    descending(&mut idx, |i| batch.records[i].cov);
    idx.truncate(take);
    idx.sort_unstable();
    Selection { tokens: idx }
}

pub fn covariance_kl_terms(batch: &TokenBatch, config: &BaselineConfig, selection: &Selection) -> Vec<TokenTerm> {
    let mut terms = token_mean_terms(batch);
    let w = config.cov_beta / batch.len().max(1) as f64;
    for &i in &selection.tokens {
        terms[i].kl_old_weight = w;
    }
    terms
}

/// GRPO plus `λ · Σ_t 1[H_t ≥ τ] H_t`.
pub fn high_entropy_reward_terms(batch: &TokenBatch, config: &BaselineConfig) -> Vec<TokenTerm> {
    let mut terms = grpo_terms(batch, &config.grpo);
    for (t, r) in terms.iter_mut().zip(&batch.records) {
        if r.entropy >= config.tau_he {
            t.entropy_weight = config.lambda;
        }
    }
    terms
}

/// The random or data-dependent selection of a mode, computed once per
/// rollout batch. Covariance-based modes require `Cov_t` on the records.
pub fn select_tokens<R: RngCore + ?Sized>(batch: &TokenBatch, config: &BaselineConfig, rng: &mut R) -> Selection {
    match config.mode {
        BaselineMode::Mask => mask_selection(batch, config.rho),
        BaselineMode::Clip => clip_selection(batch, config, rng),
        BaselineMode::Cov => cov_selection(batch, config.k_cov),
        _ => Selection::default(),
    }
}

/// Per-token terms of `config.mode`. SENT reads `beta_con` from the records.
pub fn token_terms(batch: &TokenBatch, config: &BaselineConfig, selection: &Selection) -> Vec<TokenTerm> {
    match config.mode {
        BaselineMode::Grpo => grpo_terms(batch, &config.grpo),
        BaselineMode::En => entropy_bonus_terms(batch, config),
        BaselineMode::Adv => advantage_shaping_terms(batch, config),
        BaselineMode::Mask => entropy_mask_terms(batch, config, selection),
        BaselineMode::Clip => covariance_clip_terms(batch, selection),
        BaselineMode::Cov => covariance_kl_terms(batch, config, selection),
        BaselineMode::HighEn => high_entropy_reward_terms(batch, config),
        BaselineMode::Sent => sent_terms(batch, &config.sent_spec()),
    }
}

pub fn mode_objective(
    params: &PolicyParams,
    reference: &ReferencePolicy,
    batch: &TokenBatch,
    config: &BaselineConfig,
    selection: &Selection,
) -> Result<ObjectiveEval> {
    if batch.is_empty() {
        return Err(config_err("objective needs a non-empty batch"));
    }
    evaluate_terms(params, reference, batch, &token_terms(batch, config, selection))
}

pub fn entropy_bonus_objective(
    params: &PolicyParams,
    reference: &ReferencePolicy,
    batch: &TokenBatch,
    config: &BaselineConfig,
) -> Result<ObjectiveEval> {
    evaluate_terms(params, reference, batch, &entropy_bonus_terms(batch, config))
}

pub fn advantage_shaping_objective(
    params: &PolicyParams,
    reference: &ReferencePolicy,
    batch: &TokenBatch,
    config: &BaselineConfig,
) -> Result<ObjectiveEval> {
    evaluate_terms(params, reference, batch, &advantage_shaping_terms(batch, config))
}

pub fn entropy_mask_objective(
    params: &PolicyParams,
    reference: &ReferencePolicy,
    batch: &TokenBatch,
    config: &BaselineConfig,
) -> Result<ObjectiveEval> {
    let selection = mask_selection(batch, config.rho);
    evaluate_terms(params, reference, batch, &entropy_mask_terms(batch, config, &selection))
}

pub fn covariance_clip_objective<R: RngCore + ?Sized>(
    params: &PolicyParams,
    reference: &ReferencePolicy,
    batch: &TokenBatch,
    config: &BaselineConfig,
    rng: &mut R,
) -> Result<ObjectiveEval> {
    let selection = clip_selection(batch, config, rng);
    evaluate_terms(params, reference, batch, &covariance_clip_terms(batch, &selection))
}

pub fn covariance_kl_objective(
    params: &PolicyParams,
    reference: &ReferencePolicy,
    batch: &TokenBatch,
    config: &BaselineConfig,
) -> Result<ObjectiveEval> {
    let selection = cov_selection(batch, config.k_cov);
    evaluate_terms(params, reference, batch, &covariance_kl_terms(batch, config, &selection))
}

pub fn high_entropy_reward_objective(
    params: &PolicyParams,
    reference: &ReferencePolicy,
    batch: &TokenBatch,
    config: &BaselineConfig,
) -> Result<ObjectiveEval> {
    evaluate_terms(params, reference, batch, &high_entropy_reward_terms(batch, config))
}

/// Token-mean, unclipped, KL-free GRPO: the zero-strength form of `Clip`
/// and `Cov`.
pub fn plain_token_mean_spec() -> GrpoSpec {
    GrpoSpec { epsilon: None, beta: 0.0, normalization: Normalization::TokenMean }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shaping_examples() {
        assert!((shaped_advantage(1.0, 1.0, 0.4, 2.0) - 1.4).abs() < 1e-12);
        assert!((shaped_advantage(5.0, 1.0, 0.4, 2.0) - 1.5).abs() < 1e-12);
        assert_eq!(shaped_advantage(3.0, 0.0, 0.4, 2.0), 0.0);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in BaselineMode::ALL {
            assert_eq!(BaselineMode::from_name(m.name()), Some(m));
        }
        assert_eq!(BaselineMode::from_name("ppo"), None);
    }

    #[test]
    fn config_validation() {
        assert!(BaselineConfig::default().validate().is_ok());
        let bad = BaselineConfig { omega_low: 5.0, omega_high: 1.0, ..BaselineConfig::default() };
        assert!(bad.validate().is_err());
        let bad = BaselineConfig { rho: 0.0, ..BaselineConfig::default() };
        assert!(bad.validate().is_err());
    }
}
