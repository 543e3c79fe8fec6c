//! GRPO machinery: group rollouts, group-normalized advantages, likelihood
//! ratios, the clipped surrogate, exact categorical KL, and the token-term
//! engine every objective mode is assembled from.
//!
//! The engine evaluates, for each rollout token `t` at state `s_t`,
//!
//! ```text
//! w_t · min(r_t A_t, clip(r_t) A_t)  −  κ_t · KL(π_θ(·|s_t) ‖ π_ref(·|s_t))
//!                                    −  ω_t · KL(π_old(·|s_t) ‖ π_θ(·|s_t))
//!                                    +  λ_t · H(π_θ(·|s_t))
//! ```
//!
//! with per-token weights chosen by the objective mode, and returns the sum
//! together with its analytic gradient over the logits.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;

use crate::error::config_err;
use crate::math;
use crate::policy::{sample_response, Gradient, PolicyParams, ReferencePolicy, StateId, TokenDistribution};
use crate::task_env::{verify, Query, Response, TokenId, Vocabulary};
use crate::{Error, Result};

/// Groups whose reward standard deviation falls below this get zero advantages.
pub const ZERO_STD_GUARD: f64 = 1e-8;

/// Ratios whose log exceeds this are clamped to [`RATIO_SENTINEL`].
pub const LOG_RATIO_LIMIT: f64 = 690.0;
pub const RATIO_SENTINEL: f64 = 1e299;

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub query: Query,
    pub responses: Vec<Response>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn group_size(&self) -> usize {
        self.responses.len()
    }

    pub fn num_correct(&self) -> usize {
        self.rewards.iter().filter(|&&r| r > 0.5).count()
    }
}

/// Sample `group_size` responses for `query`, score them and normalize.
pub fn rollout_group<R: RngCore + ?Sized>(
    params: &PolicyParams,
    query: &Query,
    vocab: &Vocabulary,
    group_size: usize,
    max_len: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<RolloutGroup> {
    if group_size < 2 {
        return Err(config_err("group size must be at least 2"));
    }
    if max_len == 0 {
        return Err(config_err("max response length must be positive"));
    }
    let responses: Vec<Response> = (0..group_size)
        .map(|_| sample_response(params, query, vocab, max_len, temperature, rng))
        .collect();
    let rewards: Vec<f64> = responses.iter().map(|r| verify(query, r)).collect();
    let advantages = group_advantages(&rewards);
    Ok(RolloutGroup { query: query.clone(), responses, rewards, advantages })
}

/// `(R_i − mean) / std` with the population standard deviation.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    if rewards.is_empty() {
        return Vec::new();
    }
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = math::sqrt(var);
    if std < ZERO_STD_GUARD {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratio {
    pub value: f64,
    /// The exact ratio overflowed and was replaced by [`RATIO_SENTINEL`].
    pub clamped: bool,
}

/// `exp(logprob_new − logprob_old)`.
pub fn likelihood_ratio(logprob_new: f64, logprob_old: f64) -> Ratio {
    let d = logprob_new - logprob_old;
    if d > LOG_RATIO_LIMIT {
        log::warn!("likelihood ratio overflow (log ratio {d}); clamping");
        return Ratio { value: RATIO_SENTINEL, clamped: true };
    }
    Ratio { value: math::exp(d), clamped: false }
}

/// `min(r A, clip(r, 1 − ε, 1 + ε) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    unclipped.min(clipped)
}

/// Whether the unclipped branch is the active one (ties go unclipped).
fn unclipped_active(ratio: f64, advantage: f64, epsilon: Option<f64>) -> bool {
    match epsilon {
        None => true,
        Some(e) => ratio * advantage <= ratio.clamp(1.0 - e, 1.0 + e) * advantage,
    }
}

/// `Σ_v p_v ln(p_v / q_v)`.
pub fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (math::ln(p) - math::ln(q)))
        .sum()
}

/// Exact `KL(π_θ(·|s) ‖ π_ref(·|s))` over the full vocabulary.
pub fn kl_exact(params: &PolicyParams, reference: &ReferencePolicy, state: StateId) -> f64 {
    let p = params.token_distribution(state);
    let q = reference.distribution_for(params, state);
    categorical_kl(p.probs(), q.probs())
}

/// `∂ KL(π_θ ‖ q) / ∂θ_v = π_v (ln(π_v / q_v) − KL)` for a softmax row.
pub fn kl_forward_logit_gradient(p: &[f64], q: &[f64]) -> Vec<f64> {
    let kl = categorical_kl(p, q);
    p.iter().zip(q).map(|(&p, &q)| p * (math::ln(p) - math::ln(q) - kl)).collect()
}

/// One rollout token with the quantities the objectives and selectors read.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub group: usize,
    pub response: usize,
    pub position: usize,
    pub state: StateId,
    pub token: TokenId,
    /// Fixed at rollout time.
    pub logprob_old: f64,
    /// Current-policy log-probability when the batch was last refreshed.
    pub logprob_new: f64,
    pub advantage: f64,
    /// Current-policy entropy at the token's state (nats).
    pub entropy: f64,
    pub cov: f64,
    pub beta_con: f64,
    pub in_low: bool,
    pub in_high_cov: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupInfo {
    pub query_id: u64,
    pub lengths: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl GroupInfo {
    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn num_correct(&self) -> usize {
        self.rewards.iter().filter(|&&r| r > 0.5).count()
    }
}

/// Flattened tokens of a mini-batch of rollout groups.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub records: Vec<TokenRecord>,
    pub groups: Vec<GroupInfo>,
    /// Rollout-policy distributions per visited state.
    pub old_probs: BTreeMap<StateId, Vec<f64>>,
}

impl TokenBatch {
    /// Flatten `groups`, allocating their states in `params` in a fixed
    /// (group, response, position) order. `params` must be the policy the
    /// groups were sampled from.
    pub fn build(params: &mut PolicyParams, groups: &[RolloutGroup], temperature: f64) -> Self {
        let mut records = Vec::new();
        let mut infos = Vec::with_capacity(groups.len());
        let mut old_probs = BTreeMap::new();
        for (g, group) in groups.iter().enumerate() {
            for (i, response) in group.responses.iter().enumerate() {
                for (t, (&token, &lp_old)) in response.tokens.iter().zip(&response.logprobs_old).enumerate() {
                    let state = params.state_index(&group.query, &response.tokens[..t]);
                    old_probs.entry(state).or_insert_with(|| {
                        let row = params.row(state).expect("allocated");
                        TokenDistribution::from_logits(row, temperature).probs().to_vec()
                    });
                    records.push(TokenRecord {
                        group: g,
                        response: i,
                        position: t,
                        state,
                        token,
                        logprob_old: lp_old,
                        logprob_new: 0.0,
                        advantage: group.advantages[i],
                        entropy: 0.0,
                        cov: 0.0,
                        beta_con: 0.0,
                        in_low: false,
                        in_high_cov: false,
                    });
                }
            }
            infos.push(GroupInfo {
                query_id: group.query.id,
                lengths: group.responses.iter().map(Response::len).collect(),
                rewards: group.rewards.clone(),
            });
        }
        let mut batch = Self { records, groups: infos, old_probs };
        batch.refresh(params);
        batch
    }

    /// Recompute `logprob_new` and `entropy` under `params`.
    pub fn refresh(&mut self, params: &PolicyParams) {
        let mut cache: BTreeMap<StateId, (f64, Vec<f64>)> = BTreeMap::new();
        for rec in &mut self.records {
            let (h, logp) = cache.entry(rec.state).or_insert_with(|| {
                let d = params.token_distribution(rec.state);
                let logp = match params.row(rec.state) {
                    Some(r) => math::log_softmax(r, 1.0),
                    None => d.probs().iter().map(|&p| math::ln(p)).collect(),
                };
                (d.entropy(), logp)
            });
            rec.entropy = *h;
            rec.logprob_new = logp[rec.token as usize];
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn response_len(&self, rec: &TokenRecord) -> usize {
        self.groups[rec.group].lengths[rec.response]
    }

    pub fn mean_entropy(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.entropy).sum::<f64>() / self.records.len() as f64
    }
}

/// Per-token coefficients fed to [`evaluate_terms`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TokenTerm {
    pub surrogate_weight: f64,
    pub advantage: f64,
    /// `None` uses the unclipped `r · A`.
    pub clip: Option<f64>,
    pub kl_ref_weight: f64,
    pub kl_old_weight: f64,
    pub entropy_weight: f64,
}

/// Objective value and its gradient, split by source.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEval {
    pub value: f64,
    pub surrogate: f64,
    pub kl_penalty: f64,
    pub entropy_bonus: f64,
    pub pg_gradient: Gradient,
    pub kl_gradient: Gradient,
    pub entropy_gradient: Gradient,
    pub clamped_ratios: usize,
}

impl ObjectiveEval {
    pub fn gradient(&self) -> Gradient {
        let mut g = self.pg_gradient.clone();
        g.accumulate(&self.kl_gradient);
        g.accumulate(&self.entropy_gradient);
        g
    }

    /// Gradient of the regularizers only (KL penalties and entropy bonus).
    pub fn regularizer_gradient(&self) -> Gradient {
        let mut g = self.kl_gradient.clone();
        g.accumulate(&self.entropy_gradient);
        g
    }
}

struct StateEval {
    probs: Vec<f64>,
    logp: Vec<f64>,
    kl_ref: Option<(f64, Vec<f64>)>,
    kl_old: Option<(f64, Vec<f64>)>,
    entropy: Option<(f64, Vec<f64>)>,
}

fn numeric(index: usize, rec: &TokenRecord, what: &str) -> Error {
    Error::Numeric(format!(
        "non-finite {what} at token {index} (group {}, response {}, position {}, state {})",
        rec.group, rec.response, rec.position, rec.state.0
    ))
}

/// Evaluate `Σ_t term_t` at `params` with analytic gradients. The terms,
/// `logprob_old` and the old distributions are constants.
pub fn evaluate_terms(
    params: &PolicyParams,
    reference: &ReferencePolicy,
    batch: &TokenBatch,
    terms: &[TokenTerm],
) -> Result<ObjectiveEval> {
    if terms.len() != batch.len() {
        return Err(config_err("one token term per batch token is required"));
    }
    let n = params.vocab_size();
    let mut states: BTreeMap<StateId, StateEval> = BTreeMap::new();
    let mut out = ObjectiveEval {
        value: 0.0,
        surrogate: 0.0,
        kl_penalty: 0.0,
        entropy_bonus: 0.0,
        pg_gradient: Gradient::new(n),
        kl_gradient: Gradient::new(n),
        entropy_gradient: Gradient::new(n),
        clamped_ratios: 0,
    };
    for (index, (rec, term)) in batch.records.iter().zip(terms).enumerate() {
        let st = states.entry(rec.state).or_insert_with(|| {
            let dist = params.token_distribution(rec.state);
            let logp = match params.row(rec.state) {
                Some(r) => math::log_softmax(r, 1.0),
                None => dist.probs().iter().map(|&p| math::ln(p)).collect(),
            };
            StateEval { probs: dist.probs().to_vec(), logp, kl_ref: None, kl_old: None, entropy: None }
        });

        if term.surrogate_weight != 0.0 {
            let ratio = likelihood_ratio(st.logp[rec.token as usize], rec.logprob_old);
            if ratio.clamped {
                out.clamped_ratios += 1;
            }
            let r = ratio.value;
            let a = term.advantage;
            let value = match term.clip {
                Some(e) => clipped_surrogate(r, a, e),
                None => r * a,
            };
            if !value.is_finite() {
                return Err(numeric(index, rec, "surrogate"));
            }
            out.surrogate += term.surrogate_weight * value;
            if unclipped_active(r, a, term.clip) {
                let scale = term.surrogate_weight * r * a;
                let row = out.pg_gradient.row_mut(rec.state);
                for (g, p) in row.iter_mut().zip(&st.probs) {
                    *g -= scale * p;
                }
                row[rec.token as usize] += scale;
            }
        }

        if term.kl_ref_weight != 0.0 {
            let (kl, grad) = st.kl_ref.get_or_insert_with(|| {
                let q = reference.distribution_for(params, rec.state);
                (categorical_kl(&st.probs, q.probs()), kl_forward_logit_gradient(&st.probs, q.probs()))
            });
            if !kl.is_finite() {
                return Err(numeric(index, rec, "reference KL"));
            }
            out.kl_penalty += term.kl_ref_weight * *kl;
            out.kl_gradient.add_scaled_row(rec.state, grad, -term.kl_ref_weight);
        }

        if term.kl_old_weight != 0.0 {
            let old = batch
                .old_probs
                .get(&rec.state)
                .ok_or_else(|| numeric(index, rec, "rollout distribution"))?;
            let (kl, grad) = st.kl_old.get_or_insert_with(|| {
                // ∂ KL(p_old ‖ π_θ) / ∂θ_v = π_v − p_old_v
                let grad = st.probs.iter().zip(old).map(|(p, q)| p - q).collect();
                (categorical_kl(old, &st.probs), grad)
            });
            if !kl.is_finite() {
                return Err(numeric(index, rec, "rollout KL"));
            }
            out.kl_penalty += term.kl_old_weight * *kl;
            out.kl_gradient.add_scaled_row(rec.state, grad, -term.kl_old_weight);
        }

        if term.entropy_weight != 0.0 {
            let (h, grad) = st.entropy.get_or_insert_with(|| {
                let d = params.token_distribution(rec.state);
                (d.entropy(), d.entropy_gradient())
            });
            out.entropy_bonus += term.entropy_weight * *h;
            out.entropy_gradient.add_scaled_row(rec.state, grad, term.entropy_weight);
        }
    }
    out.value = out.surrogate - out.kl_penalty + out.entropy_bonus;
    if !out.value.is_finite() {
        return Err(Error::Numeric(format!("non-finite objective value {}", out.value)));
    }
    Ok(out)
}

/// How per-token contributions are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// `1/|groups| · 1/G · 1/|o_i|` per token, as in the GRPO objective.
    #[default]
    SequenceMean,
    /// `1/N` over all batch tokens.
    TokenMean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrpoSpec {
    /// Clip range `ε`; `None` disables clipping.
    pub epsilon: Option<f64>,
    pub beta: f64,
    pub normalization: Normalization,
}

impl Default for GrpoSpec {
    fn default() -> Self {
        Self { epsilon: Some(0.2), beta: 0.001, normalization: Normalization::SequenceMean }
    }
}

/// Normalization weight of each token.
pub fn normalization_weights(batch: &TokenBatch, normalization: Normalization) -> Vec<f64> {
    match normalization {
        Normalization::TokenMean => {
            let n = batch.len().max(1) as f64;
            vec![1.0 / n; batch.len()]
        }
        Normalization::SequenceMean => {
            let groups = batch.num_groups().max(1) as f64;
            batch
                .records
                .iter()
                .map(|rec| {
                    let info = &batch.groups[rec.group];
                    let len = info.lengths[rec.response].max(1) as f64;
                    1.0 / (groups * info.size() as f64 * len)
                })
                .collect()
        }
    }
}

/// Token terms of the plain GRPO objective with a uniform KL coefficient.
pub fn grpo_terms(batch: &TokenBatch, spec: &GrpoSpec) -> Vec<TokenTerm> {
    normalization_weights(batch, spec.normalization)
        .into_iter()
        .zip(&batch.records)
        .map(|(w, rec)| TokenTerm {
            surrogate_weight: w,
            advantage: rec.advantage,
            clip: spec.epsilon,
            kl_ref_weight: spec.beta * w,
            ..TokenTerm::default()
        })
        .collect()
}

pub fn grpo_objective(
    params: &PolicyParams,
    reference: &ReferencePolicy,
    batch: &TokenBatch,
    spec: &GrpoSpec,
) -> Result<ObjectiveEval> {
    if batch.is_empty() {
        return Err(config_err("objective needs a non-empty batch"));
    }
    evaluate_terms(params, reference, batch, &grpo_terms(batch, spec))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[1.0, 0.0, 0.0, 1.0]), vec![1.0, -1.0, -1.0, 1.0]);
        assert_eq!(group_advantages(&[1.0; 4]), vec![0.0; 4]);
        assert_eq!(group_advantages(&[1.0, 0.0]), vec![1.0, -1.0]);
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(likelihood_ratio(-1.5, -1.5).value, 1.0);
        assert!((likelihood_ratio(-1.0, -2.0).value - 1f64.exp()).abs() < 1e-12);
        assert!((likelihood_ratio(-3.0, -1.0).value - (-2f64).exp()).abs() < 1e-12);
        let r = likelihood_ratio(0.0, -1e4);
        assert!(r.clamped && r.value.is_finite());
    }

    #[test]
    fn surrogate_examples() {
        assert!((clipped_surrogate(1.5, 1.0, 0.2) - 1.2).abs() < 1e-12);
        assert!((clipped_surrogate(0.5, -1.0, 0.2) + 0.8).abs() < 1e-12);
        for a in [-2.0, -0.3, 0.0, 0.7, 3.0] {
            assert_eq!(clipped_surrogate(1.0, a, 0.2), a);
        }
    }

    #[test]
    fn kl_examples() {
        let p = [0.5, 0.5];
        let q = [0.25, 0.75];
        let direct = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!((categorical_kl(&p, &q) - direct).abs() < 1e-15);
        assert!((categorical_kl(&p, &q) - 0.1438).abs() < 1e-4);
        assert_eq!(categorical_kl(&q, &q), 0.0);
    }

    #[test]
    fn rollout_rejects_small_groups() {
        let params = PolicyParams::new(16, 2).unwrap();
        let q = Query {
            id: 0,
            prompt_tokens: vec![1],
            answer: 1,
            difficulty: crate::task_env::DifficultyMeta { steps: 1, max_operand: 9, modulus: 5 },
        };
        let mut rng = crate::rng::stream(0, crate::rng::Domain::Rollout, 0);
        assert!(rollout_group(&params, &q, &Vocabulary::arithmetic(), 1, 8, 1.0, &mut rng).is_err());
    }
}
