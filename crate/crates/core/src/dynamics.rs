//! First-order entropy-change forecasts for tabular softmax policies,
//! checked against exact update-and-recompute.
//!
//! For a logit step `Δθ_s` at state `s`, the entropy changes by
//! `−Cov_{v∼π(·|s)}(ln π_v, Δθ_{s,v}) + O(|Δθ|²)`. The policy-gradient step
//! `η π_v A_v` gives the decay term, and the KL step `−η β_v g_KL,v` the
//! preservation term.

use alloc::vec::Vec;

use rand_core::RngCore;

use crate::error::config_err;
use crate::grpo::{categorical_kl, kl_forward_logit_gradient};
use crate::math;
use crate::policy::{Gradient, PolicyParams, ReferencePolicy, StateId, StateKey};
use crate::rng::{self, Domain};
use crate::Result;

/// Per-state inputs of a forecast: the state weight, an advantage per
/// vocabulary entry and a KL coefficient per vocabulary entry.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSignal {
    pub state: StateId,
    pub weight: f64,
    pub advantages: Vec<f64>,
    pub betas: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyForecast {
    pub term1: f64,
    pub term2: f64,
    pub predicted_delta: f64,
    pub actual_delta: f64,
    pub eta: f64,
}

impl EntropyForecast {
    pub fn error(&self) -> f64 {
        (self.actual_delta - self.predicted_delta).abs()
    }
}

/// `Σ_s w_s H(π(·|s))`.
pub fn expected_policy_entropy(params: &PolicyParams, weights: &[(StateId, f64)]) -> f64 {
    weights.iter().map(|&(s, w)| w * params.token_distribution(s).entropy()).sum()
}

/// `Δθ_v = η π_v (A_v − E_π[A])`.
pub fn expected_pg_logit_update(params: &PolicyParams, state: StateId, advantages: &[f64], eta: f64) -> Vec<f64> {
    let d = params.token_distribution(state);
    let p = d.probs();
    let mean: f64 = p.iter().zip(advantages).map(|(p, a)| p * a).sum();
    p.iter().zip(advantages).map(|(p, a)| eta * p * (a - mean)).collect()
}

fn check_signal(params: &PolicyParams, sig: &StateSignal) -> Result<()> {
    let n = params.vocab_size();
    if sig.advantages.len() != n || sig.betas.len() != n {
        return Err(config_err("signal vectors must match the vocabulary size"));
    }
    if !(sig.weight >= 0.0) {
        return Err(config_err("state weights must be non-negative"));
    }
    Ok(())
}

fn weights_of(signals: &[StateSignal]) -> Vec<(StateId, f64)> {
    signals.iter().map(|s| (s.state, s.weight)).collect()
}

fn term1_of(params: &PolicyParams, signals: &[StateSignal], eta: f64) -> f64 {
    -eta * signals
        .iter()
        .map(|sig| {
            let d = params.token_distribution(sig.state);
            let p = d.probs();
            let logp: Vec<f64> = p.iter().map(|&x| math::ln(x)).collect();
            let pa: Vec<f64> = p.iter().zip(&sig.advantages).map(|(p, a)| p * a).collect();
            sig.weight * math::weighted_covariance(p, &logp, &pa)
        })
        .sum::<f64>()
}

/// `−η Σ_s w_s Cov_π(ln π, π·A)`.
pub fn predict_entropy_change_vanilla(params: &PolicyParams, signals: &[StateSignal], eta: f64) -> Result<f64> {
    for sig in signals {
        check_signal(params, sig)?;
    }
    Ok(term1_of(params, signals, eta))
}

fn kl_step(params: &PolicyParams, reference: &ReferencePolicy, sig: &StateSignal) -> Vec<f64> {
    let p = params.token_distribution(sig.state);
    let q = reference.distribution_for(params, sig.state);
    let g = kl_forward_logit_gradient(p.probs(), q.probs());
    g.iter().zip(&sig.betas).map(|(g, b)| b * g).collect()
}

/// The combined logit step direction `π·A − β·g_KL` per state.
pub fn sent_logit_gradient(params: &PolicyParams, reference: &ReferencePolicy, signals: &[StateSignal]) -> Gradient {
    let mut grad = Gradient::new(params.vocab_size());
    for sig in signals {
        let p = params.token_distribution(sig.state);
        let kl = kl_step(params, reference, sig);
        let row = grad.row_mut(sig.state);
        for (v, g) in row.iter_mut().enumerate() {
            *g += p.probs()[v] * sig.advantages[v] - kl[v];
        }
    }
    grad
}

/// Forecast and exact change of the expected entropy under the step
/// `Δθ = η (π·A − β·g_KL)`.
pub fn predict_entropy_change_sent(
    params: &PolicyParams,
    reference: &ReferencePolicy,
    signals: &[StateSignal],
    eta: f64,
) -> Result<EntropyForecast> {
    for sig in signals {
        check_signal(params, sig)?;
    }
    let term1 = term1_of(params, signals, eta);
    let term2 = eta
        * signals
            .iter()
            .map(|sig| {
                let d = params.token_distribution(sig.state);
                let p = d.probs();
                let logp: Vec<f64> = p.iter().map(|&x| math::ln(x)).collect();
                sig.weight * math::weighted_covariance(p, &logp, &kl_step(params, reference, sig))
            })
            .sum::<f64>();
    let predicted_delta = term1 + term2;

    let weights = weights_of(signals);
    let before = expected_policy_entropy(params, &weights);
    let mut updated = params.clone();
    updated.apply_gradient(&sent_logit_gradient(params, reference, signals), eta)?;
    let actual_delta = expected_policy_entropy(&updated, &weights) - before;
    Ok(EntropyForecast { term1, term2, predicted_delta, actual_delta, eta })
}

/// Max `|Δθ − expected_pg_logit_update|` where `Δθ` is the logit change
/// produced by applying the score-function expected gradient
/// `Σ_o π_o A_o ∇ ln π_o` through [`PolicyParams::apply_gradient`].
pub fn verify_logit_update(params: &PolicyParams, state: StateId, advantages: &[f64], eta: f64) -> Result<f64> {
    if advantages.len() != params.vocab_size() {
        return Err(config_err("one advantage per vocabulary entry is required"));
    }
    let d = params.token_distribution(state);
    let mut grad = Gradient::new(params.vocab_size());
    for (o, (&p, &a)) in d.probs().iter().zip(advantages).enumerate() {
        grad.add_scaled_row(state, &d.log_prob_gradient(o as u32), p * a);
    }
    let mut updated = params.clone();
    updated.apply_gradient(&grad, eta)?;
    let before = params.row(state).ok_or(crate::Error::UnknownState(state.0))?;
    let after = updated.row(state).expect("same table");
    let expected = expected_pg_logit_update(params, state, advantages, eta);
    Ok(before
        .iter()
        .zip(after)
        .zip(&expected)
        .map(|((b, a), e)| ((a - b) - e).abs())
        .fold(0.0, f64::max))
}

/// A contextual bandit: single-step states with their own logits, a
/// reference policy and per-token signals.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditInstance {
    pub params: PolicyParams,
    pub reference: ReferencePolicy,
    pub signals: Vec<StateSignal>,
}

impl BanditInstance {
    pub fn vocab_size(&self) -> usize {
        self.params.vocab_size()
    }

    /// The same instance with every KL coefficient set to zero.
    pub fn without_kl(&self) -> Self {
        let mut out = self.clone();
        for s in &mut out.signals {
            s.betas.iter_mut().for_each(|b| *b = 0.0);
        }
        out
    }

    pub fn forecast(&self, eta: f64) -> Result<EntropyForecast> {
        predict_entropy_change_sent(&self.params, &self.reference, &self.signals, eta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceSpec {
    pub min_vocab: usize,
    pub max_vocab: usize,
    pub max_states: usize,
    pub logit_scale: f64,
    pub ref_offset: f64,
    /// KL coefficients drawn per token from `{0, beta_low, beta_high}`.
    pub beta_low: f64,
    pub beta_high: f64,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        Self { min_vocab: 2, max_vocab: 16, max_states: 4, logit_scale: 2.0, ref_offset: 0.5, beta_low: 0.5, beta_high: 2.0 }
    }
}

fn symmetric<R: RngCore + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    scale * (2.0 * rng::uniform(rng) - 1.0)
}

/// Random instance `index` of the stream `seed`. Advantages are centered
/// under the policy at each state.
pub fn random_instance(seed: u64, index: u64, spec: &InstanceSpec) -> Result<BanditInstance> {
    if spec.min_vocab < 2 || spec.max_vocab < spec.min_vocab || spec.max_states == 0 {
        return Err(config_err("invalid bandit instance spec"));
    }
    let mut rng = rng::stream(seed, Domain::Dynamics, index);
    let span = (spec.max_vocab - spec.min_vocab + 1) as u64;
    let vocab = spec.min_vocab + rng::below(&mut rng, span) as usize;
    let states = 1 + rng::below(&mut rng, spec.max_states as u64) as usize;
    let mut params = PolicyParams::new(vocab, 0)?;
    let mut reference_params = PolicyParams::new(vocab, 0)?;
    let mut raw_weights = Vec::with_capacity(states);
    for s in 0..states {
        let key = StateKey { query: s as u64, window: Vec::new() };
        let id = params.intern(key.clone());
        let rid = reference_params.intern(key);
        for v in 0..vocab {
            let l = symmetric(&mut rng, spec.logit_scale);
            params.set_logit(id, v as u32, l)?;
            reference_params.set_logit(rid, v as u32, l + symmetric(&mut rng, spec.ref_offset))?;
        }
        raw_weights.push(0.1 + rng::uniform(&mut rng));
    }
    let total: f64 = raw_weights.iter().sum();
    let choices = [0.0, spec.beta_low, spec.beta_high];
    let signals = (0..states)
        .map(|s| {
            let state = StateId(s as u32);
            let d = params.token_distribution(state);
            let raw: Vec<f64> = (0..vocab).map(|_| symmetric(&mut rng, 1.0)).collect();
            let mean: f64 = d.probs().iter().zip(&raw).map(|(p, a)| p * a).sum();
            let advantages = raw.iter().map(|a| a - mean).collect();
            let betas = (0..vocab).map(|_| choices[rng::below(&mut rng, 3) as usize]).collect();
            StateSignal { state, weight: raw_weights[s] / total, advantages, betas }
        })
        .collect();
    Ok(BanditInstance { params, reference: reference_params.snapshot(), signals })
}

/// `η_0, η_0/2, η_0/4, …` (`count` values).
pub fn halving_etas(eta0: f64, count: usize) -> Vec<f64> {
    let mut etas = Vec::with_capacity(count);
    let mut eta = eta0;
    for _ in 0..count {
        etas.push(eta);
        eta /= 2.0;
    }
    etas
}

/// `error(η_i) / error(η_{i+1})` for consecutive forecasts.
pub fn shrink_ratios(forecasts: &[EntropyForecast]) -> Vec<f64> {
    forecasts.windows(2).map(|w| w[0].error() / w[1].error()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsCheckConfig {
    pub seed: u64,
    pub instances: usize,
    pub eta0: f64,
    pub halvings: usize,
    pub ratio_low: f64,
    pub ratio_high: f64,
    pub update_trials: usize,
    pub update_tolerance: f64,
    pub instance: InstanceSpec,
}

impl Default for DynamicsCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 20,
            eta0: 1e-2,
            halvings: 6,
            ratio_low: 3.5,
            ratio_high: 4.5,
            update_trials: 100,
            update_tolerance: 1e-10,
            instance: InstanceSpec::default(),
        }
    }
}

/// One forecast of one instance; `with_kl` false means the KL-free variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForecastRow {
    pub instance: usize,
    pub with_kl: bool,
    pub forecast: EntropyForecast,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsReport {
    pub rows: Vec<ForecastRow>,
    pub update_max_discrepancy: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
    /// Largest `|predicted − (term1 + term2)|`.
    pub decomposition_gap: f64,
    /// Fraction of KL forecasts with `term2 > 0`.
    pub term2_positive_rate: f64,
    pub update_pass: bool,
    pub shrink_pass: bool,
}

impl DynamicsReport {
    pub fn pass(&self) -> bool {
        self.update_pass && self.shrink_pass && self.decomposition_gap <= 1e-12
    }
}

pub fn run_dynamics_check(config: &DynamicsCheckConfig) -> Result<DynamicsReport> {
    let mut update_max: f64 = 0.0;
    for trial in 0..config.update_trials {
        let inst = random_instance(config.seed, (1 << 32) + trial as u64, &config.instance)?;
        for sig in &inst.signals {
            let mut rng = rng::stream(config.seed, Domain::Dynamics, (2 << 32) + trial as u64);
            // uncentered advantages exercise the baseline subtraction
            let raw: Vec<f64> = (0..inst.vocab_size()).map(|_| symmetric(&mut rng, 1.0)).collect();
            update_max = update_max.max(verify_logit_update(&inst.params, sig.state, &raw, config.eta0)?);
        }
    }

    let etas = halving_etas(config.eta0, config.halvings + 1);
    let mut rows = Vec::new();
    let (mut min_ratio, mut max_ratio) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut gap, mut positive, mut with_kl_count): (f64, usize, usize) = (0.0, 0, 0);
    for i in 0..config.instances {
        let inst = random_instance(config.seed, i as u64, &config.instance)?;
        for (with_kl, variant) in [(false, inst.without_kl()), (true, inst.clone())] {
            let forecasts: Vec<EntropyForecast> = etas.iter().map(|&e| variant.forecast(e)).collect::<Result<_>>()?;
            for r in shrink_ratios(&forecasts) {
                min_ratio = min_ratio.min(r);
                max_ratio = max_ratio.max(r);
            }
            for f in &forecasts {
                gap = gap.max((f.predicted_delta - (f.term1 + f.term2)).abs());
                if with_kl {
                    with_kl_count += 1;
                    positive += usize::from(f.term2 > 0.0);
                }
                rows.push(ForecastRow { instance: i, with_kl, forecast: *f });
            }
        }
    }
    Ok(DynamicsReport {
        rows,
        update_max_discrepancy: update_max,
        min_ratio,
        max_ratio,
        decomposition_gap: gap,
        term2_positive_rate: if with_kl_count == 0 { 0.0 } else { positive as f64 / with_kl_count as f64 },
        update_pass: update_max <= config.update_tolerance,
        shrink_pass: min_ratio >= config.ratio_low && max_ratio <= config.ratio_high,
    })
}

/// Exact KL of the instance policy from its reference at `state`.
pub fn instance_kl(inst: &BanditInstance, state: StateId) -> f64 {
    let p = inst.params.token_distribution(state);
    let q = inst.reference.distribution_for(&inst.params, state);
    categorical_kl(p.probs(), q.probs())
}
