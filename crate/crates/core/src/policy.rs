//! Tabular softmax sequence policy with one logit per (state, token).
//!
//! A state is the pair (query id, last `k` response tokens). States are
//! allocated on demand; a state that was never allocated reads as an all-zero
//! logit row, i.e. the uniform distribution.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;

use crate::error::config_err;
use crate::math;
use crate::rng;
use crate::task_env::{Query, Response, TokenId, Vocabulary};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StateId(pub u32);

impl StateId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Lookup key of a state: the query and the most recent (up to `k`) tokens.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StateKey {
    pub query: u64,
    pub window: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab_size: usize,
    context_window: usize,
    logits: Vec<f64>,
    keys: Vec<StateKey>,
    table: BTreeMap<StateKey, StateId>,
}

impl PolicyParams {
    pub fn new(vocab_size: usize, context_window: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(config_err("policy vocabulary must have at least 2 tokens"));
        }
        Ok(Self {
            vocab_size,
            context_window,
            logits: Vec::new(),
            keys: Vec::new(),
            table: BTreeMap::new(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn context_window(&self) -> usize {
        self.context_window
    }

    pub fn num_states(&self) -> usize {
        self.keys.len()
    }

    pub fn key_for(&self, query: u64, prefix: &[TokenId]) -> StateKey {
        let start = prefix.len().saturating_sub(self.context_window);
        StateKey { query, window: prefix[start..].to_vec() }
    }

    /// State id for `(query, prefix)`, allocating a zero row for new keys.
    pub fn state_index(&mut self, query: &Query, prefix: &[TokenId]) -> StateId {
        let key = self.key_for(query.id, prefix);
        self.intern(key)
    }

    pub fn intern(&mut self, key: StateKey) -> StateId {
        if let Some(&id) = self.table.get(&key) {
            return id;
        }
        let id = StateId(self.keys.len() as u32);
        self.keys.push(key.clone());
        self.table.insert(key, id);
        self.logits.extend(core::iter::repeat_n(0.0, self.vocab_size));
        id
    }

    pub fn find(&self, key: &StateKey) -> Option<StateId> {
        self.table.get(key).copied()
    }

    pub fn key(&self, state: StateId) -> Option<&StateKey> {
        self.keys.get(state.index())
    }

    /// Allocated states in id order.
    pub fn states(&self) -> impl Iterator<Item = (StateId, &StateKey)> {
        self.keys.iter().enumerate().map(|(i, k)| (StateId(i as u32), k))
    }

    pub fn row(&self, state: StateId) -> Option<&[f64]> {
        let start = state.index() * self.vocab_size;
        self.logits.get(start..start + self.vocab_size)
    }

    pub fn row_mut(&mut self, state: StateId) -> Option<&mut [f64]> {
        let start = state.index() * self.vocab_size;
        self.logits.get_mut(start..start + self.vocab_size)
    }

    pub fn logit(&self, state: StateId, token: TokenId) -> f64 {
        self.row(state).map_or(0.0, |r| r[token as usize])
    }

    pub fn set_logit(&mut self, state: StateId, token: TokenId, value: f64) -> Result<()> {
        let row = self.row_mut(state).ok_or(Error::UnknownState(state.0))?;
        row[token as usize] = value;
        Ok(())
    }

    /// Softmax of the state's logit row; unallocated states are uniform.
    pub fn token_distribution(&self, state: StateId) -> TokenDistribution {
        self.distribution_of_row(self.row(state), 1.0)
    }

    /// Distribution at a key, without allocating.
    pub fn distribution_at(&self, key: &StateKey, temperature: f64) -> TokenDistribution {
        self.distribution_of_row(self.find(key).and_then(|s| self.row(s)), temperature)
    }

    fn distribution_of_row(&self, row: Option<&[f64]>, temperature: f64) -> TokenDistribution {
        match row {
            Some(r) => TokenDistribution::from_logits(r, temperature),
            None => TokenDistribution::uniform(self.vocab_size),
        }
    }

    /// `ln π(token | state)` computed in the log domain.
    pub fn log_prob(&self, state: StateId, token: TokenId) -> f64 {
        match self.row(state) {
            Some(r) => r[token as usize] - math::log_sum_exp(r),
            None => -math::ln(self.vocab_size as f64),
        }
    }

    /// `logits[s, v] += eta * gradient[s, v]`. Nothing is written if any
    /// entry is non-finite or refers to an unallocated state.
    pub fn apply_gradient(&mut self, gradient: &Gradient, eta: f64) -> Result<()> {
        if !eta.is_finite() || eta <= 0.0 {
            return Err(config_err("learning rate must be positive and finite"));
        }
        for (state, row) in gradient.iter() {
            if state.index() >= self.num_states() {
                return Err(Error::UnknownState(state.0));
            }
            if let Some(v) = row.iter().position(|g| !g.is_finite()) {
                return Err(Error::Numeric(alloc::format!(
                    "non-finite gradient at state {} token {}",
                    state.0,
                    v
                )));
            }
        }
        for (state, row) in gradient.iter() {
            let target = self.row_mut(state).expect("checked above");
            for (l, g) in target.iter_mut().zip(row) {
                *l += eta * g;
            }
        }
        Ok(())
    }

    /// Frozen copy used as the KL anchor.
    pub fn snapshot(&self) -> ReferencePolicy {
        ReferencePolicy { params: self.clone() }
    }
}

/// A next-token distribution; entries are strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn from_logits(logits: &[f64], temperature: f64) -> Self {
        let mut probs = Vec::with_capacity(logits.len());
        math::softmax_into(logits, temperature, &mut probs);
        Self { probs }
    }

    pub fn uniform(n: usize) -> Self {
        Self { probs: vec![1.0 / n as f64; n] }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn entropy(&self) -> f64 {
        token_entropy(self)
    }

    /// `∂ ln π(token) / ∂θ_v = 1{v = token} − π_v`.
    pub fn log_prob_gradient(&self, token: TokenId) -> Vec<f64> {
        let mut g: Vec<f64> = self.probs.iter().map(|p| -p).collect();
        g[token as usize] += 1.0;
        g
    }

    /// `∂H / ∂θ_v = −π_v (ln π_v + H)`.
    pub fn entropy_gradient(&self) -> Vec<f64> {
        let h = self.entropy();
        self.probs.iter().map(|&p| -p * (math::ln(p) + h)).collect()
    }
}

/// Token entropy in nats, `−Σ p ln p`.
pub fn token_entropy(dist: &TokenDistribution) -> f64 {
    math::entropy(dist.probs())
}

/// Frozen policy snapshot. Lookups go by state key, so a reference taken
/// from a different run of the same table still lines up.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolicy {
    params: PolicyParams,
}

impl ReferencePolicy {
    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    /// Reference distribution at the state `state` of the live policy.
    pub fn distribution_for(&self, live: &PolicyParams, state: StateId) -> TokenDistribution {
        if let Some(k) = self.params.key(state) {
            if live.key(state) == Some(k) {
                return self.params.token_distribution(state);
            }
        }
        match live.key(state) {
            Some(key) => self.params.distribution_at(key, 1.0),
            None => TokenDistribution::uniform(self.params.vocab_size()),
        }
    }
}

/// Sparse gradient over `(state, token)`, stored as dense rows per state.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    vocab_size: usize,
    rows: BTreeMap<StateId, Vec<f64>>,
}

impl Gradient {
    pub fn new(vocab_size: usize) -> Self {
        Self { vocab_size, rows: BTreeMap::new() }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn row_mut(&mut self, state: StateId) -> &mut [f64] {
        let n = self.vocab_size;
        self.rows.entry(state).or_insert_with(|| vec![0.0; n])
    }

    pub fn row(&self, state: StateId) -> Option<&[f64]> {
        self.rows.get(&state).map(Vec::as_slice)
    }

    pub fn add(&mut self, state: StateId, token: TokenId, value: f64) {
        self.row_mut(state)[token as usize] += value;
    }

    pub fn add_scaled_row(&mut self, state: StateId, row: &[f64], scale: f64) {
        for (g, r) in self.row_mut(state).iter_mut().zip(row) {
            *g += scale * r;
        }
    }

    pub fn get(&self, state: StateId, token: TokenId) -> f64 {
        self.rows.get(&state).map_or(0.0, |r| r[token as usize])
    }

    pub fn iter(&self) -> impl Iterator<Item = (StateId, &[f64])> {
        self.rows.iter().map(|(s, r)| (*s, r.as_slice()))
    }

    pub fn states(&self) -> impl Iterator<Item = StateId> + '_ {
        self.rows.keys().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &Gradient) {
        for (s, row) in other.iter() {
            self.add_scaled_row(s, row, 1.0);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.rows.values().flatten().fold(0.0, |m, g| f64::max(m, g.abs()))
    }
}

/// How a sequence log-probability is aggregated over its tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogProbMode {
    #[default]
    Sum,
    LengthNormalized,
}

/// Autoregressive sample until eos or `max_len` tokens. Reads the policy
/// without allocating states.
pub fn sample_response<R: RngCore + ?Sized>(
    params: &PolicyParams,
    query: &Query,
    vocab: &Vocabulary,
    max_len: usize,
    temperature: f64,
    rng: &mut R,
) -> Response {
    let mut tokens = Vec::new();
    let mut logprobs = Vec::new();
    while tokens.len() < max_len {
        let key = params.key_for(query.id, &tokens);
        let logits: Vec<f64> = match params.find(&key).and_then(|s| params.row(s)) {
            Some(r) => r.to_vec(),
            None => vec![0.0; params.vocab_size()],
        };
        let logp = math::log_softmax(&logits, temperature);
        let probs: Vec<f64> = logp.iter().map(|&l| math::exp(l)).collect();
        let token = rng::categorical(rng, &probs);
        tokens.push(token as TokenId);
        logprobs.push(logp[token]);
        if token as TokenId == vocab.eos() {
            break;
        }
    }
    Response::new(tokens, logprobs, vocab)
}

/// `ln P(tokens | query)` under `params` at temperature 1.
pub fn sequence_log_prob(params: &PolicyParams, query: &Query, tokens: &[TokenId], mode: LogProbMode) -> f64 {
    let total: f64 = (0..tokens.len())
        .map(|t| {
            let key = params.key_for(query.id, &tokens[..t]);
            match params.find(&key) {
                Some(s) => params.log_prob(s, tokens[t]),
                None => -math::ln(params.vocab_size() as f64),
            }
        })
        .sum();
    match mode {
        LogProbMode::Sum => total,
        LogProbMode::LengthNormalized if tokens.is_empty() => 0.0,
        LogProbMode::LengthNormalized => total / tokens.len() as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use crate::task_env::DifficultyMeta;

    fn query(id: u64) -> Query {
        Query {
            id,
            prompt_tokens: vec![1, 10, 2, 13, 5],
            answer: 3,
            difficulty: DifficultyMeta { steps: 1, max_operand: 9, modulus: 5 },
        }
    }

    #[test]
    fn state_index_contract() {
        let mut p = PolicyParams::new(16, 2).unwrap();
        let a = p.state_index(&query(1), &[3, 4, 5]);
        assert_eq!(a, p.state_index(&query(1), &[3, 4, 5]));
        assert_eq!(a, p.state_index(&query(1), &[9, 9, 4, 5]));
        let b = p.state_index(&query(2), &[4, 5]);
        let c = p.state_index(&query(1), &[5]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(p.num_states(), 3);
    }

    #[test]
    fn distribution_examples() {
        let mut p = PolicyParams::new(4, 2).unwrap();
        let s = p.state_index(&query(0), &[]);
        assert_eq!(p.token_distribution(s).probs(), &[0.25; 4]);
        let d = TokenDistribution::from_logits(&[1.0, 0.0], 1.0);
        assert!((d.probs()[0] - 0.7311).abs() < 1e-4);
        assert!((d.probs()[1] - 0.2689).abs() < 1e-4);
        let shifted = TokenDistribution::from_logits(&[4.0, 3.0], 1.0);
        for (a, b) in d.probs().iter().zip(shifted.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
        // unallocated reads uniform
        assert_eq!(p.token_distribution(StateId(99)).probs(), &[0.25; 4]);
    }

    #[test]
    fn entropy_examples() {
        assert!((TokenDistribution::uniform(4).entropy() - 4f64.ln()).abs() < 1e-12);
        let one_hot = TokenDistribution { probs: vec![1.0, 0.0, 0.0] };
        assert_eq!(one_hot.entropy(), 0.0);
        let d = TokenDistribution { probs: vec![0.7, 0.1, 0.1, 0.1] };
        let direct = -(0.7f64 * 0.7f64.ln() + 3.0 * 0.1 * 0.1f64.ln());
        assert!((d.entropy() - direct).abs() < 1e-12);
        assert!((d.entropy() - 0.9404).abs() < 1e-4);
    }

    #[test]
    fn sequence_log_prob_examples() {
        let p = PolicyParams::new(4, 2).unwrap();
        assert_eq!(sequence_log_prob(&p, &query(0), &[], LogProbMode::Sum), 0.0);
        let lp = sequence_log_prob(&p, &query(0), &[1, 2, 3], LogProbMode::Sum);
        assert!((lp - 3.0 * 0.25f64.ln()).abs() < 1e-12);
        assert!((lp + 4.1589).abs() < 1e-4);
        let norm = sequence_log_prob(&p, &query(0), &[1, 2, 3], LogProbMode::LengthNormalized);
        assert!((norm - 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn apply_gradient_examples() {
        let mut p = PolicyParams::new(4, 2).unwrap();
        let s = p.state_index(&query(0), &[]);
        let before = p.clone();
        p.apply_gradient(&Gradient::new(4), 0.1).unwrap();
        assert_eq!(p, before);

        let mut g = Gradient::new(4);
        g.add(s, 0, 1.0);
        p.apply_gradient(&g, 0.1).unwrap();
        assert!((p.logit(s, 0) - 0.1).abs() < 1e-15);
        assert_eq!(&p.row(s).unwrap()[1..], &[0.0; 3]);

        let mut bad = Gradient::new(4);
        bad.add(s, 2, f64::NAN);
        bad.add(s, 1, 1.0);
        let snapshot = p.clone();
        assert!(matches!(p.apply_gradient(&bad, 0.1), Err(Error::Numeric(_))));
        assert_eq!(p, snapshot);
    }

    #[test]
    fn forced_eos_gives_single_token_response() {
        let vocab = Vocabulary::arithmetic();
        let mut p = PolicyParams::new(16, 2).unwrap();
        let s = p.state_index(&query(0), &[]);
        p.set_logit(s, vocab.eos(), 1e3).unwrap();
        let mut rng = stream(1, Domain::Rollout, 0);
        let r = sample_response(&p, &query(0), &vocab, 8, 1.0, &mut rng);
        assert_eq!(r.tokens, vec![vocab.eos()]);
        assert!(!r.truncated);
        assert!(r.logprobs_old[0] <= 0.0);
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let vocab = Vocabulary::arithmetic();
        let p = PolicyParams::new(16, 2).unwrap();
        let a = sample_response(&p, &query(0), &vocab, 12, 1.0, &mut stream(3, Domain::Rollout, 0));
        let b = sample_response(&p, &query(0), &vocab, 12, 1.0, &mut stream(3, Domain::Rollout, 0));
        assert_eq!(a, b);
        assert!(a.len() <= 12);
        assert_eq!(a.len(), a.logprobs_old.len());
        assert!(a.logprobs_old.iter().all(|&l| l <= 0.0));
    }

    #[test]
    fn reference_lookup_goes_by_key() {
        let mut live = PolicyParams::new(4, 2).unwrap();
        let s0 = live.state_index(&query(0), &[]);
        live.set_logit(s0, 1, 2.0).unwrap();
        let reference = live.snapshot();
        let s1 = live.state_index(&query(0), &[1]);
        live.set_logit(s1, 0, 5.0).unwrap();
        assert_eq!(reference.distribution_for(&live, s0), live.token_distribution(s0));
        assert_eq!(reference.distribution_for(&live, s1).probs(), &[0.25; 4]);
    }
}
