//! The curriculum-staged training loop, the warm-start policy and Pass@K
//! evaluation.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::baselines::{mode_objective, select_tokens, BaselineConfig, BaselineMode};
use crate::curriculum::{CurriculumPlan, SemanticProfile};
use crate::error::config_err;
use crate::grpo::{rollout_group, ObjectiveEval, RolloutGroup, TokenBatch};
use crate::math;
use crate::policy::{sample_response, Gradient, PolicyParams, ReferencePolicy, StateId};
use crate::rng::{self, Domain};
use crate::sent::{prepare_selection, SelectionSummary};
use crate::task_env::{verify, Query, TokenId, Vocabulary};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub eta: f64,
    pub group_size: usize,
    pub queries_per_step: usize,
    pub max_response_len: usize,
    pub temperature: f64,
    pub total_steps: usize,
    /// Optimizer passes over each rollout batch.
    pub passes: usize,
    pub context_window: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub objective: BaselineConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 20.0,
            group_size: 8,
            queries_per_step: 8,
            max_response_len: 32,
            temperature: 1.0,
            total_steps: 300,
            passes: 1,
            context_window: 2,
            checkpoint_every: 50,
            seed: 0,
            objective: BaselineConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(config_err("learning rate must be positive and finite"));
        }
        if self.group_size < 2 {
            return Err(config_err("group size must be at least 2"));
        }
        if self.queries_per_step == 0 || self.max_response_len == 0 || self.passes == 0 {
            return Err(config_err("queries per step, max response length and passes must be positive"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(config_err("temperature must be positive"));
        }
        self.objective.validate()
    }

    pub fn mode(&self) -> BaselineMode {
        self.objective.mode
    }
}

/// Step budget of each stage: equal shares, remainder to the last stage.
pub fn stage_steps(total_steps: usize, stages: usize) -> Vec<usize> {
    let stages = stages.max(1);
    let mut out = vec![total_steps / stages; stages];
    out[stages - 1] += total_steps % stages;
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsRow {
    pub step: usize,
    pub stage: usize,
    /// Mean current-policy entropy over the batch tokens, before the update.
    pub mean_entropy: f64,
    /// Mean entropy over the warm-start states, after the update.
    pub probe_entropy: f64,
    pub mean_reward: f64,
    pub mean_length: f64,
    pub objective: f64,
    pub surrogate: f64,
    pub kl_penalty: f64,
    pub entropy_bonus: f64,
    pub tokens: usize,
    pub low_count: usize,
    pub high_cov_count: usize,
    pub mean_entropy_low: f64,
    pub mean_cov_high_cov: f64,
    /// Tokens chosen by the mode's own selector (mask, clip or cov).
    pub selected: usize,
    pub clamped_ratios: usize,
    /// First-order forecast of the batch-entropy change from the policy
    /// gradient part of the step.
    pub term1: f64,
    /// Same, from the regularizer part.
    pub term2: f64,
}

/// Receives rows and checkpoints as training proceeds.
pub trait Observer {
    fn on_row(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _step: usize, _params: &PolicyParams) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct NullObserver;

impl Observer for NullObserver {}

/// Collects rows in memory.
#[derive(Debug, Default)]
pub struct RowCollector {
    pub rows: Vec<MetricsRow>,
}

impl Observer for RowCollector {
    fn on_row(&mut self, row: &MetricsRow) -> Result<()> {
        self.rows.push(*row);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub steps_completed: usize,
    /// Steps at which each stage started.
    pub stage_starts: Vec<usize>,
    /// Set when training stopped on a numeric failure; `params` then holds
    /// the policy before the failing step.
    pub aborted: Option<Error>,
}

/// Mean entropy over the first `count` states of `params`.
pub fn probe_entropy(params: &PolicyParams, count: usize) -> f64 {
    if count == 0 {
        return 0.0;
    }
    (0..count).map(|s| params.token_distribution(StateId(s as u32)).entropy()).sum::<f64>() / count as f64
}

/// `−η Σ_s w_s Cov_π(ln π, g_s)` with `w_s` the share of batch tokens at `s`.
pub fn first_order_entropy_change(params: &PolicyParams, batch: &TokenBatch, gradient: &Gradient, eta: f64) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let mut visits: BTreeMap<StateId, usize> = BTreeMap::new();
    for r in &batch.records {
        *visits.entry(r.state).or_default() += 1;
    }
    let n = batch.len() as f64;
    -eta * visits
        .iter()
        .filter_map(|(&s, &c)| {
            let g = gradient.row(s)?;
            let d = params.token_distribution(s);
            let logp: Vec<f64> = d.probs().iter().map(|&p| math::ln(p)).collect();
            Some(c as f64 / n * math::weighted_covariance(d.probs(), &logp, g))
        })
        .sum::<f64>()
}

struct StageCursor {
    ids: Vec<u64>,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
    stage: usize,
}

impl StageCursor {
    fn new(ids: &[u64], seed: u64, stage: usize) -> Self {
        let mut c = Self { ids: ids.to_vec(), order: Vec::new(), pos: 0, epoch: 0, seed, stage };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        let mut rng = rng::stream(self.seed, Domain::Batches, ((self.stage as u64) << 32) | self.epoch);
        self.order = (0..self.ids.len()).collect();
        for i in (1..self.order.len()).rev() {
            let j = rng::below(&mut rng, i as u64 + 1) as usize;
            self.order.swap(i, j);
        }
        self.pos = 0;
    }

    fn next_batch(&mut self, k: usize) -> Vec<u64> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k.min(self.ids.len()) {
            if self.pos == self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.ids[self.order[self.pos]]);
            self.pos += 1;
        }
        out
    }
}

struct StepOutput {
    row: MetricsRow,
}

/// Roll out the groups of training step `step` and flatten them into a
/// token batch. Selection fields are left unset.
pub fn step_batch(
    params: &mut PolicyParams,
    config: &TrainConfig,
    vocab: &Vocabulary,
    queries: &[&Query],
    step: usize,
) -> Result<(Vec<RolloutGroup>, TokenBatch)> {
    let groups: Vec<RolloutGroup> = queries
        .iter()
        .enumerate()
        .map(|(j, q)| {
            let mut r = rng::stream(config.seed, Domain::Rollout, (step as u64) << 16 | j as u64);
            rollout_group(params, q, vocab, config.group_size, config.max_response_len, config.temperature, &mut r)
        })
        .collect::<Result<_>>()?;
    let batch = TokenBatch::build(params, &groups, config.temperature);
    Ok((groups, batch))
}

fn train_step(
    params: &mut PolicyParams,
    reference: &ReferencePolicy,
    config: &TrainConfig,
    vocab: &Vocabulary,
    queries: &[&Query],
    step: usize,
) -> Result<StepOutput> {
    let (groups, mut batch) = step_batch(params, config, vocab, queries, step)?;
    let objective = &config.objective;
    let summary: SelectionSummary = prepare_selection(&mut batch, &objective.thresholds, &objective.kl);
    let selection = select_tokens(&batch, objective, &mut rng::stream(config.seed, Domain::ClipSelection, step as u64));

    let responses: usize = groups.iter().map(RolloutGroup::group_size).sum();
    let reward: f64 = groups.iter().flat_map(|g| g.rewards.iter()).sum();
    let mut row = MetricsRow {
        step,
        mean_entropy: batch.mean_entropy(),
        mean_reward: reward / responses as f64,
        mean_length: batch.len() as f64 / responses as f64,
        tokens: batch.len(),
        low_count: summary.low,
        high_cov_count: summary.high_cov,
        mean_entropy_low: summary.mean_entropy_low,
        mean_cov_high_cov: summary.mean_cov_high_cov,
        selected: selection.tokens.len(),
        ..MetricsRow::default()
    };

    let mut staged = params.clone();
    for pass in 0..config.passes {
        if pass > 0 {
            batch.refresh(&staged);
        }
        let eval: ObjectiveEval = mode_objective(&staged, reference, &batch, objective, &selection)?;
        if pass == 0 {
            row.objective = eval.value;
            row.surrogate = eval.surrogate;
            row.kl_penalty = eval.kl_penalty;
            row.entropy_bonus = eval.entropy_bonus;
            row.clamped_ratios = eval.clamped_ratios;
            row.term1 = first_order_entropy_change(&staged, &batch, &eval.pg_gradient, config.eta);
            row.term2 = first_order_entropy_change(&staged, &batch, &eval.regularizer_gradient(), config.eta);
        }
        staged.apply_gradient(&eval.gradient(), config.eta)?;
    }
    *params = staged;
    Ok(StepOutput { row })
}

/// Train `initial` along `plan`. The reference policy is the initial policy.
/// Stage `n` gets its share of [`stage_steps`] and draws mini-batches from
/// its own queries, reshuffled every pass through the stage.
pub fn train(
    config: &TrainConfig,
    dataset: &[Query],
    vocab: &Vocabulary,
    plan: &CurriculumPlan,
    initial: &PolicyParams,
    observer: &mut dyn Observer,
) -> Result<TrainOutcome> {
    config.validate()?;
    plan.validate_against(dataset)?;
    let by_id: BTreeMap<u64, &Query> = dataset.iter().map(|q| (q.id, q)).collect();
    let reference = initial.snapshot();
    let probe_states = initial.num_states();
    let mut params = initial.clone();
    let budgets = stage_steps(config.total_steps, plan.num_stages());
    let mut stage_starts = Vec::with_capacity(budgets.len());
    let mut step = 0;
    let mut last_checkpoint = params.clone();
    for (stage, &budget) in budgets.iter().enumerate() {
        stage_starts.push(step);
        let mut cursor = StageCursor::new(plan.stage(stage), config.seed, stage);
        for _ in 0..budget {
            let ids = cursor.next_batch(config.queries_per_step);
            let queries: Vec<&Query> = ids.iter().map(|id| by_id[id]).collect();
            match train_step(&mut params, &reference, config, vocab, &queries, step) {
                Ok(out) => {
                    let mut row = out.row;
                    row.stage = stage;
                    row.probe_entropy = probe_entropy(&params, probe_states);
                    observer.on_row(&row)?;
                }
                Err(e @ Error::Numeric(_)) => {
                    log::error!("aborting at step {step}: {e}");
                    return Ok(TrainOutcome {
                        params: last_checkpoint,
                        steps_completed: step,
                        stage_starts,
                        aborted: Some(e),
                    });
                }
                Err(e) => return Err(e),
            }
            step += 1;
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                last_checkpoint = params.clone();
                observer.on_checkpoint(step, &params)?;
            }
        }
    }
    Ok(TrainOutcome { params, steps_completed: step, stage_starts, aborted: None })
}

/// Shape of the warm-start policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmStartSpec {
    /// Probability of the correct answer for one-step queries.
    pub correct_base: f64,
    /// Drop in the correct-answer probability per extra step.
    pub correct_drop: f64,
    pub correct_floor: f64,
    pub distractors: usize,
    /// Mass spread uniformly over the vocabulary at every warm-start state.
    pub exploration: f64,
}

impl Default for WarmStartSpec {
    fn default() -> Self {
        Self { correct_base: 0.85, correct_drop: 0.27, correct_floor: 0.1, distractors: 3, exploration: 0.05 }
    }
}

impl WarmStartSpec {
    pub fn correct_weight(&self, steps: u32) -> f64 {
        let w = self.correct_base - self.correct_drop * f64::from(steps.saturating_sub(1));
        w.clamp(self.correct_floor, 1.0)
    }
}

/// Candidate answers with weights: the correct answer and distractors drawn
/// from the other residues.
pub fn warm_start_candidates(query: &Query, spec: &WarmStartSpec, seed: u64) -> Vec<(u64, f64)> {
    let mut rng = rng::stream(seed, Domain::WarmStart, query.id);
    let correct = spec.correct_weight(query.difficulty.steps);
    let mut others: Vec<u64> = (0..query.difficulty.modulus).filter(|&v| v != query.answer).collect();
    let k = spec.distractors.min(others.len());
    for i in 0..k {
        let j = i + rng::below(&mut rng, (others.len() - i) as u64) as usize;
        others.swap(i, j);
    }
    let raw: Vec<f64> = (0..k).map(|_| 0.2 + rng::uniform(&mut rng)).collect();
    let total: f64 = raw.iter().sum();
    let mut out = vec![(query.answer, if k == 0 { 1.0 } else { correct })];
    out.extend(others[..k].iter().zip(&raw).map(|(&v, &w)| (v, (1.0 - correct) * w / total)));
    out
}

/// Tabular policy that answers each query with its candidate distribution.
/// Every prefix of every candidate answer gets a state whose next-token
/// distribution follows the candidate masses, mixed with `exploration`.
pub fn warm_start(
    dataset: &[Query],
    vocab: &Vocabulary,
    context_window: usize,
    spec: &WarmStartSpec,
    seed: u64,
) -> Result<PolicyParams> {
    if !(spec.exploration > 0.0 && spec.exploration < 1.0) {
        return Err(config_err("warm-start exploration must lie in (0, 1)"));
    }
    let mut params = PolicyParams::new(vocab.size(), context_window)?;
    let n = vocab.size() as f64;
    for q in dataset {
        let mut next: BTreeMap<Vec<TokenId>, BTreeMap<TokenId, f64>> = BTreeMap::new();
        for (answer, w) in warm_start_candidates(q, spec, seed) {
            let tokens = vocab.answer_tokens(answer);
            for t in 0..tokens.len() {
                *next.entry(tokens[..t].to_vec()).or_default().entry(tokens[t]).or_default() += w;
            }
        }
        for (prefix, masses) in &next {
            let total: f64 = masses.values().sum();
            let state = params.state_index(q, prefix);
            let row = params.row_mut(state).expect("just allocated");
            for (v, l) in row.iter_mut().enumerate() {
                let m = masses.get(&(v as TokenId)).copied().unwrap_or(0.0);
                *l = math::ln((1.0 - spec.exploration) * m / total + spec.exploration / n);
            }
        }
    }
    Ok(params)
}

/// Pass@K, Avg@K and Len@K of one query split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitReport {
    pub name: String,
    pub queries: usize,
    pub ks: Vec<usize>,
    pub pass_at_k: Vec<f64>,
    pub avg_at_k: Vec<f64>,
    pub len_at_k: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub splits: Vec<SplitReport>,
}

impl EvalReport {
    pub fn split(&self, name: &str) -> Option<&SplitReport> {
        self.splits.iter().find(|s| s.name == name)
    }
}

impl SplitReport {
    pub fn pass_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.pass_at_k[i])
    }
}

/// Metrics from per-query outcome and length lists (each at least
/// `max(ks)` long), read on their first `K` entries.
pub fn metrics_from_outcomes(name: &str, outcomes: &[Vec<bool>], lengths: &[Vec<usize>], ks: &[usize]) -> SplitReport {
    let q = outcomes.len().max(1) as f64;
    let mut report = SplitReport {
        name: String::from(name),
        queries: outcomes.len(),
        ks: ks.to_vec(),
        pass_at_k: Vec::new(),
        avg_at_k: Vec::new(),
        len_at_k: Vec::new(),
    };
    for &k in ks {
        let pass = outcomes.iter().filter(|o| o[..k].iter().any(|&b| b)).count() as f64 / q;
        let avg = outcomes.iter().map(|o| o[..k].iter().filter(|&&b| b).count() as f64 / k as f64).sum::<f64>() / q;
        let len = lengths.iter().map(|l| l[..k].iter().sum::<usize>() as f64 / k as f64).sum::<f64>() / q;
        report.pass_at_k.push(pass);
        report.avg_at_k.push(avg);
        report.len_at_k.push(len);
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub max_response_len: usize,
    pub temperature: f64,
    pub seed: u64,
}

/// Sample `max(ks)` responses per query once; every K reads a prefix.
pub fn evaluate(
    params: &PolicyParams,
    name: &str,
    queries: &[Query],
    vocab: &Vocabulary,
    ks: &[usize],
    config: &EvalConfig,
) -> Result<SplitReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(config_err("K list must be non-empty and positive"));
    }
    if config.max_response_len == 0 {
        return Err(config_err("max response length must be positive"));
    }
    let kmax = *ks.iter().max().expect("non-empty");
    let mut outcomes = Vec::with_capacity(queries.len());
    let mut lengths = Vec::with_capacity(queries.len());
    for q in queries {
        let mut r = rng::stream(config.seed, Domain::Evaluation, q.id);
        let mut o = Vec::with_capacity(kmax);
        let mut l = Vec::with_capacity(kmax);
        for _ in 0..kmax {
            let resp = sample_response(params, q, vocab, config.max_response_len, config.temperature, &mut r);
            o.push(verify(q, &resp) > 0.5);
            l.push(resp.len());
        }
        outcomes.push(o);
        lengths.push(l);
    }
    Ok(metrics_from_outcomes(name, &outcomes, &lengths, ks))
}

/// The `fraction` of `dataset` with the highest semantic entropy, ties by id.
/// `se` maps query ids to their semantic entropy.
pub fn hardest_queries(dataset: &[Query], se: &BTreeMap<u64, f64>, fraction: f64) -> Result<Vec<Query>> {
    let mut keyed = Vec::with_capacity(dataset.len());
    for q in dataset {
        keyed.push((*se.get(&q.id).ok_or_else(|| config_err("a query has no semantic profile"))?, q));
    }
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.id.cmp(&b.1.id)));
    let take = math::ceil_count(fraction, dataset.len());
    Ok(keyed.into_iter().take(take).map(|(_, q)| q.clone()).collect())
}

/// Query id to semantic entropy.
pub fn se_by_id(profiles: &[SemanticProfile]) -> BTreeMap<u64, f64> {
    profiles.iter().map(|p| (p.query_id, p.se)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_env::{generate_dataset, GeneratorSpec};

    #[test]
    fn outcome_metrics_examples() {
        let r = metrics_from_outcomes("t", &[vec![false, false, true]], &[vec![3, 3, 4]], &[3]);
        assert_eq!(r.pass_at_k, vec![1.0]);
        assert!((r.avg_at_k[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.len_at_k[0] - 10.0 / 3.0).abs() < 1e-15);

        let none = metrics_from_outcomes("t", &[vec![false; 4], vec![false; 4]], &[vec![1; 4], vec![1; 4]], &[1, 2, 4]);
        assert_eq!(none.pass_at_k, vec![0.0; 3]);
    }

    #[test]
    fn stage_budget_split() {
        assert_eq!(stage_steps(10, 2), vec![5, 5]);
        assert_eq!(stage_steps(11, 2), vec![5, 6]);
        assert_eq!(stage_steps(0, 3), vec![0, 0, 0]);
    }

    #[test]
    fn warm_start_puts_configured_mass_on_the_answer() {
        let vocab = Vocabulary::arithmetic();
        let ds = generate_dataset(&GeneratorSpec { count: 6, ..GeneratorSpec::default() }, 3).unwrap();
        let spec = WarmStartSpec::default();
        let p = warm_start(&ds, &vocab, 2, &spec, 3).unwrap();
        for q in &ds {
            let lp = crate::policy::sequence_log_prob(&p, q, &vocab.answer_tokens(q.answer), Default::default());
            let want = spec.correct_weight(q.difficulty.steps);
            // each of the answer's tokens loses a little to exploration
            let got = math::exp(lp);
            assert!(got <= want + 1e-12 && got > want * 0.95f64.powi(4) - 1e-12, "got {got} want {want}");
        }
    }

    #[test]
    fn zero_steps_leave_the_policy_unchanged() {
        let vocab = Vocabulary::arithmetic();
        let ds = generate_dataset(&GeneratorSpec { count: 4, ..GeneratorSpec::default() }, 1).unwrap();
        let p = warm_start(&ds, &vocab, 2, &WarmStartSpec::default(), 1).unwrap();
        let cfg = TrainConfig { total_steps: 0, ..TrainConfig::default() };
        let out = train(&cfg, &ds, &vocab, &CurriculumPlan::unsorted(&ds), &p, &mut NullObserver).unwrap();
        assert_eq!(out.params, p);
        assert_eq!(out.steps_completed, 0);
    }
}
