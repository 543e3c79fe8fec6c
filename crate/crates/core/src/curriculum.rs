//! Semantic-entropy profiles and the staged curriculum built from them.
//!
//! A query is profiled by sampling `M` responses from the initial policy,
//! grouping them by extracted answer and measuring the entropy of the
//! normalized cluster masses. The curriculum trains on queries in ascending
//! order of that entropy, split into `N` contiguous stages.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use rand_core::RngCore;

use crate::error::config_err;
use crate::math;
use crate::policy::{sample_response, sequence_log_prob, LogProbMode, PolicyParams};
use crate::rng::{self, Domain};
use crate::task_env::{Query, Response, TokenId, Vocabulary};
use crate::Result;

/// One profiling sample with its sequence log-probability `ln P(o | q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredResponse {
    pub response: Response,
    pub seq_logprob: f64,
}

/// Draw `m` responses at temperature 1 and score them.
pub fn sample_for_se<R: RngCore + ?Sized>(
    params: &PolicyParams,
    query: &Query,
    vocab: &Vocabulary,
    m: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<ScoredResponse>> {
    if m < 2 {
        return Err(config_err("semantic entropy needs at least 2 samples"));
    }
    if max_len == 0 {
        return Err(config_err("max response length must be positive"));
    }
    Ok((0..m)
        .map(|_| {
            let response = sample_response(params, query, vocab, max_len, 1.0, rng);
            let seq_logprob = sequence_log_prob(params, query, &response.tokens, LogProbMode::Sum);
            ScoredResponse { response, seq_logprob }
        })
        .collect())
}

/// Cluster label: an extracted answer, or the shared bucket for unparseable
/// responses. Orders answers ascending with `Unparsed` last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClusterKey {
    Answer(u64),
    Unparsed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub key: ClusterKey,
    /// Indices into the sampled responses.
    pub members: Vec<usize>,
}

/// Whether repeated token sequences count once or once per draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DuplicateMode {
    #[default]
    Deduplicate,
    CountDuplicates,
}

/// Partition the responses by extracted answer. In [`DuplicateMode::Deduplicate`]
/// only the first draw of each distinct token sequence is kept.
pub fn cluster_by_answer(responses: &[ScoredResponse], mode: DuplicateMode) -> Vec<Cluster> {
    let mut seen: BTreeSet<&[TokenId]> = BTreeSet::new();
    let mut by_key: BTreeMap<ClusterKey, Vec<usize>> = BTreeMap::new();
    for (i, r) in responses.iter().enumerate() {
        if mode == DuplicateMode::Deduplicate && !seen.insert(&r.response.tokens) {
            continue;
        }
        let key = r.response.extracted_answer.map_or(ClusterKey::Unparsed, ClusterKey::Answer);
        by_key.entry(key).or_default().push(i);
    }
    by_key.into_iter().map(|(key, members)| Cluster { key, members }).collect()
}

/// `ln P(C | q)`: log-sum-exp of the members' sequence log-probs.
pub fn cluster_probability(cluster: &Cluster, responses: &[ScoredResponse]) -> f64 {
    let lps: Vec<f64> = cluster.members.iter().map(|&i| responses[i].seq_logprob).collect();
    math::log_sum_exp(&lps)
}

/// `P̂_i = P_i / Σ_j P_j` from log masses.
pub fn normalize_clusters(cluster_logprobs: &[f64]) -> Vec<f64> {
    let total = math::log_sum_exp(cluster_logprobs);
    cluster_logprobs.iter().map(|&l| math::exp(l - total)).collect()
}

/// `−Σ P̂ ln P̂` in nats.
pub fn semantic_entropy(normalized_probs: &[f64]) -> f64 {
    math::entropy(normalized_probs).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticProfile {
    pub query_id: u64,
    pub m: usize,
    pub clusters: Vec<Cluster>,
    pub cluster_logprobs: Vec<f64>,
    pub normalized_probs: Vec<f64>,
    pub se: f64,
}

impl SemanticProfile {
    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(|c| c.members.len()).collect()
    }

    /// Profile from already-scored samples.
    pub fn from_samples(query_id: u64, samples: &[ScoredResponse], mode: DuplicateMode) -> Self {
        let clusters = cluster_by_answer(samples, mode);
        let cluster_logprobs: Vec<f64> = clusters.iter().map(|c| cluster_probability(c, samples)).collect();
        let normalized_probs = normalize_clusters(&cluster_logprobs);
        let se = semantic_entropy(&normalized_probs);
        Self { query_id, m: samples.len(), clusters, cluster_logprobs, normalized_probs, se }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileConfig {
    pub samples: usize,
    pub max_len: usize,
    pub duplicates: DuplicateMode,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self { samples: 8, max_len: 32, duplicates: DuplicateMode::Deduplicate }
    }
}

pub fn profile_query<R: RngCore + ?Sized>(
    params: &PolicyParams,
    query: &Query,
    vocab: &Vocabulary,
    config: &ProfileConfig,
    rng: &mut R,
) -> Result<SemanticProfile> {
    let samples = sample_for_se(params, query, vocab, config.samples, config.max_len, rng)?;
    Ok(SemanticProfile::from_samples(query.id, &samples, config.duplicates))
}

/// Profile every query with its own RNG stream keyed by the query id.
pub fn profile_dataset(
    params: &PolicyParams,
    dataset: &[Query],
    vocab: &Vocabulary,
    config: &ProfileConfig,
    seed: u64,
) -> Result<Vec<SemanticProfile>> {
    dataset
        .iter()
        .map(|q| profile_query(params, q, vocab, config, &mut rng::stream(seed, Domain::Profile, q.id)))
        .collect()
}

/// Query ids in training order, split into contiguous stages.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumPlan {
    pub order: Vec<u64>,
    /// `N − 1` split indices into `order`.
    pub stage_boundaries: Vec<usize>,
}

impl CurriculumPlan {
    pub fn num_stages(&self) -> usize {
        self.stage_boundaries.len() + 1
    }

    pub fn stage(&self, n: usize) -> &[u64] {
        let start = if n == 0 { 0 } else { self.stage_boundaries[n - 1] };
        let end = self.stage_boundaries.get(n).copied().unwrap_or(self.order.len());
        &self.order[start..end]
    }

    pub fn stages(&self) -> impl Iterator<Item = &[u64]> {
        (0..self.num_stages()).map(move |n| self.stage(n))
    }

    /// A single stage in dataset order.
    pub fn unsorted(dataset: &[Query]) -> Self {
        Self { order: dataset.iter().map(|q| q.id).collect(), stage_boundaries: Vec::new() }
    }

    /// Checks that the plan covers exactly the ids in `dataset`.
    pub fn validate_against(&self, dataset: &[Query]) -> Result<()> {
        let mut want: Vec<u64> = dataset.iter().map(|q| q.id).collect();
        let mut have = self.order.clone();
        want.sort_unstable();
        have.sort_unstable();
        if want != have {
            return Err(config_err("curriculum plan does not cover the dataset exactly once"));
        }
        let mut prev = 0;
        for &b in &self.stage_boundaries {
            if b <= prev || b >= self.order.len() {
                return Err(config_err("curriculum stages must be non-empty and contiguous"));
            }
            prev = b;
        }
        Ok(())
    }
}

/// Stable ascending sort by `(se, id)` and a split into `stages` slices of
/// `⌊|D| / stages⌋`, the remainder going to the last one.
pub fn build_curriculum(dataset: &[Query], profiles: &[SemanticProfile], stages: usize) -> Result<CurriculumPlan> {
    if stages == 0 {
        return Err(config_err("curriculum needs at least one stage"));
    }
    if stages > dataset.len() {
        return Err(config_err("more curriculum stages than queries"));
    }
    let mut se: BTreeMap<u64, f64> = BTreeMap::new();
    for p in profiles {
        if se.insert(p.query_id, p.se).is_some() {
            return Err(config_err("duplicate semantic profile for one query"));
        }
    }
    let mut keyed = Vec::with_capacity(dataset.len());
    for q in dataset {
        let s = *se.get(&q.id).ok_or_else(|| config_err("a query has no semantic profile"))?;
        keyed.push((s, q.id));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let size = dataset.len() / stages;
    Ok(CurriculumPlan {
        order: keyed.into_iter().map(|(_, id)| id).collect(),
        stage_boundaries: (1..stages).map(|n| n * size).collect(),
    })
}
