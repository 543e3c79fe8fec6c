//! Random small rollout batches and a finite-difference gradient checker.
#![allow(dead_code)]

use rand_core::RngCore;
use sent_core::baselines::{BaselineConfig, BaselineMode, Selection};
use sent_core::grpo::{evaluate_terms, group_advantages, rollout_group, TokenBatch, TokenTerm};
use sent_core::policy::{Gradient, PolicyParams, ReferencePolicy};
use sent_core::rng::{self, Domain};
use sent_core::sent::{prepare_selection, KlCoefficients, ThresholdSpec};
use sent_core::task_env::{generate_dataset, GeneratorSpec, Vocabulary};

pub struct Fixture {
    pub params: PolicyParams,
    pub reference: ReferencePolicy,
    pub batch: TokenBatch,
}

pub fn symmetric<R: RngCore>(rng: &mut R, scale: f64) -> f64 {
    scale * (2.0 * rng::uniform(rng) - 1.0)
}

/// Distance of any surrogate ratio from the clip edges `1 ± eps`.
fn min_kink_distance(batch: &TokenBatch, eps: f64) -> f64 {
    batch
        .records
        .iter()
        .map(|r| {
            let ratio = (r.logprob_new - r.logprob_old).exp();
            (ratio - (1.0 - eps)).abs().min((ratio - (1.0 + eps)).abs())
        })
        .fold(f64::INFINITY, f64::min)
}

/// A batch of `groups` groups of `group_size` responses of at most
/// `max_len` tokens, sampled from the uniform policy. Rewards are then
/// replaced by random binary ones, every group mixed, and the logits of all
/// visited states are drawn at random for both the reference and the
/// current policy. Selection flags use `thresholds` and `kl`.
pub fn random_fixture_with(
    seed: u64,
    groups: usize,
    group_size: usize,
    max_len: usize,
    thresholds: &ThresholdSpec,
    kl: &KlCoefficients,
) -> Fixture {
    let vocab = Vocabulary::arithmetic();
    let spec = GeneratorSpec { count: groups, ..GeneratorSpec::default() };
    let dataset = generate_dataset(&spec, seed).unwrap();
    let mut params = PolicyParams::new(vocab.size(), 1).unwrap();
    let mut r = rng::stream(seed, Domain::Rollout, 0);
    let mut rollouts: Vec<_> = dataset
        .iter()
        .map(|q| rollout_group(&params, q, &vocab, group_size, max_len, 1.0, &mut r).unwrap())
        .collect();
    for g in &mut rollouts {
        let n = g.rewards.len();
        let mut rewards: Vec<f64> = (0..n).map(|_| (rng::below(&mut r, 2)) as f64).collect();
        rewards[0] = 1.0;
        rewards[n - 1] = 0.0;
        g.advantages = group_advantages(&rewards);
        g.rewards = rewards;
    }
    let mut batch = TokenBatch::build(&mut params, &rollouts, 1.0);
    let states: Vec<_> = params.states().map(|(s, _)| s).collect();
    for &s in &states {
        for v in 0..vocab.size() as u32 {
            params.set_logit(s, v, symmetric(&mut r, 0.7)).unwrap();
        }
    }
    let reference = params.snapshot();
    for &s in &states {
        for v in 0..vocab.size() as u32 {
            let l = params.logit(s, v) + symmetric(&mut r, 0.4);
            params.set_logit(s, v, l).unwrap();
        }
    }
    batch.refresh(&params);
    prepare_selection(&mut batch, thresholds, kl);
    Fixture { params, reference, batch }
}

pub fn random_fixture(seed: u64) -> Fixture {
    random_fixture_with(seed, 2, 4, 4, &ThresholdSpec::default(), &KlCoefficients::default())
}

/// The `count` first fixtures whose ratios sit at least `margin` away from
/// the clip edges, so central differences never straddle a kink.
pub fn smooth_fixtures(count: usize, margin: f64) -> Vec<Fixture> {
    let mut out = Vec::with_capacity(count);
    let mut seed = 1000;
    while out.len() < count {
        let f = random_fixture(seed);
        seed += 1;
        if min_kink_distance(&f.batch, 0.2) >= margin {
            out.push(f);
        }
    }
    out
}

/// Strengths large enough that every regularizer is active on small batches.
pub fn test_config(mode: BaselineMode) -> BaselineConfig {
    BaselineConfig {
        mode,
        lambda: 0.3,
        rho: 0.5,
        r_clip: 0.25,
        omega_low: -10.0,
        omega_high: 10.0,
        k_cov: 0.2,
        cov_beta: 0.7,
        tau_he: 2.6,
        ..BaselineConfig::default()
    }
}

pub fn objective_value(params: &PolicyParams, f: &Fixture, terms: &[TokenTerm]) -> f64 {
    evaluate_terms(params, &f.reference, &f.batch, terms).unwrap().value
}

/// Central differences of the objective over every logit of every visited
/// state, with the terms held fixed.
pub fn finite_difference(f: &Fixture, terms: &[TokenTerm], h: f64) -> Gradient {
    let mut g = Gradient::new(f.params.vocab_size());
    let states: Vec<_> = f.params.states().map(|(s, _)| s).collect();
    let mut p = f.params.clone();
    for s in states {
        for v in 0..f.params.vocab_size() as u32 {
            let base = f.params.logit(s, v);
            p.set_logit(s, v, base + h).unwrap();
            let up = objective_value(&p, f, terms);
            p.set_logit(s, v, base - h).unwrap();
            let down = objective_value(&p, f, terms);
            p.set_logit(s, v, base).unwrap();
            g.add(s, v, (up - down) / (2.0 * h));
        }
    }
    g
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Gradient, b: &Gradient, params: &PolicyParams) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (s, _) in params.states() {
        for v in 0..params.vocab_size() as u32 {
            let (x, y) = (a.get(s, v), b.get(s, v));
            diff += (x - y) * (x - y);
            na += x * x;
            nb += y * y;
        }
    }
    let scale = na.max(nb).sqrt();
    if scale < 1e-300 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

pub fn max_abs_difference(a: &Gradient, b: &Gradient, params: &PolicyParams) -> f64 {
    params
        .states()
        .flat_map(|(s, _)| (0..params.vocab_size() as u32).map(move |v| (s, v)))
        .map(|(s, v)| (a.get(s, v) - b.get(s, v)).abs())
        .fold(0.0, f64::max)
}

pub fn selection_for(f: &Fixture, config: &BaselineConfig, seed: u64) -> Selection {
    sent_core::baselines::select_tokens(&f.batch, config, &mut rng::stream(seed, Domain::ClipSelection, 0))
}
