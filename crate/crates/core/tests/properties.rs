mod support;

use proptest::prelude::*;
use sent_core::baselines::shaped_advantage;
use sent_core::curriculum::{
    build_curriculum, profile_dataset, semantic_entropy, DuplicateMode, ProfileConfig, ScoredResponse, SemanticProfile,
};
use sent_core::grpo::{categorical_kl, clipped_surrogate, group_advantages};
use sent_core::harness::{warm_start, WarmStartSpec};
use sent_core::policy::TokenDistribution;
use sent_core::sent::{CovThreshold, EntropyThreshold, KlCoefficients, ThresholdSpec};
use sent_core::task_env::{generate_dataset, verify, DifficultyMeta, GeneratorSpec, Query, Response, Vocabulary};
use support::*;

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

fn scored(tokens: Vec<u32>, logprob: f64) -> ScoredResponse {
    let n = tokens.len();
    ScoredResponse { response: Response::new(tokens, vec![0.0; n], &Vocabulary::arithmetic()), seq_logprob: logprob }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn advantages_are_standardized(rewards in prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), -3.0..3.0f64], 2..16)) {
        let a = group_advantages(&rewards);
        let (_, std) = mean_std(&rewards);
        if std < 1e-8 {
            prop_assert!(a.iter().all(|&x| x == 0.0));
        } else {
            let (m, s) = mean_std(&a);
            prop_assert!(m.abs() <= 1e-10);
            prop_assert!((s - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn constant_groups_have_zero_advantage(r in -5.0..5.0f64, n in 2usize..16) {
        prop_assert!(group_advantages(&vec![r; n]).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn surrogate_is_a_lower_bound(r in 0.0..4.0f64, a in -3.0..3.0f64, eps in 0.01..0.99f64) {
        let s = clipped_surrogate(r, a, eps);
        prop_assert!(s <= r * a + 1e-12);
        if (1.0 - eps..=1.0 + eps).contains(&r) {
            prop_assert!((s - r * a).abs() <= 1e-12);
        }
    }

    #[test]
    fn kl_is_non_negative(l1 in prop::collection::vec(-4.0..4.0f64, 2..16), shift in -3.0..3.0f64, seed in 0u64..1000) {
        let p = TokenDistribution::from_logits(&l1, 1.0);
        let mut r = sent_core::rng::stream(seed, sent_core::rng::Domain::Dynamics, 0);
        let l2: Vec<f64> = l1.iter().map(|l| l + symmetric(&mut r, 2.0)).collect();
        let q = TokenDistribution::from_logits(&l2, 1.0);
        prop_assert!(categorical_kl(p.probs(), q.probs()) >= -1e-15);
        let shifted: Vec<f64> = l1.iter().map(|l| l + shift).collect();
        let same = TokenDistribution::from_logits(&shifted, 1.0);
        prop_assert!(categorical_kl(p.probs(), same.probs()).abs() <= 1e-12);
    }

    #[test]
    fn distributions_sum_to_one(l in prop::collection::vec(-30.0..30.0f64, 2..16)) {
        let d = TokenDistribution::from_logits(&l, 1.0);
        prop_assert!((d.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(d.probs().iter().all(|&p| p > 0.0));
        prop_assert!(d.entropy() >= 0.0 && d.entropy() <= (l.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn shaping_is_bounded(h in 0.0..5.0f64, a in -3.0..3.0f64, alpha in 0.0..2.0f64, kappa in 0.1..5.0f64) {
        let s = shaped_advantage(h, a, alpha, kappa);
        prop_assert!(s >= a);
        prop_assert!(s - a <= a.abs() / kappa + 1e-15);
    }

    #[test]
    fn semantic_entropy_is_at_most_ln_m(
        answers in prop::collection::vec(prop::option::of(0u64..5), 2..12),
        logprobs in prop::collection::vec(-20.0..0.0f64, 12),
        dedup in any::<bool>(),
    ) {
        let v = Vocabulary::arithmetic();
        let samples: Vec<ScoredResponse> = answers
            .iter()
            .zip(&logprobs)
            .map(|(a, &lp)| match a {
                Some(x) => scored(v.answer_tokens(*x), lp),
                None => scored(vec![3, 3], lp),
            })
            .collect();
        let mode = if dedup { DuplicateMode::Deduplicate } else { DuplicateMode::CountDuplicates };
        let p = SemanticProfile::from_samples(0, &samples, mode);
        prop_assert!(p.se >= -1e-15);
        prop_assert!(p.se <= (samples.len() as f64).ln() + 1e-12);
        prop_assert!((p.normalized_probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn covariance_identity_and_subset(seed in 0u64..5000, frac in 0.05..0.95f64, top in 0.01..1.0f64) {
        let spec = ThresholdSpec { entropy: EntropyThreshold::Percentile(frac), cov: CovThreshold::TopFraction(top) };
        let f = random_fixture_with(seed, 3, 4, 5, &spec, &KlCoefficients::default());
        let recs = &f.batch.records;
        let n = recs.len() as f64;
        let mean_cov = recs.iter().map(|r| r.cov).sum::<f64>() / n;
        let ml = recs.iter().map(|r| r.logprob_new).sum::<f64>() / n;
        let ma = recs.iter().map(|r| r.advantage).sum::<f64>() / n;
        let direct = recs.iter().map(|r| r.logprob_new * r.advantage).sum::<f64>() / n - ml * ma;
        prop_assert!((mean_cov - direct).abs() <= 1e-10, "{} vs {}", mean_cov, direct);
        prop_assert!(recs.iter().all(|r| !r.in_high_cov || r.in_low));
    }

    #[test]
    fn verify_is_binary(tokens in prop::collection::vec(0u32..16, 0..8), answer in 0u64..20) {
        let v = Vocabulary::arithmetic();
        let q = Query { id: 0, prompt_tokens: vec![1], answer, difficulty: DifficultyMeta { steps: 1, max_operand: 9, modulus: 20 } };
        let n = tokens.len();
        let resp = Response::new(tokens, vec![0.0; n], &v);
        let r = verify(&q, &resp);
        prop_assert!(r == 0.0 || r == 1.0);
        if r == 1.0 {
            prop_assert_eq!(resp.extracted_answer, Some(answer));
        }
    }
}

#[test]
fn unanimous_and_split_entropies() {
    let v = Vocabulary::arithmetic();
    let same: Vec<_> = (0..4).map(|i| scored(v.answer_tokens(7), -1.0 - i as f64)).collect();
    assert_eq!(SemanticProfile::from_samples(0, &same, DuplicateMode::Deduplicate).se, 0.0);
    let split = vec![scored(v.answer_tokens(1), -2.0), scored(v.answer_tokens(2), -2.0)];
    let p = SemanticProfile::from_samples(0, &split, DuplicateMode::Deduplicate);
    assert!((p.se - std::f64::consts::LN_2).abs() <= 1e-12);
    assert!((semantic_entropy(&[0.5, 0.5]) - std::f64::consts::LN_2).abs() <= 1e-12);
}

#[test]
fn curriculum_stages_are_ordered_on_profiled_datasets() {
    let vocab = Vocabulary::arithmetic();
    for seed in 1..=5 {
        let data = generate_dataset(&GeneratorSpec::default(), seed).unwrap();
        let params = warm_start(&data, &vocab, 2, &WarmStartSpec::default(), seed).unwrap();
        let profiles = profile_dataset(&params, &data, &vocab, &ProfileConfig::default(), seed).unwrap();
        let se: std::collections::BTreeMap<u64, f64> = profiles.iter().map(|p| (p.query_id, p.se)).collect();
        for stages in 1..=4 {
            let plan = build_curriculum(&data, &profiles, stages).unwrap();
            let means: Vec<f64> =
                plan.stages().map(|s| s.iter().map(|id| se[id]).sum::<f64>() / s.len() as f64).collect();
            assert!(means.windows(2).all(|w| w[0] <= w[1]), "seed {seed}: {means:?}");
            let mut sorted = plan.order.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, data.iter().map(|q| q.id).collect::<Vec<_>>());
        }
    }
}
