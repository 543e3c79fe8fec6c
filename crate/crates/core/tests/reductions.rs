mod support;

use sent_core::baselines::{mode_objective, plain_token_mean_spec, BaselineConfig, BaselineMode, Selection};
use sent_core::grpo::{grpo_objective, GrpoSpec, Normalization, ObjectiveEval};
use sent_core::policy::PolicyParams;
use sent_core::sent::{
    prepare_selection, sent_objective, CovThreshold, EntropyThreshold, KlCoefficients, SentSpec, ThresholdSpec,
};
use support::*;

const TOLERANCE: f64 = 1e-12;

fn assert_same(a: &ObjectiveEval, b: &ObjectiveEval, params: &PolicyParams, what: &str) {
    assert!((a.value - b.value).abs() <= TOLERANCE, "{what}: value {} vs {}", a.value, b.value);
    let d = max_abs_difference(&a.gradient(), &b.gradient(), params);
    assert!(d <= TOLERANCE, "{what}: gradient differs by {d:e}");
}

#[test]
fn sent_without_kl_is_grpo_without_kl() {
    for seed in 0..30 {
        let mut f = random_fixture(seed);
        prepare_selection(&mut f.batch, &ThresholdSpec::default(), &KlCoefficients::new(0.0, 0.0).unwrap());
        let sent = sent_objective(&f.params, &f.reference, &f.batch, &SentSpec::default()).unwrap();
        let grpo = grpo_objective(&f.params, &f.reference, &f.batch, &GrpoSpec { beta: 0.0, ..GrpoSpec::default() }).unwrap();
        assert_same(&sent, &grpo, &f.params, "beta_con = 0");
    }
}

#[test]
fn saturated_thresholds_give_uniform_beta_high() {
    let saturated = ThresholdSpec {
        entropy: EntropyThreshold::Absolute(f64::INFINITY),
        cov: CovThreshold::Absolute(f64::NEG_INFINITY),
    };
    let coeffs = KlCoefficients::default();
    for seed in 0..30 {
        let mut f = random_fixture(seed);
        prepare_selection(&mut f.batch, &saturated, &coeffs);
        assert!(f.batch.records.iter().all(|r| r.in_high_cov));
        let sent = sent_objective(&f.params, &f.reference, &f.batch, &SentSpec::default()).unwrap();
        let spec = GrpoSpec { beta: coeffs.beta_high, ..GrpoSpec::default() };
        let grpo = grpo_objective(&f.params, &f.reference, &f.batch, &spec).unwrap();
        assert_same(&sent, &grpo, &f.params, "saturated thresholds");
    }
}

fn zero_strength(mode: BaselineMode) -> (BaselineConfig, GrpoSpec) {
    let base = BaselineConfig::with_mode(mode);
    let grpo = base.grpo;
    match mode {
        BaselineMode::En | BaselineMode::HighEn => (BaselineConfig { lambda: 0.0, ..base }, grpo),
        BaselineMode::Adv => (BaselineConfig { alpha: 0.0, ..base }, GrpoSpec { beta: 0.0, ..grpo }),
        BaselineMode::Mask => (
            BaselineConfig { rho: 1.0, ..base },
            GrpoSpec { beta: 0.0, normalization: Normalization::TokenMean, ..grpo },
        ),
        BaselineMode::Clip => (BaselineConfig { r_clip: 0.0, ..base }, plain_token_mean_spec()),
        BaselineMode::Cov => (BaselineConfig { k_cov: 0.0, ..base }, plain_token_mean_spec()),
        BaselineMode::Grpo | BaselineMode::Sent => (base, grpo),
    }
}

#[test]
fn baselines_at_zero_strength_are_grpo() {
    let modes = [
        BaselineMode::En,
        BaselineMode::Adv,
        BaselineMode::Mask,
        BaselineMode::Clip,
        BaselineMode::Cov,
        BaselineMode::HighEn,
    ];
    for seed in 0..30 {
        let f = random_fixture(seed);
        for mode in modes {
            let (config, spec) = zero_strength(mode);
            let selection = selection_for(&f, &config, seed);
            if mode == BaselineMode::Mask {
                assert_eq!(selection.tokens.len(), f.batch.len(), "every group is mixed");
            } else {
                assert_eq!(selection, Selection::default());
            }
            let baseline = mode_objective(&f.params, &f.reference, &f.batch, &config, &selection).unwrap();
            let grpo = grpo_objective(&f.params, &f.reference, &f.batch, &spec).unwrap();
            assert_same(&baseline, &grpo, &f.params, mode.name());
        }
    }
}

#[test]
fn high_entropy_reward_with_infinite_threshold_is_grpo() {
    for seed in 0..10 {
        let f = random_fixture(seed);
        let config = BaselineConfig { tau_he: f64::INFINITY, lambda: 5.0, ..BaselineConfig::with_mode(BaselineMode::HighEn) };
        let a = mode_objective(&f.params, &f.reference, &f.batch, &config, &Selection::default()).unwrap();
        let b = grpo_objective(&f.params, &f.reference, &f.batch, &config.grpo).unwrap();
        assert_same(&a, &b, &f.params, "tau = inf");
    }
}
