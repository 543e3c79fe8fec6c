//! The desk-scale comparison of GRPO and SENT: per seed, build a dataset and
//! a warm-start policy, profile it, train both modes with equal step budgets
//! and evaluate on the hardest queries.

use sent_core::baselines::{BaselineConfig, BaselineMode};
use sent_core::curriculum::{build_curriculum, profile_dataset, CurriculumPlan, ProfileConfig, SemanticProfile};
use sent_core::harness::{
    evaluate, hardest_queries, se_by_id, train, warm_start, EvalConfig, MetricsRow, RowCollector, SplitReport, TrainConfig,
    WarmStartSpec,
};
use sent_core::policy::PolicyParams;
use sent_core::task_env::{generate_dataset, GeneratorSpec, Query};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: GeneratorSpec,
    pub warm_start: WarmStartSpec,
    pub profile: ProfileConfig,
    pub stages: usize,
    pub train: TrainConfig,
    /// KL coefficient of the GRPO arm.
    pub grpo_beta: f64,
    pub hardest_fraction: f64,
    pub eval_k: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: GeneratorSpec::default(),
            warm_start: WarmStartSpec::default(),
            profile: ProfileConfig::default(),
            stages: 2,
            train: TrainConfig::default(),
            grpo_beta: 0.001,
            hardest_fraction: 0.2,
            eval_k: 8,
        }
    }
}

/// Everything both arms share for one seed.
pub struct SeedSetup {
    pub dataset: Vec<Query>,
    pub initial: PolicyParams,
    pub profiles: Vec<SemanticProfile>,
    pub plan: CurriculumPlan,
}

pub fn setup(config: &ExperimentConfig, seed: u64) -> anyhow::Result<SeedSetup> {
    let dataset = generate_dataset(&config.data, seed)?;
    let initial = warm_start(&dataset, &config.data.vocab, config.train.context_window, &config.warm_start, seed)?;
    let profiles = profile_dataset(&initial, &dataset, &config.data.vocab, &config.profile, seed)?;
    let plan = build_curriculum(&dataset, &profiles, config.stages)?;
    Ok(SeedSetup { dataset, initial, profiles, plan })
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmResult {
    pub mode: String,
    pub final_probe_entropy: f64,
    pub final_batch_entropy: f64,
    pub hardest_pass_at_k: f64,
    pub hardest_avg_at_k: f64,
    /// Least-squares slope of the probe entropy over the second half of
    /// training, per step.
    pub late_slope: f64,
    /// Probe entropy at the end minus at the midpoint.
    pub late_change: f64,
    #[serde(skip)]
    pub rows: Vec<MetricsRow>,
}

impl ArmResult {
    /// Entropy does not rise over the second half of training.
    pub fn late_non_increasing(&self) -> bool {
        self.late_slope <= 0.0 && self.late_change <= 0.0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub grpo: ArmResult,
    pub sent: ArmResult,
}

/// Slope of the least-squares line through `ys` at `x = 0, 1, …`.
pub fn ls_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

fn late_stats(rows: &[MetricsRow]) -> (f64, f64) {
    if rows.is_empty() {
        return (0.0, 0.0);
    }
    let half = rows.len() / 2;
    let tail: Vec<f64> = rows[half..].iter().map(|r| r.probe_entropy).collect();
    let start = if half == 0 { tail[0] } else { rows[half - 1].probe_entropy };
    (ls_slope(&tail), tail[tail.len() - 1] - start)
}

pub fn run_arm(
    config: &ExperimentConfig,
    setup: &SeedSetup,
    mode: BaselineMode,
    seed: u64,
    hardest: &[Query],
) -> anyhow::Result<ArmResult> {
    let mut objective = BaselineConfig { mode, ..config.train.objective.clone() };
    let plan = match mode {
        BaselineMode::Sent => setup.plan.clone(),
        _ => {
            objective.grpo.beta = config.grpo_beta;
            CurriculumPlan::unsorted(&setup.dataset)
        }
    };
    let train_cfg = TrainConfig { seed, objective, ..config.train.clone() };
    let mut rows = RowCollector::default();
    let out = train(&train_cfg, &setup.dataset, &config.data.vocab, &plan, &setup.initial, &mut rows)?;
    if let Some(e) = out.aborted {
        anyhow::bail!("{mode} training aborted: {e}");
    }
    let eval_cfg = EvalConfig {
        max_response_len: config.train.max_response_len,
        temperature: config.train.temperature,
        seed: seed ^ 0x5eed_e7a1,
    };
    let report: SplitReport = evaluate(&out.params, "hardest", hardest, &config.data.vocab, &[config.eval_k], &eval_cfg)?;
    let (late_slope, late_change) = late_stats(&rows.rows);
    let last = rows.rows.last().copied().unwrap_or_default();
    Ok(ArmResult {
        mode: mode.name().to_string(),
        final_probe_entropy: last.probe_entropy,
        final_batch_entropy: last.mean_entropy,
        hardest_pass_at_k: report.pass_at_k[0],
        hardest_avg_at_k: report.avg_at_k[0],
        late_slope,
        late_change,
        rows: rows.rows,
    })
}

pub fn run_seed(config: &ExperimentConfig, seed: u64) -> anyhow::Result<SeedResult> {
    let s = setup(config, seed)?;
    let hardest = hardest_queries(&s.dataset, &se_by_id(&s.profiles), config.hardest_fraction)?;
    let grpo = run_arm(config, &s, BaselineMode::Grpo, seed, &hardest)?;
    let sent = run_arm(config, &s, BaselineMode::Sent, seed, &hardest)?;
    Ok(SeedResult { seed, grpo, sent })
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub seeds: Vec<SeedResult>,
    pub entropy_wins: usize,
    pub grpo_late_non_increasing: usize,
    pub pass_wins: usize,
}

pub fn run(config: &ExperimentConfig, seeds: &[u64]) -> anyhow::Result<ExperimentSummary> {
    let results = seeds.iter().map(|&s| run_seed(config, s)).collect::<anyhow::Result<Vec<_>>>()?;
    Ok(ExperimentSummary {
        entropy_wins: results.iter().filter(|r| r.sent.final_probe_entropy >= r.grpo.final_probe_entropy).count(),
        grpo_late_non_increasing: results.iter().filter(|r| r.grpo.late_non_increasing()).count(),
        pass_wins: results.iter().filter(|r| r.sent.hardest_pass_at_k >= r.grpo.hardest_pass_at_k).count(),
        seeds: results,
    })
}
