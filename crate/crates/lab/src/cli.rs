//! The `sent` command line.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use sent_core::baselines::BaselineMode;
use sent_core::curriculum::{build_curriculum, profile_dataset, CurriculumPlan};
use sent_core::dynamics::run_dynamics_check;
use sent_core::harness::{evaluate, hardest_queries, step_batch, train, warm_start, EvalConfig, MetricsRow, Observer};
use sent_core::policy::PolicyParams;
use sent_core::sent::prepare_selection;
use sent_core::task_env::{generate_dataset, Query};

use crate::config::Config;
use crate::experiment;
use crate::formats::{self, EvalRecord, MetricsWriter, SplitRecord};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const PROFILES_FILE: &str = "profiles.jsonl";
pub const PLAN_FILE: &str = "plan.json";
pub const INITIAL_POLICY_FILE: &str = "initial_policy.txt";
pub const FINAL_POLICY_FILE: &str = "final_policy.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const EVAL_FILE: &str = "eval.json";
pub const BATCH_FILE: &str = "batch.csv";
pub const DYNAMICS_FILE: &str = "dynamics.csv";
pub const DYNAMICS_SUMMARY_FILE: &str = "dynamics_summary.json";
pub const EXPERIMENT_FILE: &str = "experiment.json";

/// Exit code of a check that ran but did not pass.
pub const CHECK_FAILED: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "sent", version, about = "Entropy-regularized group policy optimization on a toy arithmetic task")]
pub struct Cli {
    /// TOML config; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed. Required unless the config sets one or disables
    /// `deterministic`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory. Overrides SENT_OUT_DIR and the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the arithmetic dataset.
    GenData,
    /// Build the warm-start policy, its semantic-entropy profiles and the
    /// curriculum plan.
    SeProfile {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train one objective and write metrics, checkpoints and the final
    /// policy.
    Train {
        /// Objective mode, overriding the config.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Initial policy; defaults to the one written by `se-profile`.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Curriculum plan; required for `sent`.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Pass@K, Avg@K and Len@K on the train and hardest splits.
    Eval {
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        profiles: Option<PathBuf>,
        /// Comma-separated K values.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
    },
    /// Dump the first training batch with its selection columns.
    DumpBatch {
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Check the entropy-change forecasts on random bandit instances.
    VerifyDynamics,
    /// Compare GRPO and SENT across the configured seeds.
    Experiment {
        /// Comma-separated seeds, overriding the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

struct Ctx {
    config: Config,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, flag: &Option<PathBuf>, default: &str) -> PathBuf {
        flag.clone().unwrap_or_else(|| self.out.join(default))
    }
}

fn resolve_seed(cli: &Cli, config: &Config) -> anyhow::Result<u64> {
    match cli.seed.or(config.seed) {
        Some(s) => Ok(s),
        None if config.deterministic => bail!("a seed is required: pass --seed or set `seed` in the config"),
        None => {
            let nanos = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH)?.as_nanos();
            let seed = nanos as u64;
            log::warn!("no seed given, using {seed}");
            Ok(seed)
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let seed = resolve_seed(&cli, &config)?;
    let out = config.resolve_out_dir(cli.out.as_deref());
    let ctx = Ctx { config, seed, out };
    match &cli.command {
        Command::GenData => gen_data(&ctx),
        Command::SeProfile { data } => se_profile(&ctx, data),
        Command::Train { mode, data, policy, plan } => train_cmd(&ctx, mode.as_deref(), data, policy, plan),
        Command::Eval { policy, data, profiles, k } => eval_cmd(&ctx, policy, data, profiles, k.as_deref()),
        Command::DumpBatch { mode, data, policy } => dump_batch(&ctx, mode.as_deref(), data, policy),
        Command::VerifyDynamics => verify_dynamics(&ctx),
        Command::Experiment { seeds } => experiment_cmd(&ctx, seeds.as_deref()),
    }
}

fn gen_data(ctx: &Ctx) -> anyhow::Result<ExitCode> {
    let dataset = generate_dataset(&ctx.config.generator(), ctx.seed)?;
    let path = ctx.out.join(DATASET_FILE);
    formats::write_dataset(&path, &dataset)?;
    println!("wrote {} queries to {}", dataset.len(), path.display());
    Ok(ExitCode::SUCCESS)
}

fn load_dataset(ctx: &Ctx, flag: &Option<PathBuf>) -> anyhow::Result<Vec<Query>> {
    let path = ctx.path(flag, DATASET_FILE);
    formats::read_dataset(&path).context("loading dataset (run `sent gen-data` first?)")
}

fn se_profile(ctx: &Ctx, data: &Option<PathBuf>) -> anyhow::Result<ExitCode> {
    let c = &ctx.config;
    let dataset = load_dataset(ctx, data)?;
    let initial = warm_start(&dataset, &c.vocab(), c.train.context_window, &c.warm_start_spec(), ctx.seed)?;
    let profiles = profile_dataset(&initial, &dataset, &c.vocab(), &c.profile_config(), ctx.seed)?;
    let plan = build_curriculum(&dataset, &profiles, c.curriculum.stages)?;
    formats::write_policy(&ctx.out.join(INITIAL_POLICY_FILE), &initial)?;
    formats::write_profiles(&ctx.out.join(PROFILES_FILE), &profiles)?;
    formats::write_plan(&ctx.out.join(PLAN_FILE), &plan)?;
    let mean_se = profiles.iter().map(|p| p.se).sum::<f64>() / profiles.len().max(1) as f64;
    println!("profiled {} queries, mean semantic entropy {mean_se:.4}, {} stages", profiles.len(), plan.num_stages());
    Ok(ExitCode::SUCCESS)
}

fn load_policy(ctx: &Ctx, flag: &Option<PathBuf>, default: &str) -> anyhow::Result<PolicyParams> {
    let path = ctx.path(flag, default);
    formats::read_policy(&path).context("loading policy (run `sent se-profile` first?)")
}

fn parse_mode(ctx: &Ctx, flag: Option<&str>) -> anyhow::Result<BaselineMode> {
    match flag {
        Some(name) => BaselineMode::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = BaselineMode::ALL.iter().map(|m| m.name()).collect();
            anyhow::anyhow!("unknown mode `{name}`; expected one of {}", known.join(", "))
        }),
        None => Ok(ctx.config.mode()?),
    }
}

/// Writes metrics rows and checkpoints as training runs. The observer hook
/// cannot carry IO errors, so the first one is kept and reported after.
struct FileObserver {
    metrics: MetricsWriter,
    checkpoints: PathBuf,
    error: Option<formats::FormatError>,
    log_every: usize,
}

impl Observer for FileObserver {
    fn on_row(&mut self, row: &MetricsRow) -> sent_core::Result<()> {
        if self.log_every > 0 && row.step.is_multiple_of(self.log_every) {
            log::info!(
                "step {} stage {} reward {:.3} entropy {:.4} probe {:.4}",
                row.step,
                row.stage,
                row.mean_reward,
                row.mean_entropy,
                row.probe_entropy
            );
        }
        if self.error.is_none() {
            self.error = self.metrics.write(row).err();
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, step: usize, params: &PolicyParams) -> sent_core::Result<()> {
        if self.error.is_none() {
            let path = self.checkpoints.join(format!("step_{step:06}.txt"));
            self.error = formats::write_policy(&path, params).err();
        }
        Ok(())
    }
}

fn train_cmd(
    ctx: &Ctx,
    mode: Option<&str>,
    data: &Option<PathBuf>,
    policy: &Option<PathBuf>,
    plan: &Option<PathBuf>,
) -> anyhow::Result<ExitCode> {
    let mode = parse_mode(ctx, mode)?;
    let dataset = load_dataset(ctx, data)?;
    let initial = load_policy(ctx, policy, INITIAL_POLICY_FILE)?;
    let mut config = ctx.config.train_config(ctx.seed)?;
    config.objective.mode = mode;
    let plan = match mode {
        BaselineMode::Sent => {
            let path = ctx.path(plan, PLAN_FILE);
            if !path.exists() {
                bail!(
                    "mode `sent` needs a semantic-entropy plan but {} does not exist; run `sent se-profile` first",
                    path.display()
                );
            }
            formats::read_plan(&path)?
        }
        _ => CurriculumPlan::unsorted(&dataset),
    };
    let mut observer = FileObserver {
        metrics: MetricsWriter::create(&ctx.out.join(METRICS_FILE))?,
        checkpoints: ctx.out.join(CHECKPOINT_DIR),
        error: None,
        log_every: 10,
    };
    let outcome = train(&config, &dataset, &ctx.config.vocab(), &plan, &initial, &mut observer)?;
    if let Some(e) = observer.error {
        return Err(e.into());
    }
    formats::write_policy(&ctx.out.join(FINAL_POLICY_FILE), &outcome.params)?;
    if let Some(e) = outcome.aborted {
        eprintln!("training aborted after {} steps: {e}; wrote the last checkpoint", outcome.steps_completed);
        return Ok(ExitCode::from(CHECK_FAILED));
    }
    println!("trained `{mode}` for {} steps", outcome.steps_completed);
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd(
    ctx: &Ctx,
    policy: &Option<PathBuf>,
    data: &Option<PathBuf>,
    profiles: &Option<PathBuf>,
    ks: Option<&[usize]>,
) -> anyhow::Result<ExitCode> {
    let c = &ctx.config;
    let params = load_policy(ctx, policy, FINAL_POLICY_FILE)?;
    let dataset = load_dataset(ctx, data)?;
    let ks = ks.unwrap_or(&c.eval.ks);
    let eval_cfg = EvalConfig { max_response_len: c.train.max_response_len, temperature: c.train.temperature, seed: ctx.seed };
    let mut splits = vec![evaluate(&params, "train", &dataset, &c.vocab(), ks, &eval_cfg)?];
    let profiles_path = ctx.path(profiles, PROFILES_FILE);
    if profiles_path.exists() {
        let se = formats::read_profiles(&profiles_path)?.into_iter().map(|p| (p.query_id, p.se)).collect();
        let hardest = hardest_queries(&dataset, &se, c.eval.hardest_fraction)?;
        splits.push(evaluate(&params, "hardest", &hardest, &c.vocab(), ks, &eval_cfg)?);
    } else {
        log::warn!("{} not found, skipping the hardest split", profiles_path.display());
    }
    let record = EvalRecord { seed: ctx.seed, splits: splits.iter().map(SplitRecord::from).collect() };
    for s in &record.splits {
        for m in &s.metrics {
            println!("{} k={} pass={:.4} avg={:.4} len={:.2}", s.name, m.k, m.pass, m.avg, m.len);
        }
    }
    formats::write_json(&ctx.out.join(EVAL_FILE), &record)?;
    Ok(ExitCode::SUCCESS)
}

fn dump_batch(ctx: &Ctx, mode: Option<&str>, data: &Option<PathBuf>, policy: &Option<PathBuf>) -> anyhow::Result<ExitCode> {
    let dataset = load_dataset(ctx, data)?;
    let mut params = load_policy(ctx, policy, INITIAL_POLICY_FILE)?;
    let mut config = ctx.config.train_config(ctx.seed)?;
    config.objective.mode = parse_mode(ctx, mode)?;
    let queries: Vec<&Query> = dataset.iter().take(config.queries_per_step).collect();
    let (_, mut batch) = step_batch(&mut params, &config, &ctx.config.vocab(), &queries, 0)?;
    let summary = prepare_selection(&mut batch, &config.objective.thresholds, &config.objective.kl);
    let path = ctx.out.join(BATCH_FILE);
    formats::write_batch_csv(&path, &batch)?;
    println!("{} tokens, {} low-entropy, {} high-covariance -> {}", summary.tokens, summary.low, summary.high_cov, path.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(serde::Serialize)]
struct DynamicsSummary {
    seed: u64,
    instances: usize,
    update_max_discrepancy: f64,
    min_ratio: f64,
    max_ratio: f64,
    decomposition_gap: f64,
    term2_positive_rate: f64,
    update_pass: bool,
    shrink_pass: bool,
    pass: bool,
}

fn verify_dynamics(ctx: &Ctx) -> anyhow::Result<ExitCode> {
    let cfg = ctx.config.dynamics_config(ctx.seed);
    let report = run_dynamics_check(&cfg)?;
    formats::write_dynamics_csv(&ctx.out.join(DYNAMICS_FILE), &report.rows)?;
    let summary = DynamicsSummary {
        seed: ctx.seed,
        instances: cfg.instances,
        update_max_discrepancy: report.update_max_discrepancy,
        min_ratio: report.min_ratio,
        max_ratio: report.max_ratio,
        decomposition_gap: report.decomposition_gap,
        term2_positive_rate: report.term2_positive_rate,
        update_pass: report.update_pass,
        shrink_pass: report.shrink_pass,
        pass: report.pass(),
    };
    formats::write_json(&ctx.out.join(DYNAMICS_SUMMARY_FILE), &summary)?;
    println!(
        "score-function check: max discrepancy {:.3e} ({})",
        summary.update_max_discrepancy,
        pass_word(summary.update_pass)
    );
    println!(
        "forecast error shrink ratio in [{:.3}, {:.3}] ({})",
        summary.min_ratio,
        summary.max_ratio,
        pass_word(summary.shrink_pass)
    );
    println!("decomposition gap {:.3e}, term2 > 0 in {:.1}% of KL forecasts", summary.decomposition_gap, 100.0 * summary.term2_positive_rate);
    Ok(if summary.pass { ExitCode::SUCCESS } else { ExitCode::from(CHECK_FAILED) })
}

fn pass_word(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn experiment_cmd(ctx: &Ctx, seeds: Option<&[u64]>) -> anyhow::Result<ExitCode> {
    let cfg = ctx.config.experiment_config()?;
    let seeds = seeds.unwrap_or(&ctx.config.experiment.seeds);
    if seeds.is_empty() {
        bail!("no seeds to run");
    }
    let summary = experiment::run(&cfg, seeds)?;
    for s in &summary.seeds {
        println!(
            "seed {}: entropy grpo {:.4} sent {:.4} | hardest pass@{} grpo {:.3} sent {:.3} | grpo late slope {:.2e}",
            s.seed,
            s.grpo.final_probe_entropy,
            s.sent.final_probe_entropy,
            cfg.eval_k,
            s.grpo.hardest_pass_at_k,
            s.sent.hardest_pass_at_k,
            s.grpo.late_slope
        );
    }
    let n = seeds.len();
    println!(
        "sent entropy >= grpo in {}/{n}; grpo late entropy non-increasing in {}/{n}; sent pass >= grpo in {}/{n}",
        summary.entropy_wins, summary.grpo_late_non_increasing, summary.pass_wins
    );
    formats::write_json(&ctx.out.join(EXPERIMENT_FILE), &summary)?;
    Ok(ExitCode::SUCCESS)
}

/// Parse `args` and run; used by the binary and by tests.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

