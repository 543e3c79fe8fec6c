//! On-disk formats: JSON-lines datasets and profiles, the curriculum plan,
//! the text policy snapshot, and CSV/JSON reports. Field names are listed in
//! `docs/schema.md`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use sent_core::curriculum::{ClusterKey, CurriculumPlan, SemanticProfile};
use sent_core::dynamics::ForecastRow;
use sent_core::grpo::TokenBatch;
use sent_core::harness::{MetricsRow, SplitReport};
use sent_core::policy::{PolicyParams, StateKey};
use sent_core::task_env::{DifficultyMeta, Query};

/// Version tag of the metrics CSV columns.
pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const POLICY_MAGIC: &str = "# sent-policy v1";

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Json { path: PathBuf, line: usize, source: serde_json::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}:{line}: {msg}")]
    Malformed { path: PathBuf, line: usize, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.to_owned(), source }
}

fn create(path: &Path) -> Result<BufWriter<File>, FormatError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn open(path: &Path) -> Result<BufReader<File>, FormatError> {
    Ok(BufReader::new(File::open(path).map_err(io_err(path))?))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), FormatError> {
    let mut w = create(path)?;
    for (i, item) in items.into_iter().enumerate() {
        serde_json::to_writer(&mut w, &item).map_err(|source| FormatError::Json { path: path.to_owned(), line: i + 1, source })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| FormatError::Json { path: path.to_owned(), line: i + 1, source })?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| FormatError::Json { path: path.to_owned(), line: 0, source })?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, FormatError> {
    let mut text = String::new();
    open(path)?.read_to_string(&mut text).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| FormatError::Json { path: path.to_owned(), line: 0, source })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRecord {
    pub steps: u32,
    pub max_operand: u64,
    pub modulus: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: u64,
    pub prompt_tokens: Vec<u32>,
    pub answer: u64,
    pub difficulty_meta: DifficultyRecord,
}

impl From<&Query> for QueryRecord {
    fn from(q: &Query) -> Self {
        Self {
            id: q.id,
            prompt_tokens: q.prompt_tokens.clone(),
            answer: q.answer,
            difficulty_meta: DifficultyRecord {
                steps: q.difficulty.steps,
                max_operand: q.difficulty.max_operand,
                modulus: q.difficulty.modulus,
            },
        }
    }
}

impl From<QueryRecord> for Query {
    fn from(r: QueryRecord) -> Self {
        Query {
            id: r.id,
            prompt_tokens: r.prompt_tokens,
            answer: r.answer,
            difficulty: DifficultyMeta {
                steps: r.difficulty_meta.steps,
                max_operand: r.difficulty_meta.max_operand,
                modulus: r.difficulty_meta.modulus,
            },
        }
    }
}

pub fn write_dataset(path: &Path, dataset: &[Query]) -> Result<(), FormatError> {
    write_jsonl(path, dataset.iter().map(QueryRecord::from))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Query>, FormatError> {
    let records: Vec<QueryRecord> = read_jsonl(path)?;
    for (i, r) in records.iter().enumerate() {
        if r.prompt_tokens.is_empty() {
            return Err(FormatError::Malformed { path: path.to_owned(), line: i + 1, msg: "empty prompt".into() });
        }
    }
    Ok(records.into_iter().map(Query::from).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub query_id: u64,
    pub m: usize,
    pub se: f64,
    pub num_clusters: usize,
    pub cluster_sizes: Vec<usize>,
    /// Extracted answer per cluster; `null` marks the unparseable cluster.
    pub cluster_answers: Vec<Option<u64>>,
    pub normalized_probs: Vec<f64>,
}

impl From<&SemanticProfile> for ProfileRecord {
    fn from(p: &SemanticProfile) -> Self {
        Self {
            query_id: p.query_id,
            m: p.m,
            se: p.se,
            num_clusters: p.num_clusters(),
            cluster_sizes: p.cluster_sizes(),
            cluster_answers: p
                .clusters
                .iter()
                .map(|c| match c.key {
                    ClusterKey::Answer(a) => Some(a),
                    ClusterKey::Unparsed => None,
                })
                .collect(),
            normalized_probs: p.normalized_probs.clone(),
        }
    }
}

pub fn write_profiles(path: &Path, profiles: &[SemanticProfile]) -> Result<(), FormatError> {
    write_jsonl(path, profiles.iter().map(ProfileRecord::from))
}

pub fn read_profiles(path: &Path) -> Result<Vec<ProfileRecord>, FormatError> {
    read_jsonl(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub stages: usize,
    pub order: Vec<u64>,
    pub stage_boundaries: Vec<usize>,
}

impl From<&CurriculumPlan> for PlanRecord {
    fn from(p: &CurriculumPlan) -> Self {
        Self { stages: p.num_stages(), order: p.order.clone(), stage_boundaries: p.stage_boundaries.clone() }
    }
}

pub fn write_plan(path: &Path, plan: &CurriculumPlan) -> Result<(), FormatError> {
    write_json(path, &PlanRecord::from(plan))
}

pub fn read_plan(path: &Path) -> Result<CurriculumPlan, FormatError> {
    let r: PlanRecord = read_json(path)?;
    if r.stages != r.stage_boundaries.len() + 1 {
        return Err(FormatError::Malformed { path: path.to_owned(), line: 0, msg: "stage count does not match boundaries".into() });
    }
    Ok(CurriculumPlan { order: r.order, stage_boundaries: r.stage_boundaries })
}

/// Text snapshot: a magic line, `vocab_size` and `context_window` lines,
/// then one `query<TAB>window<TAB>token<TAB>logit` line per entry, states
/// in id order. The window is comma-separated and empty for the first
/// position.
pub fn write_policy(path: &Path, params: &PolicyParams) -> Result<(), FormatError> {
    let mut w = create(path)?;
    let mut body = String::new();
    body.push_str(POLICY_MAGIC);
    body.push('\n');
    body.push_str(&format!("vocab_size {}\ncontext_window {}\n", params.vocab_size(), params.context_window()));
    for (state, key) in params.states() {
        let window: Vec<String> = key.window.iter().map(u32::to_string).collect();
        let window = window.join(",");
        for (t, l) in params.row(state).expect("allocated").iter().enumerate() {
            body.push_str(&format!("{}\t{}\t{}\t{}\n", key.query, window, t, l));
        }
    }
    w.write_all(body.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_policy(path: &Path) -> Result<PolicyParams, FormatError> {
    let bad = |line: usize, msg: &str| FormatError::Malformed { path: path.to_owned(), line, msg: msg.to_owned() };
    let mut lines = open(path)?.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String), FormatError> {
        match lines.next() {
            Some((i, l)) => Ok((i + 1, l.map_err(io_err(path))?)),
            None => Err(bad(0, &format!("missing {what}"))),
        }
    };
    let (n, magic) = next("header")?;
    if magic.trim() != POLICY_MAGIC {
        return Err(bad(n, "not a policy snapshot"));
    }
    let mut header_value = |name: &str| -> Result<usize, FormatError> {
        let (n, l) = next(name)?;
        l.strip_prefix(name)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad(n, &format!("expected `{name} <integer>`")))
    };
    let vocab = header_value("vocab_size")?;
    let window = header_value("context_window")?;
    let mut params = PolicyParams::new(vocab, window).map_err(|e| bad(2, &e.to_string()))?;
    for (i, line) in lines {
        let n = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(bad(n, "expected 4 tab-separated fields"));
        }
        let query: u64 = fields[0].parse().map_err(|_| bad(n, "bad query id"))?;
        let window: Vec<u32> = if fields[1].is_empty() {
            Vec::new()
        } else {
            fields[1].split(',').map(str::parse).collect::<Result<_, _>>().map_err(|_| bad(n, "bad window"))?
        };
        let token: u32 = fields[2].parse().map_err(|_| bad(n, "bad token id"))?;
        let logit: f64 = fields[3].parse().map_err(|_| bad(n, "bad logit"))?;
        if token as usize >= vocab || !logit.is_finite() {
            return Err(bad(n, "token out of range or non-finite logit"));
        }
        let state = params.intern(StateKey { query, window });
        params.set_logit(state, token, logit).map_err(|e| bad(n, &e.to_string()))?;
    }
    Ok(params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub stage: usize,
    pub mean_entropy: f64,
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
    pub selected: usize,
    pub clamped_ratios: usize,
    pub term1: f64,
    pub term2: f64,
}

impl From<&MetricsRow> for MetricsRecord {
    fn from(r: &MetricsRow) -> Self {
        Self {
            step: r.step,
            stage: r.stage,
            mean_entropy: r.mean_entropy,
            probe_entropy: r.probe_entropy,
            mean_reward: r.mean_reward,
            mean_length: r.mean_length,
            objective: r.objective,
            surrogate: r.surrogate,
            kl_penalty: r.kl_penalty,
            entropy_bonus: r.entropy_bonus,
            tokens: r.tokens,
            low_count: r.low_count,
            high_cov_count: r.high_cov_count,
            mean_entropy_low: r.mean_entropy_low,
            mean_cov_high_cov: r.mean_cov_high_cov,
            selected: r.selected,
            clamped_ratios: r.clamped_ratios,
            term1: r.term1,
            term2: r.term2,
        }
    }
}

/// Column order of the metrics CSV, fixed for [`METRICS_SCHEMA_VERSION`].
pub const METRICS_COLUMNS: [&str; 19] = [
    "step",
    "stage",
    "mean_entropy",
    "probe_entropy",
    "mean_reward",
    "mean_length",
    "objective",
    "surrogate",
    "kl_penalty",
    "entropy_bonus",
    "tokens",
    "low_count",
    "high_cov_count",
    "mean_entropy_low",
    "mean_cov_high_cov",
    "selected",
    "clamped_ratios",
    "term1",
    "term2",
];

/// Streaming metrics CSV writer; rows are flushed as they arrive.
pub struct MetricsWriter {
    path: PathBuf,
    inner: csv::Writer<BufWriter<File>>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, FormatError> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(create(path)?);
        inner
            .write_record(METRICS_COLUMNS)
            .map_err(|source| FormatError::Csv { path: path.to_owned(), source })?;
        Ok(Self { path: path.to_owned(), inner })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<(), FormatError> {
        let csv_err = |source| FormatError::Csv { path: self.path.clone(), source };
        self.inner.serialize(MetricsRecord::from(row)).map_err(csv_err)?;
        self.inner.flush().map_err(|e| FormatError::Io { path: self.path.clone(), source: e })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, FormatError> {
    let mut r = csv::Reader::from_reader(open(path)?);
    r.deserialize().collect::<Result<_, _>>().map_err(|source| FormatError::Csv { path: path.to_owned(), source })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub k: usize,
    pub pass: f64,
    pub avg: f64,
    pub len: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub name: String,
    pub queries: usize,
    pub metrics: Vec<KMetrics>,
}

impl From<&SplitReport> for SplitRecord {
    fn from(s: &SplitReport) -> Self {
        Self {
            name: s.name.clone(),
            queries: s.queries,
            metrics: (0..s.ks.len())
                .map(|i| KMetrics { k: s.ks[i], pass: s.pass_at_k[i], avg: s.avg_at_k[i], len: s.len_at_k[i] })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub seed: u64,
    pub splits: Vec<SplitRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub group: usize,
    pub response: usize,
    pub position: usize,
    pub state: u32,
    pub token: u32,
    pub logprob_old: f64,
    pub logprob_new: f64,
    pub advantage: f64,
    pub entropy: f64,
    pub cov: f64,
    pub beta_con: f64,
    pub in_low: bool,
    pub in_high_cov: bool,
}

/// Debug dump of one token batch.
pub fn write_batch_csv(path: &Path, batch: &TokenBatch) -> Result<(), FormatError> {
    let csv_err = |source| FormatError::Csv { path: path.to_owned(), source };
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in &batch.records {
        w.serialize(BatchRecord {
            group: r.group,
            response: r.response,
            position: r.position,
            state: r.state.0,
            token: r.token,
            logprob_old: r.logprob_old,
            logprob_new: r.logprob_new,
            advantage: r.advantage,
            entropy: r.entropy,
            cov: r.cov,
            beta_con: r.beta_con,
            in_low: r.in_low,
            in_high_cov: r.in_high_cov,
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRecord {
    pub instance: usize,
    pub with_kl: bool,
    pub eta: f64,
    pub term1: f64,
    pub term2: f64,
    pub predicted: f64,
    pub actual: f64,
    pub error: f64,
}

impl From<&ForecastRow> for DynamicsRecord {
    fn from(r: &ForecastRow) -> Self {
        let f = r.forecast;
        Self {
            instance: r.instance,
            with_kl: r.with_kl,
            eta: f.eta,
            term1: f.term1,
            term2: f.term2,
            predicted: f.predicted_delta,
            actual: f.actual_delta,
            error: f.error(),
        }
    }
}

pub fn write_dynamics_csv(path: &Path, rows: &[ForecastRow]) -> Result<(), FormatError> {
    let csv_err = |source| FormatError::Csv { path: path.to_owned(), source };
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(DynamicsRecord::from(r)).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), FormatError> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}
