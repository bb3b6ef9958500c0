//! Experiment configuration, grid execution and report emission.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::analysis::{
    average_auc, cosine_similarity_matrix, roc_auc, win_tie_lose, CosineMatrix, MetricRecord,
    DEFAULT_TIE_THRESHOLD,
};
use crate::data::{load_csv, preprocess, DataError, Schema};
use crate::episode::{split_episode, Episode, SplitConfig};
use crate::exec::Execution;
use crate::model::{positive_scores, EmbeddingStack, Model, ModelConfig, ModelError};
use crate::prior::TaskPrior;
use crate::probe::{transfer_matrix, ProbeConfig, ProbeKind, TransferMatrix};
use crate::seed;
use crate::surgery::{repeat_grid, skip_grid, swap_grid, LayerPlan};
use crate::svg;
use crate::table::Table;
use crate::train::{train, TrainConfig, TrainingCurve};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;
pub const EXIT_FATAL: i32 = 3;

/// Label used for aggregate rows in CSV outputs.
pub const ALL: &str = "*";
pub const CHECKPOINT_FILE: &str = "model.llab";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Data(_) => EXIT_CONFIG,
            RunError::Model(ModelError::Config(_) | ModelError::Checkpoint(_) | ModelError::Io { .. }) => {
                EXIT_CONFIG
            }
            RunError::Model(_) | RunError::Io { .. } => EXIT_FATAL,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Intervention {
    Skip,
    Swap,
    Repeat,
    EarlyExit,
    Probe,
    Cosine,
}

impl Intervention {
    pub const ALL: [Intervention; 6] = [
        Intervention::Skip,
        Intervention::Swap,
        Intervention::Repeat,
        Intervention::EarlyExit,
        Intervention::Probe,
        Intervention::Cosine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Intervention::Skip => "skip",
            Intervention::Swap => "swap",
            Intervention::Repeat => "repeat",
            Intervention::EarlyExit => "early-exit",
            Intervention::Probe => "probe",
            Intervention::Cosine => "cosine",
        }
    }

    fn all() -> Vec<Self> {
        Self::ALL.to_vec()
    }
}

impl fmt::Display for Intervention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Svg,
}

impl Format {
    fn all() -> Vec<Self> {
        vec![Format::Csv, Format::Json, Format::Svg]
    }
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "svg" => Ok(Format::Svg),
            other => Err(format!("unknown format `{other}` (expected csv, json or svg)")),
        }
    }
}

/// A checkpoint path, or an architecture plus training settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<TaskPrior>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainConfig>,
}

impl ModelSource {
    pub fn training_prior(&self) -> TaskPrior {
        self.prior.clone().unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// `count` tasks drawn from `prior` (the training prior when omitted).
    Synthetic {
        count: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prior: Option<TaskPrior>,
    },
    Csv {
        path: PathBuf,
        target: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        schema: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
    },
}

fn default_repeat_k() -> usize {
    2
}
fn default_probes() -> Vec<ProbeKind> {
    vec![ProbeKind::Linear]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_repeat_k")]
    pub repeat_k: usize,
    #[serde(default = "default_probes")]
    pub probes: Vec<ProbeKind>,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub split: SplitConfig,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            repeat_k: default_repeat_k(),
            probes: default_probes(),
            probe: ProbeConfig::default(),
            split: SplitConfig::default(),
        }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("layerlab-out")
}
fn default_tie() -> f64 {
    DEFAULT_TIE_THRESHOLD
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default = "Format::all")]
    pub formats: Vec<Format>,
    #[serde(default = "default_tie")]
    pub tie_threshold: f64,
    #[serde(default = "Intervention::all")]
    pub interventions: Vec<Intervention>,
    #[serde(default)]
    pub execution: Execution,
    pub model: ModelSource,
    #[serde(default)]
    pub datasets: Vec<DatasetSource>,
    #[serde(default)]
    pub grid: GridConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))
    }

    /// Reads a config file. Relative checkpoint, CSV and schema paths are
    /// resolved against the file's directory; `out_dir` is left as given.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = config.model.checkpoint.as_mut() {
            resolve(p);
        }
        for d in &mut config.datasets {
            if let DatasetSource::Csv { path, schema, .. } = d {
                resolve(path);
                if let Some(s) = schema.as_mut() {
                    resolve(s);
                }
            }
        }
        Ok(config)
    }

    pub fn validate(&self, command: Command) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if !(self.tie_threshold.is_finite() && self.tie_threshold >= 0.0) {
            return bad(format!("tie_threshold {} must be >= 0", self.tie_threshold));
        }
        if self.formats.is_empty() {
            return bad("at least one output format is required".into());
        }
        let m = &self.model;
        match (&m.checkpoint, &m.architecture, &m.training) {
            (Some(_), None, None) => {
                if command == Command::Train {
                    return bad("`train` needs [model.architecture] and [model.training], not a checkpoint".into());
                }
            }
            (None, Some(arch), Some(tc)) => {
                arch.validate()?;
                tc.validate()?;
                let prior = m.training_prior();
                prior.validate().map_err(|e| RunError::Config(e.to_string()))?;
                if prior.feature_count_range.1 > arch.max_features {
                    return bad(format!(
                        "training prior draws up to {} features but max_features is {}",
                        prior.feature_count_range.1, arch.max_features
                    ));
                }
            }
            (Some(_), _, _) => return bad("give either model.checkpoint or a training spec, not both".into()),
            _ => return bad("[model] needs `checkpoint` or both [model.architecture] and [model.training]".into()),
        }
        if command == Command::Train {
            return Ok(());
        }
        if self.datasets.is_empty() {
            return bad("at least one [[datasets]] entry is required".into());
        }
        for d in &self.datasets {
            if let DatasetSource::Synthetic { count, prior } = d {
                if *count == 0 {
                    return bad("synthetic dataset count must be positive".into());
                }
                if let Some(p) = prior {
                    p.validate().map_err(|e| RunError::Config(e.to_string()))?;
                }
            }
        }
        let interventions = command.interventions(self);
        if interventions.is_empty() {
            return bad("at least one intervention is required".into());
        }
        if self.grid.repeat_k < 2 {
            return bad(format!("repeat_k {} must be at least 2", self.grid.repeat_k));
        }
        if interventions.contains(&Intervention::Probe) && self.grid.probes.is_empty() {
            return bad("probe intervention requested with an empty probe list".into());
        }
        if self.grid.probe.knn_k == 0 || !(self.grid.probe.linear_reg > 0.0) {
            return bad("knn_k and linear_reg must be positive".into());
        }
        self.grid
            .split
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Train,
    Surgery,
    Probe,
    Similarity,
    EarlyExit,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Surgery => "surgery",
            Command::Probe => "probe",
            Command::Similarity => "similarity",
            Command::EarlyExit => "early-exit",
            Command::Report => "report",
        }
    }

    /// Interventions run by this subcommand. `report` runs the config's
    /// list; the others run their own fixed subset.
    pub fn interventions(self, config: &ExperimentConfig) -> Vec<Intervention> {
        let mut v = match self {
            Command::Train => vec![],
            Command::Surgery => vec![Intervention::Skip, Intervention::Swap, Intervention::Repeat],
            Command::Probe => vec![Intervention::Probe],
            Command::Similarity => vec![Intervention::Cosine],
            Command::EarlyExit => vec![Intervention::EarlyExit],
            Command::Report => config.interventions.clone(),
        };
        v.sort();
        v.dedup();
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetInfo {
    pub name: String,
    pub source: String,
    pub rows: usize,
    pub features: usize,
    pub support: usize,
    pub probe_train: usize,
    pub query: usize,
    pub dropped_columns: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CellFailure {
    pub dataset: String,
    pub cell: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelInfo {
    pub variant: String,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_features: usize,
    pub parameter_count: usize,
    pub checksum: String,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WtlRow {
    pub intervention: String,
    pub plan: String,
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlanSummary {
    pub plan: String,
    pub mean_auc: f64,
    pub mean_delta: f64,
    pub mean_abs_delta: f64,
    pub completed: usize,
}

/// Cell-wise mean over datasets with per-cell completed counts.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanMatrix {
    pub values: Vec<Vec<Option<f64>>>,
    pub completed: Vec<Vec<usize>>,
}

impl MeanMatrix {
    fn from(matrices: &[&Vec<Vec<Option<f64>>>]) -> Self {
        let rows = matrices.iter().map(|m| m.len()).max().unwrap_or(0);
        let cols = matrices.iter().flat_map(|m| m.iter().map(Vec::len)).max().unwrap_or(0);
        let mut sums = vec![vec![0.0; cols]; rows];
        let mut completed = vec![vec![0usize; cols]; rows];
        for m in matrices {
            for (i, row) in m.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    if let Some(v) = v {
                        sums[i][j] += v;
                        completed[i][j] += 1;
                    }
                }
            }
        }
        let values = sums
            .iter()
            .zip(&completed)
            .map(|(s, c)| {
                s.iter()
                    .zip(c)
                    .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
                    .collect()
            })
            .collect();
        Self { values, completed }
    }
}

pub struct ExperimentReport {
    pub command: Command,
    pub config: ExperimentConfig,
    pub interventions: Vec<Intervention>,
    pub model: ModelInfo,
    /// Present when the model was trained by this run.
    pub trained: Option<(Model, TrainingCurve)>,
    pub datasets: Vec<DatasetInfo>,
    pub records: Vec<MetricRecord>,
    pub transfer: BTreeMap<ProbeKind, Vec<(String, TransferMatrix)>>,
    pub cosine: Vec<(String, CosineMatrix)>,
    pub failures: Vec<CellFailure>,
    pub cells_total: usize,
    pub elapsed_seconds: f64,
}

/// Family of a plan string: the part before `:`.
pub fn plan_family(plan: &str) -> &str {
    plan.split(':').next().unwrap_or(plan)
}

impl ExperimentReport {
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            EXIT_OK
        } else {
            EXIT_PARTIAL
        }
    }

    /// Distinct plan strings in first-seen order.
    fn plans(&self) -> Vec<String> {
        let mut seen = Vec::<String>::new();
        for r in &self.records {
            if !seen.contains(&r.plan) {
                seen.push(r.plan.clone());
            }
        }
        seen
    }

    pub fn plan_summaries(&self) -> Vec<PlanSummary> {
        self.plans()
            .into_iter()
            .map(|plan| {
                let rs: Vec<&MetricRecord> = self.records.iter().filter(|r| r.plan == plan).collect();
                let n = rs.len() as f64;
                let aucs: Vec<f64> = rs.iter().map(|r| r.auc).collect();
                PlanSummary {
                    mean_auc: average_auc(&aucs).unwrap_or(f64::NAN),
                    mean_delta: rs.iter().map(|r| r.delta).sum::<f64>() / n,
                    mean_abs_delta: rs.iter().map(|r| r.delta.abs()).sum::<f64>() / n,
                    completed: rs.len(),
                    plan,
                }
            })
            .collect()
    }

    /// Per-plan tallies, then one `*` row per intervention family.
    pub fn wtl_rows(&self) -> Vec<WtlRow> {
        let t = self.config.tie_threshold;
        let mut rows = Vec::new();
        let mut families: Vec<String> = Vec::new();
        for plan in self.plans() {
            let family = plan_family(&plan).to_string();
            if family == "identity" {
                continue;
            }
            let rs: Vec<MetricRecord> = self.records.iter().filter(|r| r.plan == plan).cloned().collect();
            let s = win_tie_lose(&rs, t).expect("threshold validated");
            rows.push(WtlRow {
                intervention: family.clone(),
                plan,
                wins: s.counts.wins,
                ties: s.counts.ties,
                losses: s.counts.losses,
            });
            if !families.contains(&family) {
                families.push(family);
            }
        }
        for family in families {
            let (mut w, mut ti, mut l) = (0, 0, 0);
            for r in rows.iter().filter(|r| r.intervention == family) {
                w += r.wins;
                ti += r.ties;
                l += r.losses;
            }
            rows.push(WtlRow {
                intervention: family,
                plan: ALL.into(),
                wins: w,
                ties: ti,
                losses: l,
            });
        }
        rows
    }

    pub fn mean_transfer(&self, kind: ProbeKind) -> Option<MeanMatrix> {
        let ms = self.transfer.get(&kind)?;
        let vals: Vec<&Vec<Vec<Option<f64>>>> = ms.iter().map(|(_, m)| &m.values).collect();
        Some(MeanMatrix::from(&vals))
    }

    pub fn mean_cosine(&self) -> Option<MeanMatrix> {
        if self.cosine.is_empty() {
            return None;
        }
        let vals: Vec<&Vec<Vec<Option<f64>>>> = self.cosine.iter().map(|(_, m)| &m.values).collect();
        Some(MeanMatrix::from(&vals))
    }

    pub fn completed_cells(&self) -> usize {
        self.cells_total - self.failures.len()
    }
}

struct Prepared {
    info: DatasetInfo,
    episode: Episode,
}

fn model_info(model: &Model, source: &str) -> ModelInfo {
    let c = model.config();
    ModelInfo {
        variant: serde_json::to_value(c.variant)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default(),
        layers: c.layers,
        model_dim: c.model_dim,
        heads: c.heads,
        ff_dim: c.ff_dim,
        max_features: c.max_features,
        parameter_count: model.parameter_count(),
        checksum: format!("{:016x}", model.checksum()),
        source: source.into(),
    }
}

/// Builds and trains a model from the config's training spec. Model and
/// training seeds come from the experiment seed.
pub fn train_model(config: &ExperimentConfig, log: &dyn Fn(&str)) -> Result<(Model, TrainingCurve), RunError> {
    let source = &config.model;
    let (Some(arch), Some(tc)) = (&source.architecture, &source.training) else {
        return Err(RunError::Config("no training spec".into()));
    };
    let arch = ModelConfig {
        seed: seed::derive(config.seed, &[seed::stream::INIT]),
        ..arch.clone()
    };
    let tc = TrainConfig {
        seed: seed::derive(config.seed, &[seed::stream::TRAIN]),
        ..tc.clone()
    };
    let mut model = Model::build(arch)?;
    let prior = source.training_prior();
    let every = (tc.steps / 10).max(1);
    let start = Instant::now();
    let curve = train(&mut model, &prior, &tc, |step, loss| {
        if (step + 1) % every == 0 {
            log(&format!(
                "train step {}/{} loss {loss:.4} ({:.0}s)",
                step + 1,
                tc.steps,
                start.elapsed().as_secs_f64()
            ));
        }
    })?;
    Ok((model, curve))
}

fn load_tables(config: &ExperimentConfig, log: &dyn Fn(&str)) -> Result<Vec<(Table, String, Vec<String>)>, RunError> {
    let mut out = Vec::new();
    for (src, d) in config.datasets.iter().enumerate() {
        match d {
            DatasetSource::Synthetic { count, prior } => {
                let prior = TaskPrior {
                    seed: seed::derive(config.seed, &[seed::stream::DATASET, src as u64]),
                    ..prior.clone().unwrap_or_else(|| config.model.training_prior())
                };
                for i in 0..*count {
                    let mut t = prior
                        .task(i as u64)
                        .map_err(|e| RunError::Config(e.to_string()))?;
                    t.name = format!("synthetic-{src}-{i}");
                    out.push((t, "synthetic".to_string(), Vec::new()));
                }
            }
            DatasetSource::Csv {
                path,
                target,
                schema,
                name,
            } => {
                let schema = schema.as_deref().map(Schema::load).transpose()?;
                let raw = load_csv(path, target, schema.as_ref())?;
                let p = preprocess(&raw)?;
                for w in &p.warnings {
                    log(&format!("{}: {w}", path.display()));
                }
                let mut t = p.table;
                if let Some(n) = name {
                    t.name = n.clone();
                }
                out.push((t, "csv".to_string(), p.dropped));
            }
        }
    }
    let mut seen: Vec<String> = Vec::new();
    for (t, _, _) in &mut out {
        let base = t.name.clone();
        let mut k = 1;
        while seen.contains(&t.name) || t.name == ALL {
            k += 1;
            t.name = format!("{base}.{k}");
        }
        seen.push(t.name.clone());
    }
    Ok(out)
}

enum Job {
    Plan(usize, LayerPlan),
    Exit(usize),
    Probe(usize, ProbeKind),
    Cosine(usize),
}

impl Job {
    fn dataset(&self) -> usize {
        match self {
            Job::Plan(d, _) | Job::Exit(d) | Job::Probe(d, _) | Job::Cosine(d) => *d,
        }
    }

    fn label(&self) -> String {
        match self {
            Job::Plan(_, p) => p.to_string(),
            Job::Exit(_) => "early-exit".into(),
            Job::Probe(_, k) => format!("probe:{}", k.name()),
            Job::Cosine(_) => "cosine".into(),
        }
    }
}

enum JobOutput {
    Records(Vec<MetricRecord>, Vec<CellFailure>),
    Transfer(ProbeKind, TransferMatrix),
    Cosine(CosineMatrix),
}

fn query_auc(logits: &crate::tensor::Tensor, episode: &Episode) -> Result<f64, String> {
    roc_auc(&positive_scores(logits), &episode.query_y).map_err(|e| e.to_string())
}

/// Runs every requested grid cell over every dataset.
pub fn run_experiment(
    config: &ExperimentConfig,
    command: Command,
    log: &dyn Fn(&str),
) -> Result<ExperimentReport, RunError> {
    config.validate(command)?;
    let start = Instant::now();
    let interventions = command.interventions(config);
    let (model, trained, source) = match &config.model.checkpoint {
        Some(path) => (Model::load(path)?, None, "checkpoint"),
        None => {
            let (m, curve) = train_model(config, log)?;
            (m.clone(), Some((m, curve)), "trained")
        }
    };
    let info = model_info(&model, source);
    let mut report = ExperimentReport {
        command,
        config: config.clone(),
        interventions: interventions.clone(),
        model: info,
        trained,
        datasets: Vec::new(),
        records: Vec::new(),
        transfer: BTreeMap::new(),
        cosine: Vec::new(),
        failures: Vec::new(),
        cells_total: 0,
        elapsed_seconds: 0.0,
    };
    if command == Command::Train {
        report.elapsed_seconds = start.elapsed().as_secs_f64();
        return Ok(report);
    }

    let exec = config.execution;
    let layers = model.layer_count();
    let mut prepared: Vec<Prepared> = Vec::new();
    for (d, (table, source, dropped)) in load_tables(config, log)?.into_iter().enumerate() {
        let mut rng = seed::rng_at(config.seed, &[seed::stream::SPLIT, d as u64]);
        match split_episode(&table, &config.grid.split, &mut rng) {
            Ok(mut episode) => {
                episode.standardize_by_support();
                prepared.push(Prepared {
                    info: DatasetInfo {
                        name: table.name.clone(),
                        source,
                        rows: table.n_rows(),
                        features: table.n_features(),
                        support: episode.support.len(),
                        probe_train: episode.probe.len(),
                        query: episode.query.len(),
                        dropped_columns: dropped,
                    },
                    episode,
                });
            }
            Err(e) => {
                report.cells_total += 1;
                report.failures.push(CellFailure {
                    dataset: table.name.clone(),
                    cell: "split".into(),
                    error: e.to_string(),
                });
            }
        }
    }
    log(&format!("{} datasets ready, {} layers", prepared.len(), layers));

    let identity = LayerPlan::identity(layers).map_err(ModelError::from)?;
    let needs_stack = interventions
        .iter()
        .any(|i| matches!(i, Intervention::Probe | Intervention::Cosine));
    let baselines: Vec<(Result<f64, String>, Option<Result<EmbeddingStack, String>>)> =
        exec.map(prepared.iter().collect(), |p| {
            let auc = model
                .forward(&p.episode, &identity, false)
                .map_err(|e| e.to_string())
                .and_then(|out| query_auc(&out.logits, &p.episode));
            let stack = needs_stack.then(|| {
                model
                    .extract_embeddings(&p.episode, &identity)
                    .map_err(|e| e.to_string())
            });
            (auc, stack)
        });

    let mut jobs = Vec::new();
    let mut plan_grid = Vec::new();
    for i in &interventions {
        let plans = match i {
            Intervention::Skip => skip_grid(layers),
            Intervention::Swap => swap_grid(layers),
            Intervention::Repeat => repeat_grid(layers, config.grid.repeat_k),
            _ => continue,
        };
        plan_grid.extend(plans.map_err(ModelError::from)?);
    }
    for (d, p) in prepared.iter().enumerate() {
        report.cells_total += 1;
        match &baselines[d].0 {
            Ok(auc) => report
                .records
                .push(MetricRecord::new(&p.info.name, identity.to_string(), *auc, *auc)),
            Err(e) => report.failures.push(CellFailure {
                dataset: p.info.name.clone(),
                cell: identity.to_string(),
                error: e.clone(),
            }),
        }
        let mut dataset_jobs: Vec<Job> = plan_grid.iter().map(|plan| Job::Plan(d, plan.clone())).collect();
        if interventions.contains(&Intervention::EarlyExit) {
            dataset_jobs.push(Job::Exit(d));
        }
        if interventions.contains(&Intervention::Probe) {
            dataset_jobs.extend(config.grid.probes.iter().map(|&k| Job::Probe(d, k)));
        }
        if interventions.contains(&Intervention::Cosine) {
            dataset_jobs.push(Job::Cosine(d));
        }
        jobs.extend(dataset_jobs);
    }
    log(&format!("running {} grid cells", jobs.len()));

    let grid = &config.grid;
    let decoder = model.decoder_weights();
    let outputs: Vec<Result<JobOutput, String>> = exec.map(jobs.iter().collect(), |job| {
        let d = job.dataset();
        let p = &prepared[d];
        let name = &p.info.name;
        let baseline = baselines[d].0.as_ref().map_err(|_| "baseline failed".to_string());
        let stack = || match &baselines[d].1 {
            Some(Ok(s)) => Ok(s),
            Some(Err(e)) => Err(e.clone()),
            None => Err("embeddings not extracted".to_string()),
        };
        match job {
            Job::Plan(_, plan) => {
                let base = *baseline?;
                let out = model.forward(&p.episode, plan, false).map_err(|e| e.to_string())?;
                let auc = query_auc(&out.logits, &p.episode)?;
                Ok(JobOutput::Records(vec![MetricRecord::new(name, plan.to_string(), auc, base)], vec![]))
            }
            Job::Exit(_) => {
                let base = *baseline?;
                let curve = model.early_exit_curve(&p.episode, None).map_err(|e| e.to_string())?;
                let mut records = Vec::new();
                let mut failures = Vec::new();
                for (i, logits) in curve.iter().enumerate() {
                    let plan = format!("exit:{i}");
                    match query_auc(logits, &p.episode) {
                        Ok(auc) => records.push(MetricRecord::new(name, plan, auc, base)),
                        Err(e) => failures.push(CellFailure {
                            dataset: name.clone(),
                            cell: plan,
                            error: e,
                        }),
                    }
                }
                Ok(JobOutput::Records(records, failures))
            }
            Job::Probe(_, kind) => {
                let stack = stack()?;
                let m = transfer_matrix(stack, *kind, &grid.probe, &decoder, exec);
                Ok(JobOutput::Transfer(*kind, m))
            }
            Job::Cosine(_) => {
                let stack = stack()?;
                let m = cosine_similarity_matrix(stack).map_err(|e| e.to_string())?;
                Ok(JobOutput::Cosine(m))
            }
        }
    });

    for (job, out) in jobs.iter().zip(outputs) {
        let name = prepared[job.dataset()].info.name.clone();
        match out {
            Ok(JobOutput::Records(records, failures)) => {
                if matches!(job, Job::Exit(_)) {
                    report.cells_total += records.len() + failures.len();
                } else {
                    report.cells_total += 1;
                }
                report.records.extend(records);
                report.failures.extend(failures);
            }
            Ok(JobOutput::Transfer(kind, m)) => {
                report.cells_total += 1;
                report.transfer.entry(kind).or_default().push((name, m));
            }
            Ok(JobOutput::Cosine(m)) => {
                report.cells_total += 1;
                report.cosine.push((name, m));
            }
            Err(error) => {
                report.cells_total += 1;
                report.failures.push(CellFailure {
                    dataset: name,
                    cell: job.label(),
                    error,
                });
            }
        }
    }
    // Records in dataset order, then grid order within a dataset.
    let order: BTreeMap<&str, usize> = prepared
        .iter()
        .enumerate()
        .map(|(i, p)| (p.info.name.as_str(), i))
        .collect();
    let records = std::mem::take(&mut report.records);
    let mut indexed: Vec<(usize, usize, MetricRecord)> = records
        .into_iter()
        .enumerate()
        .map(|(k, r)| (order[r.dataset.as_str()], k, r))
        .collect();
    indexed.sort_by_key(|(d, k, _)| (*d, *k));
    report.records = indexed.into_iter().map(|(_, _, r)| r).collect();
    report.datasets = prepared.into_iter().map(|p| p.info).collect();
    report.elapsed_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, RunError> {
    let f = std::fs::File::create(path).map_err(io_err(path))?;
    Ok(csv::Writer::from_writer(f))
}

fn csv_done(w: csv::Writer<std::fs::File>, path: &Path) -> Result<(), RunError> {
    w.into_inner()
        .map_err(|e| RunError::Io {
            path: path.display().to_string(),
            source: e.into_error(),
        })?
        .sync_all()
        .map_err(io_err(path))
}

fn csv_row(w: &mut csv::Writer<std::fs::File>, path: &Path, fields: &[String]) -> Result<(), RunError> {
    w.write_record(fields).map_err(|e| RunError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    })
}

/// Matrix CSV: one block per dataset, then the `*` mean block.
fn write_matrix_csv(
    path: &Path,
    first: &str,
    per_dataset: &[(&str, &Vec<Vec<Option<f64>>>)],
    mean: Option<&MeanMatrix>,
) -> Result<(), RunError> {
    let n = per_dataset.iter().map(|(_, m)| m.len()).max().unwrap_or(0);
    let mut w = csv_writer(path)?;
    let mut header = vec!["dataset".to_string(), first.to_string()];
    header.extend((0..n).map(|j| format!("layer_{j}")));
    csv_row(&mut w, path, &header)?;
    let mut blocks: Vec<(&str, &Vec<Vec<Option<f64>>>)> = per_dataset.to_vec();
    if let Some(m) = mean {
        blocks.push((ALL, &m.values));
    }
    for (name, m) in blocks {
        for (i, row) in m.iter().enumerate() {
            let mut fields = vec![name.to_string(), i.to_string()];
            fields.extend(row.iter().map(|v| fmt_opt(*v)));
            csv_row(&mut w, path, &fields)?;
        }
    }
    csv_done(w, path)
}

fn write_text(path: &Path, text: &str) -> Result<(), RunError> {
    std::fs::write(path, text).map_err(io_err(path))
}

/// Fails before writing any report file when `dir` cannot be written.
pub fn check_writable(dir: &Path) -> Result<(), RunError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let probe = dir.join(".layerlab-write-check");
    std::fs::write(&probe, b"").map_err(io_err(dir))?;
    std::fs::remove_file(&probe).map_err(io_err(dir))
}

/// Writes the report in the requested formats and returns the file names
/// written, in write order.
pub fn emit_report(report: &ExperimentReport, formats: &[Format], dir: &Path) -> Result<Vec<String>, RunError> {
    check_writable(dir)?;
    let mut files: Vec<String> = Vec::new();
    let mut put = |name: &str| files.push(name.to_string());

    if let Some((model, _)) = &report.trained {
        let path = dir.join(CHECKPOINT_FILE);
        model.save(&path)?;
        put(CHECKPOINT_FILE);
    }
    let analysis = report.command != Command::Train;
    let wtl = report.wtl_rows();
    let summaries = report.plan_summaries();

    if formats.contains(&Format::Csv) {
        if let Some((_, curve)) = &report.trained {
            let path = dir.join("training.csv");
            let mut w = csv_writer(&path)?;
            csv_row(&mut w, &path, &["step".into(), "loss".into(), "grad_norm".into(), "learning_rate".into()])?;
            for (i, l) in curve.loss.iter().enumerate() {
                csv_row(
                    &mut w,
                    &path,
                    &[i.to_string(), fmt_f(*l), fmt_f(curve.grad_norm[i]), fmt_f(curve.learning_rate[i])],
                )?;
            }
            csv_done(w, &path)?;
            put("training.csv");
        }
        if analysis {
            let path = dir.join("records.csv");
            let mut w = csv_writer(&path)?;
            csv_row(&mut w, &path, &["dataset", "plan", "auc", "baseline_auc", "delta"].map(String::from))?;
            for r in &report.records {
                csv_row(
                    &mut w,
                    &path,
                    &[r.dataset.clone(), r.plan.clone(), fmt_f(r.auc), fmt_f(r.baseline_auc), fmt_f(r.delta)],
                )?;
            }
            csv_done(w, &path)?;
            put("records.csv");

            let path = dir.join("summary.csv");
            let mut w = csv_writer(&path)?;
            csv_row(
                &mut w,
                &path,
                &["plan", "mean_auc", "mean_delta", "mean_abs_delta", "completed"].map(String::from),
            )?;
            for s in &summaries {
                csv_row(
                    &mut w,
                    &path,
                    &[s.plan.clone(), fmt_f(s.mean_auc), fmt_f(s.mean_delta), fmt_f(s.mean_abs_delta), s.completed.to_string()],
                )?;
            }
            csv_done(w, &path)?;
            put("summary.csv");

            let path = dir.join("wtl.csv");
            let mut w = csv_writer(&path)?;
            csv_row(&mut w, &path, &["intervention", "plan", "wins", "ties", "losses"].map(String::from))?;
            for r in &wtl {
                csv_row(
                    &mut w,
                    &path,
                    &[r.intervention.clone(), r.plan.clone(), r.wins.to_string(), r.ties.to_string(), r.losses.to_string()],
                )?;
            }
            csv_done(w, &path)?;
            put("wtl.csv");

            for (kind, ms) in &report.transfer {
                let name = format!("transfer_{}.csv", kind.name());
                let blocks: Vec<(&str, &Vec<Vec<Option<f64>>>)> =
                    ms.iter().map(|(d, m)| (d.as_str(), &m.values)).collect();
                write_matrix_csv(&dir.join(&name), "trained_on", &blocks, report.mean_transfer(*kind).as_ref())?;
                put(&name);
            }
            if report.interventions.contains(&Intervention::Cosine) {
                let blocks: Vec<(&str, &Vec<Vec<Option<f64>>>)> =
                    report.cosine.iter().map(|(d, m)| (d.as_str(), &m.values)).collect();
                write_matrix_csv(&dir.join("cosine.csv"), "layer", &blocks, report.mean_cosine().as_ref())?;
                put("cosine.csv");
            }
        }
    }

    if formats.contains(&Format::Svg) && analysis {
        for (name, text) in figures(report, &summaries) {
            write_text(&dir.join(&name), &text)?;
            put(&name);
        }
    }

    if formats.contains(&Format::Json) {
        put("manifest.json");
        let manifest = manifest(report, &files, &wtl, &summaries);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        write_text(&dir.join("manifest.json"), &text)?;
    }
    Ok(files)
}

fn summary_of<'a>(summaries: &'a [PlanSummary], plan: &str) -> Option<&'a PlanSummary> {
    summaries.iter().find(|s| s.plan == plan)
}

fn figures(report: &ExperimentReport, summaries: &[PlanSummary]) -> Vec<(String, String)> {
    let layers = report.model.layers;
    let baseline = summary_of(summaries, "identity").map(|s| s.mean_auc);
    let mut out = Vec::new();
    let curve = |prefix: &str, suffix: &str| -> Vec<Option<f64>> {
        (0..layers)
            .map(|i| summary_of(summaries, &format!("{prefix}:{i}{suffix}")).map(|s| s.mean_auc))
            .collect()
    };
    let baseline_series = || svg::Series {
        name: "baseline",
        points: vec![baseline; layers],
    };
    let has = |i: Intervention| report.interventions.contains(&i);
    if has(Intervention::Skip) {
        let chart = svg::line_chart(
            "Mean AUC with one layer skipped",
            "skipped layer",
            "mean AUC",
            &[svg::Series { name: "skip", points: curve("skip", "") }, baseline_series()],
        );
        out.push(("fig_skip.svg".into(), chart));
    }
    if has(Intervention::Repeat) {
        let k = report.config.grid.repeat_k;
        let chart = svg::line_chart(
            &format!("Mean AUC with one layer repeated {k} times"),
            "repeated layer",
            "mean AUC",
            &[
                svg::Series {
                    name: "repeat",
                    points: curve("repeat", &format!("x{k}")),
                },
                baseline_series(),
            ],
        );
        out.push(("fig_repeat.svg".into(), chart));
    }
    if has(Intervention::EarlyExit) {
        let chart = svg::line_chart(
            "Mean AUC exiting after each layer",
            "exit layer",
            "mean AUC",
            &[svg::Series { name: "early exit", points: curve("exit", "") }, baseline_series()],
        );
        out.push(("fig_early_exit.svg".into(), chart));
    }
    if has(Intervention::Swap) {
        let mut m = vec![vec![None; layers]; layers];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate().skip(i + 1) {
                *cell = summary_of(summaries, &format!("swap:{i}-{j}")).map(|s| s.mean_delta);
            }
        }
        out.push((
            "fig_swap.svg".into(),
            svg::heatmap("Mean AUC change from swapping layers i and j", "layer i", "layer j", &m),
        ));
    }
    for kind in report.transfer.keys() {
        if let Some(m) = report.mean_transfer(*kind) {
            out.push((
                format!("fig_transfer_{}.svg", kind.name()),
                svg::heatmap(
                    &format!("{} probe AUC (mean over datasets)", kind.name()),
                    "trained on layer",
                    "evaluated on layer",
                    &m.values,
                ),
            ));
        }
    }
    if let Some(m) = report.mean_cosine() {
        out.push((
            "fig_cosine.svg".into(),
            svg::heatmap(
                "Per-row cosine similarity between layers (mean)",
                "layer",
                "layer",
                &m.values,
            ),
        ));
    }
    out
}

fn matrix_json(m: &[Vec<Option<f64>>]) -> serde_json::Value {
    json!(m)
}

fn manifest(
    report: &ExperimentReport,
    files: &[String],
    wtl: &[WtlRow],
    summaries: &[PlanSummary],
) -> serde_json::Value {
    let training = report.trained.as_ref().map(|(_, c)| {
        json!({
            "steps": c.loss.len(),
            "initial_loss": c.loss.first(),
            "final_loss": c.tail_mean(100),
        })
    });
    let transfer: serde_json::Map<String, serde_json::Value> = report
        .transfer
        .keys()
        .filter_map(|k| report.mean_transfer(*k).map(|m| (k.name().to_string(), matrix_json(&m.values))))
        .collect();
    json!({
        "tool": "layerlab",
        "version": env!("CARGO_PKG_VERSION"),
        "command": report.command.name(),
        "seed": report.config.seed,
        "tie_threshold": report.config.tie_threshold,
        "interventions": report.interventions.iter().map(|i| i.name()).collect::<Vec<_>>(),
        "config": serde_json::to_value(&report.config).expect("config serializes"),
        "model": report.model,
        "training": training,
        "datasets": report.datasets,
        "files": files,
        "cells": {
            "total": report.cells_total,
            "completed": report.completed_cells(),
            "failed": report.failures.len(),
        },
        "records": report.records.len(),
        "failures": report.failures,
        "summary": summaries,
        "wtl": wtl,
        "transfer_mean": transfer,
        "cosine": {
            "method": "per-row cosine averaged over rows",
            "excluded_zero_norm_rows": report.cosine.iter().map(|(_, m)| m.total_excluded()).sum::<usize>(),
            "mean": report.mean_cosine().map(|m| matrix_json(&m.values)),
        },
        "elapsed_seconds": report.elapsed_seconds,
    })
}
