//! Declarative experiment harness.
//!
//! An [`ExperimentSpec`] names a setup (tasks and fixtures), a list of
//! methods (single objectives or multi-stage pipelines), a list of seeds and
//! a trajectory budget. [`run_experiment`] executes every (method, seed)
//! cell from the same per-seed base policy, evaluates it, and records the
//! outcome in a manifest keyed by the cell's config hash. The study
//! functions in this module build the summary tables on top.

mod setup;
mod single;
mod studies;
mod tables;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use setup::{
    fixture_dir, prepare_seed, prepare_teacher, seed_data, BaseConfig, Prepared, ResponseFormat, SeedData, SetupConfig,
    TeacherConfig, TeacherFixture,
};
pub use single::{train_run, RunConfig, StageCheckpoint, TrainManifest};
pub use studies::{
    ablation_study, forgetting_study, ratio_composition, ratio_sweep, tau_sweep, AblationOutcome, ForgettingOutcome,
    SweepOutcome, DEFAULT_RATIOS, DEFAULT_TAUS, RECOMMENDED_TAU,
};
pub use tables::{mean_std, Row, Table};

use crate::error::{Error, Result};
use crate::metrics::{accuracy, evaluate, EvalConfig, EvalReport};
use crate::objectives::{ObjectiveConfig, ObjectiveKind};
use crate::persistence::{
    append_record, checkpoint_hash, config_hash, read_json, read_records, save_checkpoint, write_json,
};
use crate::policy::{Policy, SamplerConfig, TokenId};
use crate::seed::derive_seed;
use crate::tasks::{make_task, GroupCompositionConfig};
use crate::trainer::{run_pipeline, MonitorConfig, OptimizerConfig, RunContext, RunRecord, StageConfig};

/// Version of the experiment config and manifest formats.
pub const SCHEMA_VERSION: u32 = 1;

/// One stage of a method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodStage {
    pub objective: ObjectiveConfig,
    /// Group composition; defaults by objective kind when absent.
    #[serde(default)]
    pub group: Option<GroupCompositionConfig>,
}

/// A labelled method: one objective or a pipeline of several.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub label: String,
    pub stages: Vec<MethodStage>,
}

impl MethodSpec {
    pub fn single(kind: ObjectiveKind) -> Self {
        Self::from_objective(kind.label(), ObjectiveConfig::new(kind))
    }

    pub fn from_objective(label: impl Into<String>, objective: ObjectiveConfig) -> Self {
        MethodSpec {
            label: label.into(),
            stages: vec![MethodStage { objective, group: None }],
        }
    }

    /// Stages run back to back, sharing the budget equally.
    pub fn pipeline(label: impl Into<String>, kinds: &[ObjectiveKind]) -> Self {
        MethodSpec {
            label: label.into(),
            stages: kinds
                .iter()
                .map(|&k| MethodStage {
                    objective: ObjectiveConfig::new(k),
                    group: None,
                })
                .collect(),
        }
    }

    pub fn with_group(mut self, group: GroupCompositionConfig) -> Self {
        for s in &mut self.stages {
            s.group = Some(group);
        }
        self
    }

    /// The objective kind when the method has exactly one stage.
    pub fn single_kind(&self) -> Option<ObjectiveKind> {
        match self.stages.as_slice() {
            [s] => Some(s.objective.kind),
            _ => None,
        }
    }
}

/// Training volume shared by every method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budget {
    /// Total responses consumed by one run.
    pub trajectories: usize,
    /// Responses per optimizer step: queries for single-trajectory methods,
    /// queries × K for group methods.
    pub per_step: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            trajectories: 8000,
            per_step: 16,
        }
    }
}

impl Budget {
    pub fn steps(&self) -> usize {
        self.trajectories / self.per_step.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_step == 0 || self.trajectories == 0 {
            return Err(Error::Config("budget sizes must be positive".into()));
        }
        if self.trajectories % self.per_step != 0 {
            return Err(Error::Config(format!(
                "budget.trajectories ({}) must be a multiple of budget.per_step ({})",
                self.trajectories, self.per_step
            )));
        }
        Ok(())
    }
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig::adam(2e-4)
}

fn default_eval() -> EvalConfig {
    EvalConfig {
        n_samples: 256,
        ks: vec![1, 8, 64],
        ..EvalConfig::default()
    }
}

fn default_monitor() -> MonitorConfig {
    MonitorConfig {
        kl_every: 25,
        kl_pairs: 64,
        ..MonitorConfig::default()
    }
}

fn default_side_samples() -> usize {
    4
}

fn default_threads() -> usize {
    1
}

/// Grids for the sweep studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub taus: Vec<f64>,
    /// `(N_demo, N_sample)` pairs.
    pub ratios: Vec<(usize, usize)>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            taus: DEFAULT_TAUS.to_vec(),
            ratios: DEFAULT_RATIOS.to_vec(),
        }
    }
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub name: String,
    pub setup: SetupConfig,
    pub methods: Vec<MethodSpec>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub budget: Budget,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
    /// Rollout sampler for self-generated and teacher group members.
    #[serde(default)]
    pub rollout: SamplerConfig,
    #[serde(default = "default_eval")]
    pub eval: EvalConfig,
    #[serde(default = "default_monitor")]
    pub monitor: MonitorConfig,
    #[serde(default = "default_side_samples")]
    pub side_eval_samples: usize,
    #[serde(default)]
    pub sweep: SweepConfig,
    /// Worker threads for independent cells.
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub fixture_dir: Option<PathBuf>,
}

impl ExperimentSpec {
    /// Modadd M=97 with a side task, five seeds and the default budget.
    pub fn desk(name: impl Into<String>, methods: Vec<MethodSpec>) -> Self {
        ExperimentSpec {
            schema_version: SCHEMA_VERSION,
            name: name.into(),
            setup: SetupConfig::desk_default(),
            methods,
            seeds: (0..5).collect(),
            budget: Budget::default(),
            optimizer: default_optimizer(),
            rollout: SamplerConfig::default(),
            eval: default_eval(),
            monitor: default_monitor(),
            side_eval_samples: default_side_samples(),
            sweep: SweepConfig::default(),
            threads: default_threads(),
            output_dir: None,
            fixture_dir: None,
        }
    }

    /// SFT, GFT, GRPO and both single ablations.
    pub fn standard_methods() -> Vec<MethodSpec> {
        [
            ObjectiveKind::Sft,
            ObjectiveKind::Gft,
            ObjectiveKind::Grpo,
            ObjectiveKind::GftNoGal,
            ObjectiveKind::GftNoDcr,
        ]
        .into_iter()
        .map(MethodSpec::single)
        .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        let mut labels = HashSet::new();
        for m in &self.methods {
            if m.label.is_empty() || m.label == "base" || m.label.contains(['/', '\\']) {
                return Err(Error::Config(format!("invalid method label `{}`", m.label)));
            }
            if !labels.insert(m.label.as_str()) {
                return Err(Error::Config(format!("duplicate method label `{}`", m.label)));
            }
        }
        self.setup.validate().map_err(|e| e.at("setup"))?;
        self.budget.validate().map_err(|e| e.at("budget"))?;
        self.optimizer.validate().map_err(|e| e.at("optimizer"))?;
        self.rollout.validate().map_err(|e| e.at("rollout"))?;
        self.eval.sampler().validate().map_err(|e| e.at("eval"))?;
        if self.eval.ks.iter().any(|&k| k == 0 || k > self.eval.n_samples) {
            return Err(Error::Config(format!(
                "every eval k must lie in [1, n_samples = {}]",
                self.eval.n_samples
            )));
        }
        if self.side_eval_samples == 0 {
            return Err(Error::Config("side_eval_samples must be at least 1".into()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            for (j, s) in self.stage_configs(m).map_err(|e| e.at(&format!("methods[{i}]")))?.iter().enumerate() {
                s.validate().map_err(|e| e.at(&format!("methods[{i}].stages[{j}]")))?;
            }
        }
        Ok(())
    }

    /// Concrete stages for `method` under the matched budget.
    pub fn stage_configs(&self, method: &MethodSpec) -> Result<Vec<StageConfig>> {
        if method.stages.is_empty() {
            return Err(Error::Config(format!("method `{}` has no stages", method.label)));
        }
        let total = self.budget.steps();
        let n = method.stages.len();
        if total < n {
            return Err(Error::Config(format!(
                "method `{}`: budget of {total} steps cannot cover {n} stages",
                method.label
            )));
        }
        method
            .stages
            .iter()
            .enumerate()
            .map(|(i, ms)| {
                let steps = total / n + if i == n - 1 { total % n } else { 0 };
                let name = if n == 1 {
                    method.label.clone()
                } else {
                    format!("{}-{}", i + 1, ms.objective.kind.label())
                };
                let mut st = StageConfig::new(name, ms.objective, steps);
                if let Some(g) = ms.group {
                    st.group = g;
                }
                st.sampler = self.rollout;
                st.optimizer = self.optimizer;
                st.batch_queries = if ms.objective.kind.is_single_trajectory() {
                    self.budget.per_step
                } else {
                    let k = st.group.k();
                    if k == 0 || self.budget.per_step % k != 0 {
                        return Err(Error::Config(format!(
                            "method `{}`: budget.per_step ({}) must be a multiple of the group size ({k})",
                            method.label, self.budget.per_step
                        )));
                    }
                    self.budget.per_step / k
                };
                Ok(st)
            })
            .collect()
    }
}

/// Whether a manifest entry completed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

/// Structured error stored for a failed cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub kind: String,
    pub message: String,
}

impl From<&Error> for CellError {
    fn from(e: &Error) -> Self {
        CellError {
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub config_hash: String,
    pub status: CellStatus,
    #[serde(default)]
    pub error: Option<CellError>,
    #[serde(default)]
    pub checkpoint_hash: Option<String>,
    /// Paths relative to the output directory.
    #[serde(default)]
    pub outputs: Vec<String>,
}

/// Binds each cell key (`method/seedN`, or `base/seedN`) to its config hash
/// and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub name: String,
    pub cells: BTreeMap<String, ManifestEntry>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load(dir: &Path) -> Result<Option<Manifest>> {
        let path = dir.join(Self::FILE);
        if !path.exists() {
            return Ok(None);
        }
        let m: Manifest = read_json(&path)?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "{}: manifest schema_version {} is not supported",
                path.display(),
                m.schema_version
            )));
        }
        Ok(Some(m))
    }
}

/// How a cell's result was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellOutcome {
    Ran,
    Cached,
    Failed,
}

/// Final measurements of one cell, stored as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub report: EvalReport,
    pub side_accuracy: Option<f64>,
    pub checkpoint_hash: String,
    pub trajectories: usize,
    pub wall_time: f64,
}

/// One (method, seed) cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    pub outcome: CellOutcome,
    pub summary: Option<CellSummary>,
    pub records: Vec<RunRecord>,
    pub error: Option<CellError>,
}

/// The untrained base policy of one seed.
#[derive(Debug, Clone)]
pub struct SeedBase {
    pub seed: u64,
    pub summary: Option<CellSummary>,
    pub error: Option<CellError>,
}

/// Everything produced by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub name: String,
    pub teacher_accuracy: Option<f64>,
    pub bases: Vec<SeedBase>,
    pub cells: Vec<CellResult>,
    /// Eval queries × samples per query, recorded alongside every mean.
    pub n_eval_queries: usize,
    pub n_eval_samples: usize,
}

impl ExperimentResult {
    pub fn methods(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.cells
            .iter()
            .filter(|c| seen.insert(c.method.clone()))
            .map(|c| c.method.clone())
            .collect()
    }

    pub fn cell(&self, method: &str, seed: u64) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.method == method && c.seed == seed)
    }

    pub fn base(&self, seed: u64) -> Option<&CellSummary> {
        self.bases.iter().find(|b| b.seed == seed)?.summary.as_ref()
    }

    /// `(seed, value)` for every successful cell of `method`.
    pub fn per_seed(&self, method: &str, f: impl Fn(&CellSummary) -> Option<f64>) -> Vec<(u64, f64)> {
        self.cells
            .iter()
            .filter(|c| c.method == method)
            .filter_map(|c| Some((c.seed, f(c.summary.as_ref()?)?)))
            .collect()
    }

    /// `(seed, value)` for every seed whose base was evaluated.
    pub fn base_per_seed(&self, f: impl Fn(&CellSummary) -> Option<f64>) -> Vec<(u64, f64)> {
        self.bases
            .iter()
            .filter_map(|b| Some((b.seed, f(b.summary.as_ref()?)?)))
            .collect()
    }

    /// Values of `f` for methods `a` and `b` on seeds where both succeeded.
    pub fn paired(&self, a: &str, b: &str, f: impl Fn(&CellSummary) -> Option<f64>) -> Vec<(u64, f64, f64)> {
        let bs = self.per_seed(b, &f);
        self.per_seed(a, &f)
            .into_iter()
            .filter_map(|(s, x)| bs.iter().find(|(t, _)| *t == s).map(|&(_, y)| (s, x, y)))
            .collect()
    }

    /// Side-task accuracy lost relative to the seed's base.
    pub fn side_drop(&self, method: &str) -> Vec<(u64, f64)> {
        self.per_seed(method, |c| c.side_accuracy)
            .into_iter()
            .filter_map(|(s, after)| Some((s, self.base(s)?.side_accuracy? - after)))
            .collect()
    }

    pub fn failures(&self) -> impl Iterator<Item = &CellResult> {
        self.cells.iter().filter(|c| c.outcome == CellOutcome::Failed)
    }
}

/// Runs `f` over `items` on up to `threads` workers, keeping input order.
fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                out.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(r);
            });
        }
    });
    out.into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .map(|r| r.expect("every item is processed"))
        .collect()
}

/// Single writer for the manifest file.
struct ManifestWriter {
    dir: Option<PathBuf>,
    manifest: Mutex<Manifest>,
}

impl ManifestWriter {
    fn record(&self, key: String, entry: ManifestEntry) -> Result<()> {
        let mut m = self.manifest.lock().unwrap_or_else(|e| e.into_inner());
        m.cells.insert(key, entry);
        match &self.dir {
            Some(d) => write_json(&d.join(Manifest::FILE), &*m),
            None => Ok(()),
        }
    }

    fn cached(&self, key: &str, hash: &str) -> bool {
        let m = self.manifest.lock().unwrap_or_else(|e| e.into_inner());
        m.cells
            .get(key)
            .is_some_and(|e| e.status == CellStatus::Ok && e.config_hash == hash)
    }
}

enum Job<'a> {
    Base(usize),
    Method(usize, &'a MethodSpec),
}

/// Evaluation settings for one seed: common random numbers across methods.
fn eval_config(spec: &ExperimentSpec, seed: u64) -> EvalConfig {
    EvalConfig {
        seed: derive_seed(&[spec.eval.seed, seed, 0xE7A1]),
        ..spec.eval.clone()
    }
}

fn kl_pairs(spec: &ExperimentSpec, prep: &Prepared) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
    let mut pairs = prep.train_pairs();
    pairs.truncate(spec.monitor.kl_pairs);
    pairs
}

fn measure(spec: &ExperimentSpec, prep: &Prepared, policy: &Policy) -> Result<(EvalReport, Option<f64>)> {
    let cfg = eval_config(spec, prep.seed);
    let report = evaluate(
        policy,
        &prep.task,
        &prep.eval_queries(),
        &kl_pairs(spec, prep),
        Some(&prep.base),
        &cfg,
    )?;
    let side = match &prep.side {
        Some(side) if !prep.side_eval.is_empty() => {
            let sampler = SamplerConfig {
                seed: derive_seed(&[cfg.seed, 0x51DE]),
                ..cfg.sampler()
            };
            Some(accuracy(policy, side, &prep.side_eval, spec.side_eval_samples, &sampler)?)
        }
        _ => None,
    };
    Ok((report, side))
}

fn base_summary(spec: &ExperimentSpec, prep: &Prepared) -> Result<CellSummary> {
    let t0 = Instant::now();
    let (report, side_accuracy) = measure(spec, prep, &prep.base)?;
    Ok(CellSummary {
        report,
        side_accuracy,
        checkpoint_hash: checkpoint_hash(&prep.base)?,
        trajectories: 0,
        wall_time: t0.elapsed().as_secs_f64(),
    })
}

fn run_cell(
    spec: &ExperimentSpec,
    prep: &Prepared,
    method: &MethodSpec,
    dir: Option<&Path>,
) -> Result<(CellSummary, Vec<RunRecord>)> {
    let t0 = Instant::now();
    let stages = spec.stage_configs(method)?;
    let ctx = RunContext {
        task: &prep.task,
        train_queries: prep.train_queries(),
        kl_pairs: kl_pairs(spec, prep),
        eval_queries: prep.eval_queries(),
        monitor: spec.monitor.clone(),
        seed: derive_seed(&[prep.seed, 0x7EA1]),
    };
    let records_path = dir.map(|d| d.join("records.jsonl"));
    if let Some(p) = &records_path {
        if p.exists() {
            std::fs::remove_file(p).map_err(|e| Error::io(p, e))?;
        }
    }
    let mut policy = prep.base.thaw();
    let outcome = run_pipeline(&mut policy, &ctx, &stages, &mut |r| match &records_path {
        Some(p) => append_record(p, r),
        None => Ok(()),
    })?;
    let (report, side_accuracy) = measure(spec, prep, &policy)?;
    let checkpoint_hash = match dir {
        Some(d) => {
            for (name, snap) in &outcome.checkpoints[..outcome.checkpoints.len() - 1] {
                save_checkpoint(&d.join(format!("stage-{name}.ckpt")), snap)?;
            }
            save_checkpoint(&d.join("final.ckpt"), &policy)?
        }
        None => checkpoint_hash(&policy)?,
    };
    let trajectories = stages.iter().map(|s| s.steps * s.trajectories_per_step()).sum();
    let summary = CellSummary {
        report,
        side_accuracy,
        checkpoint_hash,
        trajectories,
        wall_time: t0.elapsed().as_secs_f64(),
    };
    if let Some(d) = dir {
        write_json(&d.join("summary.json"), &summary)?;
    }
    Ok((summary, outcome.records))
}

fn load_cached(dir: &Path, with_records: bool) -> Result<(CellSummary, Vec<RunRecord>)> {
    let summary: CellSummary = read_json(&dir.join("summary.json"))?;
    let records = if with_records {
        read_records(&dir.join("records.jsonl"))?
    } else {
        Vec::new()
    };
    Ok((summary, records))
}

fn cell_outputs(dir: &Path, out: &Path) -> Vec<String> {
    let mut files: Vec<String> = std::fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .filter_map(|e| e.path().strip_prefix(out).ok().map(|p| p.display().to_string()))
                .collect()
        })
        .unwrap_or_default();
    files.sort();
    files
}

/// Executes every cell of `spec`. With an output directory, cells whose
/// manifest entry matches their config hash are loaded instead of re-run
/// unless `force` is set. A failing cell is recorded and the rest proceed.
pub fn run_experiment(spec: &ExperimentSpec, force: bool) -> Result<ExperimentResult> {
    spec.validate()?;
    let out = spec.output_dir.clone();
    if let Some(o) = &out {
        std::fs::create_dir_all(o).map_err(|e| Error::io(o, e))?;
    }
    let fixtures = fixture_dir(spec.fixture_dir.as_deref(), out.as_deref());
    if let Some(f) = &fixtures {
        std::fs::create_dir_all(f).map_err(|e| Error::io(f, e))?;
    }
    let previous = match &out {
        Some(o) => Manifest::load(o)?,
        None => None,
    };
    let writer = ManifestWriter {
        dir: out.clone(),
        manifest: Mutex::new(previous.unwrap_or_else(|| Manifest {
            schema_version: SCHEMA_VERSION,
            name: spec.name.clone(),
            cells: BTreeMap::new(),
        })),
    };

    let teacher = match &spec.setup.teacher {
        Some(cfg) => {
            let task = make_task(spec.setup.task)?;
            let t = prepare_teacher(&task, cfg, fixtures.as_deref())?;
            log::info!("teacher accuracy {:.3}", t.accuracy);
            Some(t)
        }
        None => None,
    };
    let prepared: Vec<Result<Prepared>> = par_map(&spec.seeds, spec.threads, |&seed| {
        prepare_seed(&spec.setup, teacher.as_ref(), seed, fixtures.as_deref())
    });

    let mut jobs = Vec::new();
    for (si, _) in spec.seeds.iter().enumerate() {
        jobs.push(Job::Base(si));
        for m in &spec.methods {
            jobs.push(Job::Method(si, m));
        }
    }

    enum Done {
        Base(SeedBase),
        Cell(CellResult),
    }
    let done = par_map(&jobs, spec.threads, |job| {
        let (si, method) = match job {
            Job::Base(si) => (*si, None),
            Job::Method(si, m) => (*si, Some(*m)),
        };
        let seed = spec.seeds[si];
        let label = method.map_or("base", |m| m.label.as_str());
        let key = format!("{label}/seed{seed}");
        let hash_input = serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "setup": spec.setup,
            "seed": seed,
            "eval": spec.eval,
            "monitor": spec.monitor,
            "side_eval_samples": spec.side_eval_samples,
            "method": method.map(|m| serde_json::json!({
                "spec": m,
                "budget": spec.budget,
                "optimizer": spec.optimizer,
                "rollout": spec.rollout,
            })),
        });
        let hash = config_hash(&hash_input).unwrap_or_default();
        let dir = out.as_ref().map(|o| o.join("cells").join(label).join(format!("seed{seed}")));

        let result = (|| -> Result<(CellSummary, Vec<RunRecord>, CellOutcome)> {
            if let Some(d) = &dir {
                if !force && writer.cached(&key, &hash) {
                    match load_cached(d, method.is_some()) {
                        Ok((s, r)) => return Ok((s, r, CellOutcome::Cached)),
                        Err(e) => log::warn!("re-running {key}: cached outputs unreadable: {e}"),
                    }
                }
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            let prep = prepared[si].as_ref().map_err(|e| Error::Config(format!("seed {seed} setup failed: {e}")))?;
            log::info!("running {key}");
            match method {
                None => {
                    let s = base_summary(spec, prep)?;
                    if let Some(d) = &dir {
                        write_json(&d.join("summary.json"), &s)?;
                    }
                    Ok((s, Vec::new(), CellOutcome::Ran))
                }
                Some(m) => {
                    let (s, r) = run_cell(spec, prep, m, dir.as_deref())?;
                    Ok((s, r, CellOutcome::Ran))
                }
            }
        })();

        let (summary, records, outcome, error) = match result {
            Ok((s, r, o)) => (Some(s), r, o, None),
            Err(e) => {
                log::warn!("cell {key} failed: {e}");
                (None, Vec::new(), CellOutcome::Failed, Some(CellError::from(&e)))
            }
        };
        let entry = ManifestEntry {
            config_hash: hash.clone(),
            status: if error.is_some() { CellStatus::Failed } else { CellStatus::Ok },
            error: error.clone(),
            checkpoint_hash: summary.as_ref().map(|s| s.checkpoint_hash.clone()),
            outputs: match (&dir, &out) {
                (Some(d), Some(o)) => cell_outputs(d, o),
                _ => Vec::new(),
            },
        };
        let write = writer.record(key, entry);
        if let Err(e) = write {
            log::warn!("manifest write failed: {e}");
        }
        match method {
            None => Done::Base(SeedBase { seed, summary, error }),
            Some(m) => Done::Cell(CellResult {
                method: m.label.clone(),
                seed,
                config_hash: hash,
                outcome,
                summary,
                records,
                error,
            }),
        }
    });

    let mut bases = Vec::new();
    let mut cells = Vec::new();
    for d in done {
        match d {
            Done::Base(b) => bases.push(b),
            Done::Cell(c) => cells.push(c),
        }
    }
    let n_eval_queries = prepared
        .iter()
        .find_map(|p| p.as_ref().ok().map(|p| p.eval.len()))
        .unwrap_or(0);
    Ok(ExperimentResult {
        name: spec.name.clone(),
        teacher_accuracy: teacher.map(|t| t.accuracy),
        bases,
        cells,
        n_eval_queries,
        n_eval_samples: spec.eval.n_samples,
    })
}
