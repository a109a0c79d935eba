//! Fixtures shared by every cell of an experiment: the frozen teacher, the
//! per-seed data splits and the pre-fit base policy.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::persistence::{config_hash, load_checkpoint, save_checkpoint};
use crate::policy::{Architecture, FrozenPolicy, Policy, SamplerConfig, TokenId};
use crate::seed::derive_seed;
use crate::tasks::{make_task, Example, Task, TaskSpec};
use crate::trainer::{fit_demonstrations, OptimizerConfig};

/// Bumped whenever fixture training changes meaning, so stale caches are ignored.
const FIXTURE_REVISION: u32 = 1;

/// Surface format of demonstrations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseFormat {
    /// The bare answer.
    Direct,
    /// Scratch tokens, `;`, then the answer.
    #[default]
    Verbose,
}

impl ResponseFormat {
    fn render(self, task: &Task, query: &[TokenId]) -> Result<Vec<TokenId>> {
        match self {
            ResponseFormat::Direct => task.expert(query),
            ResponseFormat::Verbose => task.verbose_solution(query),
        }
    }
}

/// Larger policy fitted once on verbose demonstrations and then frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub arch: Architecture,
    pub n_queries: usize,
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Held-out queries used to measure the teacher's accuracy.
    pub eval_queries: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            arch: Architecture::Neural {
                embed_dim: 16,
                hidden_dim: 128,
                window: 8,
            },
            n_queries: 4000,
            steps: 3000,
            batch: 32,
            learning_rate: 3e-3,
            seed: 7,
            eval_queries: 200,
        }
    }
}

/// Pre-fit of the trainee's starting point: the side task first, then a
/// mixture of the side task and primary-task demonstrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseConfig {
    pub arch: Architecture,
    pub side_queries: usize,
    pub side_steps: usize,
    pub warm_queries: usize,
    pub warm_steps: usize,
    pub warm_format: ResponseFormat,
    pub batch: usize,
    pub learning_rate: f64,
}

impl Default for BaseConfig {
    fn default() -> Self {
        BaseConfig {
            arch: Architecture::neural_default(),
            side_queries: 400,
            side_steps: 600,
            warm_queries: 3000,
            warm_steps: 1500,
            warm_format: ResponseFormat::Verbose,
            batch: 16,
            learning_rate: 3e-3,
        }
    }
}

/// Tasks, data sizes and fixture recipes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetupConfig {
    pub task: TaskSpec,
    #[serde(default)]
    pub side_task: Option<TaskSpec>,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    #[serde(default = "default_side_eval")]
    pub n_side_eval: usize,
    #[serde(default)]
    pub teacher: Option<TeacherConfig>,
    #[serde(default)]
    pub base: BaseConfig,
}

fn default_n_train() -> usize {
    1000
}

fn default_n_eval() -> usize {
    200
}

fn default_side_eval() -> usize {
    100
}

impl SetupConfig {
    /// Modadd M=97 with a reverse side task and default fixtures.
    pub fn desk_default() -> Self {
        SetupConfig {
            task: TaskSpec::Modadd { modulus: 97 },
            side_task: Some(TaskSpec::Reverse { alphabet: 5, length: 4 }),
            n_train: default_n_train(),
            n_eval: default_n_eval(),
            n_side_eval: default_side_eval(),
            teacher: Some(TeacherConfig::default()),
            base: BaseConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate().map_err(|e| e.at("task"))?;
        if let Some(s) = &self.side_task {
            s.validate().map_err(|e| e.at("side_task"))?;
        }
        self.base.arch.validate().map_err(|e| e.at("base.arch"))?;
        if let Some(t) = &self.teacher {
            t.arch.validate().map_err(|e| e.at("teacher.arch"))?;
            if t.n_queries == 0 || t.batch == 0 || t.eval_queries == 0 {
                return Err(Error::Config("teacher sizes must be positive".into()));
            }
        }
        if self.n_train == 0 || self.n_eval == 0 || self.base.batch == 0 {
            return Err(Error::Config("n_train, n_eval and base.batch must be positive".into()));
        }
        Ok(())
    }
}

/// A trained teacher and its held-out accuracy at temperature 1.
#[derive(Debug, Clone)]
pub struct TeacherFixture {
    pub policy: FrozenPolicy,
    pub accuracy: f64,
    pub hash: String,
}

/// Everything a cell needs for one seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seed: u64,
    pub task: Task,
    pub side: Option<Task>,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
    pub side_eval: Vec<Vec<TokenId>>,
    pub base: FrozenPolicy,
    pub base_hash: String,
}

impl Prepared {
    pub fn train_queries(&self) -> Vec<Vec<TokenId>> {
        self.train.iter().map(|e| e.query.clone()).collect()
    }

    pub fn eval_queries(&self) -> Vec<Vec<TokenId>> {
        self.eval.iter().map(|e| e.query.clone()).collect()
    }

    /// Teacher-forced `(query, expert)` pairs of the training data.
    pub fn train_pairs(&self) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
        self.train.iter().map(|e| (e.query.clone(), e.expert.clone())).collect()
    }
}

fn cached_or_fit(
    dir: Option<&Path>,
    name: &str,
    fit: impl FnOnce() -> Result<Policy>,
) -> Result<Policy> {
    let path = dir.map(|d| d.join(name));
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        match load_checkpoint(p) {
            Ok(policy) => return Ok(policy),
            Err(e) => log::warn!("refitting fixture {}: {e}", p.display()),
        }
    }
    let policy = fit()?;
    if let Some(p) = &path {
        save_checkpoint(p, &policy)?;
    }
    Ok(policy)
}

/// Fits (or loads from `cache`) the teacher for `task`.
pub fn prepare_teacher(task: &Task, cfg: &TeacherConfig, cache: Option<&Path>) -> Result<TeacherFixture> {
    let hash = config_hash(&(FIXTURE_REVISION, "teacher", task.spec(), cfg))?;
    let data = task.dataset(cfg.n_queries, derive_seed(&[cfg.seed, 1]))?;
    let policy = cached_or_fit(cache, &format!("teacher-{}.ckpt", &hash[..16]), || {
        let pairs = data
            .iter()
            .map(|e| Ok((e.query.clone(), task.verbose_solution(&e.query)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut p = Policy::neural(task.vocab().clone(), cfg.arch, derive_seed(&[cfg.seed, 2]))?;
        let opt = OptimizerConfig::adam(cfg.learning_rate);
        fit_demonstrations(&mut p, &pairs, cfg.steps, cfg.batch, &opt, derive_seed(&[cfg.seed, 3]))?;
        Ok(p)
    })?;
    let used = data.iter().map(|e| e.query.clone()).collect();
    let held_out: Vec<_> = task
        .dataset_excluding(cfg.eval_queries, derive_seed(&[cfg.seed, 4]), &used)?
        .into_iter()
        .map(|e| e.query)
        .collect();
    let sampler = SamplerConfig {
        temperature: 1.0,
        ..SamplerConfig::train(derive_seed(&[cfg.seed, 5]))
    };
    let acc = accuracy(&policy, task, &held_out, 1, &sampler)?;
    Ok(TeacherFixture {
        policy: policy.snapshot(),
        accuracy: acc,
        hash,
    })
}

/// Deterministic data of one seed: the primary-task warm-up, training and
/// evaluation splits and the side-task splits.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub task: Task,
    pub side: Option<Task>,
    pub warm: Vec<Example>,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
    pub side_train: Vec<Example>,
    pub side_eval: Vec<Vec<TokenId>>,
}

/// Builds the splits of one seed without fitting anything.
pub fn seed_data(setup: &SetupConfig, seed: u64) -> Result<SeedData> {
    setup.validate()?;
    let task = make_task(setup.task)?;
    let side = setup.side_task.map(make_task).transpose()?;
    let b = &setup.base;
    let (mut pool, eval) = task.split(b.warm_queries + setup.n_train, setup.n_eval, derive_seed(&[seed, 0x5E11]))?;
    let train = pool.split_off(b.warm_queries.min(pool.len()));
    let (side_train, side_eval) = match &side {
        Some(s) => {
            let (tr, ev) = s.split(b.side_queries.max(1), setup.n_side_eval.max(1), derive_seed(&[seed, 0x51DE]))?;
            (tr, ev.into_iter().map(|e| e.query).collect())
        }
        None => (Vec::new(), Vec::new()),
    };
    Ok(SeedData {
        task,
        side,
        warm: pool,
        train,
        eval,
        side_train,
        side_eval,
    })
}

/// Builds the data splits and the pre-fit base policy for one seed.
pub fn prepare_seed(
    setup: &SetupConfig,
    teacher: Option<&TeacherFixture>,
    seed: u64,
    cache: Option<&Path>,
) -> Result<Prepared> {
    let data = seed_data(setup, seed)?;
    let mut task = data.task;
    if let Some(t) = teacher {
        task = task.with_teacher(t.policy.clone());
    }
    let b = &setup.base;
    let base_hash = config_hash(&(
        FIXTURE_REVISION,
        "base",
        setup.task,
        setup.side_task,
        setup.n_train,
        b,
        seed,
    ))?;
    let base = cached_or_fit(cache, &format!("base-{}.ckpt", &base_hash[..16]), || {
        let mut p = Policy::neural(task.vocab().clone(), b.arch, derive_seed(&[seed, 0xBA5E]))?;
        let opt = OptimizerConfig::adam(b.learning_rate);
        let side_pairs: Vec<_> = data.side_train.iter().map(|e| (e.query.clone(), e.expert.clone())).collect();
        if !side_pairs.is_empty() && b.side_steps > 0 {
            fit_demonstrations(&mut p, &side_pairs, b.side_steps, b.batch, &opt, derive_seed(&[seed, 1]))?;
        }
        let mut mixed = side_pairs;
        for e in &data.warm {
            mixed.push((e.query.clone(), b.warm_format.render(&task, &e.query)?));
        }
        if !mixed.is_empty() && b.warm_steps > 0 {
            fit_demonstrations(&mut p, &mixed, b.warm_steps, b.batch, &opt, derive_seed(&[seed, 2]))?;
        }
        Ok(p)
    })?;
    Ok(Prepared {
        seed,
        task,
        side: data.side,
        train: data.train,
        eval: data.eval,
        side_eval: data.side_eval,
        base: base.snapshot(),
        base_hash,
    })
}

/// Directory for cached fixtures.
pub fn fixture_dir(explicit: Option<&Path>, output: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| output.map(|o| o.join("fixtures")))
}
