//! Optimization loop and staged pipelines.
//!
//! A stage trains one objective for a fixed number of steps. Each step
//! draws a batch of training queries, builds fresh groups (or expert pairs
//! for single-trajectory objectives), runs one backward pass and one
//! optimizer update, and emits a [`RunRecord`]. Every random choice is
//! derived from the run seed, so a (config, seed) pair fully determines the
//! final parameters.

mod optimizer;

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use optimizer::{optimizer_update, OptimizerConfig, OptimizerKind, OptimizerState, UpdateStats};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, kl_to_base, KlDirection};
use crate::objectives::{batch_loss, weighted_token_loss, ObjectiveConfig, ObjectiveKind, TokenCoefficient};
use crate::policy::{entropy, FrozenPolicy, Policy, SamplerConfig, TokenId};
use crate::seed::{derive_seed, rng};
use crate::tasks::{build_group, GroupCompositionConfig, ResponseGroup, Task};

/// One training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    pub objective: ObjectiveConfig,
    pub steps: usize,
    #[serde(default = "default_batch_queries")]
    pub batch_queries: usize,
    #[serde(default)]
    pub group: GroupCompositionConfig,
    #[serde(default = "default_sampler")]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn default_batch_queries() -> usize {
    8
}

fn default_sampler() -> SamplerConfig {
    SamplerConfig::train(0)
}

impl StageConfig {
    pub fn new(name: impl Into<String>, objective: ObjectiveConfig, steps: usize) -> Self {
        let group = if objective.kind == ObjectiveKind::Grpo {
            GroupCompositionConfig::self_only(8)
        } else if objective.kind.is_single_trajectory() {
            GroupCompositionConfig::expert_only()
        } else {
            GroupCompositionConfig::default()
        };
        StageConfig {
            name: name.into(),
            objective,
            steps,
            batch_queries: default_batch_queries(),
            group,
            sampler: default_sampler(),
            optimizer: OptimizerConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config(format!("stage `{}`: steps must be at least 1", self.name)));
        }
        if self.batch_queries == 0 {
            return Err(Error::Config(format!("stage `{}`: batch_queries must be at least 1", self.name)));
        }
        self.objective.validate().map_err(|e| e.at("objective"))?;
        self.optimizer.validate().map_err(|e| e.at("optimizer"))?;
        self.sampler.validate().map_err(|e| e.at("sampler"))?;
        self.group.validate().map_err(|e| e.at("group"))?;
        match self.objective.kind {
            ObjectiveKind::SftAsRl => Err(Error::Config(format!(
                "stage `{}`: sft_as_rl is an estimator and cannot be trained",
                self.name
            ))),
            ObjectiveKind::Grpo if self.group.n_expert + self.group.n_teacher > 0 => Err(Error::Config(format!(
                "stage `{}`: grpo requires self-only groups",
                self.name
            ))),
            _ => Ok(()),
        }
    }

    /// Responses consumed by one step.
    pub fn trajectories_per_step(&self) -> usize {
        if self.objective.kind.is_single_trajectory() {
            self.batch_queries
        } else {
            self.batch_queries * self.group.k()
        }
    }
}

/// Per-step log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: usize,
    pub stage: String,
    pub loss: f64,
    pub grad_norm: f64,
    pub mean_entropy: f64,
    pub kl_to_base: Option<f64>,
    pub rectified_fraction: f64,
    pub eval_accuracy: Option<f64>,
    pub mean_reward: f64,
    pub trajectories: usize,
    pub wall_time: f64,
}

/// Groups (or expert singletons) for one batch of queries.
pub fn build_batch(
    policy: &Policy,
    task: &Task,
    stage: &StageConfig,
    queries: &[Vec<TokenId>],
    seed: u64,
) -> Result<Vec<ResponseGroup>> {
    let group_cfg = if stage.objective.kind.is_single_trajectory() {
        GroupCompositionConfig::expert_only()
    } else {
        stage.group
    };
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| build_group(task, q, policy, &group_cfg, &stage.sampler, derive_seed(&[seed, i as u64])))
        .collect()
}

/// One optimizer step on `queries`. The returned record describes the
/// parameters the gradient was taken at; KL and eval fields are left empty.
pub fn train_step(
    policy: &mut Policy,
    state: &mut OptimizerState,
    task: &Task,
    stage: &StageConfig,
    queries: &[Vec<TokenId>],
    step: usize,
    seed: u64,
) -> Result<RunRecord> {
    let start = Instant::now();
    let groups = build_batch(policy, task, stage, queries, seed)?;
    policy.params_mut().zero_grad();
    let mut tape = Tape::new();
    let built = batch_loss(&mut tape, policy, &groups, &stage.objective).map_err(|e| match e {
        Error::NonFinite { what, group, .. } => Error::NonFinite { what, step, group },
        other => other,
    })?;
    let loss = tape.scalar(built.loss)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "loss",
            step,
            group: offending_group(&groups, &built.token_probs, &built.coefficients),
        });
    }
    tape.backward(built.loss, policy.params_mut())?;
    if policy.params().iter().any(|p| p.grad.iter().any(|g| !g.is_finite())) {
        return Err(Error::NonFinite {
            what: "gradient",
            step,
            group: offending_group(&groups, &built.token_probs, &built.coefficients),
        });
    }
    let stats = optimizer_update(policy.params_mut(), state, &stage.optimizer).map_err(|e| match e {
        Error::NonFinite { what, .. } => Error::NonFinite {
            what,
            step,
            group: None,
        },
        other => other,
    })?;
    let log_dists = tape.value(built.forced.log_dists);
    let v = policy.vocab().size();
    let rows = log_dists.len() / v;
    let mean_entropy = log_dists.chunks(v).map(entropy).sum::<f64>() / rows as f64;
    let tau = stage.objective.rectifier.tau;
    let rectified = built.token_probs.iter().filter(|&&p| p < tau).count() as f64 / built.token_probs.len() as f64;
    let mean_reward = groups.iter().map(ResponseGroup::mean_reward).sum::<f64>() / groups.len() as f64;
    Ok(RunRecord {
        step,
        stage: stage.name.clone(),
        loss,
        grad_norm: stats.grad_norm,
        mean_entropy,
        kl_to_base: None,
        rectified_fraction: rectified,
        eval_accuracy: None,
        mean_reward,
        trajectories: groups.iter().map(ResponseGroup::k).sum(),
        wall_time: start.elapsed().as_secs_f64(),
    })
}

fn offending_group(groups: &[ResponseGroup], probs: &[f64], coefs: &[f64]) -> Option<usize> {
    let mut offset = 0;
    for (gid, g) in groups.iter().enumerate() {
        let len: usize = g.responses.iter().map(|r| r.tokens.len()).sum();
        let range = offset..offset + len;
        let bad = probs[range.clone()].iter().chain(&coefs[range]).any(|x| !x.is_finite());
        if bad || g.rewards.iter().any(|r| !r.is_finite()) {
            return Some(gid);
        }
        offset += len;
    }
    None
}

/// Epoch-shuffled stream of training queries.
#[derive(Debug, Clone)]
pub struct QueryStream {
    queries: Vec<Vec<TokenId>>,
    order: Vec<usize>,
    epoch: u64,
    pos: usize,
    seed: u64,
}

impl QueryStream {
    pub fn new(queries: Vec<Vec<TokenId>>, seed: u64) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::Empty("training queries"));
        }
        let mut s = QueryStream {
            order: (0..queries.len()).collect(),
            queries,
            epoch: 0,
            pos: 0,
            seed,
        };
        s.shuffle();
        Ok(s)
    }

    fn shuffle(&mut self) {
        self.order.sort_unstable();
        self.order.shuffle(&mut rng(derive_seed(&[self.seed, self.epoch])));
    }

    pub fn next_batch(&mut self, n: usize) -> Vec<Vec<TokenId>> {
        (0..n)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.epoch += 1;
                    self.pos = 0;
                    self.shuffle();
                }
                self.pos += 1;
                self.queries[self.order[self.pos - 1]].clone()
            })
            .collect()
    }
}

/// Periodic measurements taken during a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorConfig {
    /// Measure KL-to-base every this many steps (0 disables).
    pub kl_every: usize,
    /// Teacher-forced pairs used for KL.
    pub kl_pairs: usize,
    pub kl_direction: KlDirection,
    /// Measure eval accuracy every this many steps (0 disables).
    pub eval_every: usize,
    pub eval_samples: usize,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            kl_every: 0,
            kl_pairs: 32,
            kl_direction: KlDirection::TrainedToBase,
            eval_every: 0,
            eval_samples: 4,
        }
    }
}

/// Data and monitoring shared by every stage of a run.
#[derive(Debug, Clone)]
pub struct RunContext<'a> {
    pub task: &'a Task,
    pub train_queries: Vec<Vec<TokenId>>,
    /// Teacher-forced pairs for KL-to-base (the training data).
    pub kl_pairs: Vec<(Vec<TokenId>, Vec<TokenId>)>,
    pub eval_queries: Vec<Vec<TokenId>>,
    pub monitor: MonitorConfig,
    pub seed: u64,
}

/// Result of a staged run.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub base: FrozenPolicy,
    /// `(stage name, parameters after the stage)`.
    pub checkpoints: Vec<(String, FrozenPolicy)>,
    pub records: Vec<RunRecord>,
}

/// Runs `stages` in order on `policy`. KL is always measured against the
/// policy as it was before the first stage. Every record is passed to
/// `sink` as soon as it is produced.
pub fn run_pipeline(
    policy: &mut Policy,
    ctx: &RunContext<'_>,
    stages: &[StageConfig],
    sink: &mut dyn FnMut(&RunRecord) -> Result<()>,
) -> Result<PipelineOutcome> {
    if stages.is_empty() {
        return Err(Error::Empty("pipeline"));
    }
    for s in stages {
        s.validate()?;
    }
    let base = policy.snapshot();
    let kl_pairs = &ctx.kl_pairs[..ctx.kl_pairs.len().min(ctx.monitor.kl_pairs)];
    let eval_sampler = SamplerConfig::eval(derive_seed(&[ctx.seed, 0xE7A1]));
    let mut checkpoints = Vec::with_capacity(stages.len());
    let mut records = Vec::new();
    let mut step = 0usize;
    for (si, stage) in stages.iter().enumerate() {
        let mut stream = QueryStream::new(ctx.train_queries.clone(), derive_seed(&[ctx.seed, si as u64, 0xDA7A]))?;
        let mut state = OptimizerState::default();
        for local in 0..stage.steps {
            let kl = if ctx.monitor.kl_every > 0 && step % ctx.monitor.kl_every == 0 && !kl_pairs.is_empty() {
                Some(kl_to_base(policy, &base, kl_pairs, ctx.monitor.kl_direction)?)
            } else {
                None
            };
            let eval = if ctx.monitor.eval_every > 0 && step % ctx.monitor.eval_every == 0 && !ctx.eval_queries.is_empty()
            {
                Some(accuracy(
                    policy,
                    ctx.task,
                    &ctx.eval_queries,
                    ctx.monitor.eval_samples,
                    &eval_sampler,
                )?)
            } else {
                None
            };
            let batch = stream.next_batch(stage.batch_queries);
            let seed = derive_seed(&[ctx.seed, si as u64, local as u64]);
            let mut rec = train_step(policy, &mut state, ctx.task, stage, &batch, step, seed)?;
            rec.kl_to_base = kl;
            rec.eval_accuracy = eval;
            sink(&rec)?;
            records.push(rec);
            step += 1;
        }
        checkpoints.push((stage.name.clone(), policy.snapshot()));
    }
    Ok(PipelineOutcome {
        base,
        checkpoints,
        records,
    })
}

/// Plain supervised fitting on explicit `(query, response)` demonstrations.
/// Used to build teachers and pre-fit base policies. Returns the mean loss
/// of the final step.
pub fn fit_demonstrations(
    policy: &mut Policy,
    pairs: &[(Vec<TokenId>, Vec<TokenId>)],
    steps: usize,
    batch: usize,
    optimizer: &OptimizerConfig,
    seed: u64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("demonstrations"));
    }
    if batch == 0 {
        return Err(Error::Config("batch must be at least 1".into()));
    }
    optimizer.validate()?;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut pos = order.len();
    let mut epoch = 0u64;
    let mut state = OptimizerState::default();
    let mut last = f64::NAN;
    for step in 0..steps {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if pos == order.len() {
                order.sort_unstable();
                order.shuffle(&mut rng(derive_seed(&[seed, epoch])));
                epoch += 1;
                pos = 0;
            }
            idx.push(order[pos]);
            pos += 1;
        }
        let refs: Vec<(&[TokenId], &[TokenId])> =
            idx.iter().map(|&i| (pairs[i].0.as_slice(), pairs[i].1.as_slice())).collect();
        policy.params_mut().zero_grad();
        let mut tape = Tape::new();
        let weights = vec![1.0; refs.len()];
        let scale = 1.0 / refs.len() as f64;
        let built = weighted_token_loss(&mut tape, policy, &refs, &weights, TokenCoefficient::Unit, false, scale)?;
        last = tape.scalar(built.loss)?;
        if !last.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                step,
                group: None,
            });
        }
        tape.backward(built.loss, policy.params_mut())?;
        optimizer_update(policy.params_mut(), &mut state, optimizer)?;
    }
    Ok(last)
}
