use serde::{Deserialize, Serialize};

use super::Task;
use crate::error::{Error, Result};
use crate::objectives::{group_advantages, AdvantageConfig};
use crate::policy::{Policy, Response, SamplerConfig, Source, TokenId};
use crate::seed::derive_seed;

/// How many members of each source a group holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupCompositionConfig {
    pub n_expert: usize,
    pub n_teacher: usize,
    pub n_self: usize,
}

impl GroupCompositionConfig {
    pub const fn new(n_expert: usize, n_teacher: usize, n_self: usize) -> Self {
        GroupCompositionConfig {
            n_expert,
            n_teacher,
            n_self,
        }
    }

    pub const fn expert_only() -> Self {
        Self::new(1, 0, 0)
    }

    pub const fn self_only(k: usize) -> Self {
        Self::new(0, 0, k)
    }

    pub fn k(&self) -> usize {
        self.n_expert + self.n_teacher + self.n_self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k() == 0 {
            return Err(Error::Config("group must contain at least one response".into()));
        }
        Ok(())
    }
}

impl Default for GroupCompositionConfig {
    /// One expert, three teacher samples, four self-samples.
    fn default() -> Self {
        Self::new(1, 3, 4)
    }
}

/// K candidate responses for one query with their rewards and, once
/// computed, standardized advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseGroup {
    pub query: Vec<TokenId>,
    pub responses: Vec<Response>,
    pub rewards: Vec<f64>,
    pub advantages: Option<Vec<f64>>,
}

impl ResponseGroup {
    pub fn k(&self) -> usize {
        self.responses.len()
    }

    pub fn compute_advantages(&mut self, cfg: &AdvantageConfig) -> &[f64] {
        self.advantages.insert(group_advantages(&self.rewards, cfg))
    }

    pub fn sources(&self) -> impl Iterator<Item = Source> + '_ {
        self.responses.iter().map(|r| r.source)
    }

    pub fn mean_reward(&self) -> f64 {
        if self.rewards.is_empty() {
            0.0
        } else {
            self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
        }
    }

    /// Checks `|responses| = |rewards| ≥ 1`.
    pub fn check(&self, group_id: usize) -> Result<()> {
        if self.responses.is_empty() {
            return Err(Error::Group {
                group: group_id,
                detail: "empty group".into(),
            });
        }
        if self.rewards.len() != self.responses.len() {
            return Err(Error::Group {
                group: group_id,
                detail: format!(
                    "missing rewards: {} responses, {} rewards",
                    self.responses.len(),
                    self.rewards.len()
                ),
            });
        }
        Ok(())
    }
}

/// Assembles the hybrid group for `query`, ordered Expert, Teacher, Self.
///
/// Teacher members use the teacher's own sampler at temperature 1.0;
/// self members use `sampler` (its seed is replaced by per-member seeds
/// derived from `seed`).
pub fn build_group(
    task: &Task,
    query: &[TokenId],
    policy: &Policy,
    cfg: &GroupCompositionConfig,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<ResponseGroup> {
    cfg.validate()?;
    let mut responses = Vec::with_capacity(cfg.k());
    let expert = task.expert(query)?;
    for _ in 0..cfg.n_expert {
        responses.push(Response::expert(expert.clone()));
    }
    if cfg.n_teacher > 0 {
        let teacher = task
            .teacher()
            .ok_or_else(|| Error::Config(format!("task {} has no teacher", task.name())))?;
        let tcfg = SamplerConfig {
            temperature: 1.0,
            ..*sampler
        };
        for i in 0..cfg.n_teacher {
            let mut r = teacher.sample(query, &tcfg.with_seed(derive_seed(&[seed, 1, i as u64])))?;
            r.source = Source::Teacher;
            responses.push(r);
        }
    }
    for i in 0..cfg.n_self {
        responses.push(policy.sample(query, &sampler.with_seed(derive_seed(&[seed, 2, i as u64])))?);
    }
    let rewards = responses.iter().map(|r| task.reward(query, &r.tokens)).collect();
    Ok(ResponseGroup {
        query: query.to_vec(),
        responses,
        rewards,
        advantages: None,
    })
}
