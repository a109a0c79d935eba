//! Finite-difference gradient check of every trainable objective on random
//! tabular instances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{batch_loss, DcrSemantics, ObjectiveConfig, ObjectiveKind};
use crate::autodiff::{finite_difference_check, FD_STEP};
use crate::error::Result;
use crate::policy::{Policy, Response, Source, TokenId, Vocab};
use crate::seed::{derive_seed, rng};
use crate::tasks::ResponseGroup;

/// Pass threshold on the maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;

/// Worst relative error of one objective over all instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub objective: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

/// Objectives covered by [`gradcheck_suite`], with their labels.
pub fn gradcheck_objectives() -> Vec<(String, ObjectiveConfig)> {
    let mut out = Vec::new();
    for kind in [ObjectiveKind::Sft, ObjectiveKind::Dft, ObjectiveKind::Grpo] {
        out.push((kind.label().to_string(), ObjectiveConfig::new(kind)));
    }
    for sem in [DcrSemantics::LossForm, DcrSemantics::GradForm] {
        let mut c = ObjectiveConfig::new(ObjectiveKind::Gft);
        c.rectifier.semantics = sem;
        let suffix = match sem {
            DcrSemantics::LossForm => "loss_form",
            DcrSemantics::GradForm => "grad_form",
        };
        out.push((format!("gft_{suffix}"), c));
    }
    for kind in [ObjectiveKind::GftNoGal, ObjectiveKind::GftNoDcr] {
        out.push((kind.label().to_string(), ObjectiveConfig::new(kind)));
    }
    out
}

/// A random tabular policy and batch of groups suited to `kind`.
pub fn random_instance(kind: ObjectiveKind, seed: u64) -> Result<(Policy, Vec<ResponseGroup>)> {
    let mut r = rng(seed);
    let n_sym = r.random_range(2..=3);
    let vocab = Vocab::new(&["a", "b", "c"][..n_sym])?;
    let order = r.random_range(1..=2);
    let policy = Policy::tabular_random(vocab, order, 1.5, derive_seed(&[seed, 1]))?;
    let first = policy.vocab().size() - n_sym;
    let content: Vec<TokenId> = (first..first + n_sym).collect();
    let pick = |r: &mut rand_chacha::ChaCha8Rng, len: usize| -> Vec<TokenId> {
        (0..len).map(|_| content[r.random_range(0..content.len())]).collect()
    };
    let n_groups = r.random_range(1..=2);
    let mut groups = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let q_len = r.random_range(1..=2);
        let query = pick(&mut r, q_len);
        let k = if kind.is_single_trajectory() { 1 } else { r.random_range(2..=4) };
        let mut responses = Vec::with_capacity(k);
        let mut rewards = Vec::with_capacity(k);
        for m in 0..k {
            let len = r.random_range(1..=3);
            let mut tokens = pick(&mut r, len);
            if r.random_bool(0.5) {
                tokens.push(Vocab::EOS);
            }
            let source = match (kind, m) {
                (ObjectiveKind::Grpo, _) => Source::SelfGenerated,
                (_, 0) => Source::Expert,
                (_, 1) => Source::Teacher,
                _ => Source::SelfGenerated,
            };
            responses.push(Response {
                tokens,
                source,
                logprob: None,
                truncated: false,
            });
            rewards.push(r.random_range(0.0..1.0));
        }
        groups.push(ResponseGroup {
            query,
            responses,
            rewards,
            advantages: None,
        });
    }
    Ok((policy, groups))
}

/// Runs the frozen-weight finite-difference check for every objective on
/// `instances` random tabular instances derived from `seed`.
pub fn gradcheck_suite(instances: usize, seed: u64) -> Result<Vec<GradcheckRow>> {
    gradcheck_objectives()
        .into_iter()
        .enumerate()
        .map(|(oi, (label, base_cfg))| {
            let mut worst: f64 = 0.0;
            for i in 0..instances {
                let inst_seed = derive_seed(&[seed, oi as u64, i as u64]);
                let (policy, groups) = random_instance(base_cfg.kind, inst_seed)?;
                let tau = rng(derive_seed(&[inst_seed, 2])).random_range(0.2..0.95);
                let cfg = base_cfg.with_tau(tau);
                let vocab = policy.vocab().clone();
                let arch = policy.arch();
                let err = finite_difference_check(
                    |tape, params| {
                        let p = Policy::from_parts(vocab.clone(), arch, params.clone())?;
                        Ok(batch_loss(tape, &p, &groups, &cfg)?.loss)
                    },
                    policy.params(),
                    FD_STEP,
                )?;
                worst = worst.max(err);
            }
            Ok(GradcheckRow {
                objective: label,
                instances,
                max_rel_error: worst,
            })
        })
        .collect()
}
