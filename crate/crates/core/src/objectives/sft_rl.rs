//! The SFT gradient written as a policy gradient with importance weight
//! `𝕀[y = y*] / π(y)` under on-policy sampling.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::policy::{Policy, SamplerConfig, TokenId};

/// How the expectation over `y ~ π(·|x)` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SftAsRlMode {
    /// Enumerate every response up to `|y*|` tokens.
    Exact,
    /// Average `rollouts` on-policy samples drawn with `seed`.
    MonteCarlo { rollouts: usize, seed: u64 },
}

/// Monte-Carlo estimate of the (negated) SFT gradient with the per-coordinate
/// sample variance of the integrand.
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Rollouts that reproduced `y*` exactly.
    pub hits: usize,
    pub rollouts: usize,
}

impl McEstimate {
    /// Mean over coordinates of the integrand variance.
    pub fn mean_variance(&self) -> f64 {
        if self.variance.is_empty() {
            0.0
        } else {
            self.variance.iter().sum::<f64>() / self.variance.len() as f64
        }
    }
}

/// Flattened `∇ log π(y | x)`.
fn grad_logprob(policy: &Policy, query: &[TokenId], response: &[TokenId]) -> Result<Vec<f64>> {
    let mut work = policy.clone();
    work.params_mut().zero_grad();
    let mut tape = Tape::new();
    let forced = work.teacher_forced(&mut tape, &[(query, response)])?;
    let total = tape.sum(forced.token_logprobs)?;
    tape.backward(total, work.params_mut())?;
    Ok(work.params().flat_grad())
}

/// Gradient of the SFT loss `−log π(y*|x)` obtained as
/// `−E_{y~π}[𝕀[y = y*] / π(y) · ∇ log π(y)]`.
pub fn sft_as_rl_gradient(policy: &Policy, query: &[TokenId], expert: &[TokenId], mode: SftAsRlMode) -> Result<Vec<f64>> {
    match mode {
        SftAsRlMode::Exact => {
            if expert.is_empty() {
                return Err(Error::Empty("expert response"));
            }
            let paths = policy.enumerate_sequences(query, expert.len())?;
            let mut out = vec![0.0; policy.params().flat_len()];
            for (y, prob) in paths {
                if y.as_slice() != expert {
                    continue;
                }
                let weight = prob * (1.0 / prob);
                let g = grad_logprob(policy, query, &y)?;
                for (o, gi) in out.iter_mut().zip(g) {
                    *o -= weight * gi;
                }
            }
            Ok(out)
        }
        SftAsRlMode::MonteCarlo { rollouts, seed } => {
            Ok(sft_as_rl_monte_carlo(policy, query, expert, rollouts, seed)?.mean)
        }
    }
}

/// On-policy Monte-Carlo evaluation of the importance-weighted integrand.
pub fn sft_as_rl_monte_carlo(
    policy: &Policy,
    query: &[TokenId],
    expert: &[TokenId],
    rollouts: usize,
    seed: u64,
) -> Result<McEstimate> {
    if expert.is_empty() {
        return Err(Error::Empty("expert response"));
    }
    if rollouts == 0 {
        return Err(Error::Config("rollouts must be positive".into()));
    }
    let expert_prob = policy.sequence_logprob(query, expert)?.exp();
    let expert_grad = grad_logprob(policy, query, expert)?;
    let integrand: Vec<f64> = expert_grad.iter().map(|g| -g / expert_prob).collect();
    let sampler = SamplerConfig {
        temperature: 1.0,
        max_len: expert.len(),
        seed: 0,
    };
    let mut hits = 0usize;
    for r in 0..rollouts {
        let s = policy.sample(query, &sampler.with_seed(crate::seed::derive_seed(&[seed, r as u64])))?;
        if s.tokens.as_slice() == expert {
            hits += 1;
        }
    }
    let frac = hits as f64 / rollouts as f64;
    let mean: Vec<f64> = integrand.iter().map(|v| v * frac).collect();
    // Every rollout contributes either `integrand` or 0, so the sample
    // variance has a closed form in the hit fraction.
    let bessel = if rollouts > 1 {
        rollouts as f64 / (rollouts - 1) as f64
    } else {
        0.0
    };
    let variance = integrand
        .iter()
        .map(|v| v * v * frac * (1.0 - frac) * bessel)
        .collect();
    Ok(McEstimate {
        mean,
        variance,
        hits,
        rollouts,
    })
}
