//! Evaluation quantities: sampled accuracy, unbiased pass@k, exact
//! token-level KL to a base policy, token entropy and the rectified-token
//! fraction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{entropy, prompt, Policy, SamplerConfig, TokenId};
use crate::seed::derive_seed;
use crate::tasks::Task;

/// Direction of the token-level KL divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(π_θ ‖ π_base)`.
    #[default]
    TrainedToBase,
    /// `KL(π_base ‖ π_θ)`.
    BaseToTrained,
}

/// Correct-sample count per query over `n_samples` rollouts each.
pub fn correct_counts(
    policy: &Policy,
    task: &Task,
    queries: &[Vec<TokenId>],
    n_samples: usize,
    cfg: &SamplerConfig,
) -> Result<Vec<usize>> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    cfg.validate()?;
    queries
        .iter()
        .enumerate()
        .map(|(qi, q)| {
            let mut c = 0;
            for s in 0..n_samples {
                let seed = derive_seed(&[cfg.seed, qi as u64, s as u64]);
                let r = policy.sample(q, &cfg.with_seed(seed))?;
                if task.reward(q, &r.tokens) > 0.5 {
                    c += 1;
                }
            }
            Ok(c)
        })
        .collect()
}

/// Mean over queries of the per-query fraction of correct samples.
pub fn accuracy(
    policy: &Policy,
    task: &Task,
    queries: &[Vec<TokenId>],
    n_samples: usize,
    cfg: &SamplerConfig,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Empty("evaluation queries"));
    }
    let counts = correct_counts(policy, task, queries, n_samples, cfg)?;
    Ok(counts.iter().map(|&c| c as f64 / n_samples as f64).sum::<f64>() / queries.len() as f64)
}

/// Unbiased pass@k estimator `1 − C(n−c, k) / C(n, k)`.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if k == 0 || k > n {
        return Err(Error::Config(format!("pass@k needs 1 <= k <= n, got k={k}, n={n}")));
    }
    if c > n {
        return Err(Error::Config(format!("correct count {c} exceeds sample count {n}")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    // C(n−c, k)/C(n, k) = Π_{i=n−c+1}^{n} (1 − k/i)
    let miss: f64 = ((n - c + 1)..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

/// Mean pass@k over per-query correct counts.
pub fn mean_pass_at_k(counts: &[usize], n: usize, k: usize) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::Empty("correct counts"));
    }
    let mut total = 0.0;
    for &c in counts {
        total += pass_at_k(n, c, k)?;
    }
    Ok(total / counts.len() as f64)
}

/// Exact full-vocabulary KL between two log-distributions.
pub fn kl_divergence(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .filter(|(lp, _)| lp.exp() > 0.0)
        .map(|(lp, lq)| lp.exp() * (lp - lq))
        .sum()
}

/// Mean token-level KL over every teacher-forced position of `pairs`.
pub fn kl_to_base(
    policy: &Policy,
    base: &Policy,
    pairs: &[(Vec<TokenId>, Vec<TokenId>)],
    direction: KlDirection,
) -> Result<f64> {
    if policy.vocab() != base.vocab() {
        return Err(Error::Config("policy and base use different vocabularies".into()));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (query, response) in pairs {
        let mut ctx = prompt(query);
        for &y in response {
            let p = policy.token_distribution(&ctx)?;
            let q = base.token_distribution(&ctx)?;
            let kl = match direction {
                KlDirection::TrainedToBase => kl_divergence(&p, &q),
                KlDirection::BaseToTrained => kl_divergence(&q, &p),
            };
            // rounding can leave identical distributions a hair below zero
            total += kl.max(0.0);
            n += 1;
            ctx.push(y);
        }
    }
    if n == 0 {
        return Err(Error::Empty("KL evaluation set"));
    }
    Ok(total / n as f64)
}

/// Average exact entropy of `π(·|ctx)` over positions visited by sampled rollouts.
pub fn mean_token_entropy(policy: &Policy, queries: &[Vec<TokenId>], cfg: &SamplerConfig) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (qi, q) in queries.iter().enumerate() {
        let r = policy.sample(q, &cfg.with_seed(derive_seed(&[cfg.seed, qi as u64])))?;
        let mut ctx = prompt(q);
        for &y in &r.tokens {
            total += entropy(&policy.token_distribution(&ctx)?);
            n += 1;
            ctx.push(y);
        }
    }
    if n == 0 {
        return Err(Error::Empty("entropy rollouts"));
    }
    Ok(total / n as f64)
}

/// Probabilities `π_t` of every teacher-forced token in `pairs`.
pub fn token_probabilities(policy: &Policy, pairs: &[(Vec<TokenId>, Vec<TokenId>)]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (query, response) in pairs {
        let mut ctx = prompt(query);
        for &y in response {
            policy.vocab().check(y)?;
            out.push(policy.token_distribution(&ctx)?[y].exp());
            ctx.push(y);
        }
    }
    Ok(out)
}

/// Share of token probabilities strictly below each `tau`.
pub fn fraction_below(probs: &[f64], taus: &[f64]) -> Result<Vec<f64>> {
    if probs.is_empty() {
        return Err(Error::Empty("token probabilities"));
    }
    taus.iter()
        .map(|&tau| {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(Error::Config(format!("tau must lie in (0, 1], got {tau}")));
            }
            Ok(probs.iter().filter(|&&p| p < tau).count() as f64 / probs.len() as f64)
        })
        .collect()
}

/// Fraction of teacher-forced tokens with `π_t < τ`, for each τ.
pub fn rectified_fraction(
    policy: &Policy,
    pairs: &[(Vec<TokenId>, Vec<TokenId>)],
    taus: &[f64],
) -> Result<Vec<f64>> {
    fraction_below(&token_probabilities(policy, pairs)?, taus)
}

/// What [`evaluate`] measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub ks: Vec<usize>,
    pub temperature: f64,
    pub max_len: usize,
    pub seed: u64,
    pub taus: Vec<f64>,
    pub kl_direction: KlDirection,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_samples: 16,
            ks: vec![1],
            temperature: SamplerConfig::EVAL_TEMPERATURE,
            max_len: SamplerConfig::DEFAULT_MAX_LEN,
            seed: 0,
            taus: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            kl_direction: KlDirection::TrainedToBase,
        }
    }
}

impl EvalConfig {
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            temperature: self.temperature,
            max_len: self.max_len,
            seed: self.seed,
        }
    }
}

/// Evaluation summary of one policy on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub n_queries: usize,
    pub n_samples: usize,
    pub temperature: f64,
    pub accuracy: f64,
    pub pass_at_k: BTreeMap<usize, f64>,
    pub mean_entropy: f64,
    pub kl_to_base: Option<f64>,
    /// `(τ, fraction)` pairs in grid order.
    pub rectified_fraction: Vec<(f64, f64)>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "metric,k,tau,value";

    /// One CSV row per (metric, k, τ).
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows = vec![
            format!("accuracy,,,{}", self.accuracy),
            format!("mean_entropy,,,{}", self.mean_entropy),
        ];
        for (k, v) in &self.pass_at_k {
            rows.push(format!("pass_at_k,{k},,{v}"));
        }
        if let Some(kl) = self.kl_to_base {
            rows.push(format!("kl_to_base,,,{kl}"));
        }
        for (tau, f) in &self.rectified_fraction {
            rows.push(format!("rectified_fraction,,{tau},{f}"));
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in self.csv_rows() {
            s.push_str(&r);
            s.push('\n');
        }
        s
    }
}

/// Full evaluation: accuracy and pass@k from one shared set of samples,
/// entropy over rollouts, and teacher-forced KL / rectified fraction on `pairs`.
pub fn evaluate(
    policy: &Policy,
    task: &Task,
    queries: &[Vec<TokenId>],
    pairs: &[(Vec<TokenId>, Vec<TokenId>)],
    base: Option<&Policy>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::Empty("evaluation queries"));
    }
    let sampler = cfg.sampler();
    let counts = correct_counts(policy, task, queries, cfg.n_samples, &sampler)?;
    let accuracy = mean_pass_at_k(&counts, cfg.n_samples, 1)?;
    let mut pass = BTreeMap::new();
    for &k in &cfg.ks {
        pass.insert(k, mean_pass_at_k(&counts, cfg.n_samples, k)?);
    }
    let mean_entropy = mean_token_entropy(policy, queries, &sampler)?;
    let kl = match base {
        Some(b) if !pairs.is_empty() => Some(kl_to_base(policy, b, pairs, cfg.kl_direction)?),
        _ => None,
    };
    let rect = if pairs.is_empty() {
        Vec::new()
    } else {
        let fr = rectified_fraction(policy, pairs, &cfg.taus)?;
        cfg.taus.iter().copied().zip(fr).collect()
    };
    Ok(EvalReport {
        task: task.name(),
        n_queries: queries.len(),
        n_samples: cfg.n_samples,
        temperature: cfg.temperature,
        accuracy,
        pass_at_k: pass,
        mean_entropy,
        kl_to_base: kl,
        rectified_fraction: rect,
    })
}
