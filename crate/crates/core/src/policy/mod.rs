//! Autoregressive token policies π(y_t | y_<t, x).
//!
//! Two backends share one [`Policy`] type: a tabular n-gram table whose
//! sequence space can be enumerated exactly, and a one-hidden-layer network
//! over a fixed window of token and position embeddings. Both expose a plain
//! forward pass (sampling, metrics) and a taped forward pass (training); the
//! two agree bit-for-bit.

mod vocab;

use std::ops::{Deref, Range};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use vocab::{TokenId, Vocab};

use crate::autodiff::{log_softmax_in_place, matmul_into, ParameterVector, Tape, Var};
use crate::error::{Error, Result};
use crate::seed;

/// Model family and its size knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Logit table indexed by the last `context_order` tokens.
    Tabular { context_order: usize },
    /// Window of `window` embeddings (dim `embed_dim`) → tanh layer → vocab logits.
    Neural {
        embed_dim: usize,
        hidden_dim: usize,
        window: usize,
    },
}

impl Architecture {
    pub const fn neural_default() -> Self {
        Architecture::Neural {
            embed_dim: 16,
            hidden_dim: 64,
            window: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Architecture::Tabular { context_order } if !(1..=2).contains(&context_order) => Err(
                Error::Config(format!("tabular context_order must be 1 or 2, got {context_order}")),
            ),
            Architecture::Neural {
                embed_dim,
                hidden_dim,
                window,
            } if embed_dim == 0 || hidden_dim == 0 || window == 0 => Err(Error::Config(
                "neural dimensions must be positive".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Rollout settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub const TRAIN_TEMPERATURE: f64 = 1.0;
    pub const EVAL_TEMPERATURE: f64 = 0.5;
    pub const DEFAULT_MAX_LEN: usize = 32;

    pub fn train(seed: u64) -> Self {
        SamplerConfig {
            temperature: Self::TRAIN_TEMPERATURE,
            max_len: Self::DEFAULT_MAX_LEN,
            seed,
        }
    }

    pub fn eval(seed: u64) -> Self {
        SamplerConfig {
            temperature: Self::EVAL_TEMPERATURE,
            ..Self::train(seed)
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        SamplerConfig { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::train(0)
    }
}

/// Where a group member came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Expert,
    Teacher,
    #[serde(rename = "self")]
    SelfGenerated,
}

/// One candidate trajectory for a query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub tokens: Vec<TokenId>,
    pub source: Source,
    /// Log-probability under the sampling distribution, when sampled.
    pub logprob: Option<f64>,
    /// Generation hit `max_len` without emitting EOS.
    pub truncated: bool,
}

impl Response {
    pub fn expert(tokens: Vec<TokenId>) -> Self {
        Response {
            tokens,
            source: Source::Expert,
            logprob: None,
            truncated: false,
        }
    }
}

/// Trainable autoregressive policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    vocab: Vocab,
    arch: Architecture,
    params: ParameterVector,
}

/// Teacher-forced quantities for a batch of `(query, response)` pairs.
#[derive(Debug, Clone)]
pub struct TeacherForced {
    /// `(T, 1)` log-probability of each response token.
    pub token_logprobs: Var,
    /// `(T, V)` full log-distribution at each position.
    pub log_dists: Var,
    /// Row range of each pair inside the `T` rows.
    pub spans: Vec<Range<usize>>,
}

const TABULAR_LOGITS: usize = 0;
const TOK_EMB: usize = 0;
const POS_EMB: usize = 1;
const W_HIDDEN: usize = 2;
const B_HIDDEN: usize = 3;
const W_OUT: usize = 4;
const B_OUT: usize = 5;

impl Policy {
    /// Tabular policy with all-zero logits (uniform everywhere).
    pub fn tabular(vocab: Vocab, context_order: usize) -> Result<Self> {
        let arch = Architecture::Tabular { context_order };
        arch.validate()?;
        let v = vocab.size();
        let rows = v.pow(context_order as u32);
        let mut params = ParameterVector::new();
        params.push("logits", (rows, v), vec![0.0; rows * v])?;
        Ok(Policy { vocab, arch, params })
    }

    /// Tabular policy with i.i.d. uniform logits in `[-scale, scale]`.
    pub fn tabular_random(vocab: Vocab, context_order: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut p = Self::tabular(vocab, context_order)?;
        let mut rng = seed::rng(seed);
        for x in &mut p.params.get_mut(TABULAR_LOGITS).data {
            *x = rng.random_range(-scale..=scale);
        }
        Ok(p)
    }

    /// Randomly initialised windowed network.
    pub fn neural(vocab: Vocab, arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let Architecture::Neural {
            embed_dim: d,
            hidden_dim: h,
            window: w,
        } = arch
        else {
            return Err(Error::Config("neural constructor needs a neural architecture".into()));
        };
        let v = vocab.size();
        let mut rng = seed::rng(seed);
        let mut init = |n: usize, bound: f64| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        let mut params = ParameterVector::new();
        params.push("tok_emb", (v, d), init(v * d, 0.5))?;
        params.push("pos_emb", (w, d), init(w * d, 0.5))?;
        params.push("w_hidden", (w * d, h), init(w * d * h, (3.0 / (w * d) as f64).sqrt()))?;
        params.push("b_hidden", (1, h), vec![0.0; h])?;
        params.push("w_out", (h, v), init(h * v, (3.0 / h as f64).sqrt()))?;
        params.push("b_out", (1, v), vec![0.0; v])?;
        Ok(Policy { vocab, arch, params })
    }

    /// Reassembles a policy from stored parts, checking parameter layout.
    pub fn from_parts(vocab: Vocab, arch: Architecture, mut params: ParameterVector) -> Result<Self> {
        arch.validate()?;
        let expected = match arch {
            Architecture::Tabular { .. } => Self::tabular(vocab.clone(), arch_order(arch))?.params,
            Architecture::Neural { .. } => Self::neural(vocab.clone(), arch, 0)?.params,
        };
        if expected.len() != params.len()
            || expected
                .iter()
                .zip(params.iter())
                .any(|(a, b)| a.name != b.name || a.shape != b.shape || b.data.len() != b.shape.0 * b.shape.1)
        {
            return Err(Error::Config("parameter layout does not match architecture".into()));
        }
        params.ensure_grad_buffers();
        Ok(Policy { vocab, arch, params })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &ParameterVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterVector {
        &mut self.params
    }

    /// Deep immutable copy, e.g. the base model for KL measurements.
    pub fn snapshot(&self) -> FrozenPolicy {
        FrozenPolicy(Arc::new(self.clone()))
    }

    fn check_context(&self, context: &[TokenId]) -> Result<()> {
        if context.is_empty() {
            return Err(Error::Empty("context"));
        }
        context.iter().try_for_each(|&t| self.vocab.check(t))
    }

    fn tabular_row(&self, order: usize, context: &[TokenId]) -> usize {
        let v = self.vocab.size();
        let start = context.len().saturating_sub(order);
        let pad = order - (context.len() - start);
        std::iter::repeat(Vocab::PAD)
            .take(pad)
            .chain(context[start..].iter().copied())
            .fold(0, |acc, t| acc * v + t)
    }

    fn window_tokens(window: usize, context: &[TokenId]) -> impl Iterator<Item = TokenId> + '_ {
        let start = context.len().saturating_sub(window);
        let pad = window - (context.len() - start);
        std::iter::repeat(Vocab::PAD)
            .take(pad)
            .chain(context[start..].iter().copied())
    }

    /// Raw next-token logits for a context (BOS + query + response prefix).
    pub fn logits(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        self.check_context(context)?;
        let v = self.vocab.size();
        Ok(match self.arch {
            Architecture::Tabular { context_order } => {
                let row = self.tabular_row(context_order, context);
                self.params.get(TABULAR_LOGITS).data[row * v..(row + 1) * v].to_vec()
            }
            Architecture::Neural {
                embed_dim: d,
                hidden_dim: h,
                window: w,
            } => {
                let tok = &self.params.get(TOK_EMB).data;
                let pos = &self.params.get(POS_EMB).data;
                let mut x = vec![0.0; w * d];
                for (j, t) in Self::window_tokens(w, context).enumerate() {
                    for k in 0..d {
                        x[j * d + k] = tok[t * d + k] + pos[j * d + k];
                    }
                }
                let mut hidden = vec![0.0; h];
                matmul_into(&x, &self.params.get(W_HIDDEN).data, &mut hidden, 1, w * d, h);
                for (hv, b) in hidden.iter_mut().zip(&self.params.get(B_HIDDEN).data) {
                    *hv = (*hv + b).tanh();
                }
                let mut out = vec![0.0; v];
                matmul_into(&hidden, &self.params.get(W_OUT).data, &mut out, 1, h, v);
                for (o, b) in out.iter_mut().zip(&self.params.get(B_OUT).data) {
                    *o += b;
                }
                out
            }
        })
    }

    /// `log π(· | context)`.
    pub fn token_distribution(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        self.token_distribution_at(context, 1.0)
    }

    /// `log softmax(logits / temperature)`.
    pub fn token_distribution_at(&self, context: &[TokenId], temperature: f64) -> Result<Vec<f64>> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        let mut l = self.logits(context)?;
        if temperature != 1.0 {
            l.iter_mut().for_each(|x| *x /= temperature);
        }
        log_softmax_in_place(&mut l);
        Ok(l)
    }

    /// `Σ_t log π(y_t | BOS, query, y_<t)`.
    pub fn sequence_logprob(&self, query: &[TokenId], response: &[TokenId]) -> Result<f64> {
        if response.is_empty() {
            return Err(Error::Empty("response"));
        }
        let mut ctx = prompt(query);
        let mut total = 0.0;
        for &y in response {
            self.vocab.check(y)?;
            total += self.token_distribution(&ctx)?[y];
            ctx.push(y);
        }
        Ok(total)
    }

    /// Samples one response at `cfg.temperature` until EOS or `cfg.max_len`.
    pub fn sample(&self, query: &[TokenId], cfg: &SamplerConfig) -> Result<Response> {
        cfg.validate()?;
        let mut rng = seed::rng(cfg.seed);
        let mut ctx = prompt(query);
        let mut tokens = Vec::new();
        let mut logprob = 0.0;
        let mut truncated = true;
        while tokens.len() < cfg.max_len {
            let dist = self.token_distribution_at(&ctx, cfg.temperature)?;
            let u: f64 = rng.random();
            let y = draw(&dist, u);
            logprob += dist[y];
            tokens.push(y);
            ctx.push(y);
            if y == Vocab::EOS {
                truncated = false;
                break;
            }
        }
        Ok(Response {
            tokens,
            source: Source::SelfGenerated,
            logprob: Some(logprob),
            truncated,
        })
    }

    /// Every terminating path (EOS-ended, or `max_len` long) with its exact
    /// probability. Zero-probability branches are pruned.
    pub fn enumerate_sequences(&self, query: &[TokenId], max_len: usize) -> Result<Vec<(Vec<TokenId>, f64)>> {
        const LIMIT: u64 = 1_000_000;
        let v = self.vocab.size() as u64;
        let within = (v as f64).powi(max_len as i32) <= LIMIT as f64;
        if !within || max_len == 0 {
            return Err(Error::EnumerationGuard {
                vocab: v as usize,
                max_len,
                limit: LIMIT,
            });
        }
        let mut out = Vec::new();
        let mut ctx = prompt(query);
        let base = ctx.len();
        self.enumerate_rec(&mut ctx, base, max_len, 0.0, &mut out)?;
        Ok(out)
    }

    fn enumerate_rec(
        &self,
        ctx: &mut Vec<TokenId>,
        base: usize,
        max_len: usize,
        logp: f64,
        out: &mut Vec<(Vec<TokenId>, f64)>,
    ) -> Result<()> {
        let dist = self.token_distribution(ctx)?;
        for (y, &lp) in dist.iter().enumerate() {
            let total = logp + lp;
            if total.exp() == 0.0 {
                continue;
            }
            ctx.push(y);
            if y == Vocab::EOS || ctx.len() - base == max_len {
                out.push((ctx[base..].to_vec(), total.exp()));
            } else {
                self.enumerate_rec(ctx, base, max_len, total, out)?;
            }
            ctx.pop();
        }
        Ok(())
    }

    /// Builds the taped forward pass for a batch of teacher-forced pairs.
    pub fn teacher_forced(&self, tape: &mut Tape, pairs: &[(&[TokenId], &[TokenId])]) -> Result<TeacherForced> {
        let mut contexts: Vec<Vec<TokenId>> = Vec::new();
        let mut targets = Vec::new();
        let mut spans = Vec::with_capacity(pairs.len());
        for (query, response) in pairs {
            if response.is_empty() {
                return Err(Error::Empty("response"));
            }
            let start = targets.len();
            let mut ctx = prompt(query);
            self.check_context(&ctx)?;
            for &y in *response {
                self.vocab.check(y)?;
                contexts.push(ctx.clone());
                targets.push(y);
                ctx.push(y);
            }
            spans.push(start..targets.len());
        }
        if targets.is_empty() {
            return Err(Error::Empty("teacher-forced batch"));
        }
        let logits = self.logits_on_tape(tape, &contexts)?;
        let log_dists = tape.log_softmax(logits)?;
        let token_logprobs = tape.gather(log_dists, &targets)?;
        Ok(TeacherForced {
            token_logprobs,
            log_dists,
            spans,
        })
    }

    /// `(contexts.len(), V)` logits recorded on `tape`.
    pub fn logits_on_tape(&self, tape: &mut Tape, contexts: &[Vec<TokenId>]) -> Result<Var> {
        for c in contexts {
            self.check_context(c)?;
        }
        match self.arch {
            Architecture::Tabular { context_order } => {
                let table = tape.param(&self.params, TABULAR_LOGITS);
                let rows: Vec<usize> = contexts
                    .iter()
                    .map(|c| self.tabular_row(context_order, c))
                    .collect();
                tape.gather_rows(table, &rows)
            }
            Architecture::Neural {
                embed_dim: d,
                window: w,
                ..
            } => {
                let n = contexts.len();
                let tok_idx: Vec<usize> = contexts
                    .iter()
                    .flat_map(|c| Self::window_tokens(w, c).collect::<Vec<_>>())
                    .collect();
                let pos_idx: Vec<usize> = (0..n).flat_map(|_| 0..w).collect();
                let tok = tape.param(&self.params, TOK_EMB);
                let pos = tape.param(&self.params, POS_EMB);
                let w1 = tape.param(&self.params, W_HIDDEN);
                let b1 = tape.param(&self.params, B_HIDDEN);
                let w2 = tape.param(&self.params, W_OUT);
                let b2 = tape.param(&self.params, B_OUT);
                let e = tape.gather_rows(tok, &tok_idx)?;
                let p = tape.gather_rows(pos, &pos_idx)?;
                let x = tape.add(e, p)?;
                let x = tape.reshape(x, (n, w * d))?;
                let hdn = tape.matmul(x, w1)?;
                let hdn = tape.add_row(hdn, b1)?;
                let hdn = tape.tanh(hdn)?;
                let out = tape.matmul(hdn, w2)?;
                tape.add_row(out, b2)
            }
        }
    }
}

fn arch_order(arch: Architecture) -> usize {
    match arch {
        Architecture::Tabular { context_order } => context_order,
        Architecture::Neural { .. } => 0,
    }
}

/// `BOS` followed by the query tokens.
pub fn prompt(query: &[TokenId]) -> Vec<TokenId> {
    let mut ctx = Vec::with_capacity(query.len() + 16);
    ctx.push(Vocab::BOS);
    ctx.extend_from_slice(query);
    ctx
}

/// Inverse-CDF draw from a log-distribution with a uniform variate `u ∈ [0,1)`.
fn draw(log_dist: &[f64], u: f64) -> TokenId {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, lp) in log_dist.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Shannon entropy (nats) of a log-distribution.
pub fn entropy(log_dist: &[f64]) -> f64 {
    log_dist
        .iter()
        .map(|&lp| {
            let p = lp.exp();
            if p > 0.0 {
                -p * lp
            } else {
                0.0
            }
        })
        .sum()
}

/// Immutable shared copy of a policy.
#[derive(Debug, Clone)]
pub struct FrozenPolicy(Arc<Policy>);

impl Deref for FrozenPolicy {
    type Target = Policy;

    fn deref(&self) -> &Policy {
        &self.0
    }
}

impl FrozenPolicy {
    /// A trainable copy of the frozen parameters.
    pub fn thaw(&self) -> Policy {
        (*self.0).clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_symbol_uniform(order: usize) -> Policy {
        // uniform over `a`,`b`; specials unreachable
        let vocab = Vocab::new(&["a", "b"]).unwrap();
        let mut p = Policy::tabular(vocab, order).unwrap();
        let v = p.vocab().size();
        for (i, x) in p.params_mut().get_mut(0).data.iter_mut().enumerate() {
            *x = if i % v >= 3 { 0.0 } else { -1000.0 };
        }
        p
    }

    #[test]
    fn uniform_tabular_distribution() {
        let vocab = Vocab::new(&["a", "b", "c", "d", "e"]).unwrap();
        let p = Policy::tabular(vocab, 2).unwrap();
        let d = p.token_distribution(&[Vocab::BOS, 4]).unwrap();
        for lp in d {
            assert!((lp + (8f64).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn temperature_scales_logits() {
        let vocab = Vocab::new(&["a"]).unwrap();
        let mut p = Policy::tabular(vocab, 1).unwrap();
        // only compare two tokens: make the others unreachable
        let v = p.vocab().size();
        let row = Vocab::BOS * v;
        let data = &mut p.params_mut().get_mut(0).data;
        data[row..row + v].copy_from_slice(&[-1000.0, -1000.0, 1.0, 0.0]);
        let d = p.token_distribution_at(&[Vocab::BOS], 0.5).unwrap();
        let z = (2f64).exp() + 1.0;
        assert!((d[2].exp() - (2f64).exp() / z).abs() < 1e-15);
        assert!((d[3].exp() - 1.0 / z).abs() < 1e-15);
    }

    #[test]
    fn context_errors() {
        let p = Policy::tabular(Vocab::new(&["a"]).unwrap(), 1).unwrap();
        assert!(matches!(p.token_distribution(&[]), Err(Error::Empty(_))));
        assert!(matches!(
            p.token_distribution(&[Vocab::BOS, 99]),
            Err(Error::TokenOutOfVocab { token: 99, .. })
        ));
        assert!(matches!(p.sequence_logprob(&[], &[]), Err(Error::Empty("response"))));
    }

    #[test]
    fn uniform_sequence_logprob() {
        let p = Policy::tabular(Vocab::new(&["a"]).unwrap(), 1).unwrap();
        let lp = p.sequence_logprob(&[3], &[3, 3, Vocab::EOS]).unwrap();
        assert!((lp + 3.0 * (4f64).ln()).abs() < 1e-12);
        assert!((lp - (-4.1589)).abs() < 1e-4);
    }

    #[test]
    fn enumerate_uniform_two_symbols() {
        let p = two_symbol_uniform(1);
        let paths = p.enumerate_sequences(&[], 2).unwrap();
        assert_eq!(paths.len(), 4);
        for (_, pr) in &paths {
            assert!((pr - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn enumeration_guard() {
        let p = Policy::tabular(Vocab::standard(), 1).unwrap();
        assert!(matches!(
            p.enumerate_sequences(&[], 5),
            Err(Error::EnumerationGuard { .. })
        ));
    }

    #[test]
    fn deterministic_policy_sampling() {
        let vocab = Vocab::new(&["a", "b"]).unwrap();
        let mut p = Policy::tabular(vocab, 1).unwrap();
        let v = p.vocab().size();
        // BOS -> a, a -> b, b -> EOS
        let data = &mut p.params_mut().get_mut(0).data;
        data[Vocab::BOS * v + 3] = 50.0;
        data[3 * v + 4] = 50.0;
        data[4 * v + Vocab::EOS] = 50.0;
        for s in 0..20 {
            let r = p.sample(&[], &SamplerConfig::train(s)).unwrap();
            assert_eq!(r.tokens, vec![3, 4, Vocab::EOS]);
            assert!(!r.truncated);
        }
    }

    #[test]
    fn truncation_is_flagged() {
        let p = two_symbol_uniform(1);
        let cfg = SamplerConfig {
            temperature: 1.0,
            max_len: 4,
            seed: 3,
        };
        let r = p.sample(&[], &cfg).unwrap();
        assert_eq!(r.tokens.len(), 4);
        assert!(r.truncated);
    }

    #[test]
    fn sampler_config_validation() {
        let mut cfg = SamplerConfig::train(0);
        cfg.temperature = 0.0;
        assert!(cfg.validate().is_err());
        cfg.temperature = 1.0;
        cfg.max_len = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn entropy_bounds() {
        let uniform = vec![-(8f64).ln(); 8];
        assert!((entropy(&uniform) - (8f64).ln()).abs() < 1e-12);
        let mut peaked = vec![-1000.0; 8];
        peaked[0] = 0.0;
        assert_eq!(entropy(&peaked), 0.0);
    }

    #[test]
    fn snapshot_is_isolated() {
        let mut p = Policy::neural(Vocab::standard(), Architecture::neural_default(), 1).unwrap();
        let snap = p.snapshot();
        p.params_mut().get_mut(0).data[0] += 1.0;
        assert_ne!(snap.params(), p.params());
        assert_eq!(snap.thaw().params().get(0).data[0] + 1.0, p.params().get(0).data[0]);
    }
}
