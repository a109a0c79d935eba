//! Synthetic verifiable tasks and hybrid response groups.
//!
//! Two tasks share [`Vocab::standard`]:
//!
//! * `modadd`: query `a + b =` (operands zero-padded to the width of `M-1`),
//!   answer `(a + b) mod M` at the same width.
//! * `reverse`: query `c1 … cℓ =` over the first `a` letters, answer the
//!   reversed string.
//!
//! A response is `[scratch … ;] answer <eos>`. The answer span is everything
//! after the last `;` (or the whole response when there is none) up to the
//! first EOS. Experts emit the bare answer; the teacher's format prefixes a
//! scratch section (the unreduced sum for `modadd`, the length for `reverse`).

mod groups;

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use groups::{build_group, GroupCompositionConfig, ResponseGroup};

use crate::error::{Error, Result};
use crate::policy::{FrozenPolicy, TokenId, Vocab};
use crate::seed;

/// Task family and parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Modadd { modulus: u32 },
    Reverse { alphabet: u32, length: u32 },
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TaskSpec::Modadd { modulus } if !(7..=100).contains(&modulus) => Err(Error::Config(
                format!("modadd modulus must lie in [7, 100], got {modulus}"),
            )),
            TaskSpec::Reverse { alphabet, .. } if !(3..=10).contains(&alphabet) => Err(Error::Config(
                format!("reverse alphabet must lie in [3, 10], got {alphabet}"),
            )),
            TaskSpec::Reverse { length, .. } if !(2..=8).contains(&length) => Err(Error::Config(
                format!("reverse length must lie in [2, 8], got {length}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            TaskSpec::Modadd { modulus } => format!("modadd-m{modulus}"),
            TaskSpec::Reverse { alphabet, length } => format!("reverse-a{alphabet}-l{length}"),
        }
    }
}

/// A query together with its reference response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub query: Vec<TokenId>,
    pub expert: Vec<TokenId>,
}

/// A verifiable task: query sampler, reward oracle, expert and optional teacher.
#[derive(Debug, Clone)]
pub struct Task {
    spec: TaskSpec,
    vocab: Vocab,
    digit: [TokenId; 10],
    plus: TokenId,
    equals: TokenId,
    scratch_end: TokenId,
    letter: Vec<TokenId>,
    teacher: Option<FrozenPolicy>,
}

pub fn make_task(spec: TaskSpec) -> Result<Task> {
    spec.validate()?;
    let vocab = Vocab::standard();
    let id = |s: &str| vocab.id(s).expect("standard vocabulary symbol");
    let digit = std::array::from_fn(|d| id(&d.to_string()));
    let letter = (b'a'..=b'j').map(|c| id(&(c as char).to_string())).collect();
    Ok(Task {
        spec,
        plus: id("+"),
        equals: id("="),
        scratch_end: id(";"),
        digit,
        letter,
        vocab,
        teacher: None,
    })
}

fn width(n: u32) -> usize {
    n.max(1).to_string().len()
}

impl Task {
    pub fn spec(&self) -> TaskSpec {
        self.spec
    }

    pub fn name(&self) -> String {
        self.spec.label()
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn teacher(&self) -> Option<&FrozenPolicy> {
        self.teacher.as_ref()
    }

    pub fn with_teacher(mut self, teacher: FrozenPolicy) -> Self {
        self.teacher = Some(teacher);
        self
    }

    fn number(&self, value: u32, width: usize) -> Vec<TokenId> {
        format!("{value:0width$}")
            .bytes()
            .map(|b| self.digit[(b - b'0') as usize])
            .collect()
    }

    fn decode_number(&self, tokens: &[TokenId]) -> Option<u32> {
        tokens.iter().try_fold(0u32, |acc, t| {
            self.digit.iter().position(|d| d == t).map(|d| acc * 10 + d as u32)
        })
    }

    /// Number of distinct queries.
    pub fn query_space(&self) -> u64 {
        match self.spec {
            TaskSpec::Modadd { modulus } => (modulus as u64).pow(2),
            TaskSpec::Reverse { alphabet, length } => (alphabet as u64).pow(length),
        }
    }

    /// The `index`-th query in a fixed enumeration of the query space.
    pub fn query_at(&self, index: u64) -> Vec<TokenId> {
        match self.spec {
            TaskSpec::Modadd { modulus } => {
                let w = width(modulus - 1);
                let (a, b) = ((index / modulus as u64) as u32, (index % modulus as u64) as u32);
                let mut q = self.number(a, w);
                q.push(self.plus);
                q.extend(self.number(b, w));
                q.push(self.equals);
                q
            }
            TaskSpec::Reverse { alphabet, length } => {
                let mut rest = index;
                let mut q = vec![0; length as usize];
                for slot in q.iter_mut().rev() {
                    *slot = self.letter[(rest % alphabet as u64) as usize];
                    rest /= alphabet as u64;
                }
                q.push(self.equals);
                q
            }
        }
    }

    pub fn sample_query(&self, seed: u64) -> Vec<TokenId> {
        let idx = seed::rng(seed).random_range(0..self.query_space());
        self.query_at(idx)
    }

    fn operands(&self, query: &[TokenId]) -> Option<(u32, u32)> {
        let TaskSpec::Modadd { modulus } = self.spec else {
            return None;
        };
        let w = width(modulus - 1);
        if query.len() != 2 * w + 2 || query[w] != self.plus || query[2 * w + 1] != self.equals {
            return None;
        }
        let a = self.decode_number(&query[..w])?;
        let b = self.decode_number(&query[w + 1..2 * w + 1])?;
        (a < modulus && b < modulus).then_some((a, b))
    }

    fn letters(&self, query: &[TokenId]) -> Option<Vec<TokenId>> {
        let TaskSpec::Reverse { alphabet, length } = self.spec else {
            return None;
        };
        let (body, last) = query.split_at(query.len().checked_sub(1)?);
        let ok = body.len() == length as usize
            && last == [self.equals]
            && body.iter().all(|t| self.letter[..alphabet as usize].contains(t));
        ok.then(|| body.to_vec())
    }

    /// The oracle answer span for a well-formed query.
    pub fn answer(&self, query: &[TokenId]) -> Result<Vec<TokenId>> {
        let malformed = || Error::Config(format!("malformed {} query {query:?}", self.name()));
        match self.spec {
            TaskSpec::Modadd { modulus } => {
                let (a, b) = self.operands(query).ok_or_else(malformed)?;
                Ok(self.number((a + b) % modulus, width(modulus - 1)))
            }
            TaskSpec::Reverse { .. } => {
                let mut s = self.letters(query).ok_or_else(malformed)?;
                s.reverse();
                Ok(s)
            }
        }
    }

    /// Canonical shortest correct response: the answer followed by EOS.
    pub fn expert(&self, query: &[TokenId]) -> Result<Vec<TokenId>> {
        let mut r = self.answer(query)?;
        r.push(Vocab::EOS);
        Ok(r)
    }

    /// The teacher's verbose but valid format: scratch, `;`, answer, EOS.
    pub fn verbose_solution(&self, query: &[TokenId]) -> Result<Vec<TokenId>> {
        let mut r = match self.spec {
            TaskSpec::Modadd { modulus } => {
                let (a, b) = self
                    .operands(query)
                    .ok_or_else(|| Error::Config(format!("malformed modadd query {query:?}")))?;
                self.number(a + b, width(2 * (modulus - 1)))
            }
            TaskSpec::Reverse { length, .. } => self.number(length, 1),
        };
        r.push(self.scratch_end);
        r.extend(self.expert(query)?);
        Ok(r)
    }

    /// Answer span of a response, or `None` when it never emits EOS.
    pub fn answer_span<'a>(&self, response: &'a [TokenId]) -> Option<&'a [TokenId]> {
        let eos = response.iter().position(|&t| t == Vocab::EOS)?;
        let body = &response[..eos];
        let start = body
            .iter()
            .rposition(|&t| t == self.scratch_end)
            .map_or(0, |i| i + 1);
        Some(&body[start..])
    }

    /// Binary reward: 1 iff the answer span matches the oracle answer.
    /// Malformed queries and unterminated responses score 0.
    pub fn reward(&self, query: &[TokenId], response: &[TokenId]) -> f64 {
        match (self.answer(query), self.answer_span(response)) {
            (Ok(ans), Some(span)) if ans == span => 1.0,
            _ => 0.0,
        }
    }

    /// Deterministic list of `n` queries with expert responses. Queries are
    /// distinct whenever the query space allows it.
    pub fn dataset(&self, n_queries: usize, seed: u64) -> Result<Vec<Example>> {
        self.dataset_excluding(n_queries, seed, &HashSet::new())
    }

    /// Like [`Task::dataset`] but never returns a query in `exclude`
    /// (falls back to duplicates only once the remaining space is exhausted).
    pub fn dataset_excluding(
        &self,
        n_queries: usize,
        seed: u64,
        exclude: &HashSet<Vec<TokenId>>,
    ) -> Result<Vec<Example>> {
        if n_queries == 0 {
            return Err(Error::Config("n_queries must be at least 1".into()));
        }
        let space = self.query_space();
        let available = space.saturating_sub(exclude.len() as u64);
        let mut rng = seed::rng(seed::derive_seed(&[seed, 0xDA7A]));
        let mut seen: HashSet<Vec<TokenId>> = HashSet::new();
        let mut out = Vec::with_capacity(n_queries);
        while out.len() < n_queries {
            let q = self.query_at(rng.random_range(0..space));
            if exclude.contains(&q) && available > 0 {
                continue;
            }
            if (seen.len() as u64) < available && !seen.insert(q.clone()) {
                continue;
            }
            let expert = self.expert(&q)?;
            out.push(Example { query: q, expert });
        }
        Ok(out)
    }

    /// Disjoint train and evaluation splits (set-checked at generation time).
    pub fn split(&self, n_train: usize, n_eval: usize, seed: u64) -> Result<(Vec<Example>, Vec<Example>)> {
        let train = self.dataset(n_train, seed::derive_seed(&[seed, 1]))?;
        let used: HashSet<Vec<TokenId>> = train.iter().map(|e| e.query.clone()).collect();
        let eval = self.dataset_excluding(n_eval, seed::derive_seed(&[seed, 2]), &used)?;
        Ok((train, eval))
    }
}
