use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Ordered token inventory. Ids 0, 1, 2 are always PAD, BOS, EOS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    pub const PAD: TokenId = 0;
    pub const BOS: TokenId = 1;
    pub const EOS: TokenId = 2;
    const SPECIALS: [&'static str; 3] = ["<pad>", "<bos>", "<eos>"];

    /// Builds a vocabulary from content symbols; the three specials are prepended.
    pub fn new<S: AsRef<str>>(symbols: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = Self::SPECIALS.iter().map(|s| s.to_string()).collect();
        for s in symbols {
            let s = s.as_ref();
            if tokens.iter().any(|t| t == s) {
                return Err(Error::Config(format!("duplicate vocabulary symbol `{s}`")));
            }
            tokens.push(s.to_string());
        }
        Ok(Vocab { tokens })
    }

    /// Shared vocabulary of both synthetic tasks: digits, `+ = ;` and letters `a`..`j`.
    pub fn standard() -> Self {
        let mut symbols: Vec<String> = (0..10).map(|d| d.to_string()).collect();
        symbols.extend(["+", "=", ";"].iter().map(|s| s.to_string()));
        symbols.extend((b'a'..=b'j').map(|c| (c as char).to_string()));
        Self::new(&symbols).expect("standard vocabulary is well-formed")
    }

    /// Non-special symbols in id order (ids start at 3).
    pub fn content_symbols(&self) -> &[String] {
        &self.tokens[Self::SPECIALS.len()..]
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.tokens.iter().position(|t| t == symbol)
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn check(&self, id: TokenId) -> Result<()> {
        if id < self.size() {
            Ok(())
        } else {
            Err(Error::TokenOutOfVocab {
                token: id,
                vocab: self.size(),
            })
        }
    }

    /// Space-separated rendering, for logs and examples.
    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.symbol(i).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
