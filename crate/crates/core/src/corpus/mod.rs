// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic languages, datasets, and their JSON-lines file format.
//!
//! Positions are 1-based: position 0 is reserved for the `[BOS]` anchor the
//! model prepends, and position `p` holds `tokens[p - 1]`.

mod generate;
mod io;
mod oracle;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generate::{gen_concat_pairs, gen_keyed_agreement, gen_majority, generate, KeyedConfig};
pub use io::{read_dataset, write_dataset};
pub use oracle::{majority_oracle, PartialObservation};

pub const BOS: &str = "[BOS]";
pub const EQUALS: &str = "=";

/// Number of random bits in a majority-language example.
pub const MAJORITY_BITS: usize = 17;
/// Full majority example length: the bits, `=`, and the label.
pub const MAJORITY_LEN: usize = MAJORITY_BITS + 2;

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if ids.insert(tok.clone(), i as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate vocab token `{tok}`")));
            }
        }
        if !ids.contains_key(BOS) {
            return Err(Error::Config(format!("vocab lacks the `{BOS}` token")));
        }
        Ok(Self { tokens, ids })
    }

    /// `{'0', '1', '=', '[BOS]'}` in that id order.
    pub fn majority() -> Self {
        Self::new(vec!["0".into(), "1".into(), EQUALS.into(), BOS.into()]).expect("static vocab")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn bos(&self) -> TokenId {
        self.ids[BOS]
    }

    /// True when this is exactly the majority-language vocabulary.
    pub fn is_majority(&self) -> bool {
        *self == Self::majority()
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        Vocab::new(tokens).map_err(serde::de::Error::custom)
    }
}

/// Optional structural annotations. All indices are 1-based positions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    /// The single position that determines the final token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub antecedent: Option<usize>,
    /// Inclusive span of positions carrying no information about the target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distractor: Option<(usize, usize)>,
    /// Length of the first segment of a concatenated example; positions
    /// `1..=boundary` belong to segment one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<usize>,
    /// Reference rationale for the final token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<TokenId>,
    #[serde(default)]
    pub meta: Meta,
}

impl Example {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token at 1-based position `pos`.
    pub fn at(&self, pos: usize) -> TokenId {
        self.tokens[pos - 1]
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        if self.tokens.len() < 2 {
            return Err(Error::Input(format!("example has {} tokens, need at least 2", self.tokens.len())));
        }
        if let Some(&bad) = self.tokens.iter().find(|&&id| id as usize >= vocab.len()) {
            return Err(Error::VocabMismatch(format!("token id {bad} is outside a vocab of size {}", vocab.len())));
        }
        let n = self.tokens.len();
        let in_range = |p: usize| (1..=n).contains(&p);
        let m = &self.meta;
        let ok = m.antecedent.is_none_or(in_range)
            && m.distractor.is_none_or(|(a, b)| in_range(a) && in_range(b) && a <= b)
            && m.boundary.is_none_or(|b| b >= 1 && b < n)
            && m.gold.as_ref().is_none_or(|g| g.iter().all(|&p| p >= 1 && p < n));
        if !ok {
            return Err(Error::Input("annotation index out of range".into()));
        }
        Ok(())
    }
}

/// Echo of the generator that produced a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum GeneratorConfig {
    Majority { n_examples: usize },
    Keyed(KeyedConfig),
    Concat { n_pairs: usize, base: Box<GeneratorConfig>, base_seed: u64 },
}

impl GeneratorConfig {
    pub fn n_examples(&self) -> usize {
        match self {
            GeneratorConfig::Majority { n_examples } => *n_examples,
            GeneratorConfig::Keyed(cfg) => cfg.n_examples,
            GeneratorConfig::Concat { n_pairs, .. } => *n_pairs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub examples: Vec<Example>,
    pub generator: GeneratorConfig,
    pub seed: u64,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.examples.len() != self.generator.n_examples() {
            return Err(Error::Input(format!(
                "dataset holds {} examples but its generator produced {}",
                self.examples.len(),
                self.generator.n_examples()
            )));
        }
        self.examples.iter().try_for_each(|ex| ex.validate(&self.vocab))
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Total number of predicted tokens (every position from 1 on).
    pub fn n_tokens(&self) -> usize {
        self.examples.iter().map(Example::len).sum()
    }
}
