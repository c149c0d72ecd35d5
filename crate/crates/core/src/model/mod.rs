// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small pre-norm transformer decoder that can be evaluated on arbitrary
//! position-tagged subsets of a sequence.
//!
//! Every entry keeps its true position embedding, so evaluating the entries
//! `{(0, [BOS]), (p1, y_p1), ..., (pk, y_pk)}` conditions the next-token
//! distribution on exactly that subset of the context. The same decoder can
//! also run on a full prefix with some entries hidden from attention; both
//! routes agree to rounding error.

mod checkpoint;
mod engine;
mod params;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::real::Real;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use params::{LayerParams, Parameters};

pub(crate) use engine::{Batch, Dropout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Position-tagged tokens with strictly increasing positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseInput {
    entries: Vec<(usize, TokenId)>,
}

impl SparseInput {
    pub fn new(entries: Vec<(usize, TokenId)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Input("empty model input".into()));
        }
        if entries.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Input("entry positions must be strictly increasing".into()));
        }
        Ok(Self { entries })
    }

    /// `[BOS]` at position 0 followed by `tokens` at positions `1..`.
    pub fn full(bos: TokenId, tokens: &[TokenId]) -> Self {
        let mut entries = Vec::with_capacity(tokens.len() + 1);
        entries.push((0, bos));
        entries.extend(tokens.iter().enumerate().map(|(i, &t)| (i + 1, t)));
        Self { entries }
    }

    /// `[BOS]` plus the tokens of `seq` at the given 1-based positions.
    pub fn subset(bos: TokenId, seq: &[TokenId], positions: &[usize]) -> Result<Self> {
        let mut entries = Vec::with_capacity(positions.len() + 1);
        entries.push((0, bos));
        for &p in positions {
            if p == 0 || p > seq.len() {
                return Err(Error::Input(format!("position {p} outside a sequence of length {}", seq.len())));
            }
            entries.push((p, seq[p - 1]));
        }
        Self::new(entries)
    }

    pub fn entries(&self) -> &[(usize, TokenId)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.0)
    }
}

/// Row-stochastic `n x n` attention pattern of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix<T> {
    pub n: usize,
    pub data: Vec<T>,
}

impl<T: Real> AttentionMatrix<T> {
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// Log next-token distribution read at the last entry.
    pub next_token_logprobs: Vec<T>,
    /// `attentions[layer][head]`.
    pub attentions: Vec<Vec<AttentionMatrix<T>>>,
}

#[derive(Debug, Clone)]
pub struct InputGradients<T> {
    /// Gradient of the target log-probability with respect to each entry's
    /// token embedding, `entries x d_model`.
    pub grads: Vec<Vec<T>>,
    /// The token embedding of each entry.
    pub embeddings: Vec<Vec<T>>,
    pub target_logprob: T,
}

/// One training sequence together with the entries hidden from attention.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub input: SparseInput,
    /// Entry indices hidden as attention keys (each still attends to itself).
    pub drop: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Transformer<T> {
    pub cfg: ModelConfig,
    pub params: Parameters<T>,
}

impl<T: Real> Transformer<T> {
    pub fn new(cfg: ModelConfig, params: Parameters<T>) -> Result<Self> {
        cfg.validate()?;
        params.check_shapes(&cfg)?;
        Ok(Self { cfg, params })
    }

    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, params: Parameters::init(&cfg, seed) })
    }

    pub fn cast<U: Real>(&self) -> Transformer<U> {
        Transformer { cfg: self.cfg, params: self.params.cast() }
    }

    fn check_input(&self, input: &SparseInput, drop: Option<&[usize]>) -> Result<()> {
        if input.is_empty() {
            return Err(Error::Input("empty model input".into()));
        }
        for &(pos, tok) in input.entries() {
            if pos >= self.cfg.max_positions {
                return Err(Error::Input(format!("position {pos} overflows max_positions {}", self.cfg.max_positions)));
            }
            if tok as usize >= self.cfg.vocab_size {
                return Err(Error::Input(format!("token id {tok} outside vocab of size {}", self.cfg.vocab_size)));
            }
        }
        if let Some(&bad) = drop.unwrap_or(&[]).iter().find(|&&i| i >= input.len()) {
            return Err(Error::Input(format!("drop index {bad} outside {} entries", input.len())));
        }
        Ok(())
    }

    fn batch_of(&self, items: &[(&SparseInput, Option<&[usize]>)]) -> Result<Batch<T>> {
        for (input, drop) in items {
            self.check_input(input, *drop)?;
        }
        Ok(Batch::new(&self.params, self.cfg.d_model, items))
    }

    /// Runs the decoder on exactly the given entries. Entries listed in `drop`
    /// still occupy their slot but are hidden from every other query.
    pub fn forward(&self, input: &SparseInput, drop: Option<&[usize]>) -> Result<ForwardOutput<T>> {
        let batch = self.batch_of(&[(input, drop)])?;
        let last = input.len() - 1;
        let cache = engine::forward(&self.cfg, &self.params, &batch, &[last], None);
        let n = input.len();
        let h = self.cfg.n_heads;
        let attentions = cache
            .layers
            .iter()
            .map(|lc| {
                (0..h)
                    .map(|head| AttentionMatrix { n, data: lc.probs[head * n * n..(head + 1) * n * n].to_vec() })
                    .collect()
            })
            .collect();
        Ok(ForwardOutput { next_token_logprobs: engine::log_softmax(&cache.logits), attentions })
    }

    /// Next-token log-distributions for many inputs in one batched pass.
    pub fn next_token_logprobs_batch(&self, inputs: &[(&SparseInput, Option<&[usize]>)]) -> Result<Vec<Vec<T>>> {
        Ok(self.next_token_logits_batch(inputs)?.iter().map(|l| engine::log_softmax(l)).collect())
    }

    /// Unnormalized next-token scores read at the last entry of each input.
    pub fn next_token_logits_batch(&self, inputs: &[(&SparseInput, Option<&[usize]>)]) -> Result<Vec<Vec<T>>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let batch = self.batch_of(inputs)?;
        let heads: Vec<usize> = batch.offsets[1..].iter().map(|&o| o - 1).collect();
        let cache = engine::forward(&self.cfg, &self.params, &batch, &heads, None);
        Ok(cache.logits.chunks(self.cfg.vocab_size).map(<[T]>::to_vec).collect())
    }

    /// Log next-token distributions read at every entry of each input.
    pub fn row_logprobs(&self, inputs: &[&SparseInput]) -> Result<Vec<Vec<Vec<T>>>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let items: Vec<_> = inputs.iter().map(|&i| (i, None)).collect();
        let batch = self.batch_of(&items)?;
        let heads: Vec<usize> = (0..batch.rows()).collect();
        let cache = engine::forward(&self.cfg, &self.params, &batch, &heads, None);
        let v = self.cfg.vocab_size;
        let mut rows = cache.logits.chunks(v).map(engine::log_softmax);
        Ok(inputs.iter().map(|inp| rows.by_ref().take(inp.len()).collect()).collect())
    }

    /// Exact gradient of `log f(target | input)` with respect to each entry's
    /// token embedding.
    pub fn input_embedding_grads(&self, input: &SparseInput, target: TokenId) -> Result<InputGradients<T>> {
        self.check_input(input, None)?;
        let d = self.cfg.d_model;
        let embeddings: Vec<Vec<T>> =
            input.entries().iter().map(|&(_, tok)| self.params.token_embedding(tok, d).to_vec()).collect();
        let positions: Vec<usize> = input.positions().collect();
        self.grads_at_embeddings(&positions, &embeddings, target).map(|(lp, grads)| InputGradients {
            grads,
            embeddings,
            target_logprob: lp,
        })
    }

    /// Gradient of `log f(target | ...)` when the entries carry arbitrary
    /// token vectors (position embeddings are still added). Used for
    /// path-integrated attributions.
    pub fn grads_at_embeddings(
        &self,
        positions: &[usize],
        token_vectors: &[Vec<T>],
        target: TokenId,
    ) -> Result<(T, Vec<Vec<T>>)> {
        let d = self.cfg.d_model;
        if positions.is_empty() || positions.len() != token_vectors.len() {
            return Err(Error::Input("positions and token vectors must be non-empty and aligned".into()));
        }
        if token_vectors.iter().any(|v| v.len() != d) {
            return Err(Error::Shape(format!("token vectors must have length {d}")));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) || positions[positions.len() - 1] >= self.cfg.max_positions {
            return Err(Error::Input("positions must increase and fit max_positions".into()));
        }
        if target as usize >= self.cfg.vocab_size {
            return Err(Error::Input(format!("target id {target} outside vocab")));
        }
        let batch = Batch::from_vectors(positions, token_vectors, d);
        let last = positions.len() - 1;
        let cache = engine::forward(&self.cfg, &self.params, &batch, &[last], None);
        let logp = engine::log_softmax(&cache.logits);
        // d log p_target / d logits = onehot - softmax
        let dlogits: Vec<T> = logp
            .iter()
            .enumerate()
            .map(|(i, &l)| if i == target as usize { T::one() - l.exp() } else { -l.exp() })
            .collect();
        let (_, d_embed) = engine::backward(&self.cfg, &self.params, &batch, &cache, &dlogits);
        Ok((logp[target as usize], d_embed.chunks(d).map(<[T]>::to_vec).collect()))
    }

    /// Mean next-token negative log-likelihood over every non-final entry of
    /// every item, and its exact parameter gradient.
    pub fn loss_and_param_grads(&self, batch: &[TrainItem]) -> Result<(T, Parameters<T>)> {
        self.loss_and_param_grads_with(batch, None)
    }

    pub(crate) fn loss_and_param_grads_with(
        &self,
        items: &[TrainItem],
        dropout: Option<Dropout<'_>>,
    ) -> Result<(T, Parameters<T>)> {
        if items.is_empty() {
            return Err(Error::Input("empty training batch".into()));
        }
        if let Some(short) = items.iter().find(|it| it.input.len() < 2) {
            return Err(Error::Input(format!("training sequence of {} entries is too short", short.input.len())));
        }
        let refs: Vec<(&SparseInput, Option<&[usize]>)> =
            items.iter().map(|it| (&it.input, Some(it.drop.as_slice()))).collect();
        let batch = self.batch_of(&refs)?;
        let mut heads = Vec::new();
        let mut targets = Vec::new();
        let mut row = 0;
        for it in items {
            let n = it.input.len();
            for r in 0..n - 1 {
                heads.push(row + r);
                targets.push(it.input.entries()[r + 1].1);
            }
            row += n;
        }
        let cache = engine::forward(&self.cfg, &self.params, &batch, &heads, dropout);
        let (loss, dlogits) = engine::nll_and_grad(&cache.logits, &targets, self.cfg.vocab_size);
        let (mut grads, d_embed) = engine::backward(&self.cfg, &self.params, &batch, &cache, &dlogits);
        grads.scatter_token_grads(&batch.tokens, &d_embed, self.cfg.d_model);
        Ok((loss, grads))
    }
}

#[cfg(test)]
mod tests;
