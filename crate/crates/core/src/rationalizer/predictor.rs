// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::corpus::TokenId;
use crate::model::{SparseInput, Transformer};
use crate::real::Real;
use crate::{Error, Result};

/// Next-token distributions conditioned on a subset of the context.
///
/// `seq` holds the tokens at positions `1..=seq.len()`. `subset` is a sorted
/// list of positions in `1..t`; the result is `log f(. | y_subset)` for the
/// token at position `t`.
pub trait Predictor: Sync {
    fn vocab_size(&self) -> usize;

    fn log_probs(&self, seq: &[TokenId], t: usize, subset: &[usize]) -> Result<Vec<f64>>;

    /// Must equal calling [`Predictor::log_probs`] on each subset in turn.
    fn log_probs_batch(&self, seq: &[TokenId], t: usize, subsets: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        subsets.iter().map(|s| self.log_probs(seq, t, s)).collect()
    }
}

/// How a [`ModelPredictor`] presents a subset to the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Only BOS and the subset, at their original positions.
    Sparse,
    /// The whole prefix `0..t`, with the positions outside the subset masked.
    Masked,
}

/// Counters of model work, for checking evaluation accounting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PredictorStats {
    /// Subset evaluations.
    pub calls: u64,
    /// Sum over evaluations of the number of input entries given to the model.
    pub input_entries: u64,
    /// Largest single input.
    pub max_input: u64,
}

pub struct ModelPredictor<'a, T> {
    model: &'a Transformer<T>,
    bos: TokenId,
    mode: EvalMode,
    max_batch: usize,
    calls: AtomicU64,
    entries: AtomicU64,
    max_input: AtomicU64,
}

impl<'a, T: Real> ModelPredictor<'a, T> {
    pub fn new(model: &'a Transformer<T>, bos: TokenId, mode: EvalMode) -> Self {
        ModelPredictor {
            model,
            bos,
            mode,
            max_batch: 64,
            calls: AtomicU64::new(0),
            entries: AtomicU64::new(0),
            max_input: AtomicU64::new(0),
        }
    }

    pub fn mode(&self) -> EvalMode {
        self.mode
    }

    pub fn stats(&self) -> PredictorStats {
        PredictorStats {
            calls: self.calls.load(Ordering::Relaxed),
            input_entries: self.entries.load(Ordering::Relaxed),
            max_input: self.max_input.load(Ordering::Relaxed),
        }
    }

    pub fn reset_stats(&self) {
        self.calls.store(0, Ordering::Relaxed);
        self.entries.store(0, Ordering::Relaxed);
        self.max_input.store(0, Ordering::Relaxed);
    }

    fn input_for(&self, seq: &[TokenId], t: usize, subset: &[usize]) -> Result<(SparseInput, Vec<usize>)> {
        check_subset(seq, t, subset)?;
        let (input, drop) = match self.mode {
            EvalMode::Sparse => (SparseInput::subset(self.bos, seq, subset)?, Vec::new()),
            EvalMode::Masked => {
                let drop = (1..t).filter(|p| subset.binary_search(p).is_err()).collect();
                (SparseInput::full(self.bos, &seq[..t - 1]), drop)
            }
        };
        let n = input.len() as u64;
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.entries.fetch_add(n, Ordering::Relaxed);
        self.max_input.fetch_max(n, Ordering::Relaxed);
        Ok((input, drop))
    }
}

fn check_subset(seq: &[TokenId], t: usize, subset: &[usize]) -> Result<()> {
    if t < 1 || t > seq.len() {
        return Err(Error::Input(format!("target position {t} outside a sequence of length {}", seq.len())));
    }
    if subset.windows(2).any(|w| w[0] >= w[1]) || subset.iter().any(|&p| p == 0 || p >= t) {
        return Err(Error::Input(format!("subset {subset:?} is not a sorted subset of 1..{t}")));
    }
    Ok(())
}

impl<T: Real> Predictor for ModelPredictor<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.cfg.vocab_size
    }

    fn log_probs(&self, seq: &[TokenId], t: usize, subset: &[usize]) -> Result<Vec<f64>> {
        let (input, drop) = self.input_for(seq, t, subset)?;
        let out = self.model.forward(&input, Some(&drop))?;
        Ok(out.next_token_logprobs.iter().map(|x| x.as_f64()).collect())
    }

    fn log_probs_batch(&self, seq: &[TokenId], t: usize, subsets: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(subsets.len());
        for chunk in subsets.chunks(self.max_batch) {
            let prepared: Vec<(SparseInput, Vec<usize>)> =
                chunk.iter().map(|s| self.input_for(seq, t, s)).collect::<Result<_>>()?;
            let refs: Vec<(&SparseInput, Option<&[usize]>)> =
                prepared.iter().map(|(i, d)| (i, Some(d.as_slice()))).collect();
            for lp in self.model.next_token_logprobs_batch(&refs)? {
                out.push(lp.iter().map(|x| x.as_f64()).collect());
            }
        }
        Ok(out)
    }
}

/// A predictor given by an explicit table from subsets to probability
/// vectors, independent of the sequence contents.
#[derive(Clone, Debug)]
pub struct TabularPredictor {
    vocab_size: usize,
    table: HashMap<Vec<usize>, Vec<f64>>,
    default: Vec<f64>,
    calls: std::sync::Arc<AtomicU64>,
}

impl TabularPredictor {
    /// `default` is used for every subset missing from the table.
    pub fn new(default: Vec<f64>) -> Result<Self> {
        check_probs(&default)?;
        Ok(TabularPredictor { vocab_size: default.len(), table: HashMap::new(), default, calls: Default::default() })
    }

    pub fn set(&mut self, subset: Vec<usize>, probs: Vec<f64>) -> Result<()> {
        check_probs(&probs)?;
        if probs.len() != self.vocab_size {
            return Err(Error::Shape(format!("{} probabilities for a vocab of {}", probs.len(), self.vocab_size)));
        }
        self.table.insert(subset, probs);
        Ok(())
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

fn check_probs(p: &[f64]) -> Result<()> {
    let total: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Input(format!("{p:?} is not a probability vector")));
    }
    Ok(())
}

impl Predictor for TabularPredictor {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn log_probs(&self, seq: &[TokenId], t: usize, subset: &[usize]) -> Result<Vec<f64>> {
        check_subset(seq, t, subset)?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        let p = self.table.get(subset).unwrap_or(&self.default);
        Ok(p.iter().map(|x| x.ln()).collect())
    }
}
