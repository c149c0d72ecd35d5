// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy and exhaustive search for sufficient rationales.
//!
//! Rationales always contain `t - 1`, the position whose query predicts `y_t`,
//! and it counts toward their length.

mod predictor;
mod record;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

pub use predictor::{EvalMode, ModelPredictor, Predictor, PredictorStats, TabularPredictor};
pub use record::{read_rationales, write_rationales, RationaleRecord};

use crate::corpus::TokenId;
use crate::{argmax, rank_of, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub added: usize,
    /// `p(y_t | y_S)` after adding.
    pub prob: f64,
    /// 1-based rank of `y_t` in the same distribution.
    pub rank: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    #[default]
    Ok,
    /// Exhaustive search found nothing within its size cap.
    CapExceeded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rationale {
    pub t: usize,
    pub target: TokenId,
    pub indices: Vec<usize>,
    pub sufficient: bool,
    #[serde(default)]
    pub trace: Vec<TraceStep>,
    pub method: String,
    #[serde(default)]
    pub status: Status,
}

impl Rationale {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn check_target(seq: &[TokenId], t: usize) -> Result<TokenId> {
    if t < 2 || t > seq.len() {
        return Err(Error::Input(format!("target position {t} needs 2 <= t <= {}", seq.len())));
    }
    Ok(seq[t - 1])
}

fn sufficient_for(lp: &[f64], target: TokenId) -> bool {
    argmax(lp) == target as usize
}

fn step(k: usize, lp: &[f64], target: TokenId) -> TraceStep {
    TraceStep { added: k, prob: lp[target as usize].exp(), rank: rank_of(lp, target as usize) }
}

/// Whether the predictor's argmax given only `subset` is `y_t`.
pub fn is_sufficient<P: Predictor + ?Sized>(pred: &P, seq: &[TokenId], subset: &[usize], t: usize) -> Result<bool> {
    let target = check_target(seq, t)?;
    if subset.last() != Some(&(t - 1)) {
        return Err(Error::Input(format!("subset {subset:?} must contain position {}", t - 1)));
    }
    Ok(sufficient_for(&pred.log_probs(seq, t, subset)?, target))
}

/// Whether the prediction from the full left context is `y_t`. Rationales are
/// only meaningful for such positions.
pub fn full_context_correct<P: Predictor + ?Sized>(pred: &P, seq: &[TokenId], t: usize) -> Result<bool> {
    let all: Vec<usize> = (1..t).collect();
    is_sufficient(pred, seq, &all, t)
}

/// Grows `S` from `{t-1}`, each step adding the position that most raises
/// `p(y_t | y_S)`, until the argmax is `y_t` or `|S|` reaches
/// `min(t - 1, max_steps)`. Ties go to the lowest position.
pub fn greedy_rationalize<P: Predictor + ?Sized>(
    pred: &P,
    seq: &[TokenId],
    t: usize,
    max_steps: usize,
) -> Result<Rationale> {
    let target = check_target(seq, t)?;
    if max_steps == 0 {
        return Err(Error::Input("max_steps must be at least 1".into()));
    }
    let limit = max_steps.min(t - 1);
    let mut s = vec![t - 1];
    let mut lp = pred.log_probs(seq, t, &s)?;
    let mut trace = vec![step(t - 1, &lp, target)];
    while !sufficient_for(&lp, target) && s.len() < limit {
        let candidates: Vec<usize> = (1..t - 1).filter(|k| s.binary_search(k).is_err()).collect();
        let subsets: Vec<Vec<usize>> = candidates
            .iter()
            .map(|&k| {
                let mut c = s.clone();
                c.insert(c.binary_search(&k).unwrap_err(), k);
                c
            })
            .collect();
        let scored = pred.log_probs_batch(seq, t, &subsets)?;
        let mut best = 0;
        for (i, cand) in scored.iter().enumerate().skip(1) {
            if cand[target as usize] > scored[best][target as usize] {
                best = i;
            }
        }
        let k = candidates[best];
        s.insert(s.binary_search(&k).unwrap_err(), k);
        lp = scored.into_iter().nth(best).unwrap();
        trace.push(step(k, &lp, target));
    }
    Ok(Rationale {
        t,
        target,
        indices: s,
        sufficient: sufficient_for(&lp, target),
        trace,
        method: "greedy".into(),
        status: Status::Ok,
    })
}

/// First sufficient subset in order of size, then lexicographic order, among
/// subsets containing `t - 1` of size at most `size_cap`. When none exists the
/// result has status [`Status::CapExceeded`] and no indices.
pub fn exhaustive_rationalize<P: Predictor + ?Sized>(
    pred: &P,
    seq: &[TokenId],
    t: usize,
    size_cap: usize,
) -> Result<Rationale> {
    let target = check_target(seq, t)?;
    if size_cap == 0 {
        return Err(Error::Input("size_cap must be at least 1".into()));
    }
    let done = |indices: Vec<usize>, status| Rationale {
        t,
        target,
        sufficient: status == Status::Ok,
        indices,
        trace: Vec::new(),
        method: "exhaustive".into(),
        status,
    };
    for size in 1..=size_cap.min(t - 1) {
        let all = (1..t - 1).combinations(size - 1).map(|mut c| {
            c.push(t - 1);
            c
        });
        for chunk in &all.chunks(256) {
            let subsets: Vec<Vec<usize>> = chunk.collect();
            let scored = pred.log_probs_batch(seq, t, &subsets)?;
            if let Some(i) = scored.iter().position(|lp| sufficient_for(lp, target)) {
                return Ok(done(subsets[i].clone(), Status::Ok));
            }
        }
    }
    Ok(done(Vec::new(), Status::CapExceeded))
}

/// `|greedy| / |exhaustive|` for two sufficient rationales of one target.
pub fn approximation_ratio(greedy: &Rationale, exhaustive: &Rationale) -> Result<f64> {
    if !greedy.sufficient || !exhaustive.sufficient {
        return Err(Error::Input("approximation ratio needs two sufficient rationales".into()));
    }
    if greedy.t != exhaustive.t || greedy.target != exhaustive.target {
        return Err(Error::Input(format!("rationales target positions {} and {}", greedy.t, exhaustive.t)));
    }
    Ok(greedy.len() as f64 / exhaustive.len() as f64)
}
