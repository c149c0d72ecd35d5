// SPDX-License-Identifier: MIT OR Apache-2.0

//! Saliency orderings and the shortest sufficient prefix of an ordering.
//!
//! Attention-based scores come from the full-context forward pass. Signed
//! gradient scores are ordered by magnitude.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::model::{AttentionMatrix, SparseInput, Transformer};
use crate::rationalizer::{Predictor, Rationale, Status, TraceStep};
use crate::real::Real;
use crate::{argmax, atomic_write, rank_of, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SaliencyMethod {
    #[serde(rename = "grad_norm")]
    GradNorm,
    #[serde(rename = "grad_x_emb")]
    GradXEmb,
    #[serde(rename = "ig")]
    IntegratedGradients,
    #[serde(rename = "last_attn")]
    LastAttention,
    #[serde(rename = "all_attn")]
    AllAttentions,
    #[serde(rename = "rollout")]
    AttentionRollout,
}

impl SaliencyMethod {
    pub const ALL: [SaliencyMethod; 6] = [
        SaliencyMethod::GradNorm,
        SaliencyMethod::GradXEmb,
        SaliencyMethod::IntegratedGradients,
        SaliencyMethod::LastAttention,
        SaliencyMethod::AllAttentions,
        SaliencyMethod::AttentionRollout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SaliencyMethod::GradNorm => "grad_norm",
            SaliencyMethod::GradXEmb => "grad_x_emb",
            SaliencyMethod::IntegratedGradients => "ig",
            SaliencyMethod::LastAttention => "last_attn",
            SaliencyMethod::AllAttentions => "all_attn",
            SaliencyMethod::AttentionRollout => "rollout",
        }
    }
}

impl fmt::Display for SaliencyMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SaliencyMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

/// Context positions `1..t` ranked by a saliency score, `t - 1` first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyOrdering {
    pub method: SaliencyMethod,
    pub t: usize,
    /// `scores[k - 1]` belongs to position `k`.
    pub scores: Vec<f64>,
    pub order: Vec<usize>,
}

impl SaliencyOrdering {
    pub fn from_scores(method: SaliencyMethod, t: usize, scores: Vec<f64>) -> Result<Self> {
        if t < 2 || scores.len() != t - 1 {
            return Err(Error::Shape(format!("{} scores for target position {t}", scores.len())));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::Input(format!("{method} produced a NaN score")));
        }
        let mut rest: Vec<usize> = (1..t - 1).collect();
        // Stable sort keeps lower positions first among equal scores.
        rest.sort_by(|&a, &b| scores[b - 1].partial_cmp(&scores[a - 1]).unwrap());
        let mut order = vec![t - 1];
        order.extend(rest);
        Ok(SaliencyOrdering { method, t, scores, order })
    }

    /// Highest-ranked position other than the mandatory `t - 1`.
    pub fn top(&self) -> Option<usize> {
        self.order.get(1).copied()
    }
}

/// Signed integrated-gradients attributions along the straight line from a
/// zero baseline to `x`, by the midpoint rule with `steps` points.
///
/// `grad` returns the gradient of the objective at a point. Rows with
/// `scaled[i] == false` stay fixed at their value in `x` and get attribution 0.
pub fn integrated_gradients(
    x: &[Vec<f64>],
    scaled: &[bool],
    steps: usize,
    mut grad: impl FnMut(&[Vec<f64>]) -> Result<Vec<Vec<f64>>>,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Input("integrated gradients needs at least one step".into()));
    }
    if scaled.len() != x.len() {
        return Err(Error::Shape("scaled mask must have one flag per row".into()));
    }
    let mut acc: Vec<Vec<f64>> = x.iter().map(|r| vec![0.0; r.len()]).collect();
    for i in 0..steps {
        let alpha = (i as f64 + 0.5) / steps as f64;
        let point: Vec<Vec<f64>> = x
            .iter()
            .zip(scaled)
            .map(|(r, &s)| if s { r.iter().map(|v| v * alpha).collect() } else { r.clone() })
            .collect();
        let g = grad(&point)?;
        for (a, gr) in acc.iter_mut().zip(&g) {
            for (av, gv) in a.iter_mut().zip(gr) {
                *av += gv;
            }
        }
    }
    Ok(x.iter()
        .zip(&acc)
        .zip(scaled)
        .map(|((r, a), &s)| if s { r.iter().zip(a).map(|(xv, av)| xv * av / steps as f64).sum() } else { 0.0 })
        .collect())
}

/// Attention rollout: per layer, heads averaged, mixed half-and-half with the
/// identity, rows renormalized, and layers composed bottom-up.
pub fn attention_rollout<T: Real>(layers: &[Vec<AttentionMatrix<T>>]) -> Result<Vec<f64>> {
    let n = layers.first().and_then(|l| l.first()).map(|a| a.n).ok_or_else(|| Error::Shape("no attention".into()))?;
    let mut r = vec![0.0; n * n];
    for i in 0..n {
        r[i * n + i] = 1.0;
    }
    for heads in layers {
        let mut a = vec![0.0; n * n];
        for h in heads {
            if h.n != n {
                return Err(Error::Shape("attention matrices differ in size".into()));
            }
            for (av, hv) in a.iter_mut().zip(&h.data) {
                *av += hv.as_f64() / heads.len() as f64;
            }
        }
        for i in 0..n {
            a[i * n + i] += 1.0;
            let row = &mut a[i * n..(i + 1) * n];
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= z);
        }
        let mut next = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let aik = a[i * n + k];
                if aik != 0.0 {
                    for j in 0..n {
                        next[i * n + j] += aik * r[k * n + j];
                    }
                }
            }
        }
        r = next;
    }
    Ok(r)
}

fn mean_attention_row<T: Real>(mats: &[&AttentionMatrix<T>], row: usize) -> Vec<f64> {
    let n = mats[0].n;
    let mut out = vec![0.0; n];
    for m in mats {
        for (o, v) in out.iter_mut().zip(m.row(row)) {
            *o += v.as_f64() / mats.len() as f64;
        }
    }
    out
}

/// Ranks the context of `y_t` with one of the six saliency methods.
pub fn saliency_ordering<T: Real>(
    method: SaliencyMethod,
    model: &Transformer<T>,
    bos: TokenId,
    seq: &[TokenId],
    t: usize,
    ig_steps: usize,
) -> Result<SaliencyOrdering> {
    if t < 2 || t > seq.len() {
        return Err(Error::Input(format!("target position {t} needs 2 <= t <= {}", seq.len())));
    }
    let target = seq[t - 1];
    // Entry k of the input is position k, with BOS at 0.
    let input = SparseInput::full(bos, &seq[..t - 1]);
    let row = t - 1;
    let scores: Vec<f64> = match method {
        SaliencyMethod::GradNorm | SaliencyMethod::GradXEmb => {
            let g = model.input_embedding_grads(&input, target)?;
            (1..t)
                .map(|k| {
                    let gk = &g.grads[k];
                    if method == SaliencyMethod::GradNorm {
                        gk.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()
                    } else {
                        gk.iter().zip(&g.embeddings[k]).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>().abs()
                    }
                })
                .collect()
        }
        SaliencyMethod::IntegratedGradients => {
            let g = model.input_embedding_grads(&input, target)?;
            let x: Vec<Vec<f64>> = g.embeddings.iter().map(|r| r.iter().map(|v| v.as_f64()).collect()).collect();
            let scaled: Vec<bool> = (0..t).map(|k| k > 0).collect();
            let positions: Vec<usize> = (0..t).collect();
            let attr = integrated_gradients(&x, &scaled, ig_steps, |point| {
                let pt: Vec<Vec<T>> = point.iter().map(|r| r.iter().map(|&v| T::of(v)).collect()).collect();
                let (_, gr) = model.grads_at_embeddings(&positions, &pt, target)?;
                Ok(gr.iter().map(|r| r.iter().map(|v| v.as_f64()).collect()).collect())
            })?;
            attr[1..].iter().map(|a| a.abs()).collect()
        }
        SaliencyMethod::LastAttention | SaliencyMethod::AllAttentions | SaliencyMethod::AttentionRollout => {
            let out = model.forward(&input, None)?;
            let full = match method {
                SaliencyMethod::LastAttention => {
                    let last: Vec<&AttentionMatrix<T>> = out.attentions.last().unwrap().iter().collect();
                    mean_attention_row(&last, row)
                }
                SaliencyMethod::AllAttentions => {
                    let all: Vec<&AttentionMatrix<T>> = out.attentions.iter().flatten().collect();
                    mean_attention_row(&all, row)
                }
                _ => {
                    let r = attention_rollout(&out.attentions)?;
                    r[row * t..(row + 1) * t].to_vec()
                }
            };
            full[1..].to_vec()
        }
    };
    SaliencyOrdering::from_scores(method, t, scores)
}

/// The shortest sufficient prefix of `ordering`, capped at `max_steps`
/// positions.
pub fn ordering_to_rationale<P: Predictor + ?Sized>(
    pred: &P,
    ordering: &SaliencyOrdering,
    seq: &[TokenId],
    t: usize,
    max_steps: usize,
) -> Result<Rationale> {
    if ordering.t != t || t > seq.len() {
        return Err(Error::Input(format!("ordering for position {} used at position {t}", ordering.t)));
    }
    let mut check = ordering.order.clone();
    check.sort_unstable();
    if check != (1..t).collect::<Vec<_>>() || ordering.order[0] != t - 1 {
        return Err(Error::Input("ordering is not a permutation of the context starting at t - 1".into()));
    }
    if max_steps == 0 {
        return Err(Error::Input("max_steps must be at least 1".into()));
    }
    let target = seq[t - 1];
    let mut s: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    let mut sufficient = false;
    for &k in ordering.order.iter().take(max_steps) {
        s.insert(s.binary_search(&k).unwrap_err(), k);
        let lp = pred.log_probs(seq, t, &s)?;
        trace.push(TraceStep { added: k, prob: lp[target as usize].exp(), rank: rank_of(&lp, target as usize) });
        if argmax(&lp) == target as usize {
            sufficient = true;
            break;
        }
    }
    Ok(Rationale {
        t,
        target,
        indices: s,
        sufficient,
        trace,
        method: ordering.method.name().to_string(),
        status: Status::Ok,
    })
}

/// One line of an ordering dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingRecord {
    pub example: usize,
    pub method: SaliencyMethod,
    pub t: usize,
    pub order: Vec<usize>,
    pub scores: Vec<f64>,
}

impl OrderingRecord {
    pub fn new(example: usize, o: &SaliencyOrdering) -> Self {
        OrderingRecord { example, method: o.method, t: o.t, order: o.order.clone(), scores: o.scores.clone() }
    }
}

pub fn write_orderings(path: &Path, records: &[OrderingRecord]) -> Result<()> {
    atomic_write(path, |w| {
        for r in records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}
