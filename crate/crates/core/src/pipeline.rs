// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rationalizing every selected target of a dataset with one method.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{ordering_to_rationale, saliency_ordering, OrderingRecord, SaliencyMethod};
use crate::corpus::Dataset;
use crate::model::Transformer;
use crate::rationalizer::{
    exhaustive_rationalize, full_context_correct, greedy_rationalize, EvalMode, ModelPredictor, RationaleRecord,
};
use crate::real::Real;
use crate::{atomic_write, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Greedy,
    Exhaustive,
    Saliency(SaliencyMethod),
}

impl Method {
    pub fn all() -> Vec<Method> {
        let mut v = vec![Method::Greedy, Method::Exhaustive];
        v.extend(SaliencyMethod::ALL.map(Method::Saliency));
        v
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Greedy => "greedy",
            Method::Exhaustive => "exhaustive",
            Method::Saliency(s) => s.name(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Method::Greedy),
            "exhaustive" => Ok(Method::Exhaustive),
            other => other.parse().map(Method::Saliency),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Positions {
    /// The final token of each example.
    Last,
    /// Every position from 2 on.
    All,
}

#[derive(Clone, Copy, Debug)]
pub struct RationalizeOptions {
    pub method: Method,
    pub positions: Positions,
    pub max_steps: usize,
    pub size_cap: usize,
    pub ig_steps: usize,
    pub mode: EvalMode,
    /// Only the first `limit` examples.
    pub limit: Option<usize>,
}

impl RationalizeOptions {
    pub fn new(method: Method) -> Self {
        RationalizeOptions {
            method,
            positions: Positions::Last,
            max_steps: usize::MAX,
            size_cap: 6,
            ig_steps: 100,
            mode: EvalMode::Sparse,
            limit: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RationalizeOutput {
    pub records: Vec<RationaleRecord>,
    pub orderings: Vec<OrderingRecord>,
    /// Targets the model gets wrong from the full context.
    pub skipped: usize,
}

enum Outcome {
    Skipped,
    Done(RationaleRecord, Option<OrderingRecord>),
}

/// Runs `opts.method` on every selected target with `workers` threads. The
/// output does not depend on `workers`.
pub fn rationalize_dataset<T: Real>(
    model: &Transformer<T>,
    ds: &Dataset,
    opts: &RationalizeOptions,
    workers: usize,
) -> Result<RationalizeOutput> {
    if workers == 0 {
        return Err(Error::Input("workers must be at least 1".into()));
    }
    if ds.vocab.len() != model.cfg.vocab_size {
        return Err(Error::VocabMismatch(format!(
            "dataset vocab has {} symbols, model has {}",
            ds.vocab.len(),
            model.cfg.vocab_size
        )));
    }
    let bos = ds.vocab.bos();
    let n = opts.limit.unwrap_or(ds.len()).min(ds.len());
    let jobs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| {
            let len = ds.examples[i].len();
            let ts = match opts.positions {
                Positions::Last => len..=len,
                Positions::All => 2..=len,
            };
            ts.filter(|&t| t >= 2).map(move |t| (i, t))
        })
        .collect();
    let pred = ModelPredictor::new(model, bos, opts.mode);
    let run = |&(i, t): &(usize, usize)| -> Result<Outcome> {
        let seq = &ds.examples[i].tokens;
        if !full_context_correct(&pred, seq, t)? {
            return Ok(Outcome::Skipped);
        }
        let (rationale, ordering) = match opts.method {
            Method::Greedy => (greedy_rationalize(&pred, seq, t, opts.max_steps)?, None),
            Method::Exhaustive => (exhaustive_rationalize(&pred, seq, t, opts.size_cap)?, None),
            Method::Saliency(s) => {
                let o = saliency_ordering(s, model, bos, seq, t, opts.ig_steps)?;
                let r = ordering_to_rationale(&pred, &o, seq, t, opts.max_steps)?;
                (r, Some(OrderingRecord::new(i, &o)))
            }
        };
        Ok(Outcome::Done(RationaleRecord { example: i, rationale }, ordering))
    };
    let outcomes: Vec<Result<Outcome>> = if workers == 1 {
        jobs.iter().map(run).collect()
    } else {
        let pool =
            rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(run).collect())
    };
    let mut out = RationalizeOutput::default();
    for o in outcomes {
        match o? {
            Outcome::Skipped => out.skipped += 1,
            Outcome::Done(r, ord) => {
                out.records.push(r);
                out.orderings.extend(ord);
            }
        }
    }
    Ok(out)
}

/// Timing of greedy rationalization of one example's last position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub example: usize,
    pub t: usize,
    pub length: usize,
    pub calls: u64,
    pub input_entries: u64,
    pub max_input: u64,
    pub secs: f64,
}

/// Times greedy rationalization of the last token of the first `limit`
/// examples. Examples the model gets wrong are skipped.
pub fn bench_greedy<T: Real>(
    model: &Transformer<T>,
    ds: &Dataset,
    mode: EvalMode,
    limit: Option<usize>,
) -> Result<Vec<BenchRow>> {
    let pred = ModelPredictor::new(model, ds.vocab.bos(), mode);
    let n = limit.unwrap_or(ds.len()).min(ds.len());
    let mut rows = Vec::new();
    for (i, ex) in ds.examples[..n].iter().enumerate() {
        let t = ex.len();
        if t < 2 || !full_context_correct(&pred, &ex.tokens, t)? {
            continue;
        }
        pred.reset_stats();
        let start = Instant::now();
        let r = greedy_rationalize(&pred, &ex.tokens, t, usize::MAX)?;
        let secs = start.elapsed().as_secs_f64();
        let st = pred.stats();
        rows.push(BenchRow {
            example: i,
            t,
            length: r.len(),
            calls: st.calls,
            input_entries: st.input_entries,
            max_input: st.max_input,
            secs,
        });
    }
    Ok(rows)
}

pub fn mean_secs(rows: &[BenchRow]) -> f64 {
    rows.iter().map(|r| r.secs).sum::<f64>() / rows.len().max(1) as f64
}

/// One line per example, then a `mean` line.
pub fn write_bench_csv(path: &Path, mode: EvalMode, rows: &[BenchRow]) -> Result<()> {
    let mode = match mode {
        EvalMode::Sparse => "sparse",
        EvalMode::Masked => "masked",
    };
    atomic_write(path, |w| {
        writeln!(w, "mode,example,t,length,calls,input_entries,max_input,secs")?;
        for r in rows {
            writeln!(
                w,
                "{mode},{},{},{},{},{},{},{:.6}",
                r.example, r.t, r.length, r.calls, r.input_entries, r.max_input, r.secs
            )?;
        }
        writeln!(w, "{mode},mean,,,,,,{:.6}", mean_secs(rows))?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::gen_majority;
    use crate::model::ModelConfig;

    #[test]
    fn method_names_round_trip() {
        for m in Method::all() {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!(matches!("occlusion".parse::<Method>(), Err(Error::UnknownMethod(_))));
    }

    #[test]
    fn output_is_independent_of_workers() {
        let ds = gen_majority(6, 3).unwrap();
        let cfg = ModelConfig { n_layers: 1, n_heads: 2, d_model: 8, d_ff: 8, vocab_size: 4, max_positions: 20 };
        let mut m = Transformer::<f32>::init(cfg, 2).unwrap();
        m.params.tensors_mut().into_iter().for_each(|t| t.iter_mut().for_each(|x| *x *= 20.0));
        for method in [Method::Greedy, Method::Saliency(SaliencyMethod::GradNorm)] {
            let opts = RationalizeOptions { positions: Positions::All, ig_steps: 2, ..RationalizeOptions::new(method) };
            let a = rationalize_dataset(&m, &ds, &opts, 1).unwrap();
            let b = rationalize_dataset(&m, &ds, &opts, 3).unwrap();
            assert_eq!(a.records, b.records);
            assert_eq!(a.orderings, b.orderings);
            assert_eq!(a.records.len() + a.skipped, 6 * 18);
            assert!(a.records.iter().all(|r| r.rationale.method == method.name()));
        }
    }

    #[test]
    fn bench_input_sizes() {
        let ds = gen_majority(4, 5).unwrap();
        let cfg = ModelConfig { n_layers: 1, n_heads: 1, d_model: 4, d_ff: 4, vocab_size: 4, max_positions: 20 };
        let m = Transformer::<f32>::init(cfg, 1).unwrap();
        let sparse = bench_greedy(&m, &ds, EvalMode::Sparse, None).unwrap();
        let masked = bench_greedy(&m, &ds, EvalMode::Masked, None).unwrap();
        assert_eq!(sparse.len(), masked.len());
        for (s, k) in sparse.iter().zip(&masked) {
            assert_eq!((s.length, s.calls), (k.length, k.calls));
            assert_eq!(k.max_input as usize, s.t);
            assert!(s.max_input as usize <= s.length + 1);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        write_bench_csv(&p, EvalMode::Sparse, &sparse).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text.lines().count(), sparse.len() + 2);
        assert!(text.lines().last().unwrap().starts_with("sparse,mean,"));
    }
}
