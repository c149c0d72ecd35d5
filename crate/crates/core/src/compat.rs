// SPDX-License-Identifier: MIT OR Apache-2.0

//! Compatibility of subset predictions with the majority-language oracle.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{majority_oracle, PartialObservation, TokenId, Vocab, EQUALS, MAJORITY_BITS, MAJORITY_LEN};
use crate::model::{SparseInput, Transformer};
use crate::real::Real;
use crate::{atomic_write, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationPoint {
    pub observed: PartialObservation,
    pub oracle_prob: f64,
    /// Model probability that the final token is `1`.
    pub model_prob: f64,
}

/// Compares the model with the oracle on `n_samples` random sequences, each
/// shown through a subset of its bits drawn uniformly from all subsets.
/// BOS and `=` are always shown.
pub fn calibration_points<T: Real>(
    model: &Transformer<T>,
    vocab: &Vocab,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<CalibrationPoint>> {
    if !vocab.is_majority() || model.cfg.vocab_size != vocab.len() {
        return Err(Error::VocabMismatch("calibration needs a model of the majority language".into()));
    }
    let one = vocab.id("1").expect("majority vocab");
    let eq = vocab.id(EQUALS).expect("majority vocab");
    let bos = vocab.bos();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let observations: Vec<PartialObservation> = (0..n_samples)
        .map(|_| {
            let bits: Vec<u8> = (0..MAJORITY_BITS).map(|_| rng.gen_range(0..2)).collect();
            let shown = (1..=MAJORITY_BITS).filter(|_| rng.gen_bool(0.5)).map(|p| (p, bits[p - 1]));
            PartialObservation::new(shown.collect::<Vec<_>>())
        })
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(n_samples);
    for chunk in observations.chunks(256) {
        let inputs: Vec<SparseInput> = chunk
            .iter()
            .map(|o| {
                let mut entries = vec![(0, bos)];
                entries.extend(o.iter().map(|(p, b)| (p, TokenId::from(b))));
                entries.push((MAJORITY_LEN - 1, eq));
                SparseInput::new(entries)
            })
            .collect::<Result<_>>()?;
        let refs: Vec<(&SparseInput, Option<&[usize]>)> = inputs.iter().map(|i| (i, None)).collect();
        for (o, lp) in chunk.iter().zip(model.next_token_logprobs_batch(&refs)?) {
            out.push(CalibrationPoint {
                oracle_prob: majority_oracle(o),
                model_prob: lp[one as usize].as_f64().exp(),
                observed: o.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    /// Oracle-probability interval `[lo, hi)`; the last bin includes 1.
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_oracle: f64,
    pub mean_model: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub mae: f64,
    pub n: usize,
    pub bins: Vec<CalibrationBin>,
}

/// Mean absolute gap between model and oracle, overall and in equal-width
/// bins of the oracle probability. Empty bins report zero means.
pub fn calibration_error(points: &[CalibrationPoint], n_bins: usize) -> Result<CalibrationSummary> {
    if points.is_empty() {
        return Err(Error::Metric("calibration error of no points".into()));
    }
    if n_bins == 0 {
        return Err(Error::Input("at least one bin is needed".into()));
    }
    let mut sums = vec![(0usize, 0.0, 0.0, 0.0); n_bins];
    for p in points {
        let b = ((p.oracle_prob * n_bins as f64) as usize).min(n_bins - 1);
        let s = &mut sums[b];
        s.0 += 1;
        s.1 += p.oracle_prob;
        s.2 += p.model_prob;
        s.3 += (p.model_prob - p.oracle_prob).abs();
    }
    let bins = sums
        .iter()
        .enumerate()
        .map(|(i, &(count, o, m, e))| {
            let c = count.max(1) as f64;
            CalibrationBin {
                lo: i as f64 / n_bins as f64,
                hi: (i + 1) as f64 / n_bins as f64,
                count,
                mean_oracle: o / c,
                mean_model: m / c,
                mae: e / c,
            }
        })
        .collect();
    let mae = points.iter().map(|p| (p.model_prob - p.oracle_prob).abs()).sum::<f64>() / points.len() as f64;
    Ok(CalibrationSummary { mae, n: points.len(), bins })
}

pub fn write_calibration_csv(path: &Path, points: &[CalibrationPoint]) -> Result<()> {
    atomic_write(path, |w| {
        writeln!(w, "observed_bits,oracle_prob,model_prob")?;
        for p in points {
            writeln!(w, "{},{},{}", p.observed.pattern(), p.oracle_prob, p.model_prob)?;
        }
        Ok(())
    })
}

pub fn write_calibration_summary(path: &Path, summary: &CalibrationSummary) -> Result<()> {
    atomic_write(path, |w| {
        serde_json::to_writer_pretty(&mut *w, summary)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}
