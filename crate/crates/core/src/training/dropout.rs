// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How context positions are hidden from each sequence during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DropoutMode {
    None,
    /// Each context position dropped independently with probability `p`.
    Bernoulli {
        p: f64,
    },
    /// Full context with probability `p_full`; otherwise a kept size drawn
    /// uniformly from `1..=t-1` and a uniform subset of that size.
    Mixture {
        p_full: f64,
    },
}

impl DropoutMode {
    pub fn validate(&self) -> Result<()> {
        let p = match *self {
            DropoutMode::None => return Ok(()),
            DropoutMode::Bernoulli { p } => p,
            DropoutMode::Mixture { p_full } => p_full,
        };
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn is_none(&self) -> bool {
        matches!(self, DropoutMode::None)
    }
}

/// Positions in `1..t` hidden for the sequence, sorted. Empty for `t < 2`.
pub fn sample_drop_mask(t: usize, mode: &DropoutMode, rng: &mut impl Rng) -> Vec<usize> {
    if t < 2 {
        return Vec::new();
    }
    let n = t - 1;
    match *mode {
        DropoutMode::None => Vec::new(),
        DropoutMode::Bernoulli { p } => (1..t).filter(|_| rng.gen_bool(p)).collect(),
        DropoutMode::Mixture { p_full } => {
            if rng.gen_bool(p_full) {
                return Vec::new();
            }
            let k = rng.gen_range(1..=n);
            let mut kept = vec![false; n];
            for i in sample(rng, n, k) {
                kept[i] = true;
            }
            (1..t).filter(|&p| !kept[p - 1]).collect()
        }
    }
}
