// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use super::MAJORITY_BITS;
use crate::error::{Error, Result};

/// Observed bits of a majority example, keyed by 1-based position in `1..=17`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PartialObservation {
    assignments: BTreeMap<usize, u8>,
}

impl PartialObservation {
    pub fn new(assignments: impl IntoIterator<Item = (usize, u8)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (pos, bit) in assignments {
            if !(1..=MAJORITY_BITS).contains(&pos) || bit > 1 {
                return Err(Error::Input(format!("invalid observation ({pos}, {bit})")));
            }
            if map.insert(pos, bit).is_some() {
                return Err(Error::Input(format!("position {pos} observed twice")));
            }
        }
        Ok(Self { assignments: map })
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, u8)> + '_ {
        self.assignments.iter().map(|(&p, &b)| (p, b))
    }

    pub fn ones(&self) -> usize {
        self.assignments.values().filter(|&&b| b == 1).count()
    }

    pub fn zeros(&self) -> usize {
        self.assignments.len() - self.ones()
    }

    pub fn unobserved(&self) -> usize {
        MAJORITY_BITS - self.assignments.len()
    }

    /// 17 characters, `0`/`1` where observed and `?` elsewhere.
    pub fn pattern(&self) -> String {
        (1..=MAJORITY_BITS)
            .map(|p| match self.assignments.get(&p) {
                Some(0) => '0',
                Some(_) => '1',
                None => '?',
            })
            .collect()
    }
}

fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

/// Probability that the 17-bit majority is 1 given the observed bits, with the
/// unobserved bits i.i.d. fair coins.
pub fn majority_oracle(obs: &PartialObservation) -> f64 {
    let threshold = MAJORITY_BITS / 2 + 1;
    let ones = obs.ones();
    let free = obs.unobserved() as u64;
    if ones >= threshold {
        return 1.0;
    }
    let need = (threshold - ones) as u64;
    let favorable: u64 = (need..=free).map(|j| binomial(free, j)).sum();
    favorable as f64 / (1u64 << free) as f64
}
