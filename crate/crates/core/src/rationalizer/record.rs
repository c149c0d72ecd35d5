// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Rationale;
use crate::{atomic_write, Error, Result};

/// One line of a rationale file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RationaleRecord {
    /// Index of the example in its dataset.
    pub example: usize,
    #[serde(flatten)]
    pub rationale: Rationale,
}

fn check(r: &RationaleRecord) -> Result<()> {
    let ra = &r.rationale;
    let sorted = ra.indices.windows(2).all(|w| w[0] < w[1]);
    let in_range = ra.indices.iter().all(|&i| i >= 1 && i < ra.t);
    if !sorted || !in_range {
        return Err(Error::Input(format!(
            "example {}: indices {:?} are not a sorted subset of 1..{}",
            r.example, ra.indices, ra.t
        )));
    }
    if !ra.indices.is_empty() && ra.indices.last() != Some(&(ra.t - 1)) {
        return Err(Error::Input(format!("example {}: rationale lacks position {}", r.example, ra.t - 1)));
    }
    Ok(())
}

pub fn write_rationales(path: &Path, records: &[RationaleRecord]) -> Result<()> {
    records.iter().try_for_each(check)?;
    atomic_write(path, |w| {
        for r in records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

pub fn read_rationales(path: &Path) -> Result<Vec<RationaleRecord>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let r: RationaleRecord = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        check(&r).map_err(|e| parse(e.to_string()))?;
        out.push(r);
    }
    Ok(out)
}
