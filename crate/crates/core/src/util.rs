// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;

/// Writes through a temporary sibling file and renames it into place, so a
/// failure never leaves a partial file at `path`.
pub fn atomic_write(path: &Path, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    let mut w = BufWriter::new(tmp);
    body(&mut w)?;
    let tmp = w.into_inner().map_err(|e| e.into_error())?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Index of the largest value, ties broken toward the lowest index.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// 1-based rank of `xs[target]` under the same tie rule as [`argmax`].
pub fn rank_of<T: PartialOrd + Copy>(xs: &[T], target: usize) -> usize {
    let v = xs[target];
    1 + xs.iter().enumerate().filter(|&(i, &x)| x > v || (x == v && i < target)).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
        assert_eq!(rank_of(&[0.1, 0.4, 0.4, 0.1], 2), 2);
        assert_eq!(rank_of(&[0.1, 0.4, 0.4, 0.1], 1), 1);
        assert_eq!(rank_of(&[0.1, 0.4, 0.4, 0.1], 3), 4);
    }

    #[test]
    fn failed_write_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.txt");
        let r = atomic_write(&p, |w| {
            w.write_all(b"partial")?;
            Err(crate::error::Error::Input("boom".into()))
        });
        assert!(r.is_err());
        assert!(!p.exists());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
