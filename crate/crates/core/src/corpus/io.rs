// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Example, GeneratorConfig, Vocab};
use crate::error::{Error, Result};
use crate::util::atomic_write;

#[derive(Serialize, Deserialize)]
struct Header {
    vocab: Vocab,
    generator: GeneratorConfig,
    seed: u64,
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    ds.validate()?;
    atomic_write(path, |w| {
        let header = Header { vocab: ds.vocab.clone(), generator: ds.generator.clone(), seed: ds.seed };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for ex in &ds.examples {
            serde_json::to_writer(&mut *w, ex)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let parse_err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut lines = reader.lines().enumerate();
    let header: Header = match lines.next() {
        Some((_, line)) => serde_json::from_str(&line?).map_err(|e| parse_err(1, e.to_string()))?,
        None => return Err(parse_err(1, "empty file".into())),
    };
    let mut examples = Vec::with_capacity(header.generator.n_examples());
    for (i, line) in lines {
        let line = line?;
        let ex: Example = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        if let Err(e) = ex.validate(&header.vocab) {
            return Err(match e {
                Error::VocabMismatch(msg) => Error::VocabMismatch(format!("line {}: {msg}", i + 1)),
                other => parse_err(i + 1, other.to_string()),
            });
        }
        examples.push(ex);
    }
    let expected = header.generator.n_examples();
    if examples.len() != expected {
        return Err(parse_err(
            examples.len() + 2,
            format!("truncated: found {} of {expected} examples", examples.len()),
        ));
    }
    Ok(Dataset { vocab: header.vocab, examples, generator: header.generator, seed: header.seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_concat_pairs, gen_keyed_agreement, gen_majority, KeyedConfig};

    #[test]
    fn round_trip_is_identity_and_bytes_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let base = gen_majority(50, 4).unwrap();
        let keyed = gen_keyed_agreement(
            &KeyedConfig { n_keys: 4, n_fillers: 3, filler_len: 2, n_examples: 30, max_vocab: 64 },
            9,
        )
        .unwrap();
        let concat = gen_concat_pairs(&base, 20, 1).unwrap();
        for (i, ds) in [base, keyed, concat].into_iter().enumerate() {
            let p = dir.path().join(format!("{i}.jsonl"));
            write_dataset(&ds, &p).unwrap();
            let back = read_dataset(&p).unwrap();
            assert_eq!(back, ds);
            let q = dir.path().join(format!("{i}b.jsonl"));
            write_dataset(&back, &q).unwrap();
            assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_dataset(&gen_majority(10, 4).unwrap(), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();

        // Cut mid-line.
        std::fs::write(&p, &text[..text.len() - 10]).unwrap();
        assert!(matches!(read_dataset(&p), Err(Error::Parse { line: 11, .. })));

        // Cut on a line boundary.
        let kept: String = text.lines().take(6).map(|l| format!("{l}\n")).collect();
        std::fs::write(&p, kept).unwrap();
        assert!(matches!(read_dataset(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn unknown_token_id_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_dataset(&gen_majority(2, 4).unwrap(), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap().replacen("\"tokens\":[", "\"tokens\":[17,", 1);
        std::fs::write(&p, text).unwrap();
        match read_dataset(&p) {
            Err(Error::VocabMismatch(msg)) => assert!(msg.contains("17"), "{msg}"),
            other => panic!("expected vocab mismatch, got {other:?}"),
        }
    }
}
