// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary checkpoint: 8 magic bytes, a little-endian `u32` format version, a
//! little-endian `u64` header length, the JSON header, then every tensor as
//! little-endian `f32` in manifest order.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Parameters, Transformer};
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::util::atomic_write;

pub const MAGIC: &[u8; 8] = b"RATNLCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vocab>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub cfg: ModelConfig,
    pub params: Parameters<f32>,
    pub vocab: Option<Vocab>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Transformer<f32>> {
        Transformer::new(self.cfg, self.params.clone())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.params.check_shapes(&ckpt.cfg)?;
    let mut offset = 0;
    let tensors = Parameters::<f32>::names_and_shapes(&ckpt.cfg)
        .into_iter()
        .map(|(name, shape)| {
            let e = TensorEntry { name, offset, shape };
            offset += 4 * e.shape.iter().product::<usize>();
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header { config: ckpt.cfg, vocab: ckpt.vocab.clone(), tensors })?;
    atomic_write(path, |w| {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for t in ckpt.params.tensors() {
            for x in t {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Version(format!("{} is not a checkpoint (bad magic bytes)", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let hend = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Shape("header length exceeds file size".into()))?;
    let header: Header = serde_json::from_slice(&bytes[20..hend])?;
    header.config.validate()?;
    let data = &bytes[hend..];

    let expected = Parameters::<f32>::names_and_shapes(&header.config);
    if expected.len() != header.tensors.len() {
        return Err(Error::Shape(format!(
            "manifest lists {} tensors, config implies {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(expected.len());
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(Error::Shape(format!(
                "tensor {} {:?} does not match config ({name} {shape:?})",
                entry.name, entry.shape
            )));
        }
        let n: usize = shape.iter().product();
        let end = entry.offset + 4 * n;
        if end > data.len() {
            return Err(Error::Shape(format!("tensor {name} runs past the end of the data section")));
        }
        tensors.push(
            data[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        );
    }
    let total: usize = expected.iter().map(|(_, s)| 4 * s.iter().product::<usize>()).sum();
    if total != data.len() {
        return Err(Error::Shape(format!("data section holds {} bytes, manifest needs {total}", data.len())));
    }
    let params = Parameters::from_flat_tensors(&header.config, tensors)?;
    Ok(Checkpoint { cfg: header.config, params, vocab: header.vocab })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt() -> Checkpoint {
        let cfg = ModelConfig { n_layers: 2, n_heads: 2, d_model: 8, d_ff: 16, vocab_size: 4, max_positions: 20 };
        Checkpoint { cfg, params: Parameters::init(&cfg, 3), vocab: Some(Vocab::majority()) }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let c = ckpt();
        save_checkpoint(&c, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, c);
        for (a, b) in back.params.tensors().iter().zip(c.params.tensors()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corrupted_magic_is_a_version_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&ckpt(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Version(_))));

        bytes[0] ^= 0xff;
        bytes[8] = 7;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Version(_))));
    }

    #[test]
    fn size_disagreement_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&ckpt(), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();

        std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Shape(_))));

        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0; 4]);
        std::fs::write(&p, &longer).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Shape(_))));

        // Header claims a wider model than the data holds.
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[20..20 + hlen]).unwrap().replacen("\"d_ff\":16", "\"d_ff\":32", 1);
        let mut edited = bytes[..12].to_vec();
        edited.extend_from_slice(&(header.len() as u64).to_le_bytes());
        edited.extend_from_slice(header.as_bytes());
        edited.extend_from_slice(&bytes[20 + hlen..]);
        std::fs::write(&p, &edited).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Shape(_))));
    }
}
