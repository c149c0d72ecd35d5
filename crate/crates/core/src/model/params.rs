// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::real::Real;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_g: Vec<T>,
    pub ln1_b: Vec<T>,
    /// `d x 3d`, columns ordered query | key | value.
    pub w_qkv: Vec<T>,
    pub b_qkv: Vec<T>,
    pub w_o: Vec<T>,
    pub b_o: Vec<T>,
    pub ln2_g: Vec<T>,
    pub ln2_b: Vec<T>,
    pub w_fc1: Vec<T>,
    pub b_fc1: Vec<T>,
    pub w_fc2: Vec<T>,
    pub b_fc2: Vec<T>,
}

/// All decoder weights. Matrices are row-major `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub tok_emb: Vec<T>,
    pub pos_emb: Vec<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_g: Vec<T>,
    pub lnf_b: Vec<T>,
    pub out_w: Vec<T>,
    pub out_b: Vec<T>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zero,
    One,
}

/// Name, shape, and initializer of every tensor, in canonical order.
fn manifest(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, ff, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let mut m = vec![
        ("tok_emb".to_string(), vec![v, d], Init::Normal),
        ("pos_emb".to_string(), vec![cfg.max_positions, d], Init::Normal),
    ];
    for l in 0..cfg.n_layers {
        let t = |name: &str, shape: Vec<usize>, init| (format!("layers.{l}.{name}"), shape, init);
        m.extend([
            t("ln1_g", vec![d], Init::One),
            t("ln1_b", vec![d], Init::Zero),
            t("w_qkv", vec![d, 3 * d], Init::Normal),
            t("b_qkv", vec![3 * d], Init::Zero),
            t("w_o", vec![d, d], Init::Normal),
            t("b_o", vec![d], Init::Zero),
            t("ln2_g", vec![d], Init::One),
            t("ln2_b", vec![d], Init::Zero),
            t("w_fc1", vec![d, ff], Init::Normal),
            t("b_fc1", vec![ff], Init::Zero),
            t("w_fc2", vec![ff, d], Init::Normal),
            t("b_fc2", vec![d], Init::Zero),
        ]);
    }
    m.extend([
        ("lnf_g".to_string(), vec![d], Init::One),
        ("lnf_b".to_string(), vec![d], Init::Zero),
        ("out_w".to_string(), vec![d, v], Init::Normal),
        ("out_b".to_string(), vec![v], Init::Zero),
    ]);
    m
}

impl<T: Real> Parameters<T> {
    fn from_tensors(n_layers: usize, mut tensors: impl Iterator<Item = Vec<T>>) -> Self {
        let mut next = || tensors.next().expect("manifest order");
        let tok_emb = next();
        let pos_emb = next();
        let layers = (0..n_layers)
            .map(|_| LayerParams {
                ln1_g: next(),
                ln1_b: next(),
                w_qkv: next(),
                b_qkv: next(),
                w_o: next(),
                b_o: next(),
                ln2_g: next(),
                ln2_b: next(),
                w_fc1: next(),
                b_fc1: next(),
                w_fc2: next(),
                b_fc2: next(),
            })
            .collect();
        Self { tok_emb, pos_emb, layers, lnf_g: next(), lnf_b: next(), out_w: next(), out_b: next() }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let tensors = manifest(cfg).into_iter().map(|(_, s, _)| vec![T::zero(); s.iter().product()]);
        Self::from_tensors(cfg.n_layers, tensors)
    }

    /// Normal(0, 0.02) weights, zero biases, unit norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let tensors: Vec<Vec<T>> = manifest(cfg)
            .into_iter()
            .map(|(_, shape, init)| {
                let n = shape.iter().product();
                match init {
                    Init::Normal => (0..n).map(|_| T::of(normal.sample(&mut rng))).collect(),
                    Init::Zero => vec![T::zero(); n],
                    Init::One => vec![T::one(); n],
                }
            })
            .collect();
        Self::from_tensors(cfg.n_layers, tensors.into_iter())
    }

    pub fn tensors(&self) -> Vec<&Vec<T>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend([
                &l.ln1_g, &l.ln1_b, &l.w_qkv, &l.b_qkv, &l.w_o, &l.b_o, &l.ln2_g, &l.ln2_b, &l.w_fc1, &l.b_fc1,
                &l.w_fc2, &l.b_fc2,
            ]);
        }
        out.extend([&self.lnf_g, &self.lnf_b, &self.out_w, &self.out_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.w_qkv,
                &mut l.b_qkv,
                &mut l.w_o,
                &mut l.b_o,
                &mut l.ln2_g,
                &mut l.ln2_b,
                &mut l.w_fc1,
                &mut l.b_fc1,
                &mut l.w_fc2,
                &mut l.b_fc2,
            ]);
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.out_w, &mut self.out_b]);
        out
    }

    /// `(name, shape)` of every tensor in canonical order.
    pub fn names_and_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        manifest(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    pub(crate) fn from_flat_tensors(cfg: &ModelConfig, tensors: Vec<Vec<T>>) -> Result<Self> {
        let manifest = manifest(cfg);
        if tensors.len() != manifest.len() {
            return Err(Error::Shape(format!("expected {} tensors, found {}", manifest.len(), tensors.len())));
        }
        for ((name, shape, _), t) in manifest.iter().zip(&tensors) {
            if t.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(format!("tensor {name} has {} values, shape {shape:?}", t.len())));
            }
        }
        Ok(Self::from_tensors(cfg.n_layers, tensors.into_iter()))
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        for ((name, shape, _), t) in manifest(cfg).iter().zip(self.tensors()) {
            if t.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(format!("tensor {name} has {} values, shape {shape:?}", t.len())));
            }
        }
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Shape(format!("{} layers, config says {}", self.layers.len(), cfg.n_layers)));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> Parameters<U> {
        let tensors = self.tensors().into_iter().map(|t| t.iter().map(|&x| U::of(x.as_f64())).collect());
        Parameters::from_tensors(self.layers.len(), tensors)
    }

    pub fn token_embedding(&self, tok: TokenId, d: usize) -> &[T] {
        let t = tok as usize;
        &self.tok_emb[t * d..(t + 1) * d]
    }

    /// Adds per-row embedding gradients into `tok_emb` by token id.
    pub(crate) fn scatter_token_grads(&mut self, tokens: &[TokenId], d_embed: &[T], d: usize) {
        for (r, &tok) in tokens.iter().enumerate() {
            let t = tok as usize;
            for c in 0..d {
                self.tok_emb[t * d + c] += d_embed[r * d + c];
            }
        }
    }

    /// Sum of squares over every value.
    pub fn sq_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|x| x.as_f64().powi(2)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig { n_layers: 4, n_heads: 2, d_model: 64, d_ff: 256, vocab_size: 4, max_positions: 20 }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Parameters::<f32>::init(&cfg(), 5);
        assert_eq!(a, Parameters::<f32>::init(&cfg(), 5));
        assert_ne!(a, Parameters::<f32>::init(&cfg(), 6));
        assert!(a.all_finite());
        a.check_shapes(&cfg()).unwrap();
    }

    #[test]
    fn parameter_count_matches_reference_scale() {
        // Four layers of width 64 with a 256-wide feed-forward: ~200k weights.
        let p = Parameters::<f32>::init(&cfg(), 0);
        let per_layer = 2 * 64 + 64 * 192 + 192 + 64 * 64 + 64 + 2 * 64 + 64 * 256 + 256 + 256 * 64 + 64;
        assert_eq!(p.n_params(), 4 * 64 + 20 * 64 + 4 * per_layer + 2 * 64 + 64 * 4 + 4);
        assert!((195_000..=205_000).contains(&(4 * per_layer)));
    }

    #[test]
    fn init_scale() {
        let p = Parameters::<f64>::init(&cfg(), 1);
        let w = &p.layers[0].w_fc1;
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!(mean.abs() < 0.002 && (std - 0.02).abs() < 0.001, "mean {mean} std {std}");
        assert!(p.layers[0].b_fc1.iter().all(|&x| x == 0.0));
        assert!(p.layers[0].ln1_g.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn cast_round_trips_f32_values() {
        let p = Parameters::<f32>::init(&cfg(), 2);
        let back: Parameters<f32> = p.cast::<f64>().cast();
        assert_eq!(p, back);
    }
}
