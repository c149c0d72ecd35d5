// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Example, GeneratorConfig, Meta, TokenId, Vocab, BOS, EQUALS, MAJORITY_BITS};
use crate::error::{Error, Result};

/// Bit strings of length 17, then `=`, then the majority bit.
pub fn gen_majority(n_examples: usize, seed: u64) -> Result<Dataset> {
    if n_examples == 0 {
        return Err(Error::Config("n_examples must be at least 1".into()));
    }
    let vocab = Vocab::majority();
    let eq = vocab.id(EQUALS).expect("majority vocab");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n_examples)
        .map(|_| {
            let mut tokens: Vec<TokenId> = (0..MAJORITY_BITS).map(|_| rng.gen_range(0..2)).collect();
            let ones = tokens.iter().filter(|&&b| b == 1).count();
            let label = TokenId::from(2 * ones > MAJORITY_BITS);
            tokens.push(eq);
            tokens.push(label);
            Example { tokens, meta: Meta::default() }
        })
        .collect();
    Ok(Dataset { vocab, examples, generator: GeneratorConfig::Majority { n_examples }, seed })
}

fn default_max_vocab() -> usize {
    1024
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyedConfig {
    pub n_keys: usize,
    pub n_fillers: usize,
    pub filler_len: usize,
    pub n_examples: usize,
    #[serde(default = "default_max_vocab")]
    pub max_vocab: usize,
}

impl KeyedConfig {
    /// Keys, answers, fillers, `=` and `[BOS]`.
    pub fn alphabet_size(&self) -> usize {
        2 * self.n_keys + self.n_fillers + 2
    }

    fn validate(&self) -> Result<()> {
        if self.n_keys < 2 || self.n_fillers < 2 {
            return Err(Error::Config("keyed language needs n_keys >= 2 and n_fillers >= 2".into()));
        }
        if self.n_examples == 0 {
            return Err(Error::Config("n_examples must be at least 1".into()));
        }
        if self.alphabet_size() > self.max_vocab {
            return Err(Error::AlphabetOverflow { needed: self.alphabet_size(), bound: self.max_vocab });
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        let mut tokens: Vec<String> = (0..self.n_keys).map(|i| format!("k{i}")).collect();
        tokens.extend((0..self.n_keys).map(|i| format!("a{i}")));
        tokens.extend((0..self.n_fillers).map(|i| format!("f{i}")));
        tokens.push(EQUALS.into());
        tokens.push(BOS.into());
        Vocab::new(tokens).expect("generated tokens are distinct")
    }
}

/// `[key, filler * filler_len, '=', answer(key)]` with `answer(k_i) = a_i`.
pub fn gen_keyed_agreement(cfg: &KeyedConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let vocab = cfg.vocab();
    let eq = vocab.id(EQUALS).expect("keyed vocab");
    let answer_base = cfg.n_keys as TokenId;
    let filler_base = 2 * cfg.n_keys as TokenId;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..cfg.n_examples)
        .map(|_| {
            let key = rng.gen_range(0..cfg.n_keys as TokenId);
            let mut tokens = Vec::with_capacity(cfg.filler_len + 3);
            tokens.push(key);
            tokens.extend((0..cfg.filler_len).map(|_| filler_base + rng.gen_range(0..cfg.n_fillers as TokenId)));
            tokens.push(eq);
            tokens.push(answer_base + key);
            let eq_pos = cfg.filler_len + 2;
            Example {
                tokens,
                meta: Meta {
                    antecedent: Some(1),
                    distractor: (cfg.filler_len > 0).then_some((2, cfg.filler_len + 1)),
                    boundary: None,
                    gold: Some(vec![1, eq_pos]),
                },
            }
        })
        .collect();
    Ok(Dataset { vocab, examples, generator: GeneratorConfig::Keyed(cfg.clone()), seed })
}

/// Concatenations of two distinct base examples.
pub fn gen_concat_pairs(base: &Dataset, n_pairs: usize, seed: u64) -> Result<Dataset> {
    let n = base.len();
    if n < 2 {
        return Err(Error::Input("concatenation needs a base dataset with at least 2 examples".into()));
    }
    if n_pairs == 0 {
        return Err(Error::Config("n_pairs must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n_pairs)
        .map(|_| {
            let i = rng.gen_range(0..n);
            let mut j = rng.gen_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            let (a, b) = (&base.examples[i], &base.examples[j]);
            let mut tokens = a.tokens.clone();
            tokens.extend_from_slice(&b.tokens);
            Example { tokens, meta: Meta { boundary: Some(a.len()), ..Meta::default() } }
        })
        .collect();
    Ok(Dataset {
        vocab: base.vocab.clone(),
        examples,
        generator: GeneratorConfig::Concat { n_pairs, base: Box::new(base.generator.clone()), base_seed: base.seed },
        seed,
    })
}

/// Regenerates the dataset a generator config describes.
pub fn generate(cfg: &GeneratorConfig, seed: u64) -> Result<Dataset> {
    match cfg {
        GeneratorConfig::Majority { n_examples } => gen_majority(*n_examples, seed),
        GeneratorConfig::Keyed(k) => gen_keyed_agreement(k, seed),
        GeneratorConfig::Concat { n_pairs, base, base_seed } => {
            gen_concat_pairs(&generate(base, *base_seed)?, *n_pairs, seed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keyed(n_keys: usize, filler_len: usize, n_examples: usize) -> KeyedConfig {
        KeyedConfig { n_keys, n_fillers: 4, filler_len, n_examples, max_vocab: 1024 }
    }

    #[test]
    fn majority_examples_are_well_formed() {
        let ds = gen_majority(500, 7).unwrap();
        ds.validate().unwrap();
        for ex in &ds.examples {
            assert_eq!(ex.len(), 19);
            assert_eq!(ex.tokens[17], 2);
            let ones = ex.tokens[..17].iter().filter(|&&b| b == 1).count();
            assert_eq!(ex.tokens[18], u32::from(ones >= 9));
            assert!(ex.tokens[..17].iter().all(|&b| b < 2));
        }
    }

    #[test]
    fn majority_is_deterministic() {
        assert_eq!(gen_majority(300, 11).unwrap(), gen_majority(300, 11).unwrap());
        assert_ne!(gen_majority(300, 11).unwrap().examples, gen_majority(300, 12).unwrap().examples);
        assert!(gen_majority(0, 1).is_err());
    }

    #[test]
    fn keyed_without_fillers() {
        let ds = gen_keyed_agreement(&keyed(2, 0, 20), 3).unwrap();
        ds.validate().unwrap();
        for ex in &ds.examples {
            assert_eq!(ex.len(), 3);
            assert_eq!(ex.tokens[1], ds.vocab.id("=").unwrap());
            assert_eq!(ex.tokens[2], ex.tokens[0] + 2);
            assert_eq!(ex.meta.antecedent, Some(1));
            assert_eq!(ex.meta.distractor, None);
            assert_eq!(ex.meta.gold, Some(vec![1, 2]));
        }
    }

    #[test]
    fn keyed_layout() {
        let cfg = keyed(5, 3, 50);
        let ds = gen_keyed_agreement(&cfg, 3).unwrap();
        for ex in &ds.examples {
            assert_eq!(ex.meta.antecedent, Some(1));
            assert_eq!(ex.meta.distractor, Some((2, 4)));
            let v = &ds.vocab;
            assert!(v.token(ex.at(1)).unwrap().starts_with('k'));
            for p in 2..=4 {
                assert!(v.token(ex.at(p)).unwrap().starts_with('f'));
            }
            assert_eq!(v.token(ex.at(5)), Some("="));
            let key = &v.token(ex.at(1)).unwrap()[1..];
            assert_eq!(&v.token(ex.at(6)).unwrap()[1..], key);
        }
    }

    #[test]
    fn keyed_rejects_bad_configs() {
        assert!(matches!(gen_keyed_agreement(&keyed(1, 2, 5), 0), Err(Error::Config(_))));
        let big = KeyedConfig { n_keys: 10, n_fillers: 10, filler_len: 1, n_examples: 1, max_vocab: 31 };
        assert!(matches!(gen_keyed_agreement(&big, 0), Err(Error::AlphabetOverflow { needed: 32, bound: 31 })));
    }

    #[test]
    fn keyed_key_frequencies_are_uniform() {
        let n_keys = 8;
        let n = 10_000;
        let ds = gen_keyed_agreement(&keyed(n_keys, 2, n), 99).unwrap();
        let mut counts = vec![0usize; n_keys];
        for ex in &ds.examples {
            counts[ex.tokens[0] as usize] += 1;
        }
        let p = 1.0 / n_keys as f64;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma, "count {c} vs mean {mean}");
        }
        // Pearson statistic against the 99.9% quantile of chi-square(7) = 24.32.
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - mean).powi(2) / mean).sum();
        assert!(chi2 < 24.32, "chi2 = {chi2}");
    }

    #[test]
    fn concat_pairs_distinct_examples() {
        // Every base example is unique so self-pairing would be visible.
        let base = gen_keyed_agreement(&keyed(50, 6, 40), 5).unwrap();
        let mut uniq = base.examples.clone();
        uniq.sort_by(|a, b| a.tokens.cmp(&b.tokens));
        uniq.dedup_by(|a, b| a.tokens == b.tokens);
        assert_eq!(uniq.len(), base.len());

        let ds = gen_concat_pairs(&base, 300, 8).unwrap();
        ds.validate().unwrap();
        for ex in &ds.examples {
            let b = ex.meta.boundary.unwrap();
            assert_eq!(b, 9);
            assert_eq!(ex.len(), 18);
            assert_ne!(ex.tokens[..b], ex.tokens[b..]);
        }
    }

    #[test]
    fn concat_majority_boundary() {
        let base = gen_majority(10, 1).unwrap();
        let ds = gen_concat_pairs(&base, 5, 2).unwrap();
        for ex in &ds.examples {
            assert_eq!(ex.len(), 38);
            assert_eq!(ex.meta.boundary, Some(19));
        }
        let one = gen_majority(1, 1).unwrap();
        assert!(gen_concat_pairs(&one, 5, 2).is_err());
    }

    #[test]
    fn generator_echo_reproduces_the_dataset() {
        let base = generate(&GeneratorConfig::Keyed(keyed(5, 3, 20)), 4).unwrap();
        let ds = gen_concat_pairs(&base, 7, 9).unwrap();
        assert_eq!(generate(&ds.generator, ds.seed).unwrap(), ds);
    }
}
