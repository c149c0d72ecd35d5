// SPDX-License-Identifier: MIT OR Apache-2.0

//! Maximum-likelihood and word-dropout training, and perplexity.

mod dropout;
mod optim;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dropout::{sample_drop_mask, DropoutMode};
pub use optim::{clip_grad_norm, inverse_sqrt_lr, Adam};

use crate::corpus::Dataset;
use crate::model::{Dropout, ModelConfig, Parameters, SparseInput, TrainItem, Transformer};
use crate::real::Real;
use crate::{atomic_write, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    #[default]
    InverseSqrt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    #[serde(default)]
    pub scheduler: Scheduler,
    pub max_steps: usize,
    /// Sequences are added to a batch until it holds at least this many tokens.
    pub tokens_per_batch: usize,
    /// Rate of ordinary activation dropout, independent of word dropout.
    #[serde(default)]
    pub weight_dropout_rate: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    pub dropout_mode: DropoutMode,
    pub seed: u64,
    /// Steps between validation passes; the last step is always evaluated.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.98
}
fn default_eps() -> f64 {
    1e-8
}
fn default_eval_every() -> usize {
    500
}

impl TrainConfig {
    /// Desk-scale reference recipe.
    pub fn reference(dropout_mode: DropoutMode, seed: u64) -> Self {
        TrainConfig {
            learning_rate: 0.005,
            warmup_steps: 4000,
            scheduler: Scheduler::InverseSqrt,
            max_steps: 20_000,
            tokens_per_batch: 16_000,
            weight_dropout_rate: 0.1,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
            dropout_mode,
            seed,
            eval_every: default_eval_every(),
            clip_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.warmup_steps == 0 || self.max_steps == 0 || self.tokens_per_batch == 0 || self.eval_every == 0 {
            return bad("warmup_steps, max_steps, tokens_per_batch and eval_every must be positive");
        }
        if !(0.0..1.0).contains(&self.weight_dropout_rate) {
            return bad("weight_dropout_rate must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return bad("adam betas must be in [0, 1) and epsilon positive");
        }
        if matches!(self.clip_norm, Some(c) if c <= 0.0) {
            return bad("clip_norm must be positive");
        }
        self.dropout_mode.validate()
    }

    pub fn lr(&self, step: usize) -> f64 {
        match self.scheduler {
            Scheduler::InverseSqrt => inverse_sqrt_lr(self.learning_rate, self.warmup_steps, step),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub valid_ppl: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    pub wall_clock_secs: f64,
    pub best_step: usize,
    pub best_valid_ppl: f64,
    /// Training sequences that were shown with at least one context position hidden.
    pub incomplete_context_items: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,lr,valid_ppl\n");
        for r in &self.records {
            let ppl = r.valid_ppl.map(|p| p.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.lr, ppl));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv = self.to_csv();
        atomic_write(path, |w| Ok(w.write_all(csv.as_bytes())?))
    }
}

fn check_compatible(cfg: &ModelConfig, ds: &Dataset, what: &str) -> Result<()> {
    ds.validate()?;
    if ds.vocab.len() != cfg.vocab_size {
        return Err(Error::VocabMismatch(format!(
            "{what} vocab has {} symbols but the model expects {}",
            ds.vocab.len(),
            cfg.vocab_size
        )));
    }
    if let Some(ex) = ds.examples.iter().find(|e| e.len() >= cfg.max_positions) {
        return Err(Error::Input(format!(
            "{what} example of length {} does not fit {} positions",
            ex.len(),
            cfg.max_positions
        )));
    }
    Ok(())
}

/// `exp` of the mean next-token negative log-likelihood over every token of
/// every example, each predicted from its full left context.
pub fn perplexity<T: Real>(model: &Transformer<T>, ds: &Dataset) -> Result<f64> {
    check_compatible(&model.cfg, ds, "evaluation")?;
    if ds.is_empty() {
        return Err(Error::Input("perplexity of an empty dataset".into()));
    }
    let bos = ds.vocab.bos();
    let mut nll = 0.0;
    let mut count = 0usize;
    for chunk in ds.examples.chunks(64) {
        let inputs: Vec<SparseInput> = chunk.iter().map(|e| SparseInput::full(bos, &e.tokens)).collect();
        let refs: Vec<&SparseInput> = inputs.iter().collect();
        let rows = model.row_logprobs(&refs)?;
        for (ex, lp) in chunk.iter().zip(&rows) {
            for (r, &tok) in ex.tokens.iter().enumerate() {
                nll -= lp[r][tok as usize].as_f64();
                count += 1;
            }
        }
    }
    Ok((nll / count as f64).exp())
}

/// Trains from a fresh initialization and returns the parameters with the
/// lowest validation perplexity.
pub fn train(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    train: &Dataset,
    valid: &Dataset,
) -> Result<(Parameters<f32>, TrainLog)> {
    train_with(cfg, tcfg, train, valid, |_| {})
}

/// As [`train`], calling `on_eval` after every validation pass.
pub fn train_with(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    train: &Dataset,
    valid: &Dataset,
    mut on_eval: impl FnMut(&LogRecord),
) -> Result<(Parameters<f32>, TrainLog)> {
    cfg.validate()?;
    tcfg.validate()?;
    check_compatible(cfg, train, "training")?;
    check_compatible(cfg, valid, "validation")?;
    if train.vocab != valid.vocab {
        return Err(Error::VocabMismatch("training and validation vocabularies differ".into()));
    }
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Input("training and validation sets must be nonempty".into()));
    }
    if let Some(ex) = train.examples.iter().find(|e| e.len() < 2) {
        return Err(Error::Input(format!("training example of length {} is too short", ex.len())));
    }

    let start = Instant::now();
    let bos = train.vocab.bos();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut model = Transformer::<f32>::init(*cfg, tcfg.seed)?;
    let mut adam = Adam::new(cfg, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut log = TrainLog { best_valid_ppl: f64::INFINITY, ..Default::default() };
    let mut best = model.params.clone();

    for step in 1..=tcfg.max_steps {
        let mut items = Vec::new();
        let mut n_tokens = 0;
        while n_tokens < tcfg.tokens_per_batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = &train.examples[order[cursor]];
            cursor += 1;
            let drop = sample_drop_mask(ex.len(), &tcfg.dropout_mode, &mut rng);
            if !drop.is_empty() {
                log.incomplete_context_items += 1;
            }
            items.push(TrainItem { input: SparseInput::full(bos, &ex.tokens), drop });
            n_tokens += ex.len();
        }
        let act = (tcfg.weight_dropout_rate > 0.0).then(|| Dropout { rate: tcfg.weight_dropout_rate, rng: &mut rng });
        let (loss, mut grads) = model.loss_and_param_grads_with(&items, act)?;
        let loss = loss as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        if let Some(c) = tcfg.clip_norm {
            clip_grad_norm(&mut grads, c);
        }
        let lr = tcfg.lr(step);
        adam.step(&mut model.params, &grads, lr);
        if !model.params.all_finite() {
            return Err(Error::Divergence { step, loss: f64::NAN });
        }

        let mut rec = LogRecord { step, loss, lr, valid_ppl: None };
        if step % tcfg.eval_every == 0 || step == tcfg.max_steps {
            let ppl = perplexity(&model, valid)?;
            if !ppl.is_finite() {
                return Err(Error::Divergence { step, loss: ppl.ln() });
            }
            if ppl < log.best_valid_ppl {
                log.best_valid_ppl = ppl;
                log.best_step = step;
                best = model.params.clone();
            }
            rec.valid_ppl = Some(ppl);
            on_eval(&rec);
        }
        log.records.push(rec);
    }
    log.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((best, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_keyed_agreement, gen_majority, KeyedConfig};

    fn majority_cfg() -> ModelConfig {
        ModelConfig { n_layers: 1, n_heads: 2, d_model: 16, d_ff: 32, vocab_size: 4, max_positions: 20 }
    }

    fn quick(mode: DropoutMode) -> TrainConfig {
        TrainConfig {
            max_steps: 30,
            warmup_steps: 10,
            tokens_per_batch: 190,
            eval_every: 10,
            learning_rate: 0.01,
            ..TrainConfig::reference(mode, 5)
        }
    }

    #[test]
    fn untrained_perplexity_is_near_vocab_size() {
        let ds = gen_majority(200, 1).unwrap();
        let m = Transformer::<f32>::init(majority_cfg(), 0).unwrap();
        let ppl = perplexity(&m, &ds).unwrap();
        assert!((ppl - 4.0).abs() < 0.25, "{ppl}");
    }

    #[test]
    fn perplexity_ignores_example_order() {
        let mut ds = gen_majority(50, 2).unwrap();
        let m = Transformer::<f64>::init(majority_cfg(), 1).unwrap();
        let a = perplexity(&m, &ds).unwrap();
        ds.examples.reverse();
        let b = perplexity(&m, &ds).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn perplexity_rejects_foreign_vocab() {
        let ds = gen_majority(5, 2).unwrap();
        let cfg = ModelConfig { vocab_size: 7, ..majority_cfg() };
        let m = Transformer::<f32>::init(cfg, 1).unwrap();
        assert!(matches!(perplexity(&m, &ds), Err(Error::VocabMismatch(_))));
    }

    #[test]
    fn training_is_deterministic_and_logs_every_step() {
        let tr = gen_majority(100, 3).unwrap();
        let va = gen_majority(20, 4).unwrap();
        let (a, log) = train(&majority_cfg(), &quick(DropoutMode::None), &tr, &va).unwrap();
        let (b, _) = train(&majority_cfg(), &quick(DropoutMode::None), &tr, &va).unwrap();
        assert_eq!(a, b);
        assert_eq!(log.records.len(), 30);
        assert!(log.records.iter().all(|r| r.loss.is_finite()));
        assert_eq!(log.records.iter().filter(|r| r.valid_ppl.is_some()).count(), 3);
        assert_eq!(log.incomplete_context_items, 0);
        let csv = log.to_csv();
        assert!(csv.starts_with("step,loss,lr,valid_ppl\n1,"));
        assert_eq!(csv.lines().count(), 31);
    }

    #[test]
    fn returns_best_validation_parameters() {
        let tr = gen_majority(100, 3).unwrap();
        let va = gen_majority(20, 4).unwrap();
        let (p, log) = train(&majority_cfg(), &quick(DropoutMode::Bernoulli { p: 0.5 }), &tr, &va).unwrap();
        assert!(log.incomplete_context_items > 0);
        let m = Transformer::new(majority_cfg(), p).unwrap();
        assert!((perplexity(&m, &va).unwrap() - log.best_valid_ppl).abs() < 1e-9);
        let min = log.records.iter().filter_map(|r| r.valid_ppl).fold(f64::INFINITY, f64::min);
        assert_eq!(min, log.best_valid_ppl);
    }

    #[test]
    fn divergence_is_reported() {
        let tr = gen_majority(50, 3).unwrap();
        let va = gen_majority(10, 4).unwrap();
        let mut t = quick(DropoutMode::None);
        t.learning_rate = 1e30;
        t.warmup_steps = 1;
        t.weight_dropout_rate = 0.0;
        match train(&majority_cfg(), &t, &tr, &va) {
            Err(Error::Divergence { step, .. }) => assert!(step >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn config_round_trip_and_validation() {
        let t = TrainConfig::reference(DropoutMode::Mixture { p_full: 0.5 }, 9);
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), t);
        t.validate().unwrap();
        assert!(TrainConfig { max_steps: 0, ..t.clone() }.validate().is_err());
        assert!(TrainConfig { weight_dropout_rate: 1.0, ..t.clone() }.validate().is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"resume": true}"#).is_err());
    }

    #[test]
    fn one_layer_model_learns_keyed_answers() {
        let kc = KeyedConfig { n_keys: 4, n_fillers: 3, filler_len: 2, n_examples: 400, max_vocab: 1024 };
        let tr = gen_keyed_agreement(&kc, 1).unwrap();
        let va = gen_keyed_agreement(&KeyedConfig { n_examples: 50, ..kc }, 2).unwrap();
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 16,
            d_ff: 32,
            vocab_size: tr.vocab.len(),
            max_positions: 8,
        };
        let t = TrainConfig {
            max_steps: 300,
            warmup_steps: 50,
            tokens_per_batch: 200,
            eval_every: 100,
            learning_rate: 0.01,
            weight_dropout_rate: 0.0,
            ..TrainConfig::reference(DropoutMode::None, 3)
        };
        let (p, _) = train(&cfg, &t, &tr, &va).unwrap();
        let m = Transformer::new(cfg, p).unwrap();
        let bos = va.vocab.bos();
        for ex in &va.examples {
            let n = ex.len();
            let out = m.forward(&SparseInput::full(bos, &ex.tokens[..n - 1]), None).unwrap();
            assert_eq!(crate::argmax(&out.next_token_logprobs) as u32, ex.tokens[n - 1]);
        }
    }
}
