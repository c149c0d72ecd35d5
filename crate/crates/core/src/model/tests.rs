// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn small_cfg() -> ModelConfig {
    ModelConfig { n_layers: 2, n_heads: 2, d_model: 8, d_ff: 12, vocab_size: 5, max_positions: 24 }
}

fn tiny_cfg() -> ModelConfig {
    ModelConfig { n_layers: 1, n_heads: 2, d_model: 4, d_ff: 6, vocab_size: 4, max_positions: 12 }
}

/// Larger-than-default weights so attention patterns are far from uniform.
fn model<T: Real>(cfg: ModelConfig, seed: u64, scale: f64) -> Transformer<T> {
    let mut m = Transformer::<f64>::init(cfg, seed).unwrap();
    for t in m.params.tensors_mut() {
        for x in t.iter_mut() {
            *x *= scale;
        }
    }
    // Perturb gains and biases too, so their gradients are exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for l in &mut m.params.layers {
        for t in [&mut l.ln1_g, &mut l.ln2_g, &mut l.b_qkv, &mut l.b_fc1] {
            for x in t.iter_mut() {
                *x += rng.gen_range(-0.3..0.3);
            }
        }
    }
    m.cast()
}

fn random_tokens(rng: &mut impl Rng, n: usize, v: u32) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(0..v - 1)).collect()
}

#[test]
fn config_validation() {
    let mut cfg = ModelConfig { n_layers: 4, n_heads: 2, d_model: 64, d_ff: 256, vocab_size: 4, max_positions: 20 };
    assert_eq!(cfg.head_dim(), 32);
    cfg.validate().unwrap();
    cfg.d_model = 65;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    cfg.d_model = 64;
    cfg.n_layers = 0;
    assert!(cfg.validate().is_err());
}

#[test]
fn sparse_input_validation() {
    assert!(SparseInput::new(vec![]).is_err());
    assert!(SparseInput::new(vec![(0, 1), (0, 2)]).is_err());
    assert!(SparseInput::new(vec![(3, 1), (2, 2)]).is_err());
    let s = SparseInput::subset(3, &[0, 1, 2], &[1, 3]).unwrap();
    assert_eq!(s.entries(), &[(0, 3), (1, 0), (3, 2)]);
    assert!(SparseInput::subset(3, &[0, 1, 2], &[4]).is_err());
}

#[test]
fn forward_errors() {
    let m = model::<f64>(small_cfg(), 1, 1.0);
    let far = SparseInput::new(vec![(0, 4), (24, 1)]).unwrap();
    assert!(matches!(m.forward(&far, None), Err(Error::Input(_))));
    let bad_tok = SparseInput::new(vec![(0, 9)]).unwrap();
    assert!(m.forward(&bad_tok, None).is_err());
    let ok = SparseInput::new(vec![(0, 4), (1, 1)]).unwrap();
    assert!(m.forward(&ok, Some(&[2])).is_err());
}

#[test]
fn outputs_are_normalized_and_causal() {
    let m = model::<f64>(small_cfg(), 2, 20.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in [1, 2, 7, 15] {
        let toks = random_tokens(&mut rng, n, 5);
        let out = m.forward(&SparseInput::full(4, &toks), None).unwrap();
        let total: f64 = out.next_token_logprobs.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert_eq!(out.attentions.len(), 2);
        for layer in &out.attentions {
            assert_eq!(layer.len(), 2);
            for a in layer {
                assert_eq!(a.n, n + 1);
                for i in 0..a.n {
                    assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    for j in i + 1..a.n {
                        assert_eq!(a.get(i, j), 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn single_entry_attention_is_one() {
    let m = model::<f32>(small_cfg(), 3, 1.0);
    let out = m.forward(&SparseInput::new(vec![(5, 2)]).unwrap(), None).unwrap();
    for layer in &out.attentions {
        for a in layer {
            assert_eq!(a.data, vec![1.0]);
        }
    }
}

#[test]
fn predictions_ignore_future_tokens() {
    let m = model::<f64>(small_cfg(), 4, 10.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let toks = random_tokens(&mut rng, 12, 5);
    let full = SparseInput::full(4, &toks);
    let base = m.row_logprobs(&[&full]).unwrap().remove(0);
    for t in 1..toks.len() {
        let mut changed = toks.clone();
        for x in &mut changed[t..] {
            *x = (*x + 1) % 4;
        }
        let other = m.row_logprobs(&[&SparseInput::full(4, &changed)]).unwrap().remove(0);
        // Row r predicts position r + 1 from positions 0..=r.
        for r in 0..t {
            assert_eq!(base[r], other[r], "row {r} changed when editing positions >= {t}");
        }
    }
}

#[test]
fn masked_full_prefix_equals_sparse_subset() {
    let m = model::<f32>(small_cfg(), 5, 15.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..40 {
        let t = rng.gen_range(2..20);
        let toks = random_tokens(&mut rng, t, 5);
        let mut subset: Vec<usize> = (1..t - 1).filter(|_| rng.gen_bool(0.4)).collect();
        subset.push(t - 1);
        let sparse = SparseInput::subset(4, &toks, &subset).unwrap();
        let prefix = SparseInput::full(4, &toks[..t - 1]);
        let drop: Vec<usize> = (1..t - 1).filter(|p| !subset.contains(p)).collect();
        let a = m.forward(&sparse, None).unwrap().next_token_logprobs;
        let b = m.forward(&prefix, Some(&drop)).unwrap().next_token_logprobs;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }
}

#[test]
fn batched_evaluation_matches_single() {
    let m = model::<f64>(small_cfg(), 6, 8.0);
    let a = SparseInput::full(4, &[0, 1, 2, 3]);
    let b = SparseInput::subset(4, &[3, 2, 1, 0, 1], &[2, 5]).unwrap();
    let batched = m.next_token_logprobs_batch(&[(&a, None), (&b, None), (&a, Some(&[2]))]).unwrap();
    assert_eq!(batched[0], m.forward(&a, None).unwrap().next_token_logprobs);
    assert_eq!(batched[1], m.forward(&b, None).unwrap().next_token_logprobs);
    assert_eq!(batched[2], m.forward(&a, Some(&[2])).unwrap().next_token_logprobs);
}

#[test]
fn position_fidelity() {
    // The same (position, token) pairs give the same result regardless of the
    // positions left out between them.
    let m = model::<f64>(small_cfg(), 7, 8.0);
    let x = SparseInput::new(vec![(0, 4), (3, 1), (9, 2)]).unwrap();
    let y = SparseInput::subset(4, &[0, 0, 1, 3, 3, 3, 3, 3, 2], &[3, 9]).unwrap();
    assert_eq!(m.forward(&x, None).unwrap().next_token_logprobs, m.forward(&y, None).unwrap().next_token_logprobs);
    let shifted = SparseInput::new(vec![(0, 4), (4, 1), (9, 2)]).unwrap();
    assert_ne!(
        m.forward(&x, None).unwrap().next_token_logprobs,
        m.forward(&shifted, None).unwrap().next_token_logprobs
    );
}

#[test]
fn unmasked_loss_is_plain_likelihood() {
    let m = model::<f64>(small_cfg(), 8, 5.0);
    let seqs = [vec![0u32, 1, 2, 1], vec![2, 2, 0, 1, 3, 0]];
    let items: Vec<TrainItem> =
        seqs.iter().map(|s| TrainItem { input: SparseInput::full(4, s), drop: vec![] }).collect();
    let (loss, _) = m.loss_and_param_grads(&items).unwrap();
    let mut total = 0.0;
    let mut count = 0;
    for s in &seqs {
        let rows = m.row_logprobs(&[&SparseInput::full(4, s)]).unwrap().remove(0);
        for (r, &tok) in s.iter().enumerate() {
            total -= rows[r][tok as usize];
            count += 1;
        }
    }
    assert!((loss - total / count as f64).abs() < 1e-12);
    assert!(m.loss_and_param_grads(&[]).is_err());
}

#[test]
fn masked_loss_matches_sparse_conditionals() {
    // With a drop set D, row r predicts y_{r+1} from BOS, the kept positions
    // before r, and r itself.
    let m = model::<f64>(small_cfg(), 9, 6.0);
    let toks = vec![0u32, 3, 1, 2, 2, 0, 1];
    let drop = vec![2usize, 4, 5];
    let (loss, _) =
        m.loss_and_param_grads(&[TrainItem { input: SparseInput::full(4, &toks), drop: drop.clone() }]).unwrap();
    let mut total = 0.0;
    for r in 0..toks.len() {
        let mut keep: Vec<usize> = (1..r).filter(|p| !drop.contains(p)).collect();
        if r > 0 {
            keep.push(r);
        }
        let input = SparseInput::subset(4, &toks, &keep).unwrap();
        total -= m.forward(&input, None).unwrap().next_token_logprobs[toks[r] as usize];
    }
    assert!((loss - total / toks.len() as f64).abs() < 1e-12);
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Fourth-order central difference of `f` at 0 along one coordinate.
fn central_diff(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

#[test]
fn input_gradients_match_central_differences() {
    let cfg = tiny_cfg();
    let m = model::<f64>(cfg, 10, 10.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let n = rng.gen_range(1..10);
        let toks = random_tokens(&mut rng, n, 4);
        let input = SparseInput::full(3, &toks);
        let target = rng.gen_range(0..4);
        let g = m.input_embedding_grads(&input, target).unwrap();
        let positions: Vec<usize> = input.positions().collect();
        for e in 0..input.len() {
            for c in 0..cfg.d_model {
                let fd = central_diff(2e-4, |dx| {
                    let mut emb = g.embeddings.clone();
                    emb[e][c] += dx;
                    m.grads_at_embeddings(&positions, &emb, target).unwrap().0
                });
                assert!(rel_err(g.grads[e][c], fd) < 1e-6, "entry {e} coord {c}: {} vs {fd}", g.grads[e][c]);
            }
        }
    }
}

#[test]
fn input_gradients_are_pure() {
    let m = model::<f32>(small_cfg(), 11, 3.0);
    let input = SparseInput::full(4, &[1, 2, 0]);
    let a = m.input_embedding_grads(&input, 2).unwrap();
    let b = m.input_embedding_grads(&input, 2).unwrap();
    assert_eq!(a.grads, b.grads);
}

#[test]
fn parameter_gradients_match_central_differences() {
    let cfg = tiny_cfg();
    let mut m = model::<f64>(cfg, 12, 10.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let items: Vec<TrainItem> = (0..3)
        .map(|_| {
            let n = rng.gen_range(2..9);
            let toks = random_tokens(&mut rng, n, 4);
            let drop = (1..n).filter(|_| rng.gen_bool(0.3)).collect();
            TrainItem { input: SparseInput::full(3, &toks), drop }
        })
        .collect();
    let (_, grads) = m.loss_and_param_grads(&items).unwrap();
    let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.iter().copied()).collect();
    let mut k = 0;
    let n_tensors = m.params.tensors().len();
    for ti in 0..n_tensors {
        let len = m.params.tensors()[ti].len();
        for i in 0..len {
            let orig = m.params.tensors()[ti][i];
            let fd = central_diff(2e-4, |dx| {
                m.params.tensors_mut()[ti][i] = orig + dx;
                m.loss_and_param_grads(&items).unwrap().0
            });
            m.params.tensors_mut()[ti][i] = orig;
            assert!(rel_err(analytic[k], fd) < 1e-6, "tensor {ti} index {i}: {} vs {fd}", analytic[k]);
            k += 1;
        }
    }
}

#[test]
fn dropout_gradients_match_central_differences() {
    let cfg = tiny_cfg();
    let mut m = model::<f64>(cfg, 13, 3.0);
    let items = vec![TrainItem { input: SparseInput::full(3, &[0, 1, 2, 1, 0, 2]), drop: vec![2] }];
    let eval = |m: &Transformer<f64>| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        m.loss_and_param_grads_with(&items, Some(Dropout { rate: 0.3, rng: &mut rng })).unwrap()
    };
    let (loss, grads) = eval(&m);
    assert_ne!(loss, m.loss_and_param_grads(&items).unwrap().0);
    let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.iter().copied()).collect();
    let mut k = 0;
    for ti in 0..m.params.tensors().len() {
        for i in 0..m.params.tensors()[ti].len() {
            let orig = m.params.tensors()[ti][i];
            let fd = central_diff(2e-4, |dx| {
                m.params.tensors_mut()[ti][i] = orig + dx;
                eval(&m).0
            });
            m.params.tensors_mut()[ti][i] = orig;
            assert!(rel_err(analytic[k], fd) < 1e-6, "tensor {ti} index {i}: {} vs {fd}", analytic[k]);
            k += 1;
        }
    }
}
