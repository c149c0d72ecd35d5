// SPDX-License-Identifier: MIT OR Apache-2.0

//! Batched forward and reverse passes. Sequences of different lengths are
//! stacked row-wise so every dense projection is one GEMM; attention runs per
//! sequence and head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, Parameters, SparseInput};
use crate::corpus::TokenId;
use crate::real::Real;

const LN_EPS: f64 = 1e-5;

/// Rows of several sequences stacked together.
pub(crate) struct Batch<T> {
    /// Row offsets, `n_seqs + 1` long.
    pub offsets: Vec<usize>,
    pub positions: Vec<usize>,
    pub tokens: Vec<TokenId>,
    /// Token vectors before the position embedding is added, `rows x d`.
    pub embed: Vec<T>,
    /// Rows hidden from every query but their own.
    pub hidden: Vec<bool>,
}

impl<T: Real> Batch<T> {
    pub fn new(params: &Parameters<T>, d: usize, items: &[(&SparseInput, Option<&[usize]>)]) -> Self {
        let rows: usize = items.iter().map(|(inp, _)| inp.len()).sum();
        let mut b = Batch {
            offsets: Vec::with_capacity(items.len() + 1),
            positions: Vec::with_capacity(rows),
            tokens: Vec::with_capacity(rows),
            embed: Vec::with_capacity(rows * d),
            hidden: vec![false; rows],
        };
        b.offsets.push(0);
        for (input, drop) in items {
            let base = b.positions.len();
            for &(pos, tok) in input.entries() {
                b.positions.push(pos);
                b.tokens.push(tok);
                b.embed.extend_from_slice(params.token_embedding(tok, d));
            }
            for &i in drop.unwrap_or(&[]) {
                b.hidden[base + i] = true;
            }
            b.offsets.push(b.positions.len());
        }
        b
    }

    pub fn from_vectors(positions: &[usize], vectors: &[Vec<T>], d: usize) -> Self {
        let mut embed = Vec::with_capacity(positions.len() * d);
        for v in vectors {
            embed.extend_from_slice(v);
        }
        Batch {
            offsets: vec![0, positions.len()],
            positions: positions.to_vec(),
            tokens: vec![0; positions.len()],
            embed,
            hidden: vec![false; positions.len()],
        }
    }

    pub fn rows(&self) -> usize {
        self.positions.len()
    }

    fn seqs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.offsets.windows(2).map(|w| (w[0], w[1] - w[0]))
    }
}

/// Inverted activation dropout applied to the embedding sum and to both
/// residual branches of every layer.
pub(crate) struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply<T: Real>(&mut self, x: &mut [T]) -> Option<Vec<T>> {
        if self.rate <= 0.0 {
            return None;
        }
        let keep = T::of(1.0 / (1.0 - self.rate));
        let mask: Vec<T> =
            (0..x.len()).map(|_| if self.rng.gen::<f64>() < self.rate { T::zero() } else { keep }).collect();
        for (v, &m) in x.iter_mut().zip(&mask) {
            *v *= m;
        }
        Some(mask)
    }
}

pub(crate) struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

pub(crate) struct LayerCache<T> {
    ln1: LnCache<T>,
    a: Vec<T>,
    qkv: Vec<T>,
    /// Per sequence, per head, `n x n` row-major.
    pub probs: Vec<T>,
    ctx: Vec<T>,
    attn_mask: Option<Vec<T>>,
    ln2: LnCache<T>,
    m: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
    th: Vec<T>,
    ffn_mask: Option<Vec<T>>,
}

pub(crate) struct Cache<T> {
    emb_mask: Option<Vec<T>>,
    pub layers: Vec<LayerCache<T>>,
    head_rows: Vec<usize>,
    lnf: LnCache<T>,
    z: Vec<T>,
    pub logits: Vec<T>,
}

fn layer_norm<T: Real>(x: &[T], g: &[T], b: &[T], d: usize) -> (Vec<T>, LnCache<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::of(1.0 / d as f64);
    let eps = T::of(LN_EPS);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[r * d + c] = h;
            y[r * d + c] = h * g[c] + b[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward<T: Real>(dy: &[T], cache: &LnCache<T>, g: &[T], dg: &mut [T], db: &mut [T], d: usize) -> Vec<T> {
    let rows = dy.len() / d;
    let mut dx = vec![T::zero(); dy.len()];
    let inv_d = T::of(1.0 / d as f64);
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for c in 0..d {
            dg[c] += dyr[c] * xh[c];
            db[c] += dyr[c];
            let dxh = dyr[c] * g[c];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[c];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let rs = cache.rstd[r];
        for c in 0..d {
            let dxh = dyr[c] * g[c];
            dx[r * d + c] = rs * (dxh - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    dx
}

fn gelu_consts<T: Real>() -> (T, T) {
    (T::of((2.0 / std::f64::consts::PI).sqrt()), T::of(0.044715))
}

/// `tanh` through `exp`, which is cheaper than the libm routine; the absolute
/// error stays at machine precision.
fn fast_tanh<T: Real>(y: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * y).exp() + T::one())
}

/// GELU and the `tanh` term it used, which the gradient reuses.
fn gelu_and_tanh<T: Real>(x: T) -> (T, T) {
    let (c, k) = gelu_consts::<T>();
    let t = fast_tanh(c * (x + k * x * x * x));
    (T::of(0.5) * x * (T::one() + t), t)
}

fn gelu_grad_with<T: Real>(x: T, t: T) -> T {
    let (c, k) = gelu_consts::<T>();
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

fn broadcast_rows<T: Real>(bias: &[T], rows: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * bias.len());
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    out
}

fn add_column_sums<T: Real>(dst: &mut [T], x: &[T]) {
    let n = dst.len();
    for row in x.chunks(n) {
        for (d, &v) in dst.iter_mut().zip(row) {
            *d += v;
        }
    }
}

fn apply_mask<T: Real>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

fn probs_len(batch_seq_lens: impl Iterator<Item = usize>, heads: usize) -> usize {
    batch_seq_lens.map(|n| heads * n * n).sum()
}

fn attention<T: Real>(cfg: &ModelConfig, batch: &Batch<T>, qkv: &[T]) -> (Vec<T>, Vec<T>) {
    let d = cfg.d_model;
    let h = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let rows = batch.rows();
    let mut ctx = vec![T::zero(); rows * d];
    let mut probs = vec![T::zero(); probs_len(batch.seqs().map(|s| s.1), h)];
    let mut pbase = 0;
    let mut scores = Vec::new();
    for (lo, n) in batch.seqs() {
        for head in 0..h {
            let qo = head * dh;
            let ko = d + head * dh;
            let vo = 2 * d + head * dh;
            for i in 0..n {
                let qi = &qkv[(lo + i) * 3 * d + qo..(lo + i) * 3 * d + qo + dh];
                scores.clear();
                let mut max = T::neg_infinity();
                for j in 0..=i {
                    if j != i && batch.hidden[lo + j] {
                        scores.push(T::neg_infinity());
                        continue;
                    }
                    let kj = &qkv[(lo + j) * 3 * d + ko..(lo + j) * 3 * d + ko + dh];
                    let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    max = max.max(s);
                    scores.push(s);
                }
                let mut sum = T::zero();
                for s in scores.iter_mut() {
                    *s = if s.is_finite() { (*s - max).exp() } else { T::zero() };
                    sum += *s;
                }
                let prow = &mut probs[pbase + head * n * n + i * n..pbase + head * n * n + (i + 1) * n];
                let out = &mut ctx[(lo + i) * d + qo..(lo + i) * d + qo + dh];
                for (j, &e) in scores.iter().enumerate() {
                    let p = e / sum;
                    prow[j] = p;
                    if p != T::zero() {
                        let vj = &qkv[(lo + j) * 3 * d + vo..(lo + j) * 3 * d + vo + dh];
                        for (o, &v) in out.iter_mut().zip(vj) {
                            *o += p * v;
                        }
                    }
                }
            }
        }
        pbase += h * n * n;
    }
    (ctx, probs)
}

fn attention_backward<T: Real>(cfg: &ModelConfig, batch: &Batch<T>, qkv: &[T], probs: &[T], dctx: &[T]) -> Vec<T> {
    let d = cfg.d_model;
    let h = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut dqkv = vec![T::zero(); qkv.len()];
    let mut pbase = 0;
    let mut dp = Vec::new();
    for (lo, n) in batch.seqs() {
        for head in 0..h {
            let qo = head * dh;
            let ko = d + head * dh;
            let vo = 2 * d + head * dh;
            for i in 0..n {
                let prow = &probs[pbase + head * n * n + i * n..pbase + head * n * n + (i + 1) * n];
                let dci = &dctx[(lo + i) * d + qo..(lo + i) * d + qo + dh];
                dp.clear();
                let mut rowdot = T::zero();
                for j in 0..=i {
                    let p = prow[j];
                    if p == T::zero() {
                        dp.push(T::zero());
                        continue;
                    }
                    let vrow = (lo + j) * 3 * d + vo;
                    let g = dci.iter().zip(&qkv[vrow..vrow + dh]).map(|(&a, &b)| a * b).sum::<T>();
                    for c in 0..dh {
                        dqkv[vrow + c] += p * dci[c];
                    }
                    rowdot += p * g;
                    dp.push(g);
                }
                let qrow = (lo + i) * 3 * d + qo;
                for j in 0..=i {
                    let p = prow[j];
                    if p == T::zero() {
                        continue;
                    }
                    let ds = p * (dp[j] - rowdot) * scale;
                    let krow = (lo + j) * 3 * d + ko;
                    for c in 0..dh {
                        let kv = qkv[krow + c];
                        let qv = qkv[qrow + c];
                        dqkv[qrow + c] += ds * kv;
                        dqkv[krow + c] += ds * qv;
                    }
                }
            }
        }
        pbase += h * n * n;
    }
    dqkv
}

pub(crate) fn forward<T: Real>(
    cfg: &ModelConfig,
    p: &Parameters<T>,
    batch: &Batch<T>,
    head_rows: &[usize],
    mut dropout: Option<Dropout<'_>>,
) -> Cache<T> {
    let d = cfg.d_model;
    let ff = cfg.d_ff;
    let v = cfg.vocab_size;
    let rows = batch.rows();
    let one = T::one();

    let mut x = batch.embed.clone();
    for (r, &pos) in batch.positions.iter().enumerate() {
        for (xv, &pv) in x[r * d..(r + 1) * d].iter_mut().zip(&p.pos_emb[pos * d..(pos + 1) * d]) {
            *xv += pv;
        }
    }
    let emb_mask = dropout.as_mut().and_then(|dr| dr.apply(&mut x));

    let mut layers = Vec::with_capacity(p.layers.len());
    for lp in &p.layers {
        let (a, ln1) = layer_norm(&x, &lp.ln1_g, &lp.ln1_b, d);
        let mut qkv = broadcast_rows(&lp.b_qkv, rows);
        T::gemm(rows, d, 3 * d, one, &a, false, &lp.w_qkv, false, one, &mut qkv);
        let (ctx, probs) = attention(cfg, batch, &qkv);
        let mut o = broadcast_rows(&lp.b_o, rows);
        T::gemm(rows, d, d, one, &ctx, false, &lp.w_o, false, one, &mut o);
        let attn_mask = dropout.as_mut().and_then(|dr| dr.apply(&mut o));
        for (xv, &ov) in x.iter_mut().zip(&o) {
            *xv += ov;
        }

        let (m, ln2) = layer_norm(&x, &lp.ln2_g, &lp.ln2_b, d);
        let mut u = broadcast_rows(&lp.b_fc1, rows);
        T::gemm(rows, d, ff, one, &m, false, &lp.w_fc1, false, one, &mut u);
        let (g, th): (Vec<T>, Vec<T>) = u.iter().map(|&z| gelu_and_tanh(z)).unzip();
        let mut f = broadcast_rows(&lp.b_fc2, rows);
        T::gemm(rows, ff, d, one, &g, false, &lp.w_fc2, false, one, &mut f);
        let ffn_mask = dropout.as_mut().and_then(|dr| dr.apply(&mut f));
        for (xv, &fv) in x.iter_mut().zip(&f) {
            *xv += fv;
        }
        layers.push(LayerCache { ln1, a, qkv, probs, ctx, attn_mask, ln2, m, u, g, th, ffn_mask });
    }

    let hr = head_rows.len();
    let mut xh = Vec::with_capacity(hr * d);
    for &r in head_rows {
        xh.extend_from_slice(&x[r * d..(r + 1) * d]);
    }
    let (z, lnf) = layer_norm(&xh, &p.lnf_g, &p.lnf_b, d);
    let mut logits = broadcast_rows(&p.out_b, hr);
    T::gemm(hr, d, v, one, &z, false, &p.out_w, false, one, &mut logits);
    Cache { emb_mask, layers, head_rows: head_rows.to_vec(), lnf, z, logits }
}

/// Reverse pass from logit gradients of the head rows. Returns parameter
/// gradients (token embeddings excluded) and the gradient with respect to each
/// row's token vector.
pub(crate) fn backward<T: Real>(
    cfg: &ModelConfig,
    p: &Parameters<T>,
    batch: &Batch<T>,
    cache: &Cache<T>,
    dlogits: &[T],
) -> (Parameters<T>, Vec<T>) {
    let d = cfg.d_model;
    let ff = cfg.d_ff;
    let v = cfg.vocab_size;
    let rows = batch.rows();
    let hr = cache.head_rows.len();
    let (one, zero) = (T::one(), T::zero());
    let mut gr = Parameters::<T>::zeros(cfg);

    T::gemm(d, hr, v, one, &cache.z, true, dlogits, false, one, &mut gr.out_w);
    add_column_sums(&mut gr.out_b, dlogits);
    let mut dz = vec![zero; hr * d];
    T::gemm(hr, v, d, one, dlogits, false, &p.out_w, true, zero, &mut dz);
    let dxh = layer_norm_backward(&dz, &cache.lnf, &p.lnf_g, &mut gr.lnf_g, &mut gr.lnf_b, d);
    let mut dx = vec![zero; rows * d];
    for (k, &r) in cache.head_rows.iter().enumerate() {
        for c in 0..d {
            dx[r * d + c] += dxh[k * d + c];
        }
    }

    for (l, lc) in cache.layers.iter().enumerate().rev() {
        let lp = &p.layers[l];
        let lg = &mut gr.layers[l];

        let mut df = dx.clone();
        apply_mask(&mut df, &lc.ffn_mask);
        T::gemm(ff, rows, d, one, &lc.g, true, &df, false, one, &mut lg.w_fc2);
        add_column_sums(&mut lg.b_fc2, &df);
        let mut du = vec![zero; rows * ff];
        T::gemm(rows, d, ff, one, &df, false, &lp.w_fc2, true, zero, &mut du);
        for ((g, &u), &t) in du.iter_mut().zip(&lc.u).zip(&lc.th) {
            *g *= gelu_grad_with(u, t);
        }
        T::gemm(d, rows, ff, one, &lc.m, true, &du, false, one, &mut lg.w_fc1);
        add_column_sums(&mut lg.b_fc1, &du);
        let mut dm = vec![zero; rows * d];
        T::gemm(rows, ff, d, one, &du, false, &lp.w_fc1, true, zero, &mut dm);
        let dres = layer_norm_backward(&dm, &lc.ln2, &lp.ln2_g, &mut lg.ln2_g, &mut lg.ln2_b, d);
        for (a, b) in dx.iter_mut().zip(&dres) {
            *a += *b;
        }

        let mut dout = dx.clone();
        apply_mask(&mut dout, &lc.attn_mask);
        T::gemm(d, rows, d, one, &lc.ctx, true, &dout, false, one, &mut lg.w_o);
        add_column_sums(&mut lg.b_o, &dout);
        let mut dctx = vec![zero; rows * d];
        T::gemm(rows, d, d, one, &dout, false, &lp.w_o, true, zero, &mut dctx);
        let dqkv = attention_backward(cfg, batch, &lc.qkv, &lc.probs, &dctx);
        T::gemm(d, rows, 3 * d, one, &lc.a, true, &dqkv, false, one, &mut lg.w_qkv);
        add_column_sums(&mut lg.b_qkv, &dqkv);
        let mut da = vec![zero; rows * d];
        T::gemm(rows, 3 * d, d, one, &dqkv, false, &lp.w_qkv, true, zero, &mut da);
        let dres = layer_norm_backward(&da, &lc.ln1, &lp.ln1_g, &mut lg.ln1_g, &mut lg.ln1_b, d);
        for (a, b) in dx.iter_mut().zip(&dres) {
            *a += *b;
        }
    }

    apply_mask(&mut dx, &cache.emb_mask);
    for (r, &pos) in batch.positions.iter().enumerate() {
        for c in 0..d {
            gr.pos_emb[pos * d + c] += dx[r * d + c];
        }
    }
    (gr, dx)
}

pub(crate) fn log_softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln() + max;
    logits.iter().map(|&l| l - lse).collect()
}

/// Mean negative log-likelihood of `targets` under each logit row, and its
/// gradient with respect to the logits.
pub(crate) fn nll_and_grad<T: Real>(logits: &[T], targets: &[TokenId], v: usize) -> (T, Vec<T>) {
    let n = targets.len();
    let inv_n = T::of(1.0 / n as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for (k, &t) in targets.iter().enumerate() {
        let lp = log_softmax(&logits[k * v..(k + 1) * v]);
        loss -= lp[t as usize];
        for (j, &l) in lp.iter().enumerate() {
            let onehot = if j == t as usize { T::one() } else { T::zero() };
            grad[k * v + j] = (l.exp() - onehot) * inv_n;
        }
    }
    (loss * inv_n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gelu(x: f64) -> f64 {
        gelu_and_tanh(x).0
    }

    fn gelu_grad(x: f64) -> f64 {
        gelu_grad_with(x, gelu_and_tanh(x).1)
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for &x in &[-3.0f64, -1.0, -0.1, 0.0, 0.3, 2.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
        assert_eq!(gelu(0.0), 0.0);
        for &x in &[-40.0f64, -2.5, -1e-3, 1e-3, 0.7, 40.0] {
            let exact = 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh());
            assert!((gelu(x) - exact).abs() < 1e-14, "x={x}");
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x: Vec<f64> = (0..12).map(|i| (i as f64).powi(2)).collect();
        let (y, _) = layer_norm(&x, &[1.0; 4], &[0.0; 4], 4);
        for row in y.chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn log_softmax_normalizes() {
        let lp = log_softmax(&[1.0f64, 2.0, -3.0, 0.5]);
        let s: f64 = lp.iter().map(|l| l.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
