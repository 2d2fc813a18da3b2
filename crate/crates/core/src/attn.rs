//! Multi-head attention block with a projected ReLU residual.
//!
//! For a query sequence `X` (rows are time slots) and key/value sequence `Y`,
//! head `h` computes
//!
//! ```text
//! alpha_h = softmax_rows( (X Wq_h^T) (Y Wk_h^T)^T )
//! out_h   = alpha_h (Y Wv_h^T)
//! ```
//!
//! The heads are concatenated and `ReLU(concat + X Wr^T)` is returned. Logits
//! are plain inner products without a `1/sqrt(d')` factor. The per-head
//! matrices are stored stacked: rows `h*d'..(h+1)*d'` of `wq` belong to head
//! `h`, and likewise for `wk` and `wv`.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    n_heads: usize,
    head_dim: usize,
    /// `H d' x query_dim`
    pub wq: Array2<f64>,
    /// `H d' x kv_dim`
    pub wk: Array2<f64>,
    /// `H d' x kv_dim`
    pub wv: Array2<f64>,
    /// Residual projection, `H d' x query_dim`.
    pub wr: Array2<f64>,
}

/// Per-head `T_query x T_key` attention coefficients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionWeights {
    pub heads: Vec<Array2<f64>>,
}

impl AttentionWeights {
    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.heads
            .iter()
            .flat_map(|a| a.sum_axis(Axis(1)).into_iter())
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Mean over heads.
    pub fn head_mean(&self) -> Array2<f64> {
        let mut acc = Array2::zeros(self.heads[0].raw_dim());
        for a in &self.heads {
            acc += a;
        }
        acc / self.heads.len() as f64
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BlockCache {
    query: Array2<f64>,
    kv: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    alpha: Vec<Array2<f64>>,
    pre: Array2<f64>,
}

impl BlockCache {
    pub fn weights(&self) -> AttentionWeights {
        AttentionWeights {
            heads: self.alpha.clone(),
        }
    }
}

/// Row-wise softmax, stabilised by the row maximum.
pub fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

impl AttentionBlock {
    pub fn zeros(n_heads: usize, head_dim: usize, query_dim: usize, kv_dim: usize) -> Result<Self> {
        if n_heads == 0 || head_dim == 0 || query_dim == 0 || kv_dim == 0 {
            return Err(Error::InvalidConfig("attention dimensions must be positive".into()));
        }
        let out = n_heads * head_dim;
        Ok(AttentionBlock {
            n_heads,
            head_dim,
            wq: Array2::zeros((out, query_dim)),
            wk: Array2::zeros((out, kv_dim)),
            wv: Array2::zeros((out, kv_dim)),
            wr: Array2::zeros((out, query_dim)),
        })
    }

    /// Entries uniform in `[-1/sqrt(n), 1/sqrt(n)]`, `n` the matrix input dim.
    pub fn random(n_heads: usize, head_dim: usize, query_dim: usize, kv_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut b = Self::zeros(n_heads, head_dim, query_dim, kv_dim)?;
        let out = b.out_dim();
        let bq = 1.0 / (query_dim as f64).sqrt();
        let bk = 1.0 / (kv_dim as f64).sqrt();
        b.wq = uniform_matrix(out, query_dim, bq, rng);
        b.wk = uniform_matrix(out, kv_dim, bk, rng);
        b.wv = uniform_matrix(out, kv_dim, bk, rng);
        b.wr = uniform_matrix(out, query_dim, bq, rng);
        Ok(b)
    }

    /// Builds a block from explicit matrices, checking their shapes.
    pub fn from_matrices(
        n_heads: usize,
        head_dim: usize,
        wq: Array2<f64>,
        wk: Array2<f64>,
        wv: Array2<f64>,
        wr: Array2<f64>,
    ) -> Result<Self> {
        let b = AttentionBlock {
            n_heads,
            head_dim,
            wq,
            wk,
            wv,
            wr,
        };
        let out = b.out_dim();
        let ctx = "attention block shapes";
        for (m, cols) in [(&b.wq, b.query_dim()), (&b.wk, b.kv_dim()), (&b.wv, b.kv_dim()), (&b.wr, b.query_dim())] {
            if m.nrows() != out {
                return Err(Error::DimensionMismatch {
                    context: ctx,
                    expected: out,
                    actual: m.nrows(),
                });
            }
            if m.ncols() != cols {
                return Err(Error::DimensionMismatch {
                    context: ctx,
                    expected: cols,
                    actual: m.ncols(),
                });
            }
        }
        Ok(b)
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn query_dim(&self) -> usize {
        self.wq.ncols()
    }

    pub fn kv_dim(&self) -> usize {
        self.wk.ncols()
    }

    /// `d' H`.
    pub fn out_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn zeros_like(&self) -> Self {
        AttentionBlock {
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            wq: Array2::zeros(self.wq.raw_dim()),
            wk: Array2::zeros(self.wk.raw_dim()),
            wv: Array2::zeros(self.wv.raw_dim()),
            wr: Array2::zeros(self.wr.raw_dim()),
        }
    }

    pub fn matrices(&self) -> [(&'static str, &Array2<f64>); 4] {
        [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wr", &self.wr)]
    }

    pub fn matrices_mut(&mut self) -> [&mut Array2<f64>; 4] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wr]
    }

    fn check_inputs(&self, query: &ArrayView2<f64>, kv: &ArrayView2<f64>) -> Result<()> {
        if query.ncols() != self.query_dim() {
            return Err(Error::DimensionMismatch {
                context: "attention query",
                expected: self.query_dim(),
                actual: query.ncols(),
            });
        }
        if kv.ncols() != self.kv_dim() {
            return Err(Error::DimensionMismatch {
                context: "attention key/value",
                expected: self.kv_dim(),
                actual: kv.ncols(),
            });
        }
        if kv.nrows() == 0 {
            return Err(Error::DimensionMismatch {
                context: "attention key/value length",
                expected: 1,
                actual: 0,
            });
        }
        Ok(())
    }

    /// Attention without the residual: the concatenated head outputs
    /// (`T_q x d'H`) and the coefficients.
    pub fn attend(&self, query: ArrayView2<f64>, kv: ArrayView2<f64>) -> Result<(Array2<f64>, AttentionWeights)> {
        let cache = self.forward_cache(query, kv)?;
        let mut concat = Array2::zeros((cache.q.nrows(), self.out_dim()));
        self.mix_heads(&cache.alpha, &cache.v, &mut concat);
        Ok((concat, cache.weights()))
    }

    fn mix_heads(&self, alpha: &[Array2<f64>], v: &Array2<f64>, out: &mut Array2<f64>) {
        for (h, a) in alpha.iter().enumerate() {
            let cols = s![.., h * self.head_dim..(h + 1) * self.head_dim];
            out.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
        }
    }

    fn forward_cache(&self, query: ArrayView2<f64>, kv: ArrayView2<f64>) -> Result<BlockCache> {
        self.check_inputs(&query, &kv)?;
        let q = query.dot(&self.wq.t());
        let k = kv.dot(&self.wk.t());
        let v = kv.dot(&self.wv.t());
        let alpha = (0..self.n_heads)
            .map(|h| {
                let cols = s![.., h * self.head_dim..(h + 1) * self.head_dim];
                let mut logits = q.slice(cols).dot(&k.slice(cols).t());
                softmax_rows(&mut logits);
                logits
            })
            .collect();
        Ok(BlockCache {
            query: query.to_owned(),
            kv: kv.to_owned(),
            q,
            k,
            v,
            alpha,
            pre: Array2::zeros((0, 0)),
        })
    }

    /// Full block: `ReLU(attend(query, kv) + query Wr^T)`, with the cache
    /// needed by [`AttentionBlock::backward`].
    pub fn forward(&self, query: ArrayView2<f64>, kv: ArrayView2<f64>) -> Result<(Array2<f64>, BlockCache)> {
        let mut cache = self.forward_cache(query, kv)?;
        let mut pre = cache.query.dot(&self.wr.t());
        let mut concat = Array2::zeros(pre.raw_dim());
        self.mix_heads(&cache.alpha, &cache.v, &mut concat);
        pre += &concat;
        let out = pre.mapv(|z| z.max(0.0));
        cache.pre = pre;
        Ok((out, cache))
    }

    /// Back-propagates `d_out` through the block. Accumulates parameter
    /// gradients into `grads` and returns the gradients with respect to the
    /// query and key/value inputs.
    pub fn backward(&self, cache: &BlockCache, d_out: &Array2<f64>, grads: &mut AttentionBlock) -> (Array2<f64>, Array2<f64>) {
        let mut dz = d_out.clone();
        Zip::from(&mut dz).and(&cache.pre).for_each(|g, &z| {
            if z <= 0.0 {
                *g = 0.0;
            }
        });

        // residual path
        let mut d_query = dz.dot(&self.wr);
        grads.wr += &dz.t().dot(&cache.query);

        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for (h, alpha) in cache.alpha.iter().enumerate() {
            let cols = s![.., h * self.head_dim..(h + 1) * self.head_dim];
            let d_head = dz.slice(cols);
            dv.slice_mut(cols).assign(&alpha.t().dot(&d_head));
            let d_alpha = d_head.dot(&cache.v.slice(cols).t());
            // softmax backward, row by row
            let mut d_logits = &d_alpha * alpha;
            let row_dot = d_logits.sum_axis(Axis(1)).insert_axis(Axis(1));
            d_logits -= &(alpha * &row_dot);
            dq.slice_mut(cols).assign(&d_logits.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&d_logits.t().dot(&cache.q.slice(cols)));
        }

        grads.wq += &dq.t().dot(&cache.query);
        grads.wk += &dk.t().dot(&cache.kv);
        grads.wv += &dv.t().dot(&cache.kv);
        d_query += &dq.dot(&self.wq);
        let mut d_kv = dk.dot(&self.wk);
        d_kv += &dv.dot(&self.wv);
        (d_query, d_kv)
    }
}

/// `ReLU(attended + raw Wr^T)`.
pub fn residual_relu(attended: ArrayView2<f64>, raw: ArrayView2<f64>, wr: ArrayView2<f64>) -> Result<Array2<f64>> {
    if raw.ncols() != wr.ncols() {
        return Err(Error::DimensionMismatch {
            context: "residual input",
            expected: wr.ncols(),
            actual: raw.ncols(),
        });
    }
    if attended.dim() != (raw.nrows(), wr.nrows()) {
        return Err(Error::DimensionMismatch {
            context: "residual output",
            expected: wr.nrows(),
            actual: attended.ncols(),
        });
    }
    let mut out = raw.dot(&wr.t());
    out += &attended;
    out.mapv_inplace(|z| z.max(0.0));
    Ok(out)
}

/// Validates that each layer's input width equals the previous output width.
pub fn check_chain(layers: &[AttentionBlock], input_dim: usize) -> Result<()> {
    let mut dim = input_dim;
    for layer in layers {
        if layer.query_dim() != dim || layer.kv_dim() != dim {
            return Err(Error::DimensionMismatch {
                context: "attention stack chain",
                expected: dim,
                actual: layer.query_dim(),
            });
        }
        dim = layer.out_dim();
    }
    Ok(())
}

/// Self-attention through `layers` in order (cross-attention against the
/// fixed `kv` when `self_attend` is false). An empty stack is the identity.
pub fn stack(layers: &[AttentionBlock], seq: ArrayView2<f64>, self_attend: bool, kv: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
    let mut x = seq.to_owned();
    for layer in layers {
        let (y, _) = if self_attend {
            layer.forward(x.view(), x.view())?
        } else {
            let kv = kv.ok_or(Error::InvalidConfig("cross-attention stack needs a key/value sequence".into()))?;
            layer.forward(x.view(), kv)?
        };
        x = y;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn random_seq(t: usize, d: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identical_keys_give_uniform_rows() {
        let mut r = rng();
        let b = AttentionBlock::random(2, 3, 6, 6, &mut r).unwrap();
        let q = random_seq(4, 6, &mut r);
        let row = random_seq(1, 6, &mut r);
        let kv = Array2::from_shape_fn((5, 6), |(_, j)| row[[0, j]]);
        let (_, w) = b.attend(q.view(), kv.view()).unwrap();
        for a in &w.heads {
            for &x in a.iter() {
                assert!((x - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_key_single_head() {
        let mut r = rng();
        let b = AttentionBlock::random(1, 3, 4, 4, &mut r).unwrap();
        let q = random_seq(2, 4, &mut r);
        let kv = random_seq(1, 4, &mut r);
        let (out, w) = b.attend(q.view(), kv.view()).unwrap();
        let expected = kv.dot(&b.wv.t());
        for t in 0..2 {
            assert_eq!(w.heads[0][[t, 0]], 1.0);
            for j in 0..3 {
                assert!((out[[t, j]] - expected[[0, j]]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let b = AttentionBlock::zeros(2, 2, 4, 4).unwrap();
        let q = Array2::zeros((3, 5));
        let kv = Array2::zeros((3, 4));
        assert!(matches!(b.attend(q.view(), kv.view()), Err(Error::DimensionMismatch { .. })));
        assert!(AttentionBlock::from_matrices(1, 2, Array2::zeros((2, 3)), Array2::zeros((2, 3)), Array2::zeros((3, 3)), Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn residual_relu_cases() {
        let att = Array2::zeros((2, 3));
        let raw = array![[1.0, -2.0], [0.5, 0.5]];
        let w0 = Array2::zeros((3, 2));
        assert!(residual_relu(att.view(), raw.view(), w0.view()).unwrap().iter().all(|&v| v == 0.0));

        let neg = Array2::from_elem((2, 3), -5.0);
        let w = Array2::from_elem((3, 2), 0.1);
        assert!(residual_relu(neg.view(), raw.view(), w.view()).unwrap().iter().all(|&v| v == 0.0));

        let mut r = rng();
        let att = random_seq(4, 3, &mut r);
        let raw = random_seq(4, 2, &mut r);
        let w = random_seq(3, 2, &mut r);
        let out = residual_relu(att.view(), raw.view(), w.view()).unwrap();
        assert!(out.iter().all(|&v| v >= 0.0));
        let pre = &att + &raw.dot(&w.t());
        for (o, p) in out.iter().zip(pre.iter()) {
            assert_eq!(*o, p.max(0.0));
        }
    }

    #[test]
    fn forward_is_attend_plus_residual() {
        let mut r = rng();
        let b = AttentionBlock::random(2, 2, 4, 4, &mut r).unwrap();
        let x = random_seq(5, 4, &mut r);
        let (att, _) = b.attend(x.view(), x.view()).unwrap();
        let manual = residual_relu(att.view(), x.view(), b.wr.view()).unwrap();
        let (out, _) = b.forward(x.view(), x.view()).unwrap();
        assert!((&out - &manual).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn empty_stack_is_identity_and_single_layer_matches_block() {
        let mut r = rng();
        let x = random_seq(3, 4, &mut r);
        assert_eq!(stack(&[], x.view(), true, None).unwrap(), x);
        let b = AttentionBlock::random(2, 2, 4, 4, &mut r).unwrap();
        let (once, _) = b.forward(x.view(), x.view()).unwrap();
        assert_eq!(stack(std::slice::from_ref(&b), x.view(), true, None).unwrap(), once);
    }

    #[test]
    fn chain_mismatch_rejected() {
        let a = AttentionBlock::zeros(2, 3, 4, 4).unwrap();
        let b = AttentionBlock::zeros(2, 2, 4, 4).unwrap();
        assert!(check_chain(&[a.clone(), b.clone()], 4).is_err());
        let c = AttentionBlock::zeros(2, 2, 6, 6).unwrap();
        assert!(check_chain(&[a, c], 4).is_ok());
    }

    #[test]
    fn permuting_keys_permutes_columns() {
        let mut r = rng();
        let b = AttentionBlock::random(2, 3, 5, 5, &mut r).unwrap();
        let q = random_seq(3, 5, &mut r);
        let kv = random_seq(4, 5, &mut r);
        let perm = [2, 0, 3, 1];
        let kv_p = Array2::from_shape_fn((4, 5), |(i, j)| kv[[perm[i], j]]);
        let (out, w) = b.attend(q.view(), kv.view()).unwrap();
        let (out_p, w_p) = b.attend(q.view(), kv_p.view()).unwrap();
        for (a, ap) in w.heads.iter().zip(&w_p.heads) {
            for t in 0..3 {
                for (i, &p) in perm.iter().enumerate() {
                    assert!((ap[[t, i]] - a[[t, p]]).abs() < 1e-14);
                }
            }
        }
        assert!((&out - &out_p).iter().all(|v| v.abs() < 1e-12));
    }

    fn block_loss(b: &AttentionBlock, q: &Array2<f64>, kv: &Array2<f64>, g: &Array2<f64>) -> f64 {
        let (out, _) = b.forward(q.view(), kv.view()).unwrap();
        (&out * g).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut r = rng();
        let b = AttentionBlock::random(2, 3, 4, 5, &mut r).unwrap();
        let q = random_seq(3, 4, &mut r);
        let kv = random_seq(6, 5, &mut r);
        let g = random_seq(3, 6, &mut r);
        let (_, cache) = b.forward(q.view(), kv.view()).unwrap();
        let mut grads = b.zeros_like();
        let (dq, dkv) = b.backward(&cache, &g, &mut grads);

        let h = 1e-5;
        let check = |analytic: f64, numeric: f64| {
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "analytic {analytic} numeric {numeric}");
        };
        for m in 0..4 {
            let (rows, cols) = b.matrices()[m].1.dim();
            for i in 0..rows {
                for j in 0..cols {
                    let mut plus = b.clone();
                    plus.matrices_mut()[m][[i, j]] += h;
                    let mut minus = b.clone();
                    minus.matrices_mut()[m][[i, j]] -= h;
                    let num = (block_loss(&plus, &q, &kv, &g) - block_loss(&minus, &q, &kv, &g)) / (2.0 * h);
                    check(grads.matrices()[m].1[[i, j]], num);
                }
            }
        }
        for i in 0..q.nrows() {
            for j in 0..q.ncols() {
                let mut p = q.clone();
                p[[i, j]] += h;
                let mut m = q.clone();
                m[[i, j]] -= h;
                check(dq[[i, j]], (block_loss(&b, &p, &kv, &g) - block_loss(&b, &m, &kv, &g)) / (2.0 * h));
            }
        }
        for i in 0..kv.nrows() {
            for j in 0..kv.ncols() {
                let mut p = kv.clone();
                p[[i, j]] += h;
                let mut m = kv.clone();
                m[[i, j]] -= h;
                check(dkv[[i, j]], (block_loss(&b, &q, &p, &g) - block_loss(&b, &q, &m, &g)) / (2.0 * h));
            }
        }
    }
}
