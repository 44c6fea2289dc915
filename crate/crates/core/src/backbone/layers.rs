use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{gelu_inplace, layer_norm_rows, softmax_inplace, TokenTensor};

pub(crate) const FFN_EXPANSION: usize = 4;

/// Uniform in `[-1/sqrt(fan), 1/sqrt(fan)]` with `fan` the model width.
pub(crate) fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, width: usize) -> TokenTensor {
    let bound = 1.0 / (width as f64).sqrt();
    TokenTensor::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

#[derive(Debug, Clone)]
pub(crate) struct Attention {
    pub wq: TokenTensor,
    pub wk: TokenTensor,
    pub wv: TokenTensor,
    pub wo: TokenTensor,
    pub heads: usize,
}

impl Attention {
    pub fn new(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> Self {
        Self {
            wq: init_matrix(rng, d, d, d),
            wk: init_matrix(rng, d, d, d),
            wv: init_matrix(rng, d, d, d),
            wo: init_matrix(rng, d, d, d),
            heads,
        }
    }

    /// Multi-head attention of `queries` over `keys_values`; both already
    /// normalized.
    pub fn forward(&self, queries: &TokenTensor, keys_values: &TokenTensor) -> TokenTensor {
        let q = queries.matmul(&self.wq);
        let k = keys_values.matmul(&self.wk);
        let v = keys_values.matmul(&self.wv);
        let (nq, d) = q.shape();
        let nk = k.rows();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut mixed = TokenTensor::zeros(nq, d);
        let mut scores = vec![0.0; nk];
        for h in 0..self.heads {
            let off = h * dh;
            for i in 0..nq {
                let qi = &q.row(i)[off..off + dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &k.row(j)[off..off + dh];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_inplace(&mut scores);
                let out = &mut mixed.data_mut()[i * d + off..i * d + off + dh];
                for (j, &p) in scores.iter().enumerate() {
                    let vj = &v.row(j)[off..off + dh];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
        mixed.matmul(&self.wo)
    }

    pub fn flops(nq: usize, nk: usize, d: usize) -> u64 {
        let (nq, nk, d) = (nq as u64, nk as u64, d as u64);
        // q, k, v and output projections; scores and weighted sum
        2 * nq * d * d + 4 * nk * d * d + 2 * nq * d * d + 4 * nq * nk * d
    }

    pub fn params(&self) -> [&TokenTensor; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }
}

#[derive(Debug, Clone)]
pub(crate) struct FeedForward {
    pub w1: TokenTensor,
    pub b1: TokenTensor,
    pub w2: TokenTensor,
    pub b2: TokenTensor,
}

impl FeedForward {
    pub fn new(rng: &mut ChaCha8Rng, d: usize) -> Self {
        let hidden = FFN_EXPANSION * d;
        Self {
            w1: init_matrix(rng, d, hidden, d),
            b1: init_matrix(rng, 1, hidden, d),
            w2: init_matrix(rng, hidden, d, d),
            b2: init_matrix(rng, 1, d, d),
        }
    }

    pub fn forward(&self, x: &TokenTensor) -> TokenTensor {
        let mut h = x.matmul(&self.w1);
        h.add_row_broadcast(self.b1.data());
        gelu_inplace(&mut h);
        let mut out = h.matmul(&self.w2);
        out.add_row_broadcast(self.b2.data());
        out
    }

    pub fn flops(n: usize, d: usize) -> u64 {
        let (n, d, e) = (n as u64, d as u64, FFN_EXPANSION as u64);
        4 * n * d * e * d
    }

    pub fn params(&self) -> [&TokenTensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }
}

pub(crate) fn layer_norm_flops(n: usize, d: usize) -> u64 {
    5 * (n * d) as u64
}

/// Sinusoidal embedding of the integer step index.
pub(crate) fn step_embedding(t: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut e = vec![0.0; d];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let arg = t as f64 * freq;
        e[i] = arg.sin();
        e[half + i] = arg.cos();
    }
    e
}

/// `emb (1 x d) * w (d x d)` as a plain row.
pub(crate) fn project_row(row: &[f64], w: &TokenTensor) -> Vec<f64> {
    let m = w.cols();
    let mut out = vec![0.0; m];
    for (p, &a) in row.iter().enumerate() {
        for (o, &b) in out.iter_mut().zip(w.row(p)) {
            *o += a * b;
        }
    }
    out
}

pub(crate) fn normed(x: &TokenTensor) -> TokenTensor {
    layer_norm_rows(x)
}
