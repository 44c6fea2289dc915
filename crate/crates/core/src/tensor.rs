//! Dense row-major token tensors and the distance metrics used for change
//! statistics.
//!
//! All metrics operate on the flattened `rows * cols` vector and are pure,
//! deterministic functions of their inputs.

use crate::error::{Error, Result};

/// Returned by [`psnr`] when the two tensors are identical.
pub const PSNR_CAP: f64 = 200.0;

/// An `rows x cols` matrix of `f64`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TokenTensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidTensor(format!(
                "dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidTensor(format!(
                "expected {} elements for {rows}x{cols}, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidTensor(format!(
                "non-finite entry at flat index {i}"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidTensor("ragged rows".into()));
        }
        Self::from_vec(r, c, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    /// `self += rhs`, elementwise.
    pub fn add_assign(&mut self, rhs: &TokenTensor) -> Result<()> {
        check_shape(self, rhs)?;
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += k * rhs`, elementwise.
    pub fn add_scaled(&mut self, rhs: &TokenTensor, k: f64) -> Result<()> {
        check_shape(self, rhs)?;
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += k * b;
        }
        Ok(())
    }

    /// Adds `row` to every row.
    pub fn add_row_broadcast(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.cols, "broadcast row length");
        for chunk in self.data.chunks_exact_mut(self.cols) {
            for (a, b) in chunk.iter_mut().zip(row) {
                *a += b;
            }
        }
    }

    /// `self (n x k) * rhs (k x m)`.
    pub fn matmul(&self, rhs: &TokenTensor) -> TokenTensor {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension");
        let (n, k, m) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &rhs.data[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        TokenTensor {
            rows: n,
            cols: m,
            data: out,
        }
    }

    /// Stacks tensors with equal column counts on top of each other.
    pub fn vstack(parts: &[&TokenTensor]) -> Result<TokenTensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidTensor("vstack of nothing".into()))?;
        let cols = first.cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::ShapeMismatch {
                    left_rows: first.rows,
                    left_cols: cols,
                    right_rows: p.rows,
                    right_cols: p.cols,
                });
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(TokenTensor { rows, cols, data })
    }

    /// Rows `[start, end)` as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> TokenTensor {
        assert!(start < end && end <= self.rows, "row slice out of range");
        TokenTensor {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// FNV-1a over the bit patterns; used for printing run checksums.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

fn check_shape(a: &TokenTensor, b: &TokenTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    Ok(())
}

/// `sum |a_ij - b_ij|`.
pub fn l1_diff_norm(a: &TokenTensor, b: &TokenTensor) -> Result<f64> {
    check_shape(a, b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum())
}

/// Mean squared difference over all `rows * cols` entries.
pub fn mse(a: &TokenTensor, b: &TokenTensor) -> Result<f64> {
    check_shape(a, b)?;
    let sq: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sq / a.data.len() as f64)
}

/// Cosine of the angle between the flattened tensors.
///
/// Two zero tensors are identical (1.0); a zero tensor against a non-zero
/// one is treated as orthogonal (0.0).
pub fn cosine_sim(a: &TokenTensor, b: &TokenTensor) -> Result<f64> {
    check_shape(a, b)?;
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.data.iter().zip(&b.data) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let zero_a = na == 0.0;
    let zero_b = nb == 0.0;
    Ok(match (zero_a, zero_b) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        (false, false) => (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0),
    })
}

/// Peak signal-to-noise ratio in dB; [`PSNR_CAP`] when the inputs match.
pub fn psnr(a: &TokenTensor, b: &TokenTensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) || !peak.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "psnr peak must be positive and finite, got {peak}"
        )));
    }
    let m = mse(a, b)?;
    Ok(psnr_from_mse(m, peak))
}

pub(crate) fn psnr_from_mse(m: f64, peak: f64) -> f64 {
    if m == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (peak * peak / m).log10()).min(PSNR_CAP)
    }
}

// --- kernels shared by the toy backbones ---

pub(crate) fn layer_norm_rows(x: &TokenTensor) -> TokenTensor {
    const EPS: f64 = 1e-6;
    let mut out = x.clone();
    let d = x.cols as f64;
    for row in out.data.chunks_exact_mut(x.cols) {
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

pub(crate) fn gelu_inplace(x: &mut TokenTensor) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    for v in &mut x.data {
        let u = *v;
        // 0.5 * (1 + tanh(z)) == 1 / (1 + exp(-2z))
        *v = u / (1.0 + (-2.0 * C * (u + 0.044_715 * u * u * u)).exp());
    }
}

pub(crate) fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> TokenTensor {
        TokenTensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random(rows: usize, cols: usize, seed: u64) -> TokenTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TokenTensor::from_fn(rows, cols, |_, _| rng.random_range(-3.0..3.0))
    }

    #[test]
    fn l1_hand_cases() {
        let a = t(&[&[1.0, 2.0]]);
        let b = t(&[&[0.0, 0.0]]);
        assert_eq!(l1_diff_norm(&a, &b).unwrap(), 3.0);
        assert_eq!(l1_diff_norm(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn l1_matches_brute_force() {
        let a = random(4, 4, 1);
        let b = random(4, 4, 2);
        let mut oracle = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                oracle += (a.get(i, j) - b.get(i, j)).abs();
            }
        }
        assert_eq!(l1_diff_norm(&a, &b).unwrap(), oracle);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let err = l1_diff_norm(&TokenTensor::zeros(2, 3), &TokenTensor::zeros(3, 2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("3x2"), "{msg}");
        assert!(mse(&TokenTensor::zeros(1, 2), &TokenTensor::zeros(1, 3)).is_err());
        assert!(cosine_sim(&TokenTensor::zeros(1, 2), &TokenTensor::zeros(2, 2)).is_err());
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse(&t(&[&[2.0]]), &t(&[&[0.0]])).unwrap(), 4.0);
        let a = random(3, 5, 3);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let b = random(3, 5, 4);
        let mut oracle = 0.0;
        for i in 0..3 {
            for j in 0..5 {
                let d = a.get(i, j) - b.get(i, j);
                oracle += d * d;
            }
        }
        oracle /= 15.0;
        assert!((mse(&a, &b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn cosine_cases() {
        let a = t(&[&[1.0, 0.0]]);
        let b = t(&[&[0.0, 1.0]]);
        assert_eq!(cosine_sim(&a, &b).unwrap(), 0.0);
        assert_eq!(cosine_sim(&a, &a).unwrap(), 1.0);
        let z = TokenTensor::zeros(1, 2);
        assert_eq!(cosine_sim(&z, &z).unwrap(), 1.0);
        assert_eq!(cosine_sim(&z, &a).unwrap(), 0.0);
        assert_eq!(cosine_sim(&a, &z).unwrap(), 0.0);

        let a = random(6, 7, 5);
        let b = random(6, 7, 6);
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for i in 0..6 {
            for j in 0..7 {
                dot += a.get(i, j) * b.get(i, j);
                na += a.get(i, j).powi(2);
                nb += b.get(i, j).powi(2);
            }
        }
        let oracle = dot / (na.sqrt() * nb.sqrt());
        assert!((cosine_sim(&a, &b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn psnr_cases() {
        let a = t(&[&[1.0, 1.0]]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        // mse = 1
        let b = t(&[&[0.0, 0.0]]);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), 0.0);
        // mse = 0.01
        let c = t(&[&[1.1, 0.9]]);
        let m = mse(&a, &c).unwrap();
        assert!((psnr(&a, &c, 1.0).unwrap() - 10.0 * (1.0 / m).log10()).abs() < 1e-12);
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        assert!(psnr(&a, &b, 0.0).is_err());
        assert!(psnr(&a, &b, -1.0).is_err());
    }

    #[test]
    fn from_vec_rejects_bad_input() {
        assert!(TokenTensor::from_vec(2, 2, vec![0.0; 3]).is_err());
        assert!(TokenTensor::from_vec(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(TokenTensor::from_vec(0, 2, vec![]).is_err());
    }

    #[test]
    fn matmul_small() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(a.matmul(&b), t(&[&[19.0, 22.0], &[43.0, 50.0]]));
    }

    fn tensor_strategy(rows: usize, cols: usize) -> impl Strategy<Value = TokenTensor> {
        prop::collection::vec(-100.0f64..100.0, rows * cols)
            .prop_map(move |d| TokenTensor::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn l1_and_mse_are_symmetric(a in tensor_strategy(3, 4), b in tensor_strategy(3, 4)) {
            prop_assert_eq!(l1_diff_norm(&a, &b).unwrap(), l1_diff_norm(&b, &a).unwrap());
            prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
        }

        #[test]
        fn l1_triangle(a in tensor_strategy(2, 5), b in tensor_strategy(2, 5), c in tensor_strategy(2, 5)) {
            let ac = l1_diff_norm(&a, &c).unwrap();
            let ab = l1_diff_norm(&a, &b).unwrap();
            let bc = l1_diff_norm(&b, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-9 * (ab + bc));
        }

        #[test]
        fn cosine_scale_invariant(a in tensor_strategy(3, 3), b in tensor_strategy(3, 3), k in 0.01f64..100.0) {
            prop_assume!(a.l1_norm() > 1e-6 && b.l1_norm() > 1e-6);
            let lhs = cosine_sim(&a.scaled(k), &b).unwrap();
            let rhs = cosine_sim(&a, &b).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&lhs));
        }

        #[test]
        fn metrics_are_deterministic(a in tensor_strategy(2, 3), b in tensor_strategy(2, 3)) {
            prop_assert_eq!(l1_diff_norm(&a, &b).unwrap().to_bits(), l1_diff_norm(&a, &b).unwrap().to_bits());
            prop_assert_eq!(mse(&a, &b).unwrap().to_bits(), mse(&a, &b).unwrap().to_bits());
            prop_assert_eq!(cosine_sim(&a, &b).unwrap().to_bits(), cosine_sim(&a, &b).unwrap().to_bits());
            prop_assert_eq!(psnr(&a, &b, 10.0).unwrap().to_bits(), psnr(&a, &b, 10.0).unwrap().to_bits());
        }
    }
}
