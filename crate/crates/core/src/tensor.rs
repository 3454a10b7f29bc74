//! Dense row-major matrices and the handful of linear-algebra kernels the
//! bridge needs: pseudo-inverse, row normalization, cosine similarity,
//! temperature-scaled softmax, cross-entropy and KL divergence.
//!
//! Everything is computed in `f64`. Embeddings that arrive as 32-bit floats
//! are promoted when they are loaded.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default relative singular-value cutoff used by [`pseudo_inverse`].
pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-10;

/// Default label-side smoothing for [`kl_divergence`].
pub const DEFAULT_KL_EPSILON: f64 = 1e-6;

const SVD_MAX_ITERATIONS: usize = 10_000;

/// Dense 2-D array of embedding coordinates stored row-major.
///
/// Three-dimensional data (classes x shots x dim) is stored flattened to
/// `(classes * shots) x dim`; the grouping lives next to the matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for EmbeddingMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "EmbeddingMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("EmbeddingMatrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    op: "from_rows",
                    left: (1, cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub(crate) fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, m) = (self.rows, other.cols);
        let mut out = Self::zeros(n, m);
        for i in 0..n {
            let out_row = &mut out.data[i * m..(i + 1) * m];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`, the row-against-row dot-product table.
    pub fn matmul_transposed(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                op: "matmul_transposed",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn transposed_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::DimensionMismatch {
                op: "transposed_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, m) = (self.cols, other.cols);
        let mut out = Self::zeros(n, m);
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &bv) in out.data[i * m..(i + 1) * m].iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(out)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                op: "sub",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn row_norms(&self) -> Vec<f64> {
        self.row_iter().map(norm).collect()
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Largest absolute entry; zero for an empty matrix.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    fn from_nalgebra(m: &DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(m[(r, c)]);
            }
        }
        Self { rows, cols, data }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Moore–Penrose pseudo-inverse through a singular value decomposition.
///
/// Singular values below `rank_tolerance * sigma_max` are treated as zero.
pub fn pseudo_inverse(w: &EmbeddingMatrix, rank_tolerance: f64) -> Result<EmbeddingMatrix> {
    if w.is_empty() {
        return Err(Error::EmptyInput("tensor::pseudo_inverse"));
    }
    if !w.all_finite() {
        return Err(Error::NonFinite("pseudo_inverse input"));
    }
    let svd = w
        .to_nalgebra()
        .try_svd(true, true, f64::EPSILON, SVD_MAX_ITERATIONS)
        .ok_or(Error::SvdFailure)?;
    let u = svd.u.as_ref().ok_or(Error::SvdFailure)?;
    let v_t = svd.v_t.as_ref().ok_or(Error::SvdFailure)?;
    let sigma_max = svd.singular_values.iter().fold(0.0_f64, |m, s| m.max(*s));
    let cutoff = rank_tolerance * sigma_max;

    // W⁺ = V Σ⁺ Uᵀ
    let (m, n) = w.shape();
    let mut out = DMatrix::<f64>::zeros(n, m);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        let inv = 1.0 / s;
        let v_col = v_t.row(k);
        let u_col = u.column(k);
        for i in 0..n {
            let vi = v_col[i] * inv;
            if vi == 0.0 {
                continue;
            }
            for j in 0..m {
                out[(i, j)] += vi * u_col[j];
            }
        }
    }
    let out = EmbeddingMatrix::from_nalgebra(&out);
    if !out.all_finite() {
        return Err(Error::NonFinite("pseudo_inverse output"));
    }
    Ok(out)
}

/// Singular values in descending order.
pub fn singular_values(w: &EmbeddingMatrix) -> Result<Vec<f64>> {
    if !w.all_finite() {
        return Err(Error::NonFinite("singular_values input"));
    }
    let svd = w
        .to_nalgebra()
        .try_svd(false, false, f64::EPSILON, SVD_MAX_ITERATIONS)
        .ok_or(Error::SvdFailure)?;
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// The frozen text projection `W_txt` (stored `d_t x d`, applied to row
/// vectors as `e · W_txt`) together with its pseudo-inverse (`d x d_t`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    pub forward: EmbeddingMatrix,
    pub inverse: EmbeddingMatrix,
    pub rank_tolerance: f64,
}

impl ProjectionPair {
    pub fn new(forward: EmbeddingMatrix, rank_tolerance: f64) -> Result<Self> {
        let inverse = pseudo_inverse(&forward, rank_tolerance)?;
        Ok(Self {
            forward,
            inverse,
            rank_tolerance,
        })
    }

    /// EOS-token dimension `d_t`.
    pub fn eos_dim(&self) -> usize {
        self.forward.rows()
    }

    /// Shared embedding dimension `d`.
    pub fn embed_dim(&self) -> usize {
        self.forward.cols()
    }
}

/// Result of [`normalize_rows`]: the normalized matrix and the indices of
/// rows that had zero norm and were left untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedRows {
    pub matrix: EmbeddingMatrix,
    pub zero_rows: Vec<usize>,
}

pub fn normalize_rows(m: &EmbeddingMatrix) -> NormalizedRows {
    let mut out = m.clone();
    let mut zero_rows = Vec::new();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let n = norm(row);
        if n == 0.0 {
            zero_rows.push(r);
            continue;
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    NormalizedRows {
        matrix: out,
        zero_rows,
    }
}

/// Row-normalizes and fails on the first zero row.
pub(crate) fn normalize_rows_strict(m: &EmbeddingMatrix, op: &'static str) -> Result<EmbeddingMatrix> {
    let n = normalize_rows(m);
    match n.zero_rows.first() {
        Some(&row) => Err(Error::ZeroVector { op, row }),
        None => Ok(n.matrix),
    }
}

/// Cosine similarity between every row of `a` and every row of `b`.
pub fn cosine_matrix(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if a.cols != b.cols {
        return Err(Error::DimensionMismatch {
            op: "cosine_matrix",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let an = normalize_rows_strict(a, "cosine_matrix")?;
    let bn = normalize_rows_strict(b, "cosine_matrix")?;
    let mut out = an.matmul_transposed(&bn)?;
    out.data.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(out)
}

fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v * temperature));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v * temperature - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Row-wise softmax of `temperature * M`, computed with max subtraction.
pub fn softmax_rows(m: &EmbeddingMatrix, temperature: f64) -> Result<EmbeddingMatrix> {
    check_temperature(temperature)?;
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r), temperature);
    }
    Ok(out)
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveTemperature(temperature))
    }
}

/// Log-softmax of a single row scaled by `temperature`.
pub(crate) fn log_softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v * temperature));
    let lse = row
        .iter()
        .map(|v| (v * temperature - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    row.iter().map(|v| v * temperature - lse).collect()
}

/// Mean over rows of `-Σ_j target_ij · log softmax(temperature · logits)_ij`.
pub fn cross_entropy_rows(
    logits: &EmbeddingMatrix,
    targets: &EmbeddingMatrix,
    temperature: f64,
) -> Result<f64> {
    if logits.shape() != targets.shape() {
        return Err(Error::DimensionMismatch {
            op: "cross_entropy_rows",
            left: logits.shape(),
            right: targets.shape(),
        });
    }
    check_temperature(temperature)?;
    if logits.rows == 0 {
        return Err(Error::EmptyInput("tensor::cross_entropy_rows"));
    }
    let total: f64 = logits
        .row_iter()
        .zip(targets.row_iter())
        .map(|(z, t)| {
            let ls = log_softmax(z, temperature);
            -t.iter().zip(&ls).map(|(ti, li)| if *ti == 0.0 { 0.0 } else { ti * li }).sum::<f64>()
        })
        .sum();
    Ok(total / logits.rows as f64)
}

fn check_probability(p: &[f64], name: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::NotAProbability(format!("{name} is empty")));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NotAProbability(format!("{name} has negative or non-finite entries")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::NotAProbability(format!("{name} sums to {sum}")));
    }
    Ok(())
}

/// Label-side smoothing `(q + ε) / (1 + Cε)`.
pub fn smooth_distribution(q: &[f64], epsilon: f64) -> Vec<f64> {
    let denom = 1.0 + q.len() as f64 * epsilon;
    q.iter().map(|v| (v + epsilon) / denom).collect()
}

/// `D_KL(p ‖ q)` with `q` smoothed by `epsilon`. Terms with `p_i = 0` contribute zero.
pub fn kl_divergence(p: &[f64], q: &[f64], epsilon: f64) -> Result<f64> {
    check_probability(p, "p")?;
    check_probability(q, "q")?;
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            op: "kl_divergence",
            left: (1, p.len()),
            right: (1, q.len()),
        });
    }
    if !(epsilon >= 0.0) {
        return Err(Error::NotAProbability(format!("smoothing epsilon {epsilon}")));
    }
    let qs = smooth_distribution(q, epsilon);
    let mut kl = 0.0;
    for (pi, qi) in p.iter().zip(&qs) {
        if *pi == 0.0 {
            continue;
        }
        if *qi == 0.0 {
            return Ok(f64::INFINITY);
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> EmbeddingMatrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        EmbeddingMatrix::new(rows, cols, data).unwrap()
    }

    fn max_abs_diff(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> f64 {
        a.sub(b).unwrap().max_abs()
    }

    #[test]
    fn new_rejects_wrong_length_and_nan() {
        assert!(matches!(
            EmbeddingMatrix::new(2, 2, vec![1.0; 3]),
            Err(Error::DataLength { .. })
        ));
        assert!(matches!(
            EmbeddingMatrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn pinv_identity_and_diagonal() {
        let i3 = EmbeddingMatrix::identity(3);
        let p = pseudo_inverse(&i3, DEFAULT_RANK_TOLERANCE).unwrap();
        assert!(max_abs_diff(&p, &i3) < 1e-14);

        let d = EmbeddingMatrix::diagonal(&[2.0, 4.0]);
        let p = pseudo_inverse(&d, DEFAULT_RANK_TOLERANCE).unwrap();
        assert!(max_abs_diff(&p, &EmbeddingMatrix::diagonal(&[0.5, 0.25])) < 1e-14);
    }

    #[test]
    fn pinv_random_tall_satisfies_penrose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_matrix(&mut rng, 4, 3);
        let p = pseudo_inverse(&w, DEFAULT_RANK_TOLERANCE).unwrap();
        let wp = w.matmul(&p).unwrap();
        let pw = p.matmul(&w).unwrap();
        let scale = singular_values(&w).unwrap()[0];
        let residuals = [
            max_abs_diff(&wp.matmul(&w).unwrap(), &w),
            max_abs_diff(&pw.matmul(&p).unwrap(), &p),
            max_abs_diff(&wp.transpose(), &wp),
            max_abs_diff(&pw.transpose(), &pw),
        ];
        for r in residuals {
            assert!(r < 1e-8 * scale, "residual {r}");
        }
        assert!(max_abs_diff(&pw, &EmbeddingMatrix::identity(3)) < 1e-8);
    }

    #[test]
    fn pinv_rank_deficient_drops_small_singular_values() {
        // rank 1: second row is twice the first
        let w = EmbeddingMatrix::from_rows(&[[1.0, 2.0], [2.0, 4.0]]).unwrap();
        let p = pseudo_inverse(&w, DEFAULT_RANK_TOLERANCE).unwrap();
        let back = w.matmul(&p).unwrap().matmul(&w).unwrap();
        assert!(max_abs_diff(&back, &w) < 1e-12);
        // pinv of rank-1 A = A^T / ||A||_F^2
        let expected = w.transpose().scaled(1.0 / 25.0);
        assert!(max_abs_diff(&p, &expected) < 1e-12);
    }

    #[test]
    fn pinv_errors() {
        assert!(matches!(
            pseudo_inverse(&EmbeddingMatrix::zeros(0, 0), 1e-10),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn normalize_rows_examples() {
        let m = EmbeddingMatrix::from_rows(&[[3.0, 4.0]]).unwrap();
        let n = normalize_rows(&m);
        assert!((n.matrix.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((n.matrix.get(0, 1) - 0.8).abs() < 1e-15);

        let m = EmbeddingMatrix::from_rows(&[[1.0, 0.0], [0.0, 2.0]]).unwrap();
        assert_eq!(normalize_rows(&m).matrix, EmbeddingMatrix::identity(2));

        let m = EmbeddingMatrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let n = normalize_rows(&m);
        assert_eq!(n.matrix, m);
        assert_eq!(n.zero_rows, vec![0]);
    }

    #[test]
    fn cosine_examples() {
        let a = EmbeddingMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let b = EmbeddingMatrix::from_rows(&[[0.0, 1.0]]).unwrap();
        let c = EmbeddingMatrix::from_rows(&[[1.0, 1.0]]).unwrap();
        assert_eq!(cosine_matrix(&a, &a).unwrap().get(0, 0), 1.0);
        assert_eq!(cosine_matrix(&a, &b).unwrap().get(0, 0), 0.0);
        let v = cosine_matrix(&c, &a).unwrap().get(0, 0);
        assert!((v - 2f64.sqrt() / 2.0).abs() < 1e-15);

        let three = EmbeddingMatrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            cosine_matrix(&a, &three),
            Err(Error::DimensionMismatch { .. })
        ));
        let zero = EmbeddingMatrix::from_rows(&[[0.0, 0.0]]).unwrap();
        assert!(matches!(cosine_matrix(&a, &zero), Err(Error::ZeroVector { .. })));
    }

    #[test]
    fn softmax_examples() {
        let m = EmbeddingMatrix::from_rows(&[[0.0, 0.0]]).unwrap();
        assert_eq!(softmax_rows(&m, 1.0).unwrap().row(0), &[0.5, 0.5]);

        let m = EmbeddingMatrix::from_rows(&[[1000.0, 0.0]]).unwrap();
        let s = softmax_rows(&m, 1.0).unwrap();
        assert!((s.get(0, 0) - 1.0).abs() < 1e-9 && s.get(0, 1) < 1e-9);

        let m = EmbeddingMatrix::from_rows(&[[2f64.ln(), 0.0]]).unwrap();
        let s = softmax_rows(&m, 1.0).unwrap();
        assert!((s.get(0, 0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.get(0, 1) - 1.0 / 3.0).abs() < 1e-12);

        assert!(matches!(
            softmax_rows(&m, 0.0),
            Err(Error::NonPositiveTemperature(_))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let t = EmbeddingMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let uniform = EmbeddingMatrix::from_rows(&[[0.0, 0.0]]).unwrap();
        assert!((cross_entropy_rows(&uniform, &t, 1.0).unwrap() - 2f64.ln()).abs() < 1e-12);

        let margin = EmbeddingMatrix::from_rows(&[[50.0, 0.0]]).unwrap();
        assert!(cross_entropy_rows(&margin, &t, 1.0).unwrap() < 1e-6);

        let z = EmbeddingMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let e = std::f64::consts::E;
        let expected = -(e / (e + 1.0)).ln();
        assert!((cross_entropy_rows(&z, &t, 1.0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.3133).abs() < 1e-4);

        let wrong = EmbeddingMatrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            cross_entropy_rows(&wrong, &t, 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5], 0.0).unwrap(), 0.0);
        assert!(kl_divergence(&[1.0, 0.0], &[1.0, 0.0], 1e-6).unwrap() < 1e-5);
        let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        let kl = kl_divergence(&[0.9, 0.1], &[0.5, 0.5], 0.0).unwrap();
        assert!((kl - expected).abs() < 1e-12);
        assert!((kl - 0.3681).abs() < 1e-4);
        assert!(matches!(
            kl_divergence(&[0.9, 0.2], &[0.5, 0.5], 0.0),
            Err(Error::NotAProbability(_))
        ));
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 5, 4);
        let via_t = a.matmul(&b.transpose()).unwrap();
        assert!(max_abs_diff(&via_t, &a.matmul_transposed(&b).unwrap()) < 1e-14);
        let c = random_matrix(&mut rng, 3, 2);
        let via_t = a.transpose().matmul(&c).unwrap();
        assert!(max_abs_diff(&via_t, &a.transposed_matmul(&c).unwrap()) < 1e-14);
    }
}
