//! Dense/sparse operator wrapper and the small set of factorizations shared by
//! the filters.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use nalgebra_sparse::{CooMatrix, CsrMatrix};

use crate::error::{Error, Result};
use crate::flops;

/// A linear operator stored either densely or in compressed-row form.
///
/// All products go through this type so that their cost is recorded by the
/// flop counter and sparse operators never get densified inside a time loop.
#[derive(Debug, Clone)]
pub enum Operator {
    Dense(DMatrix<f64>),
    Sparse(CsrMatrix<f64>),
}

impl From<DMatrix<f64>> for Operator {
    fn from(m: DMatrix<f64>) -> Self {
        Operator::Dense(m)
    }
}

impl From<CsrMatrix<f64>> for Operator {
    fn from(m: CsrMatrix<f64>) -> Self {
        Operator::Sparse(m)
    }
}

impl Operator {
    pub fn identity(n: usize) -> Self {
        Operator::Sparse(CsrMatrix::identity(n))
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut coo = CooMatrix::new(n, n);
        for (i, &v) in diag.iter().enumerate() {
            if v != 0.0 {
                coo.push(i, i, v);
            }
        }
        Operator::Sparse(CsrMatrix::from(&coo))
    }

    pub fn scaled_identity(n: usize, c: f64) -> Self {
        Self::diagonal(&vec![c; n])
    }

    /// Converts a dense matrix to compressed-row form, keeping only nonzeros.
    pub fn sparse_from_dense(m: &DMatrix<f64>) -> Self {
        let mut coo = CooMatrix::new(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let v = m[(i, j)];
                if v != 0.0 {
                    coo.push(i, j, v);
                }
            }
        }
        Operator::Sparse(CsrMatrix::from(&coo))
    }

    pub fn nrows(&self) -> usize {
        match self {
            Operator::Dense(m) => m.nrows(),
            Operator::Sparse(m) => m.nrows(),
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            Operator::Dense(m) => m.ncols(),
            Operator::Sparse(m) => m.ncols(),
        }
    }

    pub fn nnz(&self) -> usize {
        match self {
            Operator::Dense(m) => m.len(),
            Operator::Sparse(m) => m.nnz(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Operator::Dense(m) => m.clone(),
            Operator::Sparse(m) => {
                let mut out = DMatrix::zeros(m.nrows(), m.ncols());
                for (i, j, &v) in m.triplet_iter() {
                    out[(i, j)] += v;
                }
                out
            }
        }
    }

    pub fn transpose(&self) -> Operator {
        match self {
            Operator::Dense(m) => Operator::Dense(m.transpose()),
            Operator::Sparse(m) => Operator::Sparse(m.transpose()),
        }
    }

    /// Diagonal entries when the operator has no off-diagonal nonzeros.
    pub fn as_diagonal(&self) -> Option<Vec<f64>> {
        if self.nrows() != self.ncols() {
            return None;
        }
        match self {
            Operator::Dense(m) => {
                for i in 0..m.nrows() {
                    for j in 0..m.ncols() {
                        if i != j && m[(i, j)] != 0.0 {
                            return None;
                        }
                    }
                }
                Some(m.diagonal().iter().copied().collect())
            }
            Operator::Sparse(m) => {
                let mut d = vec![0.0; m.nrows()];
                for (i, j, &v) in m.triplet_iter() {
                    if i != j {
                        if v != 0.0 {
                            return None;
                        }
                    } else {
                        d[i] += v;
                    }
                }
                Some(d)
            }
        }
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(self.ncols(), x.len());
        match self {
            Operator::Dense(m) => {
                flops::add(2 * m.len() as u64);
                m * x
            }
            Operator::Sparse(m) => {
                flops::add(2 * m.nnz() as u64);
                let mut out = DVector::zeros(m.nrows());
                for (i, row) in m.row_iter().enumerate() {
                    let mut acc = 0.0;
                    for (&j, &v) in row.col_indices().iter().zip(row.values()) {
                        acc += v * x[j];
                    }
                    out[i] = acc;
                }
                out
            }
        }
    }

    pub fn mul_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        debug_assert_eq!(self.ncols(), x.nrows());
        match self {
            Operator::Dense(m) => matmul(m, x),
            Operator::Sparse(m) => {
                flops::add(2 * (m.nnz() * x.ncols()) as u64);
                let mut out = DMatrix::zeros(m.nrows(), x.ncols());
                for c in 0..x.ncols() {
                    let col = x.column(c);
                    for (i, row) in m.row_iter().enumerate() {
                        let mut acc = 0.0;
                        for (&j, &v) in row.col_indices().iter().zip(row.values()) {
                            acc += v * col[j];
                        }
                        out[(i, c)] = acc;
                    }
                }
                out
            }
        }
    }

    /// `selfᵀ · x` without forming the transpose.
    pub fn tr_mul_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        debug_assert_eq!(self.nrows(), x.nrows());
        match self {
            Operator::Dense(m) => tr_matmul(m, x),
            Operator::Sparse(m) => {
                flops::add(2 * (m.nnz() * x.ncols()) as u64);
                let mut out = DMatrix::zeros(m.ncols(), x.ncols());
                for c in 0..x.ncols() {
                    for (i, row) in m.row_iter().enumerate() {
                        let xi = x[(i, c)];
                        if xi == 0.0 {
                            continue;
                        }
                        for (&j, &v) in row.col_indices().iter().zip(row.values()) {
                            out[(j, c)] += v * xi;
                        }
                    }
                }
                out
            }
        }
    }

    /// Product of two operators, staying sparse when both factors are.
    pub fn compose(&self, rhs: &Operator) -> Operator {
        match (self, rhs) {
            (Operator::Sparse(a), Operator::Sparse(b)) => Operator::Sparse(a * b),
            (a, b) => Operator::Dense(a.mul_mat(&b.to_dense())),
        }
    }

    pub fn scale(&self, c: f64) -> Operator {
        match self {
            Operator::Dense(m) => Operator::Dense(m * c),
            Operator::Sparse(m) => Operator::Sparse(m * c),
        }
    }

    /// `self + c·rhs`.
    pub fn add_scaled(&self, c: f64, rhs: &Operator) -> Operator {
        match (self, rhs) {
            (Operator::Sparse(a), Operator::Sparse(b)) => Operator::Sparse(a + &(b * c)),
            (a, b) => Operator::Dense(a.to_dense() + b.to_dense() * c),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        match self {
            Operator::Dense(m) => m.norm(),
            Operator::Sparse(m) => m.values().iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }

    /// Largest absolute entry of `self − selfᵀ`.
    pub fn asymmetry(&self) -> f64 {
        let d = self.to_dense();
        (&d - d.transpose()).amax()
    }
}

/// `xᵀ b` entry by entry, each a dot product of two columns with four
/// interleaved partial sums. Row `p` of the result depends only on column
/// `p` of `x`.
pub fn column_dots(x: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(x.nrows(), b.nrows(), "column_dots: row mismatch");
    let n = x.nrows();
    flops::add(2 * (n * x.ncols() * b.ncols()) as u64);
    let (xs, bs) = (x.as_slice(), b.as_slice());
    DMatrix::from_fn(x.ncols(), b.ncols(), |p, j| dot4(&xs[p * n..(p + 1) * n], &bs[j * n..(j + 1) * n]))
}

fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Dense `a · b` with flop accounting.
pub fn matmul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    flops::add(2 * (a.nrows() * a.ncols() * b.ncols()) as u64);
    a * b
}

/// Dense `aᵀ · b` with flop accounting.
pub fn tr_matmul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    flops::add(2 * (a.nrows() * a.ncols() * b.ncols()) as u64);
    a.tr_mul(b)
}

pub fn matvec(a: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    flops::add(2 * a.len() as u64);
    a * x
}

pub fn tr_matvec(a: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    flops::add(2 * a.len() as u64);
    a.tr_mul(x)
}

/// In-place `(m + mᵀ)/2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Eigenvalues of a symmetric matrix in non-increasing order.
pub fn sorted_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Symmetric eigendecomposition with eigenpairs sorted by decreasing eigenvalue.
pub fn sorted_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(m.nrows(), idx.len(), |r, c| eig.eigenvectors[(r, idx[c])]);
    (values, vectors)
}

/// Checks the PSD tolerance `λ_min ≥ −1e−10·max|λ|` and returns the
/// eigendecomposition with small negative eigenvalues clamped to zero.
fn clamped_eigen(m: &DMatrix<f64>, what: &'static str) -> Result<(Vec<f64>, DMatrix<f64>, usize)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPsd { what, min_eigenvalue: f64::NAN });
    }
    let (mut values, vectors) = sorted_eigen(m);
    let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = values.last().copied().unwrap_or(0.0);
    if min < -1e-10 * scale {
        return Err(Error::NotPsd { what, min_eigenvalue: min });
    }
    let mut clamped = 0;
    for v in values.iter_mut() {
        if *v < 1e-12 * scale {
            if *v != 0.0 {
                clamped += 1;
            }
            *v = 0.0;
        }
    }
    Ok((values, vectors, clamped))
}

/// Symmetric PSD square root through the eigendecomposition.
pub fn psd_sqrt(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let (values, vectors, _) = clamped_eigen(m, what)?;
    let scaled = DMatrix::from_fn(vectors.nrows(), vectors.ncols(), |r, c| {
        vectors[(r, c)] * values[c].sqrt()
    });
    let mut out = scaled * vectors.transpose();
    symmetrize(&mut out);
    Ok(out)
}

/// Factor `L` with `L·Lᵀ = m`, used for Gaussian sampling. Cholesky when `m`
/// is strictly positive definite, otherwise a clamped eigendecomposition.
/// Also returns the number of eigenvalues that had to be clamped.
pub fn psd_factor(m: &DMatrix<f64>, what: &'static str) -> Result<(DMatrix<f64>, usize)> {
    if m.iter().all(|v| *v == 0.0) {
        return Ok((DMatrix::zeros(m.nrows(), m.ncols()), 0));
    }
    if let Some(ch) = m.clone().cholesky() {
        return Ok((ch.l(), 0));
    }
    let (values, vectors, clamped) = clamped_eigen(m, what)?;
    let l = DMatrix::from_fn(vectors.nrows(), vectors.ncols(), |r, c| {
        vectors[(r, c)] * values[c].sqrt()
    });
    Ok((l, clamped))
}

/// Thin QR with a non-negative `R` diagonal, returning `Q`.
///
/// Fails with [`Error::RankCollapse`] when a column's residual falls below
/// `1e−12` of its original norm.
pub fn orthonormalize(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, k) = m.shape();
    if k > n {
        return Err(Error::RankExceedsWidth { rank: k, width: n });
    }
    flops::add(4 * (n * k * k) as u64);
    let qr = m.clone().qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..k {
        let norm = m.column(j).norm();
        let rjj = r[(j, j)];
        if rjj.abs() < 1e-12 * norm.max(f64::MIN_POSITIVE) || !rjj.is_finite() {
            return Err(Error::RankCollapse { column: j, residual: rjj.abs() });
        }
        if rjj < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

/// Result of a modified Gram-Schmidt pass in a weighted inner product.
#[derive(Debug, Clone)]
pub struct WeightedQr {
    /// Columns orthonormal in the weighted inner product.
    pub q: DMatrix<f64>,
    /// Upper-triangular factor with `input = q · r` on the kept columns.
    pub r: DMatrix<f64>,
    /// Indices of input columns that produced a basis vector.
    pub kept: Vec<usize>,
}

/// Modified Gram-Schmidt with one reorthogonalization pass in the inner
/// product `⟨x, y⟩ = xᵀWy` (`W = I` when `w` is `None`).
///
/// A column whose residual W-norm falls below `drop_tol` times its input
/// W-norm is dropped and recorded as such. The diagonal of `r` is positive.
pub fn weighted_mgs(b: &DMatrix<f64>, w: Option<&Operator>, drop_tol: f64) -> WeightedQr {
    let (n, k) = b.shape();
    let wnorm = |v: &DVector<f64>| -> f64 {
        match w {
            Some(op) => v.dot(&op.mul_vec(v)).max(0.0).sqrt(),
            None => v.norm(),
        }
    };
    let mut q_cols: Vec<DVector<f64>> = Vec::with_capacity(k);
    let mut wq_cols: Vec<DVector<f64>> = Vec::with_capacity(k);
    let mut r = DMatrix::zeros(k, k);
    let mut kept = Vec::new();
    for j in 0..k {
        let mut v: DVector<f64> = b.column(j).into_owned();
        let input_norm = wnorm(&v);
        for _pass in 0..2 {
            for (i, (qi, wqi)) in q_cols.iter().zip(&wq_cols).enumerate() {
                let c = wqi.dot(&v);
                v.axpy(-c, qi, 1.0);
                r[(i, j)] += c;
            }
        }
        flops::add(8 * (n * q_cols.len()) as u64);
        let norm = wnorm(&v);
        if input_norm == 0.0 || norm <= drop_tol * input_norm || !norm.is_finite() {
            continue;
        }
        let i = q_cols.len();
        r[(i, j)] = norm;
        v /= norm;
        let wv = match w {
            Some(op) => op.mul_vec(&v),
            None => v.clone(),
        };
        q_cols.push(v);
        wq_cols.push(wv);
        kept.push(j);
    }
    let m = q_cols.len();
    let q = if m == 0 { DMatrix::zeros(n, 0) } else { DMatrix::from_columns(&q_cols) };
    WeightedQr { q, r: r.rows(0, m).into_owned(), kept }
}

/// Sum of values whose result does not depend on their order: the values are
/// sorted before a left-to-right accumulation. Used for reductions over
/// particles so that relabelling particles changes no bits.
pub fn exchangeable_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    values.iter().sum()
}

/// Particle order fixed by the particles' own values: rows sorted
/// lexicographically across `blocks` (all with one row per particle).
/// Accumulating per-particle terms in this order gives bits that do not
/// depend on the labelling; rows that tie are identical in every block, so
/// their relative order does not matter.
pub fn canonical_row_order(blocks: &[&DMatrix<f64>]) -> Vec<usize> {
    let n = blocks.first().map_or(0, |b| b.nrows());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&p, &q| {
        for b in blocks {
            for c in 0..b.ncols() {
                let o = b[(p, c)].total_cmp(&b[(q, c)]);
                if o.is_ne() {
                    return o;
                }
            }
        }
        std::cmp::Ordering::Equal
    });
    order
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn all_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sparse_and_dense_products_agree() {
        let d = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0, -1.0, 0.0, 4.0]);
        let s = Operator::sparse_from_dense(&d);
        let x = DMatrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64 - 1.5);
        assert_relative_eq!(s.mul_mat(&x), &d * &x, epsilon = 1e-14);
        assert_relative_eq!(s.tr_mul_mat(&x), d.transpose() * &x, epsilon = 1e-14);
        let v = DVector::from_vec(vec![0.5, -2.0, 1.0]);
        assert_relative_eq!(s.mul_vec(&v), &d * &v, epsilon = 1e-14);
        assert_eq!(s.nnz(), 5);
    }

    #[test]
    fn psd_sqrt_reconstructs() {
        let b = DMatrix::from_fn(4, 2, |i, j| ((i * 3 + j * 7) % 5) as f64 - 2.0);
        let m = &b * b.transpose();
        let s = psd_sqrt(&m, "m").unwrap();
        assert!((&s * &s - &m).norm() <= 1e-10 * m.norm());
    }

    #[test]
    fn psd_sqrt_rejects_indefinite() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.5]));
        assert!(matches!(psd_sqrt(&m, "m"), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn orthonormalize_positive_diagonal() {
        let m = DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.0, 2.0, 0.0, 1.0]);
        let q = orthonormalize(&m).unwrap();
        let r = q.transpose() * &m;
        assert!(r[(0, 0)] > 0.0 && r[(1, 1)] > 0.0);
        assert_relative_eq!(q.transpose() * &q, DMatrix::identity(2, 2), epsilon = 1e-14);
    }

    #[test]
    fn orthonormalize_detects_collapse() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 0.0, 0.0]);
        assert!(matches!(orthonormalize(&m), Err(Error::RankCollapse { column: 1, .. })));
    }

    #[test]
    fn weighted_mgs_is_w_orthonormal() {
        let w = Operator::Dense(DMatrix::from_row_slice(
            3,
            3,
            &[2.0, 0.5, 0.0, 0.5, 1.0, 0.2, 0.0, 0.2, 3.0],
        ));
        let b = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0]);
        let qr = weighted_mgs(&b, Some(&w), 1e-10);
        assert_eq!(qr.kept, vec![0, 1]);
        let g = qr.q.transpose() * w.mul_mat(&qr.q);
        assert_relative_eq!(g, DMatrix::identity(2, 2), epsilon = 1e-13);
        assert!((&qr.q * &qr.r - &b).norm() < 1e-12);
    }

    #[test]
    fn exchangeable_sum_ignores_order() {
        let mut a = [0.1, 1e16, -1e16, 0.3, 0.7];
        let mut b = [0.7, -1e16, 0.3, 1e16, 0.1];
        assert_eq!(exchangeable_sum(&mut a).to_bits(), exchangeable_sum(&mut b).to_bits());
    }

    #[test]
    fn flops_are_counted() {
        let a = DMatrix::<f64>::zeros(4, 3);
        let b = DMatrix::<f64>::zeros(3, 5);
        let (_, n) = flops::measure(|| matmul(&a, &b));
        assert_eq!(n, 2 * 4 * 3 * 5);
    }
}
