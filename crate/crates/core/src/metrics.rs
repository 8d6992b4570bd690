//! Error metrics, Gaussian distances and replicate statistics.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::enkf::ReducedEnsemble;
use crate::error::{Error, Result};
use crate::io::CsvWriter;
use crate::linalg::{self, Operator};

/// `√(‖m − x‖² + tr P)`.
pub fn rmse(m: &DVector<f64>, trace_p: f64, x: &DVector<f64>) -> f64 {
    ((m - x).norm_squared() + trace_p).max(0.0).sqrt()
}

/// `(dt/T) Σ rmse(tᵢ)`.
pub fn irmse(series: &[f64], dt: f64, t_end: f64) -> f64 {
    dt / t_end * series.iter().sum::<f64>()
}

fn sq_norm(v: &DVector<f64>, w: Option<&Operator>) -> f64 {
    match w {
        Some(op) => v.dot(&op.mul_vec(v)),
        None => v.norm_squared(),
    }
}

/// `√(xᵀWx)`.
pub fn h_norm(w: &Operator, x: &DVector<f64>) -> f64 {
    sq_norm(x, Some(w)).max(0.0).sqrt()
}

/// Root of the particle-averaged squared (`W`-)norm error of a `d×P` block.
pub fn ensemble_rmse(x: &DMatrix<f64>, signal: &DVector<f64>, w: Option<&Operator>) -> f64 {
    let n = x.ncols();
    if n == 0 {
        return f64::NAN;
    }
    let total: f64 = x.column_iter().map(|c| sq_norm(&(c - signal), w)).sum();
    (total / n as f64).max(0.0).sqrt()
}

/// [`ensemble_rmse`] of the reconstructed particles without forming them:
/// the mean error and the particle spread separate because `Ŷ` has zero
/// column means.
pub fn reduced_ensemble_rmse(e: &ReducedEnsemble, signal: &DVector<f64>, w: Option<&Operator>) -> f64 {
    let n = e.len();
    if n == 0 {
        return f64::NAN;
    }
    let mean_err = sq_norm(&(&e.u0 - signal), w);
    let gram = match w {
        Some(op) => e.u.tr_mul(&op.mul_mat(&e.u)),
        None => e.u.tr_mul(&e.u),
    };
    let spread: f64 = e.y.row_iter().map(|r| (r * &gram).dot(&r)).sum();
    (mean_err + spread / n as f64).max(0.0).sqrt()
}

/// 2-Wasserstein distance between two Gaussians.
pub fn gaussian_w2(m1: &DVector<f64>, p1: &DMatrix<f64>, m2: &DVector<f64>, p2: &DMatrix<f64>) -> Result<f64> {
    if m1.len() != m2.len() || p1.shape() != p2.shape() || p1.nrows() != m1.len() {
        return Err(Error::dims("Gaussian dimensions differ"));
    }
    let r1 = linalg::psd_sqrt(p1, "P1")?;
    linalg::psd_sqrt(p2, "P2")?;
    let mut inner = &r1 * p2 * &r1;
    linalg::symmetrize(&mut inner);
    let cross = linalg::psd_sqrt(&inner, "cross term")?;
    let tr = (p1.trace() + p2.trace() - 2.0 * cross.trace()).max(0.0);
    Ok(((m1 - m2).norm_squared() + tr).sqrt())
}

/// `‖P − 𝒯_R(P)‖_F` from the eigenvalues of symmetric `P`.
pub fn best_rank_error(p: &DMatrix<f64>, r: usize) -> f64 {
    let mut ev = linalg::sorted_eigenvalues(p);
    ev.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
    ev.iter().skip(r).map(|v| v * v).sum::<f64>().sqrt()
}

/// Best-approximation errors for several ranks from one eigendecomposition.
pub fn best_rank_errors(p: &DMatrix<f64>, ranks: &[usize]) -> Vec<f64> {
    let mut ev = linalg::sorted_eigenvalues(p);
    ev.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
    let sq: Vec<f64> = ev.iter().map(|v| v * v).collect();
    ranks.iter().map(|&r| sq.iter().skip(r).sum::<f64>().sqrt()).collect()
}

/// Root of the particle-averaged squared (`W`-)norm of matched-particle
/// differences.
pub fn ell2p_distance(a: &DMatrix<f64>, b: &DMatrix<f64>, w: Option<&Operator>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::MismatchedEnsembles(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.ncols() == 0 {
        return Err(Error::MismatchedEnsembles("empty ensembles".into()));
    }
    let diff = a - b;
    let total: f64 = diff.column_iter().map(|c| sq_norm(&c.into_owned(), w)).sum();
    Ok((total / a.ncols() as f64).max(0.0).sqrt())
}

/// Least-squares slope of `log y` against `log x` with a half-width of twice
/// the slope's standard error.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() {
        return Err(Error::dims("x and y lengths differ"));
    }
    if xs.len() < 4 {
        return Err(Error::NonPositiveData(format!("need at least 4 points, got {}", xs.len())));
    }
    if let Some(v) = xs.iter().chain(ys).find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::NonPositiveData(format!("value {v}")));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::NonPositiveData("all x values coincide".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let se = (rss / (n - 2.0) / sxx).sqrt();
    Ok((slope, 2.0 * se))
}

/// `‖sin Θ‖₂` between the ranges of two (`W`-)orthonormal bases, from the
/// residual `U − V(VᵀWU)` so that small angles keep full precision.
pub fn subspace_distance(u: &DMatrix<f64>, v: &DMatrix<f64>, w: Option<&Operator>) -> Result<f64> {
    if u.shape() != v.shape() {
        return Err(Error::dims(format!("bases {:?} and {:?}", u.shape(), v.shape())));
    }
    let apply = |x: &DMatrix<f64>| match w {
        Some(op) => op.mul_mat(x),
        None => x.clone(),
    };
    let residual = u - v * v.tr_mul(&apply(u));
    let mut g = residual.tr_mul(&apply(&residual));
    linalg::symmetrize(&mut g);
    let largest = linalg::sorted_eigenvalues(&g).iter().copied().fold(0.0, f64::max);
    Ok(largest.sqrt().min(1.0))
}

/// Mean and standard deviation of one metric over replicates at each grid
/// point, with an optional log-log slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub name: String,
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub n_replicates: Vec<usize>,
    pub slope: Option<f64>,
    pub slope_half_width: Option<f64>,
}

impl StudyResult {
    /// `samples[i]` holds the replicate values at grid point `x[i]`, in
    /// replicate order. The sample standard deviation is NaN below two
    /// replicates.
    pub fn from_samples(name: impl Into<String>, x: Vec<f64>, samples: &[Vec<f64>]) -> Self {
        let mut mean = Vec::with_capacity(samples.len());
        let mut std = Vec::with_capacity(samples.len());
        let mut n_replicates = Vec::with_capacity(samples.len());
        for s in samples {
            let n = s.len();
            let mu = s.iter().sum::<f64>() / n as f64;
            let sd = if n >= 2 {
                (s.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                f64::NAN
            };
            mean.push(mu);
            std.push(sd);
            n_replicates.push(n);
        }
        Self { name: name.into(), x, mean, std, n_replicates, slope: None, slope_half_width: None }
    }

    /// Fits and stores the log-log slope of the means.
    pub fn with_slope(mut self) -> Result<Self> {
        let (s, h) = fit_loglog_slope(&self.x, &self.mean)?;
        self.slope = Some(s);
        self.slope_half_width = Some(h);
        Ok(self)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = CsvWriter::create(path, &["x", "mean", "std", "n_replicates"])?;
        for i in 0..self.x.len() {
            w.row(&[self.x[i], self.mean[i], self.std[i], self.n_replicates[i] as f64])?;
        }
        w.finish()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use approx::assert_relative_eq;

    #[test]
    fn rmse_examples() {
        let x = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(rmse(&x, 0.0, &x), 0.0);
        let m = DVector::from_vec(vec![4.0, 6.0]);
        assert_eq!(rmse(&m, 0.0, &x), 5.0);
        assert_eq!(rmse(&m, 11.0, &x), 6.0);
    }

    #[test]
    fn irmse_examples() {
        assert_relative_eq!(irmse(&vec![2.5; 100], 0.01, 1.0), 2.5, epsilon = 1e-12);
        let n = 1000;
        let ramp: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        assert!((irmse(&ramp, 1.0 / n as f64, 1.0) - 0.5).abs() < 1.0 / n as f64);
        assert_eq!(irmse(&[0.0; 5], 0.1, 0.5), 0.0);
    }

    #[test]
    fn ensemble_rmse_two_point() {
        let s = DVector::from_vec(vec![1.0, 1.0]);
        let x = DMatrix::from_columns(&[DVector::from_vec(vec![2.0, 1.0]), DVector::from_vec(vec![0.0, 1.0])]);
        assert_eq!(ensemble_rmse(&x, &s, None), 1.0);
        let same = DMatrix::from_columns(&[s.clone(), s.clone()]);
        assert_eq!(ensemble_rmse(&same, &s, None), 0.0);
    }

    #[test]
    fn reduced_rmse_matches_reconstruction() {
        let mut st = Stream::from_seed(3);
        let u = linalg::orthonormalize(&st.normal_matrix(6, 2)).unwrap();
        let mut e = ReducedEnsemble { u0: st.normal_vector(6), u, y: st.normal_matrix(5, 2) };
        e.recenter();
        let sig = st.normal_vector(6);
        let x = crate::enkf::reconstruct_particles(&e);
        assert_relative_eq!(reduced_ensemble_rmse(&e, &sig, None), ensemble_rmse(&x, &sig, None), epsilon = 1e-12);
    }

    #[test]
    fn w2_examples() {
        let z = DVector::zeros(1);
        let one = DMatrix::from_element(1, 1, 1.0);
        assert_relative_eq!(gaussian_w2(&z, &one, &z, &one).unwrap(), 0.0, epsilon = 1e-12);
        let three = DVector::from_element(1, 3.0);
        assert_relative_eq!(gaussian_w2(&z, &one, &three, &one).unwrap(), 3.0, epsilon = 1e-12);
        let four = DMatrix::from_element(1, 1, 4.0);
        assert_relative_eq!(gaussian_w2(&z, &one, &z, &four).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn w2_symmetric() {
        let mut st = Stream::from_seed(5);
        let a = st.normal_matrix(4, 4);
        let b = st.normal_matrix(4, 2);
        let p1 = &a * a.transpose();
        let p2 = &b * b.transpose();
        let m1 = st.normal_vector(4);
        let m2 = st.normal_vector(4);
        let d1 = gaussian_w2(&m1, &p1, &m2, &p2).unwrap();
        let d2 = gaussian_w2(&m2, &p2, &m1, &p1).unwrap();
        assert!((d1 - d2).abs() <= 1e-10);
    }

    #[test]
    fn best_rank_examples() {
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0]));
        assert_relative_eq!(best_rank_error(&p, 2), 1.0, epsilon = 1e-14);
        assert_eq!(best_rank_error(&p, 3), 0.0);
        let errs = best_rank_errors(&p, &[0, 1, 2, 3]);
        assert!(errs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn ell2p_examples() {
        let a = DMatrix::from_element(3, 1, 0.0);
        let mut b = a.clone();
        b[(1, 0)] = 1.0;
        assert_eq!(ell2p_distance(&a, &a, None).unwrap(), 0.0);
        assert_eq!(ell2p_distance(&a, &b, None).unwrap(), 1.0);
        let mut st = Stream::from_seed(1);
        let x = st.normal_matrix(4, 7);
        let y = st.normal_matrix(4, 7);
        assert_relative_eq!(ell2p_distance(&x, &y, None).unwrap(), (&x - &y).norm() / 7f64.sqrt(), epsilon = 1e-13);
        assert!(matches!(ell2p_distance(&x, &a, None), Err(Error::MismatchedEnsembles(_))));
    }

    #[test]
    fn slope_examples() {
        let xs = [1.0, 2.0, 4.0, 8.0, 16.0];
        let (s, h) = fit_loglog_slope(&xs, &xs).unwrap();
        assert!((s - 1.0).abs() < 1e-12 && h < 1e-10);
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 / x.sqrt()).collect();
        assert!((fit_loglog_slope(&xs, &ys).unwrap().0 + 0.5).abs() < 1e-12);
        assert!(matches!(fit_loglog_slope(&xs[..3], &ys[..3]), Err(Error::NonPositiveData(_))));
        assert!(matches!(fit_loglog_slope(&[1.0, 2.0, 3.0, 0.0], &[1.0; 4]), Err(Error::NonPositiveData(_))));
    }

    #[test]
    fn noisy_slope() {
        let mut st = Stream::from_seed(12);
        let xs = [8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| x.powf(-0.5) * (1.0 + 0.1 * st.normal())).collect();
        let (s, _) = fit_loglog_slope(&xs, &ys).unwrap();
        assert!((-0.7..=-0.3).contains(&s));
    }

    #[test]
    fn subspace_examples() {
        let u = DMatrix::identity(4, 2);
        let rot = DMatrix::from_row_slice(2, 2, &[0.6, -0.8, 0.8, 0.6]);
        assert!(subspace_distance(&u, &(&u * rot), None).unwrap() < 1e-12);
        let v = DMatrix::from_fn(4, 2, |i, j| if i == j + 2 { 1.0 } else { 0.0 });
        assert_relative_eq!(subspace_distance(&u, &v, None).unwrap(), 1.0, epsilon = 1e-12);
        let th: f64 = 0.3;
        let a = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let b = DMatrix::from_column_slice(2, 1, &[th.cos(), th.sin()]);
        assert_relative_eq!(subspace_distance(&a, &b, None).unwrap(), th.sin(), epsilon = 1e-12);
    }

    #[test]
    fn study_result_stats() {
        let r = StudyResult::from_samples("m", vec![1.0, 2.0], &[vec![1.0, 3.0], vec![5.0]]);
        assert_eq!(r.mean, vec![2.0, 5.0]);
        assert_relative_eq!(r.std[0], 2f64.sqrt(), epsilon = 1e-15);
        assert!(r.std[1].is_nan());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        r.write_csv(&p).unwrap();
        assert!(std::fs::read_to_string(p).unwrap().starts_with("x,mean,std,n_replicates\n"));
    }
}
