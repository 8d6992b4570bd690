//! Linear-affine signal models, initial conditions, noise paths and the
//! elementary time stepper.

use nalgebra::{DMatrix, DVector, Dyn, LU};
use nalgebra_sparse::{CooMatrix, CsrMatrix};

use crate::error::{Error, Result};
use crate::linalg::{self, Operator};
use crate::rng::Stream;

/// `dX = (AX + f)dt + Σ^{1/2}dW`, observed through `dZ = HX dt + Γ^{1/2}dV`.
///
/// When a mass matrix `M` is present the state holds finite-element
/// coefficients, `A` is the assembled (not mass-inverted) operator and time
/// stepping is semi-implicit, see [`Stepper`].
#[derive(Debug, Clone)]
pub struct LinearAffineModel {
    pub a: Operator,
    pub f: DVector<f64>,
    pub sigma: Operator,
    pub sigma_sqrt: Operator,
    pub h: Operator,
    /// Adjoint of `H` used in the gain; `Hᵀ` unless overridden.
    pub h_adj: Operator,
    pub gamma: Operator,
    pub gamma_inv: Operator,
    pub gamma_inv_sqrt: Operator,
    pub gamma_sqrt: Operator,
    /// `H_adj Γ⁻¹ H`.
    pub s: Operator,
    pub mass: Option<Operator>,
}

fn check_square(op: &Operator, n: usize, name: &str) -> Result<()> {
    if op.nrows() != n || op.ncols() != n {
        return Err(Error::dims(format!(
            "{name} is {}x{}, expected {n}x{n}",
            op.nrows(),
            op.ncols()
        )));
    }
    Ok(())
}

fn sigma_sqrt_of(sigma: &Operator) -> Result<Operator> {
    if let Some(diag) = sigma.as_diagonal() {
        let scale = diag.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut out = Vec::with_capacity(diag.len());
        for &v in &diag {
            if v < -1e-10 * scale || !v.is_finite() {
                return Err(Error::NotPsd { what: "Sigma", min_eigenvalue: v });
            }
            out.push(if v < 1e-12 * scale { 0.0 } else { v.sqrt() });
        }
        return Ok(Operator::diagonal(&out));
    }
    let dense = sigma.to_dense();
    if (&dense - dense.transpose()).amax() > 1e-12 * dense.amax() {
        return Err(Error::NotPsd { what: "Sigma", min_eigenvalue: f64::NAN });
    }
    Ok(Operator::Dense(linalg::psd_sqrt(&dense, "Sigma")?))
}

/// Returns `(Γ⁻¹, Γ^{-1/2}, Γ^{1/2})`.
fn gamma_factors(gamma: &Operator) -> Result<(Operator, Operator, Operator)> {
    if let Some(diag) = gamma.as_diagonal() {
        if diag.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::NotPositiveDefinite("Gamma"));
        }
        let inv: Vec<f64> = diag.iter().map(|v| 1.0 / v).collect();
        let inv_sqrt: Vec<f64> = diag.iter().map(|v| 1.0 / v.sqrt()).collect();
        let sqrt: Vec<f64> = diag.iter().map(|v| v.sqrt()).collect();
        return Ok((
            Operator::diagonal(&inv),
            Operator::diagonal(&inv_sqrt),
            Operator::diagonal(&sqrt),
        ));
    }
    let dense = gamma.to_dense();
    if (&dense - dense.transpose()).amax() > 1e-12 * dense.amax() {
        return Err(Error::NotPositiveDefinite("Gamma"));
    }
    let (values, vectors) = linalg::sorted_eigen(&dense);
    if values.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::NotPositiveDefinite("Gamma"));
    }
    let build = |g: &dyn Fn(f64) -> f64| {
        let scaled = DMatrix::from_fn(vectors.nrows(), vectors.ncols(), |r, c| {
            vectors[(r, c)] * g(values[c])
        });
        let mut m = scaled * vectors.transpose();
        linalg::symmetrize(&mut m);
        Operator::Dense(m)
    };
    Ok((build(&|v| 1.0 / v), build(&|v| 1.0 / v.sqrt()), build(&|v| v.sqrt())))
}

/// Validates the system matrices and caches the derived factors.
pub fn build_model(
    a: Operator,
    f: DVector<f64>,
    sigma: Operator,
    h: Operator,
    gamma: Operator,
    mass: Option<Operator>,
) -> Result<LinearAffineModel> {
    let d = a.nrows();
    check_square(&a, d, "A")?;
    if f.len() != d {
        return Err(Error::dims(format!("f has length {}, expected {d}", f.len())));
    }
    check_square(&sigma, d, "Sigma")?;
    if h.ncols() != d {
        return Err(Error::dims(format!("H has {} columns, expected {d}", h.ncols())));
    }
    let k = h.nrows();
    check_square(&gamma, k, "Gamma")?;
    if let Some(m) = &mass {
        check_square(m, d, "mass matrix")?;
    }
    let sigma_sqrt = sigma_sqrt_of(&sigma)?;
    let (gamma_inv, gamma_inv_sqrt, gamma_sqrt) = gamma_factors(&gamma)?;
    let h_adj = h.transpose();
    let s = h_adj.compose(&gamma_inv.compose(&h));
    Ok(LinearAffineModel {
        a,
        f,
        sigma,
        sigma_sqrt,
        h,
        h_adj,
        gamma,
        gamma_inv,
        gamma_inv_sqrt,
        gamma_sqrt,
        s,
        mass,
    })
}

impl LinearAffineModel {
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    /// Replaces the adjoint used in the gain (e.g. `Hᵀ` taken in the mass
    /// inner product) and recomputes `S`.
    pub fn with_observation_adjoint(mut self, h_adj: Operator) -> Result<Self> {
        if h_adj.nrows() != self.dim() || h_adj.ncols() != self.obs_dim() {
            return Err(Error::dims(format!(
                "observation adjoint is {}x{}, expected {}x{}",
                h_adj.nrows(),
                h_adj.ncols(),
                self.dim(),
                self.obs_dim()
            )));
        }
        self.s = h_adj.compose(&self.gamma_inv.compose(&self.h));
        self.h_adj = h_adj;
        Ok(self)
    }

    /// Rejects models that need a mass-matrix aware integrator.
    pub fn require_explicit(&self, what: &'static str) -> Result<()> {
        if self.mass.is_some() {
            Err(Error::MassMatrixUnsupported(what))
        } else {
            Ok(())
        }
    }

    /// `H_adj Γ⁻¹ v` for an observation-space vector `v`.
    pub fn innovation_weight(&self, v: &DVector<f64>) -> DVector<f64> {
        self.h_adj.mul_vec(&self.gamma_inv.mul_vec(v))
    }

    /// Gram operator of the state inner product (`M`, or the identity).
    pub fn weight(&self) -> Option<&Operator> {
        self.mass.as_ref()
    }
}

/// Periodic upwind discretization of `−∂ₓ − decay` on `d` points of `[0, L)`.
pub fn build_upwind_model(
    d: usize,
    length: f64,
    decay: f64,
    forcing: f64,
    sigma: f64,
    gamma: f64,
) -> Result<LinearAffineModel> {
    if d < 2 {
        return Err(Error::InvalidGrid(format!("need at least 2 points, got {d}")));
    }
    if !(length > 0.0) {
        return Err(Error::InvalidGrid(format!("domain length must be positive, got {length}")));
    }
    let h = length / d as f64;
    let mut coo = CooMatrix::new(d, d);
    for i in 0..d {
        let left = (i + d - 1) % d;
        if left < i {
            coo.push(i, left, 1.0 / h);
            coo.push(i, i, -1.0 / h - decay);
        } else {
            coo.push(i, i, -1.0 / h - decay);
            coo.push(i, left, 1.0 / h);
        }
    }
    let a = Operator::Sparse(CsrMatrix::from(&coo));
    build_model(
        a,
        DVector::from_element(d, forcing),
        Operator::scaled_identity(d, sigma),
        Operator::identity(d),
        Operator::scaled_identity(d, gamma),
        None,
    )
}

/// Grid points `x_i = i·L/d` of the advection model.
pub fn upwind_grid(d: usize, length: f64) -> DVector<f64> {
    let h = length / d as f64;
    DVector::from_fn(d, |i, _| i as f64 * h)
}

#[derive(Debug, Clone)]
pub struct GaussianState {
    pub m: DVector<f64>,
    pub p: DMatrix<f64>,
}

impl GaussianState {
    pub fn new(m: DVector<f64>, p: DMatrix<f64>) -> Result<Self> {
        if p.nrows() != m.len() || p.ncols() != m.len() {
            return Err(Error::dims("covariance does not match mean"));
        }
        Ok(Self { m, p })
    }

    pub fn from_low_rank(lr: &LowRankState) -> Self {
        Self { m: lr.u0.clone(), p: lr.covariance() }
    }
}

/// Mean mode `U⁰`, physical modes `U` and reduced covariance `M_Y`.
#[derive(Debug, Clone)]
pub struct LowRankState {
    pub u0: DVector<f64>,
    pub u: DMatrix<f64>,
    pub my: DMatrix<f64>,
}

impl LowRankState {
    pub fn new(u0: DVector<f64>, u: DMatrix<f64>, my: DMatrix<f64>) -> Result<Self> {
        if u.nrows() != u0.len() {
            return Err(Error::dims("modes do not match mean length"));
        }
        if my.nrows() != u.ncols() || my.ncols() != u.ncols() {
            return Err(Error::dims("reduced covariance does not match rank"));
        }
        Ok(Self { u0, u, my })
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn dim(&self) -> usize {
        self.u.nrows()
    }

    /// Dense `U M_Y Uᵀ`. Diagnostics only.
    pub fn covariance(&self) -> DMatrix<f64> {
        crate::dlr::reconstruct_cov(&self.u, &self.my)
    }

    /// Keeps the leading `r` directions of `M_Y` when `r` is below the
    /// current rank. Rotates `U` so that `M_Y` becomes diagonal first.
    pub fn truncate(&self, r: usize) -> Result<Self> {
        let rank = self.rank();
        if r > rank {
            return Err(Error::RankExceedsWidth { rank: r, width: rank });
        }
        let (values, vectors) = linalg::sorted_eigen(&self.my);
        let u = linalg::matmul(&self.u, &vectors.columns(0, r).into_owned());
        let my = DMatrix::from_diagonal(&DVector::from_fn(r, |i, _| values[i].max(0.0)));
        Ok(Self { u0: self.u0.clone(), u, my })
    }
}

/// `U⁰ + U y` with `y ~ N(0, M_Y)`.
pub fn sample_low_rank_ic(
    u0: &DVector<f64>,
    u: &DMatrix<f64>,
    my: &DMatrix<f64>,
    stream: &mut Stream,
) -> Result<DVector<f64>> {
    let (l, _) = linalg::psd_factor(my, "M_Y")?;
    let xi = stream.normal_vector(my.nrows());
    let y = &l * xi;
    Ok(u0 + u * y)
}

/// Orthonormalizes raw modes `B` (columns, weighted by `W` when given) and
/// returns `(Q, R D Rᵀ)` so that `B diag(c) ξ = Q (R diag(c) ξ)` for
/// coefficients `c`.
pub fn orthonormal_modes(
    raw: &DMatrix<f64>,
    coefficients: &[f64],
    w: Option<&Operator>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if coefficients.len() != raw.ncols() {
        return Err(Error::dims("one coefficient per mode required"));
    }
    let qr = linalg::weighted_mgs(raw, w, 1e-12);
    if qr.kept.len() != raw.ncols() {
        let column = (0..raw.ncols()).find(|j| !qr.kept.contains(j)).unwrap_or(0);
        return Err(Error::RankCollapse { column, residual: 0.0 });
    }
    let mut rc = qr.r.clone();
    for (j, c) in coefficients.iter().enumerate() {
        rc.column_mut(j).scale_mut(*c);
    }
    let mut my = &rc * rc.transpose();
    linalg::symmetrize(&mut my);
    Ok((qr.q, my))
}

/// Initial condition of the advection experiment: mean `sin(2πx/L)` and
/// fluctuation `Σ_k (1/k) sin(2πxk/L) ξ_k`, `k = 1..rank`.
pub fn advection_initial_condition(d: usize, length: f64, rank: usize) -> Result<LowRankState> {
    if rank == 0 || 2 * rank >= d {
        return Err(Error::RankExceedsWidth { rank, width: d / 2 });
    }
    let x = upwind_grid(d, length);
    let tau = 2.0 * std::f64::consts::PI / length;
    let u0 = x.map(|xi| (tau * xi).sin());
    let raw = DMatrix::from_fn(d, rank, |i, k| (tau * x[i] * (k + 1) as f64).sin());
    let coefficients: Vec<f64> = (1..=rank).map(|k| 1.0 / k as f64).collect();
    let (u, my) = orthonormal_modes(&raw, &coefficients, None)?;
    LowRankState::new(u0, u, my)
}

/// Time grid and observation increments `ΔZ_n`.
#[derive(Debug, Clone)]
pub struct ObservationPath {
    pub dt: f64,
    pub dz: Vec<DVector<f64>>,
}

impl ObservationPath {
    pub fn n_steps(&self) -> usize {
        self.dz.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.dz.first().map_or(0, |v| v.len())
    }

    /// `n_steps × k` matrix of increments.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_steps(), self.obs_dim(), |n, j| self.dz[n][j])
    }

    pub fn from_matrix(dt: f64, m: &DMatrix<f64>) -> Result<Self> {
        if !linalg::all_finite(m) {
            return Err(Error::Format("non-finite observation increment".into()));
        }
        Ok(Self { dt, dz: m.row_iter().map(|r| r.transpose()).collect() })
    }
}

/// One step of the signal dynamics, explicit or semi-implicit.
///
/// With a mass matrix (or when built with [`Stepper::semi_implicit`]) the
/// step solves `(M − dt A) x' = M(x + g) + dt f`; otherwise it is the
/// explicit update `x' = x + (Ax + f)dt + g`. Here `g` is the already-scaled
/// stochastic or gain increment in state coordinates.
pub struct Stepper<'a> {
    pub model: &'a LinearAffineModel,
    pub dt: f64,
    lu: Option<LU<f64, Dyn, Dyn>>,
}

impl<'a> Stepper<'a> {
    pub fn new(model: &'a LinearAffineModel, dt: f64) -> Result<Self> {
        if model.mass.is_some() {
            Self::semi_implicit(model, dt)
        } else {
            Ok(Self { model, dt, lu: None })
        }
    }

    /// Always factors `M − dt A`, with `M = I` when the model has no mass
    /// matrix.
    pub fn semi_implicit(model: &'a LinearAffineModel, dt: f64) -> Result<Self> {
        let d = model.dim();
        let m = match &model.mass {
            Some(m) => m.to_dense(),
            None => DMatrix::identity(d, d),
        };
        let lhs = m - model.a.to_dense() * dt;
        let lu = lhs.lu();
        if !lu.is_invertible() {
            return Err(Error::SolveFailed("M - dt*A is singular".into()));
        }
        Ok(Self { model, dt, lu: Some(lu) })
    }

    pub fn is_implicit(&self) -> bool {
        self.lu.is_some()
    }

    fn apply_mass(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.model.mass {
            Some(m) => m.mul_mat(x),
            None => x.clone(),
        }
    }

    /// Solves `(M − dt A) X = B`. Requires an implicit stepper.
    pub fn solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let lu = self
            .lu
            .as_ref()
            .ok_or_else(|| Error::SolveFailed("stepper is explicit".into()))?;
        let n = b.nrows();
        crate::flops::add(2 * (n * n * b.ncols()) as u64);
        lu.solve(b).ok_or_else(|| Error::SolveFailed("singular system".into()))
    }

    /// Applies the mass matrix (identity without one).
    pub fn mass_times(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.apply_mass(x)
    }

    pub fn advance(&self, x: &DVector<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.lu {
            None => {
                let drift = self.model.a.mul_vec(x) + &self.model.f;
                Ok(x + drift * self.dt + g)
            }
            Some(_) => {
                let rhs = self.apply_mass(&DMatrix::from_column_slice(x.len(), 1, (x + g).as_slice()))
                    + DMatrix::from_column_slice(x.len(), 1, self.model.f.as_slice()) * self.dt;
                let sol = self.solve(&rhs)?;
                Ok(sol.column(0).into_owned())
            }
        }
    }

    /// Column-wise [`Stepper::advance`]. When `forcing` is false `f` is left
    /// out (used for zero-mean fluctuations).
    pub fn advance_block(&self, x: &DMatrix<f64>, g: &DMatrix<f64>, forcing: bool) -> Result<DMatrix<f64>> {
        match &self.lu {
            None => {
                let mut drift = self.model.a.mul_mat(x);
                if forcing {
                    for mut c in drift.column_iter_mut() {
                        c += &self.model.f;
                    }
                }
                Ok(x + drift * self.dt + g)
            }
            Some(_) => {
                let mut rhs = self.apply_mass(&(x + g));
                if forcing {
                    let df = &self.model.f * self.dt;
                    for mut c in rhs.column_iter_mut() {
                        c += &df;
                    }
                }
                self.solve(&rhs)
            }
        }
    }
}

/// Signal trajectory `x_0..x_N` driven by `stream`.
pub fn simulate_signal(
    model: &LinearAffineModel,
    x0: &DVector<f64>,
    dt: f64,
    n_steps: usize,
    stream: &mut Stream,
) -> Result<Vec<DVector<f64>>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidGrid(format!("dt must be positive, got {dt}")));
    }
    if x0.len() != model.dim() {
        return Err(Error::dims("initial state does not match model"));
    }
    let stepper = Stepper::new(model, dt)?;
    let mut out = Vec::with_capacity(n_steps + 1);
    out.push(x0.clone());
    let mut x = x0.clone();
    for n in 0..n_steps {
        let dw = stream.increment(model.dim(), dt);
        let g = model.sigma_sqrt.mul_vec(&dw);
        x = stepper.advance(&x, &g)?;
        if !linalg::all_finite_vec(&x) {
            return Err(Error::NonFiniteState { step: n + 1, context: "signal" });
        }
        out.push(x.clone());
    }
    Ok(out)
}

/// `ΔZ_n = H x_n dt + Γ^{1/2} ΔV_n` for `n = 0..N−1`.
pub fn simulate_observations(
    model: &LinearAffineModel,
    signal: &[DVector<f64>],
    dt: f64,
    stream: &mut Stream,
) -> Result<ObservationPath> {
    if signal.is_empty() {
        return Err(Error::dims("empty signal"));
    }
    if signal[0].len() != model.dim() {
        return Err(Error::dims("signal does not match model"));
    }
    let k = model.obs_dim();
    let dz = signal[..signal.len() - 1]
        .iter()
        .map(|x| {
            let dv = stream.increment(k, dt);
            model.h.mul_vec(x) * dt + model.gamma_sqrt.mul_vec(&dv)
        })
        .collect();
    Ok(ObservationPath { dt, dz })
}
