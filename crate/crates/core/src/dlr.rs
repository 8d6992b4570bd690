//! Dynamical low-rank Kalman-Bucy process: mean mode, Oja flow of the
//! physical modes, reduced Riccati equation and stochastic modes.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kbp::{add_operator, euler_update, riccati_euler};
use crate::linalg::{self, Operator};
use crate::model::{LinearAffineModel, LowRankState, ObservationPath};
use crate::rng::Stream;

/// One explicit step of `dU = (I − UUᵀ)AU dt`, re-orthonormalized by QR with
/// a positive `R` diagonal. A zero tangent leaves `U` untouched.
pub fn oja_step(a: &Operator, u: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
    let au = a.mul_mat(u);
    oja_from_au(u, &au, dt)
}

pub(crate) fn oja_from_au(u: &DMatrix<f64>, au: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
    let coeff = linalg::tr_matmul(u, au);
    let tangent = au - linalg::matmul(u, &coeff);
    if tangent.iter().all(|v| *v == 0.0) {
        return Ok(u.clone());
    }
    linalg::orthonormalize(&(u + tangent * dt))
}

/// `½ tr(UᵀAU)`.
pub fn energy(a: &Operator, u: &DMatrix<f64>) -> f64 {
    0.5 * linalg::tr_matmul(u, &a.mul_mat(u)).trace()
}

/// `‖UᵀWU − I‖_F`.
pub fn stiefel_defect(u: &DMatrix<f64>, w: Option<&Operator>) -> f64 {
    let wu = match w {
        Some(op) => op.mul_mat(u),
        None => u.clone(),
    };
    let g = u.tr_mul(&wu);
    (g - DMatrix::identity(u.ncols(), u.ncols())).norm()
}

/// Factored gain `U(M_Y(Uᵀv))`.
pub(crate) fn factored_apply(u: &DMatrix<f64>, my: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    linalg::matvec(u, &linalg::matvec(my, &linalg::tr_matvec(u, v)))
}

/// `U⁰ + (AU⁰ + f)dt + U M_Y Uᵀ H_adj Γ⁻¹ (dZ − HU⁰ dt)`.
pub fn dlr_mean_step(model: &LinearAffineModel, lr: &LowRankState, dz: &DVector<f64>, dt: f64) -> Result<DVector<f64>> {
    model.require_explicit("dlr_mean_step")?;
    Ok(dlr_mean_update(model, &lr.u0, &lr.u, &lr.my, dz, dt))
}

pub(crate) fn dlr_mean_update(
    model: &LinearAffineModel,
    u0: &DVector<f64>,
    u: &DMatrix<f64>,
    my: &DMatrix<f64>,
    dz: &DVector<f64>,
    dt: f64,
) -> DVector<f64> {
    let innovation = dz - model.h.mul_vec(u0) * dt;
    let g = factored_apply(u, my, &model.innovation_weight(&innovation));
    euler_update(model, u0, dt, &g)
}

/// Model operators projected on the current modes.
#[derive(Debug, Clone)]
pub struct Projected {
    pub au: DMatrix<f64>,
    /// `UᵀAU`
    pub a_u: DMatrix<f64>,
    /// `UᵀSU`
    pub s_u: DMatrix<f64>,
    /// `UᵀΣU`
    pub sigma_u: DMatrix<f64>,
}

impl Projected {
    pub fn new(model: &LinearAffineModel, u: &DMatrix<f64>) -> Self {
        Self::from_parts(&model.a, &model.sigma, &model.s, u)
    }

    pub fn from_parts(a: &Operator, sigma: &Operator, s: &Operator, u: &DMatrix<f64>) -> Self {
        let au = a.mul_mat(u);
        let a_u = linalg::tr_matmul(u, &au);
        let s_u = linalg::tr_matmul(u, &s.mul_mat(u));
        let mut sigma_u = linalg::tr_matmul(u, &sigma.mul_mat(u));
        linalg::symmetrize(&mut sigma_u);
        Self { au, a_u, s_u, sigma_u }
    }
}

fn reduced_riccati_projected(proj: &Projected, my: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
    riccati_euler(
        &Operator::Dense(proj.a_u.clone()),
        &Operator::Dense(proj.s_u.clone()),
        my,
        dt,
        |out| *out += &proj.sigma_u * dt,
    )
}

/// Explicit Euler on `dM/dt = A_U M + M A_Uᵀ − M S_U M + Σ_U`.
pub fn reduced_riccati_step(
    a: &Operator,
    sigma: &Operator,
    s: &Operator,
    u: &DMatrix<f64>,
    my: &DMatrix<f64>,
    dt: f64,
) -> Result<DMatrix<f64>> {
    reduced_riccati_projected(&Projected::from_parts(a, sigma, s, u), my, dt)
}

/// `Y + (A_U − M S_U)Y dt + w − M v` for projected noises `w`, `v` (`R×n`).
pub(crate) fn modes_update(
    proj: &Projected,
    m: &DMatrix<f64>,
    y: &DMatrix<f64>,
    w: &DMatrix<f64>,
    v: &DMatrix<f64>,
    dt: f64,
) -> DMatrix<f64> {
    let drift = &proj.a_u - linalg::matmul(m, &proj.s_u);
    y + linalg::matmul(&drift, y) * dt + w - linalg::matmul(m, v)
}

/// Projected noises `UᵀΣ^{1/2}ΔW` and `UᵀH_adjΓ^{-1/2}ΔV` for increment
/// blocks `d×n` and `k×n`.
pub(crate) fn project_noise(
    model: &LinearAffineModel,
    u: &DMatrix<f64>,
    dw: &DMatrix<f64>,
    dv: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let w = linalg::tr_matmul(u, &model.sigma_sqrt.mul_mat(dw));
    let v = linalg::tr_matmul(u, &model.h_adj.mul_mat(&model.gamma_inv_sqrt.mul_mat(dv)));
    (w, v)
}

/// One step of the stochastic modes for a batch `Y` (`R×n`, one realization
/// per column). Column `j` consumes its `ΔW` from `stream_w` and its `ΔV`
/// from `stream_v`, in column order.
pub fn dlr_modes_step(
    model: &LinearAffineModel,
    u: &DMatrix<f64>,
    my: &DMatrix<f64>,
    y: &DMatrix<f64>,
    dt: f64,
    stream_w: &mut Stream,
    stream_v: &mut Stream,
) -> Result<DMatrix<f64>> {
    model.require_explicit("dlr_modes_step")?;
    let n = y.ncols();
    let mut dw = DMatrix::zeros(model.dim(), n);
    let mut dv = DMatrix::zeros(model.obs_dim(), n);
    for j in 0..n {
        dw.set_column(j, &stream_w.increment(model.dim(), dt));
        dv.set_column(j, &stream_v.increment(model.obs_dim(), dt));
    }
    let proj = Projected::new(model, u);
    let (w, v) = project_noise(model, u, &dw, &dv);
    let out = modes_update(&proj, my, y, &w, &v, dt);
    if !linalg::all_finite(&out) {
        return Err(Error::NonFiniteState { step: 0, context: "stochastic modes" });
    }
    Ok(out)
}

/// Dense `U M_Y Uᵀ`. Diagnostics only.
pub fn reconstruct_cov(u: &DMatrix<f64>, my: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = linalg::matmul(&linalg::matmul(u, my), &u.transpose());
    linalg::symmetrize(&mut p);
    p
}

/// `U M_Y Uᵀ x` without forming the `d×d` product.
pub fn cov_matvec(u: &DMatrix<f64>, my: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    factored_apply(u, my, x)
}

/// Explicit Euler on `dP/dt = AP + PAᵀ − PSP + Π_U Σ Π_U`.
pub fn modified_riccati_step(
    model: &LinearAffineModel,
    u: &DMatrix<f64>,
    p: &DMatrix<f64>,
    dt: f64,
) -> Result<DMatrix<f64>> {
    model.require_explicit("modified_riccati_step")?;
    let sigma_u = linalg::tr_matmul(u, &model.sigma.mul_mat(u));
    let source = reconstruct_cov(u, &sigma_u);
    riccati_euler(&model.a, &model.s, p, dt, |out| *out += source * dt)
}

/// Per-step reduced diagnostics. Error columns are NaN unless a full-order
/// reference was supplied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DlrDiagnostics {
    pub t: f64,
    pub mean_err: f64,
    pub cov_err_frob: f64,
    pub bap: f64,
    pub trace_my: f64,
    pub stiefel_defect: f64,
    pub energy: f64,
}

impl DlrDiagnostics {
    pub const HEADER: [&'static str; 7] =
        ["t", "mean_err", "cov_err_frob", "bap", "trace_MY", "stiefel_defect", "energy"];

    pub fn values(&self) -> [f64; 7] {
        [
            self.t,
            self.mean_err,
            self.cov_err_frob,
            self.bap,
            self.trace_my,
            self.stiefel_defect,
            self.energy,
        ]
    }
}

/// Jointly advances `(U⁰, U, M_Y)` one step at a time.
pub struct ReducedKb<'a> {
    pub model: &'a LinearAffineModel,
    pub dt: f64,
    pub state: LowRankState,
    pub steps: usize,
    proj: Projected,
}

impl<'a> ReducedKb<'a> {
    pub fn new(model: &'a LinearAffineModel, init: LowRankState, dt: f64) -> Result<Self> {
        model.require_explicit("run_reduced_kb")?;
        if init.dim() != model.dim() {
            return Err(Error::dims("low-rank state does not match model"));
        }
        let proj = Projected::new(model, &init.u);
        Ok(Self { model, dt, state: init, steps: 0, proj })
    }

    pub fn step(&mut self, dz: &DVector<f64>) -> Result<()> {
        let n = self.steps + 1;
        let u0 = dlr_mean_step(self.model, &self.state, dz, self.dt)?;
        let my = reduced_riccati_projected(&self.proj, &self.state.my, self.dt).map_err(|e| e.at_step(n))?;
        let u = oja_from_au(&self.state.u, &self.proj.au, self.dt)?;
        if !linalg::all_finite_vec(&u0) || !linalg::all_finite(&u) {
            return Err(Error::NonFiniteState { step: n, context: "dlr-kbp" });
        }
        self.proj = Projected::new(self.model, &u);
        self.state = LowRankState { u0, u, my };
        self.steps = n;
        Ok(())
    }

    pub fn projected(&self) -> &Projected {
        &self.proj
    }

    pub fn diagnostics(&self) -> DlrDiagnostics {
        DlrDiagnostics {
            t: self.steps as f64 * self.dt,
            mean_err: f64::NAN,
            cov_err_frob: f64::NAN,
            bap: f64::NAN,
            trace_my: self.state.my.trace(),
            stiefel_defect: stiefel_defect(&self.state.u, None),
            energy: 0.5 * self.proj.a_u.trace(),
        }
    }
}

/// Runs the reduced Kalman-Bucy equations along `obs`, calling `visit` after
/// every step (and once for the initial state).
pub fn run_reduced_kb(
    model: &LinearAffineModel,
    init: &LowRankState,
    obs: &ObservationPath,
    mut visit: impl FnMut(usize, &LowRankState) -> Result<()>,
) -> Result<(LowRankState, Vec<DlrDiagnostics>)> {
    let mut run = ReducedKb::new(model, init.clone(), obs.dt)?;
    let mut diags = Vec::with_capacity(obs.n_steps() + 1);
    diags.push(run.diagnostics());
    visit(0, &run.state)?;
    for dz in &obs.dz {
        run.step(dz)?;
        diags.push(run.diagnostics());
        visit(run.steps, &run.state)?;
    }
    Ok((run.state, diags))
}

/// Adds `c·Σ` to a dense matrix; re-exported for diagnostics that build the
/// full covariance source.
pub fn add_sigma(model: &LinearAffineModel, out: &mut DMatrix<f64>, c: f64) {
    add_operator(out, c, &model.sigma);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kbp::{kb_mean_step, riccati_step};
    use crate::model::{build_model, build_upwind_model};
    use crate::rng::{RngPlan, StreamTag};
    use approx::assert_relative_eq;

    #[test]
    fn oja_fixed_point_and_direction() {
        let a = Operator::Dense(DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0])));
        let e1 = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        assert_eq!(oja_step(&a, &e1, 0.1).unwrap(), e1);

        let s = 1.0 / 2f64.sqrt();
        let u = DMatrix::from_column_slice(2, 1, &[s, s]);
        let au = a.mul_mat(&u);
        let tangent = &au - &u * (u.transpose() * &au);
        assert_relative_eq!(tangent[(0, 0)], 0.5 * s, epsilon = 1e-15);
        assert_relative_eq!(tangent[(1, 0)], -0.5 * s, epsilon = 1e-15);
        let u1 = oja_step(&a, &u, 0.1).unwrap();
        assert!(u1[(0, 0)] > s && u1[(1, 0)] < s);
        assert_relative_eq!(u1.norm(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn reduced_riccati_linear_decay() {
        let a = Operator::Dense(-DMatrix::identity(2, 2));
        let z = Operator::Dense(DMatrix::zeros(2, 2));
        let u = DMatrix::identity(2, 2);
        let m0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let dt = 1e-4;
        let mut m = m0.clone();
        for _ in 0..10_000 {
            m = reduced_riccati_step(&a, &z, &z, &u, &m, dt).unwrap();
        }
        assert_relative_eq!(m, m0 * (-2.0f64).exp(), max_relative = 1e-3);
    }

    #[test]
    fn reduced_riccati_scalar_steady_state() {
        let a = Operator::Dense(-DMatrix::identity(1, 1));
        let s = Operator::Dense(DMatrix::identity(1, 1));
        let sigma = Operator::Dense(DMatrix::from_element(1, 1, 3.0));
        let u = DMatrix::identity(1, 1);
        let mut m = DMatrix::zeros(1, 1);
        for _ in 0..20_000 {
            m = reduced_riccati_step(&a, &sigma, &s, &u, &m, 1e-3).unwrap();
        }
        assert!((m[(0, 0)] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn reduced_riccati_matches_invariant_block() {
        let mut a = DMatrix::zeros(4, 4);
        a.view_mut((0, 0), (2, 2)).copy_from(&DMatrix::from_row_slice(2, 2, &[-1.0, 0.3, 0.1, -0.5]));
        a.view_mut((2, 2), (2, 2)).copy_from(&DMatrix::from_row_slice(2, 2, &[-2.0, 0.0, 0.4, -1.0]));
        let mut sigma = DMatrix::zeros(4, 4);
        sigma.view_mut((0, 0), (2, 2)).copy_from(&DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]));
        let block_model = build_model(
            Operator::Dense(a.view((0, 0), (2, 2)).into_owned()),
            DVector::zeros(2),
            Operator::Dense(sigma.view((0, 0), (2, 2)).into_owned()),
            Operator::identity(2),
            Operator::scaled_identity(2, 2.0),
            None,
        )
        .unwrap();
        let s = Operator::scaled_identity(4, 0.5);
        let u = DMatrix::identity(4, 2);
        let mut m = DMatrix::identity(2, 2) * 0.2;
        let mut p = m.clone();
        for _ in 0..100 {
            m = reduced_riccati_step(&Operator::Dense(a.clone()), &Operator::Dense(sigma.clone()), &s, &u, &m, 1e-2)
                .unwrap();
            p = riccati_step(&block_model, &p, 1e-2).unwrap();
        }
        assert_relative_eq!(m, p, epsilon = 1e-13);
    }

    #[test]
    fn full_rank_mean_step_is_bit_exact() {
        let model = build_upwind_model(10, 1.0, 0.1, 0.03, 1e-3, 2.0).unwrap();
        let mut s = Stream::from_seed(3);
        let b = s.normal_matrix(10, 10);
        let p = &b * b.transpose();
        let m = s.normal_vector(10);
        let dz = s.increment(10, 1e-3);
        let lr = LowRankState::new(m.clone(), DMatrix::identity(10, 10), p.clone()).unwrap();
        let a = kb_mean_step(&model, &m, &p, &dz, 1e-3).unwrap();
        let b = dlr_mean_step(&model, &lr, &dz, 1e-3).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn zero_covariance_mean_is_model_only() {
        let model = build_upwind_model(6, 1.0, 0.1, 0.03, 0.0, 2.0).unwrap();
        let u0 = DVector::from_fn(6, |i, _| i as f64);
        let lr = LowRankState::new(u0.clone(), DMatrix::identity(6, 2), DMatrix::zeros(2, 2)).unwrap();
        let out = dlr_mean_step(&model, &lr, &DVector::from_element(6, 9.0), 0.01).unwrap();
        assert_relative_eq!(out, &u0 + (model.a.to_dense() * &u0 + &model.f) * 0.01, epsilon = 1e-14);
    }

    #[test]
    fn reconstruct_cov_properties() {
        let u = DMatrix::identity(4, 2);
        let p = reconstruct_cov(&u, &DMatrix::identity(2, 2));
        assert_eq!(p, DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0])));
        let mut s = Stream::from_seed(8);
        let q = linalg::orthonormalize(&s.normal_matrix(7, 3)).unwrap();
        let b = s.normal_matrix(3, 3);
        let my = &b * b.transpose();
        let p = reconstruct_cov(&q, &my);
        assert_relative_eq!(p.norm(), my.norm(), max_relative = 1e-12);
        let x = s.normal_vector(7);
        assert_relative_eq!(cov_matvec(&q, &my, &x), &p * &x, epsilon = 1e-12);
    }

    #[test]
    fn modified_riccati_reduces_to_plain() {
        let model = build_upwind_model(8, 1.0, 0.1, 0.0, 0.0, 2.0).unwrap();
        let u = linalg::orthonormalize(&Stream::from_seed(1).normal_matrix(8, 3)).unwrap();
        let p = reconstruct_cov(&u, &DMatrix::identity(3, 3));
        assert_relative_eq!(
            modified_riccati_step(&model, &u, &p, 1e-3).unwrap(),
            riccati_step(&model, &p, 1e-3).unwrap(),
            epsilon = 1e-15
        );
        let full = build_upwind_model(8, 1.0, 0.1, 0.0, 0.3, 2.0).unwrap();
        let eye = DMatrix::identity(8, 8);
        assert_relative_eq!(
            modified_riccati_step(&full, &eye, &p, 1e-3).unwrap(),
            riccati_step(&full, &p, 1e-3).unwrap(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn modes_ignore_observations() {
        let model = build_upwind_model(12, 2.0, 0.1, 0.03, 1e-2, 2.0).unwrap();
        let ic = crate::model::advection_initial_condition(12, 2.0, 3).unwrap();
        let plan = RngPlan::new(5);
        let run_with = |obs_seed: u64| {
            let mut obs_stream = Stream::from_seed(obs_seed);
            let mut run = ReducedKb::new(&model, ic.clone(), 1e-3).unwrap();
            let mut y = DMatrix::from_element(3, 2, 0.1);
            let mut sw = plan.stream(StreamTag::ParticleW, 0, 0);
            let mut sv = plan.stream(StreamTag::ParticleV, 0, 0);
            for _ in 0..50 {
                y = dlr_modes_step(&model, &run.state.u, &run.state.my, &y, 1e-3, &mut sw, &mut sv).unwrap();
                run.step(&obs_stream.increment(12, 1e-3)).unwrap();
            }
            (run.state, y)
        };
        let (a, ya) = run_with(1);
        let (b, yb) = run_with(2);
        assert_eq!(a.u, b.u);
        assert_eq!(a.my, b.my);
        assert_eq!(ya, yb);
        assert_ne!(a.u0, b.u0);
    }

    #[test]
    fn stiefel_preserved() {
        let model = build_upwind_model(20, 2.0, 0.1, 0.0, 0.0, 2.0).unwrap();
        let mut u = linalg::orthonormalize(&Stream::from_seed(2).normal_matrix(20, 4)).unwrap();
        for _ in 0..500 {
            u = oja_step(&model.a, &u, 1e-3).unwrap();
            assert!(stiefel_defect(&u, None) <= 1e-10);
        }
    }
}
