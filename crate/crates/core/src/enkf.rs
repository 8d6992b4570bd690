//! Low-rank ensemble Kalman filter: reduced ensembles, the Euler–Maruyama
//! step of the mode equations and the augmented-basis integrator.

use nalgebra::{DMatrix, DVector, SVD};

use crate::dlr::{self, Projected};
use crate::error::{Error, Result};
use crate::kbp::{draw_reduced, euler_update, FullEnsemble, ParticleStreams};
use crate::linalg::{self, Operator};
use crate::model::{LinearAffineModel, ObservationPath, Stepper};
use crate::rng::Stream;

/// Shared mean `Û⁰`, modes `U` and reduced particles `Ŷ` (`P×R`, one row per
/// particle, zero column means).
#[derive(Debug, Clone)]
pub struct ReducedEnsemble {
    pub u0: DVector<f64>,
    pub u: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

impl ReducedEnsemble {
    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.nrows() == 0
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn dim(&self) -> usize {
        self.u.nrows()
    }

    /// Compresses a full particle block to rank `r`: sample mean, weighted
    /// orthonormal basis of the centered particles, truncated SVD of their
    /// coefficients. Missing directions are completed from `complement`.
    pub fn from_particles(
        x: &DMatrix<f64>,
        w: Option<&Operator>,
        r: usize,
        complement: &mut Stream,
    ) -> Result<(Self, TruncationReport)> {
        let ens = FullEnsemble::new(x.clone());
        let mean = ens.mean()?;
        let xs = crate::kbp::centered(&ens)?;
        let qr = linalg::weighted_mgs(&xs, w, 1e-10);
        let basis = qr.q;
        let coeffs = if basis.ncols() == 0 {
            DMatrix::zeros(0, x.ncols())
        } else {
            linalg::tr_matmul(&basis, &apply_w(w, &xs))
        };
        let dropped = x.ncols() - basis.ncols();
        let (mut out, mut report) = truncate_to_ensemble(mean, &basis, &coeffs.transpose(), r, w, complement)?;
        report.dropped_cols = dropped;
        out.recenter();
        Ok((out, report))
    }

    /// Moves column means of `Ŷ` into `Û⁰`.
    pub fn recenter(&mut self) {
        let n = self.len();
        if n == 0 {
            return;
        }
        let means = column_means(&self.y);
        if means.iter().all(|v| *v == 0.0) {
            return;
        }
        self.u0 += linalg::matvec(&self.u, &means);
        for mut row in self.y.row_iter_mut() {
            row -= means.transpose();
        }
    }
}

fn apply_w(w: Option<&Operator>, x: &DMatrix<f64>) -> DMatrix<f64> {
    match w {
        Some(op) => op.mul_mat(x),
        None => x.clone(),
    }
}

/// Order-independent column means of a `P×q` block.
pub fn column_means(y: &DMatrix<f64>) -> DVector<f64> {
    let n = y.nrows() as f64;
    DVector::from_fn(y.ncols(), |j, _| {
        let mut col: Vec<f64> = y.column(j).iter().copied().collect();
        linalg::exchangeable_sum(&mut col) / n
    })
}

/// Draws `Ẑ_p ~ N(0, M_Y)` in order from `stream`; `Û⁰ = U⁰ + U mean(Ẑ)` and
/// `Ŷ = Ẑ − mean(Ẑ)`.
pub fn init_reduced_ensemble(
    u0: &DVector<f64>,
    u: &DMatrix<f64>,
    my0: &DMatrix<f64>,
    count: usize,
    stream: &mut Stream,
) -> Result<ReducedEnsemble> {
    if count < 2 {
        return Err(Error::TooFewParticles { needed: 2, got: count });
    }
    if u.ncols() != my0.nrows() || u.nrows() != u0.len() {
        return Err(Error::dims("initial modes, mean and covariance disagree"));
    }
    let z = draw_reduced(my0, count, stream)?;
    let mut ens = ReducedEnsemble { u0: u0.clone(), u: u.clone(), y: z };
    ens.recenter();
    Ok(ens)
}

/// Subtracts the particle mean from each column of a `P×q` increment block.
pub fn star_increments(increments: &DMatrix<f64>) -> DMatrix<f64> {
    let means = column_means(increments);
    let mut out = increments.clone();
    for mut row in out.row_iter_mut() {
        row -= means.transpose();
    }
    out
}

/// `ŶᵀŶ/(P − 1)`, each entry summed in a particle-order independent way.
pub fn sample_reduced_cov(ens: &ReducedEnsemble) -> Result<DMatrix<f64>> {
    reduced_gram(&ens.y)
}

/// Column means of a particle-by-column block, summed in `order`.
fn ordered_means(x: &DMatrix<f64>, order: &[usize]) -> DVector<f64> {
    let n = x.nrows() as f64;
    DVector::from_fn(x.ncols(), |j, _| order.iter().map(|&p| x[(p, j)]).sum::<f64>() / n)
}

/// `ŶᵀŶ/(P−1)` summed in `order`.
fn ordered_gram(y: &DMatrix<f64>, order: &[usize]) -> Result<DMatrix<f64>> {
    let (n, r) = y.shape();
    if n < 2 {
        return Err(Error::TooFewParticles { needed: 2, got: n });
    }
    let mut m = DMatrix::zeros(r, r);
    for i in 0..r {
        for j in i..r {
            let v = order.iter().map(|&p| y[(p, i)] * y[(p, j)]).sum::<f64>() / (n - 1) as f64;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    crate::flops::add((n * r * (r + 1)) as u64);
    Ok(m)
}

fn reduced_gram(y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, r) = y.shape();
    if n < 2 {
        return Err(Error::TooFewParticles { needed: 2, got: n });
    }
    let mut m = DMatrix::zeros(r, r);
    let mut buf = vec![0.0; n];
    for i in 0..r {
        for j in i..r {
            for p in 0..n {
                buf[p] = y[(p, i)] * y[(p, j)];
            }
            let v = linalg::exchangeable_sum(&mut buf) / (n - 1) as f64;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    crate::flops::add((n * r * (r + 1)) as u64);
    Ok(m)
}

/// `Û⁰ 1ᵀ + U Ŷᵀ`.
pub fn reconstruct_particles(ens: &ReducedEnsemble) -> DMatrix<f64> {
    let mut x = linalg::matmul(&ens.u, &ens.y.transpose());
    for mut c in x.column_iter_mut() {
        c += &ens.u0;
    }
    x
}

/// Per-particle projected noises `UᵀΣ^{1/2}ΔW_p` and `UᵀH_adjΓ^{-1/2}ΔV_p`
/// as `P×R` blocks, from the once-per-step factors `(Σ^{1/2})ᵀU` and
/// `(H_adjΓ^{-1/2})ᵀU`. Each row depends only on its own increments.
fn projected_rows(model: &LinearAffineModel, u: &DMatrix<f64>, dw: &DMatrix<f64>, dv: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let bw = model.sigma_sqrt.tr_mul_mat(u);
    let bv = model.gamma_inv_sqrt.tr_mul_mat(&model.h_adj.tr_mul_mat(u));
    (linalg::column_dots(dw, &bw), linalg::column_dots(dv, &bv))
}

fn check_streams(ens: &ReducedEnsemble, streams: &ParticleStreams) -> Result<()> {
    if streams.len() != ens.len() {
        return Err(Error::MismatchedEnsembles(format!(
            "{} streams for {} particles",
            streams.len(),
            ens.len()
        )));
    }
    Ok(())
}

/// Euler–Maruyama step of the mean-mode, physical-mode and stochastic-mode
/// particle equations.
pub fn dlr_enkf_em_step(
    model: &LinearAffineModel,
    ens: &ReducedEnsemble,
    dz: &DVector<f64>,
    dt: f64,
    streams: &mut ParticleStreams,
) -> Result<ReducedEnsemble> {
    model.require_explicit("dlr_enkf_em_step")?;
    check_streams(ens, streams)?;
    let (dw, dv) = streams.draw(model.dim(), model.obs_dim(), dt);
    dlr_enkf_em_update(model, ens, dz, dt, &dw, &dv, &Projected::new(model, &ens.u))
}

pub(crate) fn dlr_enkf_em_update(
    model: &LinearAffineModel,
    ens: &ReducedEnsemble,
    dz: &DVector<f64>,
    dt: f64,
    dw: &DMatrix<f64>,
    dv: &DMatrix<f64>,
    proj: &Projected,
) -> Result<ReducedEnsemble> {
    let u = &ens.u;
    let (w, v) = projected_rows(model, u, dw, dv);
    let order = linalg::canonical_row_order(&[&ens.y, &w, &v]);
    let m_hat = ordered_gram(&ens.y, &order)?;
    let w_mean = ordered_means(&w, &order);
    let v_mean = ordered_means(&v, &order);

    let innovation = dz - model.h.mul_vec(&ens.u0) * dt;
    let gain = dlr::factored_apply(u, &m_hat, &model.innovation_weight(&innovation));
    let noise = linalg::matvec(u, &(&w_mean - linalg::matvec(&m_hat, &v_mean)));
    let u0 = euler_update(model, &ens.u0, dt, &(gain + noise));

    let u_new = dlr::oja_from_au(u, &proj.au, dt)?;

    let drift = &proj.a_u - linalg::matmul(&m_hat, &proj.s_u);
    let (n, r) = ens.y.shape();
    let mut y = DMatrix::zeros(n, r);
    for p in 0..n {
        for j in 0..r {
            let mut lin = 0.0;
            let mut gain = 0.0;
            for i in 0..r {
                lin += drift[(j, i)] * ens.y[(p, i)];
                gain += m_hat[(j, i)] * (v[(p, i)] - v_mean[i]);
            }
            y[(p, j)] = ens.y[(p, j)] + lin * dt + (w[(p, j)] - w_mean[j]) - gain;
        }
    }
    crate::flops::add((4 * n * r * r) as u64);
    if !linalg::all_finite(&y) || !linalg::all_finite_vec(&u0) {
        return Err(Error::NonFiniteState { step: 0, context: "dlr-enkf" });
    }
    Ok(ReducedEnsemble { u0, u: u_new, y })
}

/// Report of one truncation back to rank `R`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TruncationReport {
    /// Singular values beyond the kept rank.
    pub discarded: Vec<f64>,
    /// `‖discarded‖₂`, the Frobenius norm of the truncation residual.
    pub trunc_err: f64,
    /// Whether `σ_R = σ_{R+1}` made the truncation ambiguous.
    pub tie: bool,
    /// Columns added from a random complement because fewer than `R`
    /// directions were available.
    pub padded: usize,
    /// Columns removed by the weighted orthonormalization.
    pub dropped_cols: usize,
}

/// Rank-`R` truncated SVD `Y ≈ V_R diag(S_R) U_Rᵀ` of a `P×q` block.
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    /// `q×R` rotation of the basis.
    pub rotation: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    /// `P×R`, orthonormal columns.
    pub v: DMatrix<f64>,
    pub discarded: Vec<f64>,
    pub tie: bool,
}

impl TruncatedSvd {
    /// `V_R diag(S_R)`, the new reduced particles.
    pub fn particles(&self) -> DMatrix<f64> {
        let mut out = self.v.clone();
        for (j, s) in self.singular_values.iter().enumerate() {
            out.column_mut(j).scale_mut(*s);
        }
        out
    }

    pub fn trunc_err(&self) -> f64 {
        self.discarded.iter().map(|s| s * s).sum::<f64>().sqrt()
    }
}

pub fn truncate_svd(y: &DMatrix<f64>, r: usize) -> Result<TruncatedSvd> {
    let (n, q) = y.shape();
    let width = n.min(q);
    if r > width {
        return Err(Error::RankExceedsWidth { rank: r, width });
    }
    crate::flops::add((4 * n * q * width) as u64);
    let svd = SVD::try_new(y.clone(), true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::SolveFailed("svd did not converge".into()))?;
    let u = svd.u.expect("left vectors requested");
    let vt = svd.v_t.expect("right vectors requested");
    let s = svd.singular_values;
    let tie = r > 0 && r < s.len() && s[r - 1] == s[r];
    Ok(TruncatedSvd {
        rotation: vt.rows(0, r).transpose(),
        singular_values: s.rows(0, r).into_owned(),
        v: u.columns(0, r).into_owned(),
        discarded: s.iter().skip(r).copied().collect(),
        tie,
    })
}

/// Builds a rank-`r` ensemble from an orthonormal basis `basis` (`d×q`) and
/// particle coefficients `coeffs` (`P×q`), padding from a random weighted
/// complement when fewer than `r` directions exist.
fn truncate_to_ensemble(
    u0: DVector<f64>,
    basis: &DMatrix<f64>,
    coeffs: &DMatrix<f64>,
    r: usize,
    w: Option<&Operator>,
    complement: &mut Stream,
) -> Result<(ReducedEnsemble, TruncationReport)> {
    let n = coeffs.nrows();
    let avail = basis.ncols().min(n);
    let keep = r.min(avail);
    let (mut u, mut y, mut report) = if keep > 0 {
        let t = truncate_svd(coeffs, keep)?;
        let u = linalg::matmul(basis, &t.rotation);
        let report = TruncationReport {
            trunc_err: t.trunc_err(),
            discarded: t.discarded.clone(),
            tie: t.tie,
            ..Default::default()
        };
        (u, t.particles(), report)
    } else {
        (DMatrix::zeros(basis.nrows(), 0), DMatrix::zeros(n, 0), TruncationReport::default())
    };
    if keep < r {
        let extra = r - keep;
        let d = basis.nrows();
        let mut attempt = 0;
        let cols = loop {
            let rand = complement.normal_matrix(d, extra);
            let stacked = if u.ncols() > 0 {
                let mut s = DMatrix::zeros(d, u.ncols() + extra);
                s.columns_mut(0, u.ncols()).copy_from(&u);
                s.columns_mut(u.ncols(), extra).copy_from(&rand);
                s
            } else {
                rand
            };
            let qr = linalg::weighted_mgs(&stacked, w, 1e-10);
            if qr.q.ncols() == u.ncols() + extra {
                break qr.q.columns(u.ncols(), extra).into_owned();
            }
            attempt += 1;
            if attempt > 8 {
                return Err(Error::RankCollapse { column: u.ncols(), residual: 0.0 });
            }
        };
        let mut u_full = DMatrix::zeros(d, r);
        u_full.columns_mut(0, keep).copy_from(&u);
        u_full.columns_mut(keep, extra).copy_from(&cols);
        let mut y_full = DMatrix::zeros(n, r);
        y_full.columns_mut(0, keep).copy_from(&y);
        u = u_full;
        y = y_full;
        report.padded = extra;
    }
    Ok((ReducedEnsemble { u0, u, y }, report))
}

/// Output of the weighted orthonormalization used by the integrator.
#[derive(Debug, Clone)]
pub struct WeightedBasis {
    pub q: DMatrix<f64>,
    pub dropped: usize,
}

/// Modified Gram–Schmidt in the `W` inner product; columns whose residual
/// falls below `1e−10` of their input `W`-norm are dropped.
pub fn weighted_qr(v: &DMatrix<f64>, w: Option<&Operator>) -> Result<WeightedBasis> {
    let qr = linalg::weighted_mgs(v, w, 1e-10);
    if qr.q.ncols() == 0 {
        return Err(Error::EmptyBasis);
    }
    Ok(WeightedBasis { dropped: v.ncols() - qr.q.ncols(), q: qr.q })
}

/// Per-step report of the augmented-basis integrator.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BugStepReport {
    pub discarded: Vec<f64>,
    pub trunc_err: f64,
    /// `‖UᵀWU − I‖_F` of the new modes.
    pub ortho_defect: f64,
    pub dropped_cols: usize,
    pub padded: usize,
    pub tie: bool,
}

/// Semi-implicit augmented-basis integrator. Factors `M − dt A` once.
pub struct BugIntegrator<'a> {
    pub stepper: Stepper<'a>,
}

impl<'a> BugIntegrator<'a> {
    pub fn new(model: &'a LinearAffineModel, dt: f64) -> Result<Self> {
        Ok(Self { stepper: Stepper::semi_implicit(model, dt)? })
    }

    pub fn model(&self) -> &'a LinearAffineModel {
        self.stepper.model
    }

    pub fn step(
        &self,
        ens: &ReducedEnsemble,
        dz: &DVector<f64>,
        streams: &mut ParticleStreams,
        complement: &mut Stream,
    ) -> Result<(ReducedEnsemble, BugStepReport)> {
        check_streams(ens, streams)?;
        let model = self.model();
        let (dw, dv) = streams.draw(model.dim(), model.obs_dim(), self.stepper.dt);
        self.update(ens, dz, &dw, &dv, complement)
    }

    /// The five stages with pre-drawn increments `dw` (`d×P`), `dv` (`k×P`).
    pub fn update(
        &self,
        ens: &ReducedEnsemble,
        dz: &DVector<f64>,
        dw: &DMatrix<f64>,
        dv: &DMatrix<f64>,
        complement: &mut Stream,
    ) -> Result<(ReducedEnsemble, BugStepReport)> {
        let model = self.model();
        let dt = self.stepper.dt;
        let w = model.weight();
        let u = &ens.u;
        let r = ens.rank();
        let m_hat = reduced_gram(&ens.y)?;
        let s_u = linalg::tr_matmul(u, &model.s.mul_mat(u));

        // Mean: (M − dt A)U⁰' = M(U⁰ + Π_U Σ^{1/2}E[ΔW] + P̂ H_adj Γ⁻¹[ΔZ − HU⁰dt − Γ^{1/2}E[ΔV]]) + dt f
        let dw_mean = column_means(&dw.transpose());
        let dv_mean = column_means(&dv.transpose());
        let sw_mean = model.sigma_sqrt.mul_vec(&dw_mean);
        let w_sw = match w {
            Some(op) => op.mul_vec(&sw_mean),
            None => sw_mean,
        };
        let noise = linalg::matvec(u, &linalg::tr_matvec(u, &w_sw));
        let innovation = dz - model.h.mul_vec(&ens.u0) * dt - model.gamma_sqrt.mul_vec(&dv_mean);
        let gain = dlr::factored_apply(u, &m_hat, &model.innovation_weight(&innovation));
        let u0 = self.stepper.advance(&ens.u0, &(noise + gain))?;

        // Physical-mode predictor: (M − dt A)Ũ = M(U − U M̂ S_U dt)
        let g = -linalg::matmul(u, &linalg::matmul(&m_hat, &s_u)) * dt;
        let u_tilde = self.stepper.advance_block(u, &g, false)?;

        // Augmented basis.
        let mut stacked = DMatrix::zeros(u.nrows(), 2 * r);
        stacked.columns_mut(0, r).copy_from(u);
        stacked.columns_mut(r, r).copy_from(&u_tilde);
        let basis = weighted_qr(&stacked, w)?;
        let ubar = &basis.q;
        let q = ubar.ncols();

        // Galerkin solve for the augmented coefficients.
        let dw_star = star_increments(&dw.transpose()).transpose();
        let dv_star = star_increments(&dv.transpose()).transpose();
        let wubar = apply_w(w, ubar);
        let c = linalg::tr_matmul(&wubar, u);
        let v_star = linalg::tr_matmul(u, &model.h_adj.mul_mat(&model.gamma_inv_sqrt.mul_mat(&dv_star)));
        let yt = ens.y.transpose();
        let inner = &yt - linalg::matmul(&linalg::matmul(&m_hat, &s_u), &yt) * dt - linalg::matmul(&m_hat, &v_star);
        let rhs = linalg::matmul(&c, &inner) + linalg::tr_matmul(&wubar, &model.sigma_sqrt.mul_mat(&dw_star));
        let a_bar = linalg::tr_matmul(ubar, &model.a.mul_mat(ubar));
        let lhs = DMatrix::identity(q, q) - a_bar * dt;
        crate::flops::add((2 * q * q * q) as u64);
        let y_aug = lhs
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::SolveFailed("reduced semi-implicit system is singular".into()))?;

        // Truncation back to rank R.
        let (mut out, trunc) = truncate_to_ensemble(u0, ubar, &y_aug.transpose(), r, w, complement)?;
        out.recenter();
        if !linalg::all_finite(&out.y) || !linalg::all_finite_vec(&out.u0) || !linalg::all_finite(&out.u) {
            return Err(Error::NonFiniteState { step: 0, context: "dlr-enkf bug" });
        }
        let report = BugStepReport {
            ortho_defect: dlr::stiefel_defect(&out.u, w),
            discarded: trunc.discarded,
            trunc_err: trunc.trunc_err,
            dropped_cols: basis.dropped,
            padded: trunc.padded,
            tie: trunc.tie,
        };
        Ok((out, report))
    }
}

/// Convenience form of [`BugIntegrator::step`] that factors the system.
pub fn bug_step(
    model: &LinearAffineModel,
    ens: &ReducedEnsemble,
    dz: &DVector<f64>,
    dt: f64,
    streams: &mut ParticleStreams,
    complement: &mut Stream,
) -> Result<(ReducedEnsemble, BugStepReport)> {
    BugIntegrator::new(model, dt)?.step(ens, dz, streams, complement)
}

/// Time integrator for the reduced ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    Em,
    Bug,
}

/// Per-step reduced-ensemble diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleDiagnostics {
    pub t: f64,
    pub rmse_ensemble: f64,
    pub trace_mhat: f64,
    pub trunc_err: f64,
    pub stiefel_defect: f64,
    pub dropped_cols: f64,
}

impl EnsembleDiagnostics {
    pub const HEADER: [&'static str; 6] =
        ["t", "rmse_ensemble", "trace_Mhat", "trunc_err", "stiefel_defect", "dropped_cols"];

    pub fn values(&self) -> [f64; 6] {
        [
            self.t,
            self.rmse_ensemble,
            self.trace_mhat,
            self.trunc_err,
            self.stiefel_defect,
            self.dropped_cols,
        ]
    }
}

/// Runs the reduced ensemble along `obs` with the chosen integrator.
pub fn run_dlr_enkf(
    model: &LinearAffineModel,
    init: &ReducedEnsemble,
    obs: &ObservationPath,
    integrator: Integrator,
    streams: &mut ParticleStreams,
    complement: &mut Stream,
    signal: Option<&[DVector<f64>]>,
    mut visit: impl FnMut(usize, &ReducedEnsemble) -> Result<()>,
) -> Result<(ReducedEnsemble, Vec<EnsembleDiagnostics>)> {
    let dt = obs.dt;
    let w = model.weight();
    let diag = |t: f64, e: &ReducedEnsemble, trunc_err: f64, dropped: usize, s: Option<&DVector<f64>>| {
        let rmse = s.map_or(f64::NAN, |x| crate::metrics::reduced_ensemble_rmse(e, x, w));
        EnsembleDiagnostics {
            t,
            rmse_ensemble: rmse,
            trace_mhat: reduced_gram(&e.y).map_or(f64::NAN, |m| m.trace()),
            trunc_err,
            stiefel_defect: dlr::stiefel_defect(&e.u, w),
            dropped_cols: dropped as f64,
        }
    };
    let mut ens = init.clone();
    let mut diags = vec![diag(0.0, &ens, 0.0, 0, signal.map(|s| &s[0]))];
    visit(0, &ens)?;
    let bug = match integrator {
        Integrator::Bug => Some(BugIntegrator::new(model, dt)?),
        Integrator::Em => {
            model.require_explicit("dlr_enkf_em_step")?;
            None
        }
    };
    for (n, dz) in obs.dz.iter().enumerate() {
        let (next, trunc, dropped) = match &bug {
            Some(b) => {
                let (e, rep) = b.step(&ens, dz, streams, complement).map_err(|e| e.at_step(n + 1))?;
                (e, rep.trunc_err, rep.dropped_cols)
            }
            None => (dlr_enkf_em_step(model, &ens, dz, dt, streams).map_err(|e| e.at_step(n + 1))?, 0.0, 0),
        };
        ens = next;
        diags.push(diag((n + 1) as f64 * dt, &ens, trunc, dropped, signal.map(|s| &s[n + 1])));
        visit(n + 1, &ens)?;
    }
    Ok((ens, diags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_upwind_model;
    use crate::rng::{RngPlan, StreamTag};
    use approx::assert_relative_eq;

    #[test]
    fn init_with_zero_covariance() {
        let u0 = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let u = DMatrix::identity(3, 2);
        let e = init_reduced_ensemble(&u0, &u, &DMatrix::zeros(2, 2), 5, &mut Stream::from_seed(1)).unwrap();
        assert_eq!(e.u0, u0);
        assert_eq!(e.y, DMatrix::zeros(5, 2));
    }

    #[test]
    fn init_means_vanish() {
        let my = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let e = init_reduced_ensemble(&DVector::zeros(4), &DMatrix::identity(4, 2), &my, 37, &mut Stream::from_seed(2))
            .unwrap();
        for j in 0..2 {
            assert!(e.y.column(j).sum().abs() <= 1e-15 * e.y.column(j).norm() * 37.0);
        }
        assert!(matches!(
            init_reduced_ensemble(&DVector::zeros(4), &DMatrix::identity(4, 2), &my, 1, &mut Stream::from_seed(2)),
            Err(Error::TooFewParticles { .. })
        ));
    }

    #[test]
    fn star_two_particles() {
        let inc = DMatrix::from_row_slice(2, 1, &[3.0, 1.0]);
        let s = star_increments(&inc);
        assert_eq!(s[(0, 0)], 1.0);
        assert_eq!(s[(1, 0)], -1.0);
    }

    #[test]
    fn reduced_cov_two_point() {
        let e = ReducedEnsemble {
            u0: DVector::zeros(2),
            u: DMatrix::identity(2, 1),
            y: DMatrix::from_column_slice(2, 1, &[-1.0, 1.0]),
        };
        assert_eq!(sample_reduced_cov(&e).unwrap()[(0, 0)], 2.0);
    }

    #[test]
    fn weighted_qr_duplicates() {
        let u = linalg::orthonormalize(&Stream::from_seed(3).normal_matrix(8, 3)).unwrap();
        let mut v = DMatrix::zeros(8, 6);
        v.columns_mut(0, 3).copy_from(&u);
        v.columns_mut(3, 3).copy_from(&u);
        let b = weighted_qr(&v, None).unwrap();
        assert_eq!(b.q.ncols(), 3);
        assert_eq!(b.dropped, 3);
        assert!(matches!(weighted_qr(&DMatrix::zeros(4, 2), None), Err(Error::EmptyBasis)));
    }

    #[test]
    fn truncate_diag() {
        let y = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0]));
        let t = truncate_svd(&y, 2).unwrap();
        assert_relative_eq!(t.trunc_err(), 1.0, epsilon = 1e-14);
        assert!(matches!(truncate_svd(&y, 4), Err(Error::RankExceedsWidth { .. })));
        let full = truncate_svd(&y, 3).unwrap();
        assert_relative_eq!(full.particles() * full.rotation.transpose(), y, epsilon = 1e-12);
    }

    #[test]
    fn reconstruct_moments() {
        let mut s = Stream::from_seed(4);
        let u = linalg::orthonormalize(&s.normal_matrix(6, 2)).unwrap();
        let mut e = ReducedEnsemble { u0: s.normal_vector(6), u, y: s.normal_matrix(9, 2) };
        e.recenter();
        let x = reconstruct_particles(&e);
        let fe = FullEnsemble::new(x);
        assert_relative_eq!(fe.mean().unwrap(), e.u0.clone(), epsilon = 1e-13);
        let p = crate::kbp::sample_cov(&fe).unwrap();
        let lifted = dlr::reconstruct_cov(&e.u, &sample_reduced_cov(&e).unwrap());
        assert!((p - &lifted).norm() <= 1e-12 * lifted.norm());
    }

    #[test]
    fn em_step_deterministic_collapse() {
        let model = build_upwind_model(10, 1.0, 0.1, 0.03, 0.0, 2.0).unwrap();
        let u = linalg::orthonormalize(&Stream::from_seed(5).normal_matrix(10, 2)).unwrap();
        let u0 = DVector::from_fn(10, |i, _| (i as f64).cos());
        let ens = ReducedEnsemble { u0: u0.clone(), u: u.clone(), y: DMatrix::zeros(4, 2) };
        let plan = RngPlan::new(1);
        let mut st = ParticleStreams::new(&plan, 0, 4);
        let out = dlr_enkf_em_step(&model, &ens, &DVector::from_element(10, 0.3), 1e-3, &mut st).unwrap();
        assert_eq!(out.y, DMatrix::zeros(4, 2));
        assert_relative_eq!(out.u0, euler_update(&model, &u0, 1e-3, &DVector::zeros(10)), epsilon = 1e-15);
    }

    #[test]
    fn bug_step_from_particles_keeps_w_orthonormal() {
        let model = build_upwind_model(12, 1.0, 0.1, 0.0, 1e-3, 2.0).unwrap();
        let plan = RngPlan::new(9);
        let ic = crate::model::advection_initial_condition(12, 1.0, 3).unwrap();
        let fe = FullEnsemble::sample_low_rank(&ic.u0, &ic.u, &ic.my, 10, &mut plan.stream(StreamTag::InitialEnsemble, 0, 0))
            .unwrap();
        let mut comp = plan.stream(StreamTag::Complement, 0, 0);
        let (ens, rep) = ReducedEnsemble::from_particles(&fe.x, None, 3, &mut comp).unwrap();
        assert_eq!(rep.padded, 0);
        assert!((reconstruct_particles(&ens) - &fe.x).norm() < 1e-12 * fe.x.norm());
        let mut st = ParticleStreams::new(&plan, 0, 10);
        let (out, rep) = bug_step(&model, &ens, &DVector::zeros(12), 1e-3, &mut st, &mut comp).unwrap();
        assert!(rep.ortho_defect < 1e-10);
        assert_eq!(out.rank(), 3);
        let means = column_means(&out.y);
        assert!(means.amax() <= 1e-12 * out.y.norm());
    }

    #[test]
    fn padding_when_rank_deficient() {
        let x = DMatrix::from_fn(6, 4, |i, j| if i == 0 { j as f64 } else { 1.0 });
        let mut comp = Stream::from_seed(1);
        let (ens, rep) = ReducedEnsemble::from_particles(&x, None, 3, &mut comp).unwrap();
        assert_eq!(rep.padded, 2);
        assert!(dlr::stiefel_defect(&ens.u, None) < 1e-12);
        assert!((reconstruct_particles(&ens) - &x).norm() < 1e-12);
    }
}
