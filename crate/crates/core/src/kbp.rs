//! Full-order Kalman-Bucy moments, Kalman-Bucy process realizations and the
//! plain ensemble Kalman filter.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{self, Operator};
use crate::model::{GaussianState, LinearAffineModel, ObservationPath, Stepper};
use crate::rng::{RngPlan, Stream, StreamTag};

fn nonfinite(context: &'static str) -> Error {
    Error::NonFiniteState { step: 0, context }
}

/// `x + (Ax + f)dt + g`.
pub(crate) fn euler_update(model: &LinearAffineModel, x: &DVector<f64>, dt: f64, g: &DVector<f64>) -> DVector<f64> {
    let drift = model.a.mul_vec(x) + &model.f;
    x + drift * dt + g
}

/// `m + (Am + f)dt + P H_adj Γ⁻¹ (dZ − Hm dt)`.
pub fn kb_mean_step(
    model: &LinearAffineModel,
    m: &DVector<f64>,
    p: &DMatrix<f64>,
    dz: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    model.require_explicit("kb_mean_step")?;
    let innovation = dz - model.h.mul_vec(m) * dt;
    let g = linalg::matvec(p, &model.innovation_weight(&innovation));
    Ok(euler_update(model, m, dt, &g))
}

/// The deterministic Kalman-Bucy variant at moment level. Its innovation
/// `dZ − H(x + m)/2 dt` evaluated at the mean is the plain innovation, so this
/// is the same update as [`kb_mean_step`].
pub fn deterministic_kbp_moment_step(
    model: &LinearAffineModel,
    m: &DVector<f64>,
    p: &DMatrix<f64>,
    dz: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    kb_mean_step(model, m, p, dz, dt)
}

/// `out += c · op`.
pub(crate) fn add_operator(out: &mut DMatrix<f64>, c: f64, op: &Operator) {
    match op {
        Operator::Dense(m) => *out += m * c,
        Operator::Sparse(m) => {
            for (i, j, &v) in m.triplet_iter() {
                out[(i, j)] += c * v;
            }
        }
    }
}

/// One explicit Euler step of `dP/dt = AP + PAᵀ − PSP + Σ`, resymmetrized.
pub fn riccati_step(model: &LinearAffineModel, p: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
    model.require_explicit("riccati_step")?;
    riccati_euler(&model.a, &model.s, p, dt, |out| add_operator(out, dt, &model.sigma))
}

/// Model-only moment propagation: mean and covariance without observation
/// gain.
pub fn open_loop_step(model: &LinearAffineModel, state: &GaussianState, dt: f64) -> Result<GaussianState> {
    model.require_explicit("open_loop_step")?;
    let m = euler_update(model, &state.m, dt, &DVector::zeros(model.dim()));
    let ap = model.a.mul_mat(&state.p);
    let mut p = &state.p + (&ap + ap.transpose()) * dt;
    add_operator(&mut p, dt, &model.sigma);
    linalg::symmetrize(&mut p);
    if !linalg::all_finite(&p) || !linalg::all_finite_vec(&m) {
        return Err(nonfinite("open loop"));
    }
    Ok(GaussianState { m, p })
}

/// Shared Euler update `P + dt(AP + (AP)ᵀ − P(SP)) + source`.
pub(crate) fn riccati_euler(
    a: &Operator,
    s: &Operator,
    p: &DMatrix<f64>,
    dt: f64,
    add_source: impl FnOnce(&mut DMatrix<f64>),
) -> Result<DMatrix<f64>> {
    let ap = a.mul_mat(p);
    let psp = linalg::matmul(p, &s.mul_mat(p));
    let mut out = p + (&ap + ap.transpose() - psp) * dt;
    add_source(&mut out);
    linalg::symmetrize(&mut out);
    if !linalg::all_finite(&out) {
        return Err(nonfinite("riccati"));
    }
    Ok(out)
}

/// Stochastic increment of one Kalman-Bucy process particle:
/// `Σ^{1/2}ΔW + gain(dZ − Hx dt − Γ^{1/2}ΔV)` where `gain(v) = P H_adj Γ⁻¹ v`.
fn kbp_increment(
    model: &LinearAffineModel,
    p: &DMatrix<f64>,
    x: &DVector<f64>,
    dz: &DVector<f64>,
    dt: f64,
    dw: &DVector<f64>,
    dv: &DVector<f64>,
) -> DVector<f64> {
    let innovation = dz - model.h.mul_vec(x) * dt - model.gamma_sqrt.mul_vec(dv);
    model.sigma_sqrt.mul_vec(dw) + linalg::matvec(p, &model.innovation_weight(&innovation))
}

/// One Euler–Maruyama step of the Kalman-Bucy process with an externally
/// propagated covariance `P`.
pub fn kbp_process_step(
    model: &LinearAffineModel,
    x: &DVector<f64>,
    p: &DMatrix<f64>,
    dz: &DVector<f64>,
    dt: f64,
    stream_w: &mut Stream,
    stream_v: &mut Stream,
) -> Result<DVector<f64>> {
    model.require_explicit("kbp_process_step")?;
    let dw = stream_w.increment(model.dim(), dt);
    let dv = stream_v.increment(model.obs_dim(), dt);
    let g = kbp_increment(model, p, x, dz, dt, &dw, &dv);
    let out = euler_update(model, x, dt, &g);
    if !linalg::all_finite_vec(&out) {
        return Err(nonfinite("kbp process"));
    }
    Ok(out)
}

/// Per-particle model and observation noise streams.
#[derive(Debug, Clone)]
pub struct ParticleStreams {
    pub w: Vec<Stream>,
    pub v: Vec<Stream>,
}

impl ParticleStreams {
    /// Streams for particles `0..count`. Particle `p` gets the same streams
    /// whatever the ensemble size.
    pub fn new(plan: &RngPlan, replicate: u64, count: usize) -> Self {
        Self {
            w: plan.particle_streams(StreamTag::ParticleW, replicate, count),
            v: plan.particle_streams(StreamTag::ParticleV, replicate, count),
        }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// Draws one step of `(ΔW, ΔV)` for every particle, as `d×P` and `k×P`.
    pub fn draw(&mut self, d: usize, k: usize, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.len();
        let mut dw = DMatrix::zeros(d, n);
        let mut dv = DMatrix::zeros(k, n);
        let s = dt.sqrt();
        let fill = |stream: &mut Stream, col: &mut [f64]| col.iter_mut().for_each(|x| *x = s * stream.normal());
        if d > 0 {
            dw.as_mut_slice().par_chunks_mut(d).zip(self.w.par_iter_mut()).for_each(|(c, w)| fill(w, c));
        }
        if k > 0 {
            dv.as_mut_slice().par_chunks_mut(k).zip(self.v.par_iter_mut()).for_each(|(c, v)| fill(v, c));
        }
        (dw, dv)
    }
}

/// Full-order particle block `d×P`.
#[derive(Debug, Clone)]
pub struct FullEnsemble {
    pub x: DMatrix<f64>,
}

impl FullEnsemble {
    pub fn new(x: DMatrix<f64>) -> Self {
        Self { x }
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    /// Particles `U⁰ + U ẑ_p`, `ẑ_p ~ N(0, M_Y)`, drawn in order from one
    /// stream so that smaller ensembles are prefixes of larger ones.
    pub fn sample_low_rank(
        u0: &DVector<f64>,
        u: &DMatrix<f64>,
        my: &DMatrix<f64>,
        count: usize,
        stream: &mut Stream,
    ) -> Result<Self> {
        let z = draw_reduced(my, count, stream)?;
        let mut x = u * z.transpose();
        for mut c in x.column_iter_mut() {
            c += u0;
        }
        Ok(Self { x })
    }

    pub fn mean(&self) -> Result<DVector<f64>> {
        sample_mean(self)
    }
}

/// `count × R` matrix with i.i.d. `N(0, M_Y)` rows.
pub(crate) fn draw_reduced(my: &DMatrix<f64>, count: usize, stream: &mut Stream) -> Result<DMatrix<f64>> {
    let (l, _) = linalg::psd_factor(my, "M_Y")?;
    let r = my.nrows();
    let mut z = DMatrix::zeros(count, r);
    for p in 0..count {
        let xi = stream.normal_vector(r);
        z.set_row(p, &(&l * xi).transpose());
    }
    Ok(z)
}

pub fn sample_mean(ens: &FullEnsemble) -> Result<DVector<f64>> {
    let n = ens.len();
    if n == 0 {
        return Err(Error::TooFewParticles { needed: 1, got: 0 });
    }
    Ok(ens.x.column_sum() / n as f64)
}

/// Centered particles `X⋆`.
pub fn centered(ens: &FullEnsemble) -> Result<DMatrix<f64>> {
    let mean = sample_mean(ens)?;
    let mut xs = ens.x.clone();
    for mut c in xs.column_iter_mut() {
        c -= &mean;
    }
    Ok(xs)
}

/// `X⋆ X⋆ᵀ / (P − 1)`.
pub fn sample_cov(ens: &FullEnsemble) -> Result<DMatrix<f64>> {
    let n = ens.len();
    if n < 2 {
        return Err(Error::TooFewParticles { needed: 2, got: n });
    }
    let xs = centered(ens)?;
    let mut c = linalg::matmul(&xs, &xs.transpose()) / (n - 1) as f64;
    linalg::symmetrize(&mut c);
    Ok(c)
}

/// Moves every particle by the Kalman-Bucy process update with gain
/// covariance `p`, given pre-drawn increments.
pub fn enkf_update_with_cov(
    stepper: &Stepper<'_>,
    ens: &FullEnsemble,
    p: &DMatrix<f64>,
    dz: &DVector<f64>,
    dw: &DMatrix<f64>,
    dv: &DMatrix<f64>,
) -> Result<FullEnsemble> {
    let model = stepper.model;
    let dt = stepper.dt;
    let n = ens.len();
    let cols: Vec<Result<DVector<f64>>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let x = ens.x.column(j).into_owned();
            let g = kbp_increment(model, p, &x, dz, dt, &dw.column(j).into_owned(), &dv.column(j).into_owned());
            if stepper.is_implicit() {
                stepper.advance(&x, &g)
            } else {
                Ok(euler_update(model, &x, dt, &g))
            }
        })
        .collect();
    let mut out = DMatrix::zeros(ens.dim(), n);
    for (j, c) in cols.into_iter().enumerate() {
        out.set_column(j, &c?);
    }
    if !linalg::all_finite(&out) {
        return Err(nonfinite("enkf"));
    }
    Ok(FullEnsemble { x: out })
}

/// One EnKF step: sample covariance barrier, then independent particle
/// updates.
pub fn enkf_step_with(
    stepper: &Stepper<'_>,
    ens: &FullEnsemble,
    dz: &DVector<f64>,
    streams: &mut ParticleStreams,
) -> Result<FullEnsemble> {
    let n = ens.len();
    if n < 2 {
        return Err(Error::TooFewParticles { needed: 2, got: n });
    }
    if streams.len() != n {
        return Err(Error::MismatchedEnsembles(format!("{} streams for {n} particles", streams.len())));
    }
    let model = stepper.model;
    let p = sample_cov(ens)?;
    let (dw, dv) = streams.draw(model.dim(), model.obs_dim(), stepper.dt);
    enkf_update_with_cov(stepper, ens, &p, dz, &dw, &dv)
}

/// Convenience form of [`enkf_step_with`] that builds the stepper.
pub fn enkf_step(
    model: &LinearAffineModel,
    ens: &FullEnsemble,
    dz: &DVector<f64>,
    dt: f64,
    streams: &mut ParticleStreams,
) -> Result<FullEnsemble> {
    let stepper = Stepper::new(model, dt)?;
    enkf_step_with(&stepper, ens, dz, streams)
}

/// One row of full-order diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KbpDiagnostics {
    pub t: f64,
    pub trace_p: f64,
    pub mean_norm: f64,
    pub rmse: f64,
}

impl KbpDiagnostics {
    pub const HEADER: [&'static str; 4] = ["t", "trace_P", "mean_norm", "rmse"];

    pub fn new(t: f64, m: &DVector<f64>, trace_p: f64, signal: Option<&DVector<f64>>) -> Self {
        let rmse = signal.map_or(f64::NAN, |x| crate::metrics::rmse(m, trace_p, x));
        Self { t, trace_p, mean_norm: m.norm(), rmse }
    }

    pub fn values(&self) -> [f64; 4] {
        [self.t, self.trace_p, self.mean_norm, self.rmse]
    }
}

/// Kalman-Bucy moments along an observation path. `visit` sees the state
/// after every step (and the initial one at step 0).
pub fn run_kbp(
    model: &LinearAffineModel,
    init: &GaussianState,
    obs: &ObservationPath,
    signal: Option<&[DVector<f64>]>,
    mut visit: impl FnMut(usize, &GaussianState) -> Result<()>,
) -> Result<(GaussianState, Vec<KbpDiagnostics>)> {
    model.require_explicit("run_kbp")?;
    let dt = obs.dt;
    let mut state = init.clone();
    let mut diags = Vec::with_capacity(obs.n_steps() + 1);
    diags.push(KbpDiagnostics::new(0.0, &state.m, state.p.trace(), signal.map(|s| &s[0])));
    visit(0, &state)?;
    for (n, dz) in obs.dz.iter().enumerate() {
        let m = kb_mean_step(model, &state.m, &state.p, dz, dt).map_err(|e| e.at_step(n + 1))?;
        let p = riccati_step(model, &state.p, dt).map_err(|e| e.at_step(n + 1))?;
        if !linalg::all_finite_vec(&m) {
            return Err(Error::NonFiniteState { step: n + 1, context: "kb mean" });
        }
        state = GaussianState { m, p };
        let t = (n + 1) as f64 * dt;
        diags.push(KbpDiagnostics::new(t, &state.m, state.p.trace(), signal.map(|s| &s[n + 1])));
        visit(n + 1, &state)?;
    }
    Ok((state, diags))
}

/// Plain EnKF along an observation path with per-step diagnostics (trace of
/// the sample covariance, sample-mean norm, RMSE of the sample mean).
pub fn run_enkf(
    model: &LinearAffineModel,
    init: &FullEnsemble,
    obs: &ObservationPath,
    streams: &mut ParticleStreams,
    signal: Option<&[DVector<f64>]>,
    mut visit: impl FnMut(usize, &FullEnsemble) -> Result<()>,
) -> Result<(FullEnsemble, Vec<KbpDiagnostics>)> {
    let stepper = Stepper::new(model, obs.dt)?;
    let diag = |t: f64, e: &FullEnsemble, s: Option<&DVector<f64>>| -> Result<KbpDiagnostics> {
        let xs = centered(e)?;
        let tr = xs.norm_squared() / (e.len().max(2) - 1) as f64;
        Ok(KbpDiagnostics::new(t, &sample_mean(e)?, tr, s))
    };
    let mut ens = init.clone();
    let mut diags = vec![diag(0.0, &ens, signal.map(|s| &s[0]))?];
    visit(0, &ens)?;
    for (n, dz) in obs.dz.iter().enumerate() {
        ens = enkf_step_with(&stepper, &ens, dz, streams).map_err(|e| e.at_step(n + 1))?;
        diags.push(diag((n + 1) as f64 * obs.dt, &ens, signal.map(|s| &s[n + 1]))?);
        visit(n + 1, &ens)?;
    }
    Ok((ens, diags))
}
