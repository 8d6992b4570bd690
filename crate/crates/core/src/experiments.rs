//! Study drivers: the advection and pollution set-ups, lockstep comparisons
//! of full-order and low-rank filters, and the replicate studies built on
//! them.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dlr::{self, modes_update, oja_step, project_noise, reconstruct_cov, ReducedKb};
use crate::enkf::{
    dlr_enkf_em_step, dlr_enkf_em_update, reconstruct_particles, sample_reduced_cov, BugIntegrator,
    ReducedEnsemble,
};
use crate::error::{Error, Result};
use crate::fem::{build_fem_problem, fem_initial_condition, FemConfig, FemProblem};
use crate::kbp::{
    draw_reduced, enkf_step_with, kb_mean_step, open_loop_step, riccati_step, FullEnsemble, ParticleStreams,
};
use crate::linalg::{self, Operator};
use crate::metrics::{self, StudyResult};
use crate::model::{
    advection_initial_condition, build_upwind_model, sample_low_rank_ic, simulate_observations,
    simulate_signal, GaussianState, LinearAffineModel, LowRankState, ObservationPath, Stepper,
};
use crate::rng::{RngPlan, Stream, StreamTag};

fn step_count(dt: f64, t_end: f64) -> Result<usize> {
    if !(dt > 0.0) || !(t_end > 0.0) {
        return Err(Error::InvalidGrid(format!("need dt > 0 and T > 0, got dt={dt}, T={t_end}")));
    }
    Ok((t_end / dt).round() as usize)
}

/// Periodic advection-reaction model with forcing, fully observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvectionSetup {
    pub d: usize,
    pub length: f64,
    pub decay: f64,
    pub forcing: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub dt: f64,
    pub t_end: f64,
    pub r_true: usize,
}

impl Default for AdvectionSetup {
    fn default() -> Self {
        Self {
            d: 100,
            length: 10.0,
            decay: 0.1,
            forcing: 0.03,
            sigma: 1e-3,
            gamma: 2.0,
            dt: 1e-4,
            t_end: 1.0,
            r_true: 25,
        }
    }
}

/// A model with its initial law, one signal realization and its
/// observation increments.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub model: LinearAffineModel,
    pub ic: LowRankState,
    pub signal: Vec<DVector<f64>>,
    pub obs: ObservationPath,
    pub t_end: f64,
}

impl Scenario {
    pub fn dt(&self) -> f64 {
        self.obs.dt
    }

    pub fn n_steps(&self) -> usize {
        self.obs.n_steps()
    }
}

/// Signal from the initial law, then observations of it, each from its own
/// stream of `replicate`.
pub fn realize(
    model: LinearAffineModel,
    ic: LowRankState,
    plan: &RngPlan,
    replicate: u64,
    dt: f64,
    t_end: f64,
) -> Result<Scenario> {
    let n = step_count(dt, t_end)?;
    let x0 = sample_low_rank_ic(&ic.u0, &ic.u, &ic.my, &mut plan.stream(StreamTag::InitialCondition, replicate, 0))?;
    let signal = simulate_signal(&model, &x0, dt, n, &mut plan.stream(StreamTag::Signal, replicate, 0))?;
    let obs = simulate_observations(&model, &signal, dt, &mut plan.stream(StreamTag::Observation, replicate, 0))?;
    Ok(Scenario { model, ic, signal, obs, t_end })
}

impl AdvectionSetup {
    pub fn n_steps(&self) -> Result<usize> {
        step_count(self.dt, self.t_end)
    }

    pub fn model(&self) -> Result<LinearAffineModel> {
        build_upwind_model(self.d, self.length, self.decay, self.forcing, self.sigma, self.gamma)
    }

    pub fn initial_condition(&self) -> Result<LowRankState> {
        advection_initial_condition(self.d, self.length, self.r_true)
    }

    pub fn scenario(&self, plan: &RngPlan, replicate: u64) -> Result<Scenario> {
        realize(self.model()?, self.initial_condition()?, plan, replicate, self.dt, self.t_end)
    }
}

/// Per-step errors of one reduced run against the full-order moments.
#[derive(Debug, Clone, Default)]
pub struct RankSeries {
    pub rank: usize,
    pub mean_err: Vec<f64>,
    pub cov_err: Vec<f64>,
    /// Empty unless best approximations were requested.
    pub bap: Vec<f64>,
    pub rmse: Vec<f64>,
}

/// Full-order, open-loop and reduced Kalman-Bucy moments advanced in
/// lockstep on one observation path. Series have `N + 1` entries.
#[derive(Debug, Clone, Default)]
pub struct RankComparison {
    pub t: Vec<f64>,
    pub fom_mean_norm: Vec<f64>,
    pub fom_cov_norm: Vec<f64>,
    pub rmse_fom: Vec<f64>,
    pub rmse_open_loop: Vec<f64>,
    pub ranks: Vec<RankSeries>,
}

impl RankComparison {
    /// iRMSE over `t₁..t_N`.
    pub fn irmse(series: &[f64], dt: f64, t_end: f64) -> f64 {
        metrics::irmse(&series[1..], dt, t_end)
    }

    pub fn max_relative(errors: &[f64], norms: &[f64]) -> f64 {
        errors.iter().zip(norms).map(|(e, n)| e / n).fold(0.0, f64::max)
    }
}

pub fn compare_ranks(scn: &Scenario, ranks: &[usize], with_bap: bool) -> Result<RankComparison> {
    let model = &scn.model;
    let dt = scn.dt();
    let mut fom = GaussianState::from_low_rank(&scn.ic);
    let mut open = fom.clone();
    let mut runs = ranks
        .iter()
        .map(|&r| ReducedKb::new(model, scn.ic.truncate(r)?, dt))
        .collect::<Result<Vec<_>>>()?;
    let mut out = RankComparison {
        ranks: ranks.iter().map(|&rank| RankSeries { rank, ..Default::default() }).collect(),
        ..Default::default()
    };
    for n in 0..=scn.n_steps() {
        let x = &scn.signal[n];
        out.t.push(n as f64 * dt);
        out.fom_mean_norm.push(fom.m.norm());
        out.fom_cov_norm.push(fom.p.norm());
        out.rmse_fom.push(metrics::rmse(&fom.m, fom.p.trace(), x));
        out.rmse_open_loop.push(metrics::rmse(&open.m, open.p.trace(), x));
        let baps = if with_bap { metrics::best_rank_errors(&fom.p, ranks) } else { Vec::new() };
        for (i, (run, series)) in runs.iter().zip(out.ranks.iter_mut()).enumerate() {
            let s = &run.state;
            series.mean_err.push((&s.u0 - &fom.m).norm());
            series.cov_err.push((reconstruct_cov(&s.u, &s.my) - &fom.p).norm());
            series.rmse.push(metrics::rmse(&s.u0, s.my.trace(), x));
            if with_bap {
                series.bap.push(baps[i]);
            }
        }
        if n == scn.n_steps() {
            break;
        }
        let dz = &scn.obs.dz[n];
        let m = kb_mean_step(model, &fom.m, &fom.p, dz, dt).map_err(|e| e.at_step(n + 1))?;
        let p = riccati_step(model, &fom.p, dt).map_err(|e| e.at_step(n + 1))?;
        fom = GaussianState { m, p };
        open = open_loop_step(model, &open, dt).map_err(|e| e.at_step(n + 1))?;
        for run in &mut runs {
            run.step(dz).map_err(|e| e.at_step(n + 1))?;
        }
    }
    Ok(out)
}

/// Signal and observation increments generated step by step, consuming
/// the same streams in the same order as [`AdvectionSetup::scenario`].
struct LiveSignal<'a> {
    stepper: Stepper<'a>,
    x: DVector<f64>,
    w: Stream,
    v: Stream,
}

impl<'a> LiveSignal<'a> {
    fn new(model: &'a LinearAffineModel, ic: &LowRankState, plan: &RngPlan, replicate: u64, dt: f64) -> Result<Self> {
        let x = sample_low_rank_ic(&ic.u0, &ic.u, &ic.my, &mut plan.stream(StreamTag::InitialCondition, replicate, 0))?;
        Ok(Self {
            stepper: Stepper::new(model, dt)?,
            x,
            w: plan.stream(StreamTag::Signal, replicate, 0),
            v: plan.stream(StreamTag::Observation, replicate, 0),
        })
    }

    /// `ΔZ_n` for the current state, then the state moves to `x_{n+1}`.
    fn next(&mut self) -> Result<DVector<f64>> {
        let model = self.stepper.model;
        let dt = self.stepper.dt;
        let dv = self.v.increment(model.obs_dim(), dt);
        let dz = model.h.mul_vec(&self.x) * dt + model.gamma_sqrt.mul_vec(&dv);
        let dw = self.w.increment(model.dim(), dt);
        self.x = self.stepper.advance(&self.x, &model.sigma_sqrt.mul_vec(&dw))?;
        Ok(dz)
    }
}

/// Per-replicate iRMSE of the full-order, open-loop and reduced filters.
/// `dlr[i][j]` belongs to `ranks[i]` and replicate `j`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrackingStudy {
    pub ranks: Vec<usize>,
    pub fom: Vec<f64>,
    pub open_loop: Vec<f64>,
    pub dlr: Vec<Vec<f64>>,
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl TrackingStudy {
    pub fn mean_fom(&self) -> f64 {
        mean_of(&self.fom)
    }

    pub fn mean_open_loop(&self) -> f64 {
        mean_of(&self.open_loop)
    }

    pub fn mean_dlr(&self, i: usize) -> f64 {
        mean_of(&self.dlr[i])
    }
}

/// iRMSE over many signal realizations. The covariances do not depend on
/// the data, so one full-order, one open-loop and one reduced covariance
/// trajectory per rank serve every replicate; only the means are advanced
/// per replicate. Replicate `j` sees the same signal and observations as
/// `setup.scenario(plan, j)`.
pub fn tracking_study(setup: &AdvectionSetup, plan: &RngPlan, replicates: usize, ranks: &[usize]) -> Result<TrackingStudy> {
    let model = setup.model()?;
    let ic = setup.initial_condition()?;
    let dt = setup.dt;
    let n_steps = setup.n_steps()?;
    let mut fom = GaussianState::from_low_rank(&ic);
    let mut open = fom.clone();
    let mut kbs = ranks
        .iter()
        .map(|&r| ReducedKb::new(&model, ic.truncate(r)?, dt))
        .collect::<Result<Vec<_>>>()?;
    struct Rep<'a> {
        signal: LiveSignal<'a>,
        m_fom: DVector<f64>,
        m_open: DVector<f64>,
        u0: Vec<DVector<f64>>,
        fom: f64,
        open: f64,
        dlr: Vec<f64>,
    }
    let mut reps = (0..replicates as u64)
        .map(|j| {
            Ok(Rep {
                signal: LiveSignal::new(&model, &ic, plan, j, dt)?,
                m_fom: ic.u0.clone(),
                m_open: ic.u0.clone(),
                u0: vec![ic.u0.clone(); ranks.len()],
                fom: 0.0,
                open: 0.0,
                dlr: vec![0.0; ranks.len()],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let zero_g = DVector::zeros(model.dim());
    let zero_dz = DVector::zeros(model.obs_dim());
    let scale = dt / setup.t_end;
    for n in 0..n_steps {
        for rep in &mut reps {
            let dz = rep.signal.next().map_err(|e| e.at_step(n + 1))?;
            rep.m_fom = kb_mean_step(&model, &rep.m_fom, &fom.p, &dz, dt)?;
            rep.m_open = crate::kbp::euler_update(&model, &rep.m_open, dt, &zero_g);
            for (u0, kb) in rep.u0.iter_mut().zip(&kbs) {
                *u0 = dlr::dlr_mean_update(&model, u0, &kb.state.u, &kb.state.my, &dz, dt);
            }
        }
        fom.p = riccati_step(&model, &fom.p, dt).map_err(|e| e.at_step(n + 1))?;
        open = open_loop_step(&model, &open, dt).map_err(|e| e.at_step(n + 1))?;
        for kb in &mut kbs {
            kb.step(&zero_dz).map_err(|e| e.at_step(n + 1))?;
        }
        let (tr_fom, tr_open) = (fom.p.trace(), open.p.trace());
        for rep in &mut reps {
            let x = &rep.signal.x;
            if !linalg::all_finite_vec(&rep.m_fom) {
                return Err(Error::NonFiniteState { step: n + 1, context: "tracking mean" });
            }
            rep.fom += scale * metrics::rmse(&rep.m_fom, tr_fom, x);
            rep.open += scale * metrics::rmse(&rep.m_open, tr_open, x);
            for (i, kb) in kbs.iter().enumerate() {
                rep.dlr[i] += scale * metrics::rmse(&rep.u0[i], kb.state.my.trace(), x);
            }
        }
    }
    Ok(TrackingStudy {
        ranks: ranks.to_vec(),
        fom: reps.iter().map(|r| r.fom).collect(),
        open_loop: reps.iter().map(|r| r.open).collect(),
        dlr: (0..ranks.len()).map(|i| reps.iter().map(|r| r.dlr[i]).collect()).collect(),
    })
}

/// Largest Frobenius gap between the reduced covariance `U M_Y Uᵀ` and an
/// Euler trajectory of the modified Riccati equation driven by the same
/// modes.
#[derive(Debug, Clone)]
pub struct RiccatiGap {
    pub dt: f64,
    pub gaps: Vec<f64>,
    pub max_gap: f64,
}

pub fn riccati_gap(setup: &AdvectionSetup, rank: usize, dt: f64) -> Result<RiccatiGap> {
    let model = setup.model()?;
    let n = step_count(dt, setup.t_end)?;
    let init = setup.initial_condition()?.truncate(rank)?;
    let mut p = reconstruct_cov(&init.u, &init.my);
    let mut run = ReducedKb::new(&model, init, dt)?;
    let dz = DVector::zeros(model.obs_dim());
    let mut gaps = vec![0.0];
    for step in 0..n {
        p = dlr::modified_riccati_step(&model, &run.state.u, &p, dt).map_err(|e| e.at_step(step + 1))?;
        run.step(&dz)?;
        gaps.push((reconstruct_cov(&run.state.u, &run.state.my) - &p).norm());
    }
    let max_gap = gaps.iter().copied().fold(0.0, f64::max);
    Ok(RiccatiGap { dt, gaps, max_gap })
}

/// Oja flow on a random symmetric matrix with a prescribed spectrum.
#[derive(Debug, Clone)]
pub struct OjaReport {
    pub distance: f64,
    pub min_energy_increment: f64,
    pub eigengap: f64,
    pub steps: usize,
}

/// `A = Q diag(λ) Qᵀ` with the `r` leading eigenvalues in `[0.1, 1.1]` and the
/// rest in `[−1, 0]`; the flow starts from a random orthonormal `U`.
pub fn oja_convergence(seed: u64, d: usize, r: usize, dt: f64, t_end: f64) -> Result<OjaReport> {
    if r == 0 || r >= d {
        return Err(Error::RankExceedsWidth { rank: r, width: d });
    }
    let mut stream = RngPlan::new(seed).stream(StreamTag::Auxiliary, 0, 0);
    let q = linalg::orthonormalize(&stream.normal_matrix(d, d))?;
    let lambda: Vec<f64> = (0..d)
        .map(|i| if i < r { 0.1 + stream.uniform() } else { -stream.uniform() })
        .collect();
    let eigengap = lambda[..r].iter().copied().fold(f64::INFINITY, f64::min)
        - lambda[r..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut a = &q * DMatrix::from_diagonal(&DVector::from_vec(lambda)) * q.transpose();
    linalg::symmetrize(&mut a);
    let a = Operator::Dense(a);
    let target = q.columns(0, r).into_owned();
    let mut u = linalg::orthonormalize(&stream.normal_matrix(d, r))?;
    let n = step_count(dt, t_end)?;
    let mut e = dlr::energy(&a, &u);
    let mut min_inc = f64::INFINITY;
    for _ in 0..n {
        u = oja_step(&a, &u, dt)?;
        let e_next = dlr::energy(&a, &u);
        min_inc = min_inc.min(e_next - e);
        e = e_next;
    }
    Ok(OjaReport {
        distance: metrics::subspace_distance(&u, &target, None)?,
        min_energy_increment: min_inc,
        eigengap,
        steps: n,
    })
}

/// Terminal errors of one particle system against the reduced Kalman-Bucy
/// process on the same observation path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PocSample {
    pub particles: usize,
    /// `‖M̂ − M_Y‖²_F`
    pub gram_err: f64,
    /// `‖Û⁰ − U⁰‖²`
    pub mean_err: f64,
    /// `‖X̂⁽¹⁾ − X⁽¹⁾‖²` against the coupled mean-field particle.
    pub particle_err: f64,
}

/// Runs the Euler–Maruyama particle system for each ensemble size in
/// `particles` on one scenario. The mean-field copy of particle 1 starts
/// from the same draw and consumes the same increments, but evolves with the
/// exact Gram matrix `M_Y`.
pub fn poc_replicate(scn: &Scenario, plan: &RngPlan, replicate: u64, particles: &[usize]) -> Result<Vec<PocSample>> {
    let model = &scn.model;
    let dt = scn.dt();
    let (d, k) = (model.dim(), model.obs_dim());
    let mut out = Vec::with_capacity(particles.len());
    for &count in particles {
        if count < 2 {
            return Err(Error::TooFewParticles { needed: 2, got: count });
        }
        let mut kb = ReducedKb::new(model, scn.ic.clone(), dt)?;
        let z = draw_reduced(&scn.ic.my, count, &mut plan.stream(StreamTag::InitialEnsemble, replicate, 0))?;
        let mut y_ref = z.row(0).transpose();
        let mut ens = ReducedEnsemble { u0: scn.ic.u0.clone(), u: scn.ic.u.clone(), y: z };
        ens.recenter();
        let mut streams = ParticleStreams::new(plan, replicate, count);
        for (n, dz) in scn.obs.dz.iter().enumerate() {
            let (dw, dv) = streams.draw(d, k, dt);
            let (w1, v1) = project_noise(model, &kb.state.u, &dw.columns(0, 1).into_owned(), &dv.columns(0, 1).into_owned());
            let next_ref = modes_update(kb.projected(), &kb.state.my, &DMatrix::from_column_slice(y_ref.len(), 1, y_ref.as_slice()), &w1, &v1, dt);
            y_ref = next_ref.column(0).into_owned();
            ens = dlr_enkf_em_update(model, &ens, dz, dt, &dw, &dv, kb.projected()).map_err(|e| e.at_step(n + 1))?;
            kb.step(dz).map_err(|e| e.at_step(n + 1))?;
        }
        let m_hat = sample_reduced_cov(&ens)?;
        let x_hat = &ens.u0 + linalg::matvec(&ens.u, &ens.y.row(0).transpose());
        let x_ref = &kb.state.u0 + linalg::matvec(&kb.state.u, &y_ref);
        out.push(PocSample {
            particles: count,
            gram_err: (m_hat - &kb.state.my).norm_squared(),
            mean_err: (&ens.u0 - &kb.state.u0).norm_squared(),
            particle_err: (x_hat - x_ref).norm_squared(),
        });
    }
    Ok(out)
}

/// Replicate averages of the three propagation-of-chaos errors with fitted
/// log-log slopes, in the order gram, mean, particle.
pub fn poc_study(setup: &AdvectionSetup, plan: &RngPlan, replicates: usize, particles: &[usize]) -> Result<Vec<StudyResult>> {
    let samples = (0..replicates as u64)
        .into_par_iter()
        .map(|rep| poc_replicate(&setup.scenario(plan, rep)?, plan, rep, particles))
        .collect::<Result<Vec<_>>>()?;
    let x: Vec<f64> = particles.iter().map(|&p| p as f64).collect();
    let column = |f: fn(&PocSample) -> f64| -> Vec<Vec<f64>> {
        (0..particles.len()).map(|i| samples.iter().map(|rep| f(&rep[i])).collect()).collect()
    };
    [
        ("gram_error", column(|s| s.gram_err)),
        ("mean_error", column(|s| s.mean_err)),
        ("particle_error", column(|s| s.particle_err)),
    ]
    .into_iter()
    .map(|(name, s)| StudyResult::from_samples(name, x.clone(), &s).with_slope())
    .collect()
}

/// Maximal invariant violations along an Euler–Maruyama run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvariantReport {
    pub steps: usize,
    /// Largest `|mean(Ŷ_{:,j})| / ‖Ŷ_{:,j}‖`.
    pub max_mean_ratio: f64,
    pub max_stiefel_defect: f64,
}

fn mean_ratio(y: &DMatrix<f64>) -> f64 {
    let means = crate::enkf::column_means(y);
    (0..y.ncols())
        .map(|j| {
            let norm = y.column(j).norm();
            if norm == 0.0 {
                0.0
            } else {
                means[j].abs() / norm
            }
        })
        .fold(0.0, f64::max)
}

pub fn ensemble_invariants(scn: &Scenario, plan: &RngPlan, replicate: u64, particles: usize) -> Result<InvariantReport> {
    let model = &scn.model;
    let dt = scn.dt();
    let mut ens = crate::enkf::init_reduced_ensemble(
        &scn.ic.u0,
        &scn.ic.u,
        &scn.ic.my,
        particles,
        &mut plan.stream(StreamTag::InitialEnsemble, replicate, 0),
    )?;
    let mut streams = ParticleStreams::new(plan, replicate, particles);
    let mut report = InvariantReport {
        steps: 0,
        max_mean_ratio: mean_ratio(&ens.y),
        max_stiefel_defect: dlr::stiefel_defect(&ens.u, None),
    };
    for (n, dz) in scn.obs.dz.iter().enumerate() {
        ens = dlr_enkf_em_step(model, &ens, dz, dt, &mut streams).map_err(|e| e.at_step(n + 1))?;
        report.steps = n + 1;
        report.max_mean_ratio = report.max_mean_ratio.max(mean_ratio(&ens.y));
        report.max_stiefel_defect = report.max_stiefel_defect.max(dlr::stiefel_defect(&ens.u, None));
    }
    Ok(report)
}

/// Steps an ensemble and its row permutation (with the particle streams
/// permuted alike) once and checks that the outputs agree bit for bit.
pub fn permutation_equivariant(
    model: &LinearAffineModel,
    ens: &ReducedEnsemble,
    dz: &DVector<f64>,
    dt: f64,
    streams: &ParticleStreams,
    perm: &[usize],
) -> Result<bool> {
    let n = ens.len();
    let mut sorted = perm.to_vec();
    sorted.sort_unstable();
    if perm.len() != n || sorted.iter().enumerate().any(|(i, &p)| i != p) {
        return Err(Error::MismatchedEnsembles(format!("{perm:?} is not a permutation of {n} particles")));
    }
    let permuted = ReducedEnsemble {
        u0: ens.u0.clone(),
        u: ens.u.clone(),
        y: DMatrix::from_fn(n, ens.rank(), |i, j| ens.y[(perm[i], j)]),
    };
    let mut s_a = streams.clone();
    let mut s_b = ParticleStreams {
        w: perm.iter().map(|&p| streams.w[p].clone()).collect(),
        v: perm.iter().map(|&p| streams.v[p].clone()).collect(),
    };
    let a = dlr_enkf_em_step(model, ens, dz, dt, &mut s_a)?;
    let b = dlr_enkf_em_step(model, &permuted, dz, dt, &mut s_b)?;
    let same = |x: f64, y: f64| x.to_bits() == y.to_bits();
    let rows = (0..n).all(|i| (0..a.rank()).all(|j| same(b.y[(i, j)], a.y[(perm[i], j)])));
    Ok(rows
        && a.u0.iter().zip(b.u0.iter()).all(|(x, y)| same(*x, *y))
        && a.u.iter().zip(b.u.iter()).all(|(x, y)| same(*x, *y)))
}

/// Per-step operation counts of one full-order and one reduced Kalman-Bucy
/// moment step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopSample {
    pub d: usize,
    pub fom: u64,
    pub dlr: u64,
}

pub fn flop_scaling(setup: &AdvectionSetup, dims: &[usize], rank: usize) -> Result<Vec<FlopSample>> {
    dims.iter()
        .map(|&d| {
            let s = AdvectionSetup { d, ..setup.clone() };
            let model = s.model()?;
            let ic = advection_initial_condition(d, s.length, rank)?;
            let dz = DVector::zeros(model.obs_dim());
            let fom = GaussianState::from_low_rank(&ic);
            let (r, fom_flops) = crate::flops::measure(|| -> Result<()> {
                kb_mean_step(&model, &fom.m, &fom.p, &dz, s.dt)?;
                riccati_step(&model, &fom.p, s.dt)?;
                Ok(())
            });
            r?;
            let mut run = ReducedKb::new(&model, ic, s.dt)?;
            let (r, dlr_flops) = crate::flops::measure(|| run.step(&dz));
            r?;
            Ok(FlopSample { d, fom: fom_flops, dlr: dlr_flops })
        })
        .collect()
}

/// Pollution model with its discretization and initial rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FemSetup {
    pub config: FemConfig,
    pub r_true: usize,
    pub dt: f64,
    pub t_end: f64,
}

impl Default for FemSetup {
    fn default() -> Self {
        Self { config: FemConfig::default(), r_true: 12, dt: 1e-2, t_end: 1.0 }
    }
}

/// A pollution scenario: the assembled problem plus one signal realization.
#[derive(Debug, Clone)]
pub struct FemScenario {
    pub problem: FemProblem,
    pub scenario: Scenario,
}

impl FemSetup {
    pub fn scenario(&self, plan: &RngPlan, replicate: u64) -> Result<FemScenario> {
        let problem = build_fem_problem(&self.config)?;
        let ic = fem_initial_condition(&problem.mesh, &problem.ops.mass, self.r_true)?;
        let scenario = realize(problem.model.clone(), ic, plan, replicate, self.dt, self.t_end)?;
        Ok(FemScenario { problem, scenario })
    }
}

/// Initial particles `U⁰ + U ẑ_p`, drawn in order from the ensemble stream.
pub fn initial_particles(scn: &Scenario, plan: &RngPlan, replicate: u64, count: usize) -> Result<FullEnsemble> {
    FullEnsemble::sample_low_rank(
        &scn.ic.u0,
        &scn.ic.u,
        &scn.ic.my,
        count,
        &mut plan.stream(StreamTag::InitialEnsemble, replicate, 0),
    )
}

/// Matched-particle distance between the full ensemble filter and the
/// compressed ensemble advanced by the augmented-basis integrator, both on
/// the same increments. `relative` divides by the `ℓ²_P` norm of the
/// full-order particles.
#[derive(Debug, Clone, Default)]
pub struct EnsembleDistance {
    pub t: Vec<f64>,
    pub distance: Vec<f64>,
    pub relative: Vec<f64>,
}

pub fn ensemble_consistency(
    scn: &Scenario,
    plan: &RngPlan,
    replicate: u64,
    particles: usize,
    rank: usize,
) -> Result<EnsembleDistance> {
    let model = &scn.model;
    let dt = scn.dt();
    let w = model.weight();
    let mut fom = initial_particles(scn, plan, replicate, particles)?;
    let mut complement = plan.stream(StreamTag::Complement, replicate, 0);
    let (mut dlr_ens, _) = ReducedEnsemble::from_particles(&fom.x, w, rank, &mut complement)?;
    let mut s_fom = ParticleStreams::new(plan, replicate, particles);
    let mut s_dlr = ParticleStreams::new(plan, replicate, particles);
    let stepper = Stepper::new(model, dt)?;
    let bug = BugIntegrator::new(model, dt)?;
    let zero = DMatrix::zeros(model.dim(), particles);
    let mut out = EnsembleDistance::default();
    let mut record = |n: usize, fom: &FullEnsemble, e: &ReducedEnsemble| -> Result<()> {
        let dist = metrics::ell2p_distance(&fom.x, &reconstruct_particles(e), w)?;
        let scale = metrics::ell2p_distance(&fom.x, &zero, w)?;
        out.t.push(n as f64 * dt);
        out.distance.push(dist);
        out.relative.push(dist / scale);
        Ok(())
    };
    record(0, &fom, &dlr_ens)?;
    for (n, dz) in scn.obs.dz.iter().enumerate() {
        fom = enkf_step_with(&stepper, &fom, dz, &mut s_fom).map_err(|e| e.at_step(n + 1))?;
        dlr_ens = bug.step(&dlr_ens, dz, &mut s_dlr, &mut complement).map_err(|e| e.at_step(n + 1))?.0;
        record(n + 1, &fom, &dlr_ens)?;
    }
    Ok(out)
}

/// Per-step ensemble RMSE (`W`-norm) of the full ensemble filter.
pub fn enkf_rmse(scn: &Scenario, plan: &RngPlan, replicate: u64, particles: usize) -> Result<Vec<f64>> {
    let model = &scn.model;
    let w = model.weight();
    let stepper = Stepper::new(model, scn.dt())?;
    let mut ens = initial_particles(scn, plan, replicate, particles)?;
    let mut streams = ParticleStreams::new(plan, replicate, particles);
    let mut out = vec![metrics::ensemble_rmse(&ens.x, &scn.signal[0], w)];
    for (n, dz) in scn.obs.dz.iter().enumerate() {
        ens = enkf_step_with(&stepper, &ens, dz, &mut streams).map_err(|e| e.at_step(n + 1))?;
        out.push(metrics::ensemble_rmse(&ens.x, &scn.signal[n + 1], w));
    }
    Ok(out)
}

/// Per-step ensemble RMSE of the compressed filter started from the
/// rank-`rank` compression of the full initial ensemble.
pub fn dlr_enkf_rmse(scn: &Scenario, plan: &RngPlan, replicate: u64, particles: usize, rank: usize) -> Result<Vec<f64>> {
    let model = &scn.model;
    let w = model.weight();
    let x0 = initial_particles(scn, plan, replicate, particles)?;
    let mut complement = plan.stream(StreamTag::Complement, replicate, 0);
    let (mut ens, _) = ReducedEnsemble::from_particles(&x0.x, w, rank, &mut complement)?;
    let mut streams = ParticleStreams::new(plan, replicate, particles);
    let bug = BugIntegrator::new(model, scn.dt())?;
    let mut out = vec![metrics::reduced_ensemble_rmse(&ens, &scn.signal[0], w)];
    for (n, dz) in scn.obs.dz.iter().enumerate() {
        ens = bug.step(&ens, dz, &mut streams, &mut complement).map_err(|e| e.at_step(n + 1))?.0;
        out.push(metrics::reduced_ensemble_rmse(&ens, &scn.signal[n + 1], w));
    }
    Ok(out)
}

/// Sample standard deviation across runs at each step, averaged over time.
pub fn time_averaged_spread(runs: &[Vec<f64>]) -> f64 {
    if runs.len() < 2 {
        return f64::NAN;
    }
    let steps = runs[0].len();
    let total: f64 = (0..steps)
        .map(|i| {
            let vals: Vec<f64> = runs.iter().map(|r| r[i]).collect();
            let mu = vals.iter().sum::<f64>() / vals.len() as f64;
            (vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
        })
        .sum();
    total / steps as f64
}
