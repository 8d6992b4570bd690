//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any fails. Extra arguments select criteria by name,
//! e.g. `cargo test --test acceptance -- ac4 ac9`.

use std::time::{Duration, Instant};

use lowrank_kbp::enkf::init_reduced_ensemble;
use lowrank_kbp::experiments::{
    compare_ranks, dlr_enkf_rmse, enkf_rmse, ensemble_consistency, ensemble_invariants, flop_scaling,
    oja_convergence, permutation_equivariant, poc_study, riccati_gap, time_averaged_spread, tracking_study, AdvectionSetup,
    FemSetup, RankComparison,
};
use lowrank_kbp::fem::ObsMode;
use lowrank_kbp::kbp::ParticleStreams;
use lowrank_kbp::metrics::fit_loglog_slope;
use lowrank_kbp::{Result, RngPlan, StreamTag};

const SEED: u64 = 7_041_995;

// AC1
const EXACT_RANK_REL: f64 = 1e-8;
const AC1_BUDGET: Duration = Duration::from_secs(120);
// AC2
const BAP_SLACK: f64 = 1e-12;
const SWEEP_RANKS: [usize; 6] = [2, 5, 10, 15, 20, 25];
// AC3
const SIGMAS: [f64; 4] = [0.0, 1e-3, 1e-1, 0.5];
const SIGMA_RANK: usize = 15;
// AC4
const OJA_DISTANCE: f64 = 1e-6;
const OJA_ENERGY_SLACK: f64 = 1e-9;
const OJA_MIN_GAP: f64 = 0.1;
const AC4_BUDGET: Duration = Duration::from_secs(10);
// AC5
const GAP_RANK: usize = 15;
const GAP_DT: f64 = 1e-3;
const GAP_RATIO: (f64, f64) = (1.6, 2.4);
// AC6
const POC_PARTICLES: [usize; 7] = [8, 16, 32, 64, 128, 256, 512];
const POC_REPLICATES: usize = 15;
const POC_SLOPE: (f64, f64) = (-1.4, -0.6);
const AC6_BUDGET: Duration = Duration::from_secs(20 * 60);
// AC7
const TRACK_RANK: usize = 25;
const TRACK_REPLICATES: usize = 100;
const TRACK_FOM_FACTOR: f64 = 1.05;
const TRACK_OPEN_LOOP_FACTOR: f64 = 0.5;
// AC8
const FEM_PARTICLES: usize = 425;
const FEM_RANK: usize = 12;
const FEM_CONSISTENCY_REL: f64 = 1e-6;
const AC8_BUDGET: Duration = Duration::from_secs(5 * 60);
// AC9
const INV_PARTICLES: usize = 32;
const INV_RANK: usize = 7;
const INV_STEPS: usize = 10_000;
const MEAN_RATIO: f64 = 1e-12;
const STIEFEL_DEFECT: f64 = 1e-10;
// AC10
const FLOP_DIMS: [usize; 4] = [50, 100, 200, 400];
const FLOP_RANK: usize = 10;
const DLR_FLOP_SLOPE: (f64, f64) = (0.9, 1.1);
const FOM_FLOP_SLOPE_MIN: f64 = 1.9;
const SPREAD_REPLICATES: u64 = 10;
const SPREAD_SMALL_P: usize = 10;
const SPREAD_RANK: usize = 10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0])
}

fn ac1() -> Result<Outcome> {
    let start = Instant::now();
    let setup = AdvectionSetup { sigma: 0.0, ..Default::default() };
    let scn = setup.scenario(&RngPlan::new(SEED), 0)?;
    let cmp = compare_ranks(&scn, &[setup.r_true], false)?;
    let run = &cmp.ranks[0];
    let mean = RankComparison::max_relative(&run.mean_err, &cmp.fom_mean_norm);
    let cov = RankComparison::max_relative(&run.cov_err, &cmp.fom_cov_norm);
    let took = start.elapsed();
    outcome(
        mean <= EXACT_RANK_REL && cov <= EXACT_RANK_REL && took < AC1_BUDGET,
        format!("max rel mean {mean:.3e}, max rel cov {cov:.3e} (tol {EXACT_RANK_REL:e}), {:.0}s", took.as_secs_f64()),
    )
}

fn ac2() -> Result<Outcome> {
    let scn = AdvectionSetup::default().scenario(&RngPlan::new(SEED), 0)?;
    let cmp = compare_ranks(&scn, &SWEEP_RANKS, true)?;
    let terminal: Vec<f64> = cmp.ranks.iter().map(|r| *r.cov_err.last().unwrap()).collect();
    let monotone = terminal.windows(2).all(|w| w[1] <= w[0]);
    let worst = cmp
        .ranks
        .iter()
        .flat_map(|r| r.cov_err.iter().zip(&r.bap).map(|(e, b)| e - b))
        .fold(f64::INFINITY, f64::min);
    outcome(
        monotone && worst >= -BAP_SLACK,
        format!("terminal cov errors {}, min(err - BAP) {worst:.3e}", sci(&terminal)),
    )
}

fn ac3() -> Result<Outcome> {
    let plan = RngPlan::new(SEED);
    let mut mean = Vec::new();
    let mut cov = Vec::new();
    for sigma in SIGMAS {
        let scn = AdvectionSetup { sigma, ..Default::default() }.scenario(&plan, 0)?;
        let cmp = compare_ranks(&scn, &[SIGMA_RANK], false)?;
        mean.push(*cmp.ranks[0].mean_err.last().unwrap());
        cov.push(*cmp.ranks[0].cov_err.last().unwrap());
    }
    outcome(
        strictly_increasing(&mean) && strictly_increasing(&cov),
        format!("terminal mean errors {}, cov errors {}", sci(&mean), sci(&cov)),
    )
}

fn ac4() -> Result<Outcome> {
    let start = Instant::now();
    let rep = oja_convergence(SEED, 30, 5, 0.01, 200.0)?;
    let took = start.elapsed();
    outcome(
        rep.eigengap >= OJA_MIN_GAP
            && rep.distance <= OJA_DISTANCE
            && rep.min_energy_increment >= -OJA_ENERGY_SLACK
            && took < AC4_BUDGET,
        format!(
            "eigengap {:.3}, distance {:.3e}, min energy increment {:.3e}, {:.1}s",
            rep.eigengap,
            rep.distance,
            rep.min_energy_increment,
            took.as_secs_f64()
        ),
    )
}

fn ac5() -> Result<Outcome> {
    let setup = AdvectionSetup::default();
    let coarse = riccati_gap(&setup, GAP_RANK, GAP_DT)?;
    let fine = riccati_gap(&setup, GAP_RANK, GAP_DT / 2.0)?;
    let ratio = coarse.max_gap / fine.max_gap;
    outcome(
        (GAP_RATIO.0..=GAP_RATIO.1).contains(&ratio),
        format!(
            "max gap {:.3e} at dt={GAP_DT:e} (C = {:.3e}), {:.3e} at dt/2, ratio {ratio:.3}",
            coarse.max_gap,
            coarse.max_gap / GAP_DT,
            fine.max_gap
        ),
    )
}

fn ac6() -> Result<Outcome> {
    let start = Instant::now();
    let setup = AdvectionSetup { r_true: 7, ..Default::default() };
    let res = poc_study(&setup, &RngPlan::new(SEED), POC_REPLICATES, &POC_PARTICLES)?;
    let took = start.elapsed();
    let gram = res[0].slope.unwrap();
    let mean = res[1].slope.unwrap();
    let particle = res[2].slope.unwrap();
    let inside = |s: f64| (POC_SLOPE.0..=POC_SLOPE.1).contains(&s);
    outcome(
        inside(gram) && inside(particle) && took < AC6_BUDGET,
        format!(
            "slopes gram {gram:.3} ± {:.3}, particle {particle:.3} ± {:.3} (mean {mean:.3}), {:.0}s",
            res[0].slope_half_width.unwrap(),
            res[2].slope_half_width.unwrap(),
            took.as_secs_f64()
        ),
    )
}

fn ac7() -> Result<Outcome> {
    let setup = AdvectionSetup::default();
    let study = tracking_study(&setup, &RngPlan::new(SEED), TRACK_REPLICATES, &[TRACK_RANK])?;
    let (fom, dlr, open) = (study.mean_fom(), study.mean_dlr(0), study.mean_open_loop());
    outcome(
        dlr <= TRACK_FOM_FACTOR * fom && dlr <= TRACK_OPEN_LOOP_FACTOR * open && fom <= TRACK_OPEN_LOOP_FACTOR * open,
        format!(
            "mean iRMSE dlr {dlr:.4}, fom {fom:.4}, open loop {open:.4} (dlr/open {:.3}) over {TRACK_REPLICATES} replicates",
            dlr / open
        ),
    )
}

fn ac8() -> Result<Outcome> {
    let start = Instant::now();
    let mut setup = FemSetup::default();
    setup.config.sigma = 0.0;
    setup.config.obs = ObsMode::Full;
    let plan = RngPlan::new(SEED);
    let fem = setup.scenario(&plan, 0)?;
    let res = ensemble_consistency(&fem.scenario, &plan, 0, FEM_PARTICLES, FEM_RANK)?;
    let worst = res.relative.iter().copied().fold(0.0, f64::max);
    let took = start.elapsed();
    outcome(
        worst <= FEM_CONSISTENCY_REL && took < AC8_BUDGET,
        format!("max relative l2_P(H) distance {worst:.3e}, {:.0}s", took.as_secs_f64()),
    )
}

fn ac9() -> Result<Outcome> {
    let plan = RngPlan::new(SEED);
    let setup = AdvectionSetup { r_true: INV_RANK, dt: 1.0 / INV_STEPS as f64, ..Default::default() };
    let scn = setup.scenario(&plan, 0)?;
    let rep = ensemble_invariants(&scn, &plan, 0, INV_PARTICLES)?;
    let micro = init_reduced_ensemble(
        &scn.ic.u0,
        &scn.ic.u,
        &scn.ic.my,
        3,
        &mut plan.stream(StreamTag::InitialEnsemble, 1, 0),
    )?;
    let streams = ParticleStreams::new(&plan, 1, 3);
    let mut equivariant = true;
    for perm in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
        equivariant &= permutation_equivariant(&scn.model, &micro, &scn.obs.dz[0], scn.dt(), &streams, &perm)?;
    }
    outcome(
        rep.steps == INV_STEPS
            && rep.max_mean_ratio <= MEAN_RATIO
            && rep.max_stiefel_defect <= STIEFEL_DEFECT
            && equivariant,
        format!(
            "{} steps, max column-mean ratio {:.3e}, max Stiefel defect {:.3e}, permutation bit-exact {equivariant}",
            rep.steps, rep.max_mean_ratio, rep.max_stiefel_defect
        ),
    )
}

fn ac10a() -> Result<Outcome> {
    let samples = flop_scaling(&AdvectionSetup::default(), &FLOP_DIMS, FLOP_RANK)?;
    let d: Vec<f64> = samples.iter().map(|s| s.d as f64).collect();
    let fom: Vec<f64> = samples.iter().map(|s| s.fom as f64).collect();
    let dlr: Vec<f64> = samples.iter().map(|s| s.dlr as f64).collect();
    let (fom_slope, _) = fit_loglog_slope(&d, &fom)?;
    let (dlr_slope, _) = fit_loglog_slope(&d, &dlr)?;
    let ratios: Vec<f64> = fom.iter().zip(&dlr).map(|(f, l)| f / l).collect();
    outcome(
        (DLR_FLOP_SLOPE.0..=DLR_FLOP_SLOPE.1).contains(&dlr_slope)
            && fom_slope >= FOM_FLOP_SLOPE_MIN
            && strictly_increasing(&ratios),
        format!("flop slopes dlr {dlr_slope:.3}, fom {fom_slope:.3}; fom/dlr ratios {ratios:.1?}"),
    )
}

fn ac10b() -> Result<Outcome> {
    let plan = RngPlan::new(SEED);
    let mut pass = true;
    let mut detail = Vec::new();
    for obs in [ObsMode::Full, ObsMode::Partial] {
        let mut setup = FemSetup::default();
        setup.config.obs = obs;
        let fem = setup.scenario(&plan, 0)?;
        let mut small = Vec::new();
        let mut reduced = Vec::new();
        for rep in 1..=SPREAD_REPLICATES {
            small.push(enkf_rmse(&fem.scenario, &plan, rep, SPREAD_SMALL_P)?);
            reduced.push(dlr_enkf_rmse(&fem.scenario, &plan, rep, FEM_PARTICLES, SPREAD_RANK)?);
        }
        let s_small = time_averaged_spread(&small);
        let s_reduced = time_averaged_spread(&reduced);
        pass &= s_reduced < s_small;
        detail.push(format!("{obs:?}: std dlr {s_reduced:.3e} vs enkf(P={SPREAD_SMALL_P}) {s_small:.3e}"));
    }
    outcome(pass, detail.join("; "))
}

type Criterion = fn() -> Result<Outcome>;

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, Criterion); 11] = [
        ("ac1", ac1),
        ("ac2", ac2),
        ("ac3", ac3),
        ("ac4", ac4),
        ("ac5", ac5),
        ("ac6", ac6),
        ("ac7", ac7),
        ("ac8", ac8),
        ("ac9", ac9),
        ("ac10a", ac10a),
        ("ac10b", ac10b),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name == f.as_str()) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match run() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} {} {detail} [{:.1}s]",
            name.to_uppercase(),
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
