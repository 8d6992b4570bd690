//! Study execution and the files each study writes.

use std::path::Path;
use std::time::Instant;

use lowrank_kbp::dlr::{reconstruct_cov, stiefel_defect, ReducedKb};
use lowrank_kbp::enkf::{run_dlr_enkf, ReducedEnsemble};
use lowrank_kbp::experiments::{
    self, compare_ranks, ensemble_consistency, initial_particles, poc_study, realize, time_averaged_spread,
    tracking_study, RankComparison, Scenario,
};
use lowrank_kbp::io::{indexed_header, write_matrix_bin, CsvWriter};
use lowrank_kbp::kbp::{run_enkf, run_kbp, sample_mean, ParticleStreams};
use lowrank_kbp::metrics::{self, StudyResult};
use lowrank_kbp::model::build_model;
use lowrank_kbp::{GaussianState, LinearAffineModel, LowRankState, Operator, RngPlan, StreamTag};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{FilterConfig, FilterKind, ModelConfig, RunConfig, StudyKind, REFERENCE_MAX_DIM};
use crate::error::{CliError, Result};
use crate::output::{create_dir, git_revision, sha256_hex, write_json, write_text, SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub dump_modes: bool,
}

/// Writes the provenance files, runs the study and writes its results.
pub fn execute(cfg: &RunConfig, dir: &Path, opts: RunOptions) -> Result<()> {
    let started = Instant::now();
    let resolved = cfg.to_toml();
    write_text(&dir.join("config.resolved.toml"), &resolved)?;
    let source = Source::new(cfg)?;
    let warnings = cfg.warnings();
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let filters: Vec<Value> = cfg
        .filter
        .iter()
        .enumerate()
        .map(|(i, f)| json!({"index": i, "dir": filter_dir(i, f), "filter": f}))
        .collect();
    write_json(
        &dir.join("metadata.json"),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "crate_version": env!("CARGO_PKG_VERSION"),
            "git_revision": git_revision(),
            "config_sha256": sha256_hex(&resolved),
            "seed": cfg.seed,
            "study": cfg.study.kind,
            "dim": source.dim(),
            "dt": cfg.discretization.dt,
            "t_end": cfg.discretization.t_end,
            "n_steps": cfg.n_steps(),
            "filters": filters,
            "warnings": warnings,
        }),
    )?;
    let plan = RngPlan::new(cfg.seed);
    let mut timings = Timings::default();
    let summary = match cfg.study.kind {
        StudyKind::Single => single(cfg, &source, &plan, dir, opts, &mut timings)?,
        StudyKind::RankSweep => rank_sweep(cfg, &source, &plan, dir, &mut timings)?,
        StudyKind::SigmaSweep => sigma_sweep(cfg, &plan, dir, &mut timings)?,
        StudyKind::Poc => poc(cfg, &plan, &mut timings)?,
    };
    for r in &summary.results {
        r.write_csv(dir.join(format!("summary_{}.csv", r.name)))?;
    }
    write_json(&dir.join("summary.json"), &summary)?;
    timings.total_seconds = started.elapsed().as_secs_f64();
    write_json(&dir.join("timings.json"), &timings)?;
    Ok(())
}

#[derive(Debug, Default, Serialize)]
struct Timings {
    total_seconds: f64,
    runs: Vec<Value>,
}

#[derive(Debug, Serialize)]
struct Summary {
    study: StudyKind,
    results: Vec<StudyResult>,
    extra: Value,
}

fn filter_dir(i: usize, f: &FilterConfig) -> String {
    format!("f{i}-{}", f.kind.label())
}

/// Where a replicate's model, initial law and data come from.
enum Source {
    Advection(experiments::AdvectionSetup),
    Fem(experiments::FemSetup),
    Custom { model: Box<LinearAffineModel>, ic: LowRankState },
}

impl Source {
    fn new(cfg: &RunConfig) -> Result<Self> {
        Ok(match &cfg.model {
            ModelConfig::Advection(m) => Source::Advection(cfg.advection_setup(m)),
            ModelConfig::Fem(m) => Source::Fem(cfg.fem_setup(m)),
            ModelConfig::Custom(c) => {
                let read = |p: &Path| lowrank_kbp::io::read_matrix_bin(p).map_err(|e| match e {
                    lowrank_kbp::Error::Io(io) => CliError::io(p, io),
                    e => e.into(),
                });
                let column = |p: &Path| -> Result<DVector<f64>> {
                    let m = read(p)?;
                    if m.ncols() != 1 {
                        return Err(CliError::Config(crate::config::ConfigError::new(
                            "model",
                            format!("{} must hold a single column", p.display()),
                        )));
                    }
                    Ok(m.column(0).into_owned())
                };
                let op = |p: &Path| read(p).map(|m| Operator::sparse_from_dense(&m));
                let mass = c.mass.as_deref().map(op).transpose()?;
                let model = build_model(op(&c.a)?, column(&c.f)?, op(&c.sigma)?, op(&c.h)?, op(&c.gamma)?, mass)?;
                let ic = LowRankState::new(column(&c.mean)?, read(&c.modes)?, read(&c.gram)?)?;
                Source::Custom { model: Box::new(model), ic }
            }
        })
    }

    fn dim(&self) -> usize {
        match self {
            Source::Advection(s) => s.d,
            Source::Fem(s) => s.config.nodes * (s.config.nodes - 1),
            Source::Custom { ic, .. } => ic.dim(),
        }
    }

    fn scenario(&self, cfg: &RunConfig, plan: &RngPlan, rep: u64) -> Result<Scenario> {
        Ok(match self {
            Source::Advection(s) => s.scenario(plan, rep)?,
            Source::Fem(s) => s.scenario(plan, rep)?.scenario,
            Source::Custom { model, ic } => realize(
                (**model).clone(),
                ic.clone(),
                plan,
                rep,
                cfg.discretization.dt,
                cfg.discretization.t_end,
            )?,
        })
    }
}

fn wnorm(w: Option<&Operator>, v: &DVector<f64>) -> f64 {
    w.map_or_else(|| v.norm(), |w| metrics::h_norm(w, v))
}

/// `t, m_0..m_{d-1}` every `stride` steps and at the final step.
struct MeanWriter {
    out: CsvWriter<std::io::BufWriter<std::fs::File>>,
    stride: usize,
    last: usize,
    dt: f64,
    row: Vec<f64>,
}

impl MeanWriter {
    fn create(path: &Path, d: usize, stride: usize, last: usize, dt: f64) -> lowrank_kbp::Result<Self> {
        let header = indexed_header("m", d);
        let refs: Vec<&str> = header.iter().map(String::as_str).collect();
        Ok(Self { out: CsvWriter::create(path, &refs)?, stride, last, dt, row: vec![0.0; d + 1] })
    }

    fn push(&mut self, n: usize, m: &DVector<f64>) -> lowrank_kbp::Result<()> {
        if n % self.stride == 0 || n == self.last {
            self.row[0] = n as f64 * self.dt;
            self.row[1..].copy_from_slice(m.as_slice());
            self.out.row(&self.row)?;
        }
        Ok(())
    }

    fn finish(self) -> lowrank_kbp::Result<()> {
        self.out.finish().map(|_| ())
    }
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = CsvWriter::create(path, header)?;
    for r in rows {
        w.row(r)?;
    }
    w.finish()?;
    Ok(())
}

const BASE_HEADER: [&str; 4] = ["t", "rmse", "trace_P", "mean_norm"];

/// Runs one filter on one replicate, writing its per-step files into `dir`.
/// Returns the per-step RMSE series.
#[allow(clippy::too_many_arguments)]
fn run_filter(
    cfg: &RunConfig,
    f: &FilterConfig,
    scn: &Scenario,
    plan: &RngPlan,
    rep: u64,
    dir: &Path,
    opts: RunOptions,
) -> Result<Vec<f64>> {
    let model = &scn.model;
    let d = model.dim();
    let dt = scn.dt();
    let w = model.weight();
    let n_steps = scn.n_steps();
    let mut means = MeanWriter::create(&dir.join(format!("mean_rep{rep}.csv")), d, cfg.study.output_every, n_steps, dt)?;
    let diag_path = dir.join(format!("diagnostics_rep{rep}.csv"));
    let rmse: Vec<f64> = match f.kind {
        FilterKind::Kbp => {
            let init = GaussianState::from_low_rank(&scn.ic);
            let (_, diags) = run_kbp(model, &init, &scn.obs, Some(&scn.signal), |n, s| means.push(n, &s.m))?;
            let rows: Vec<Vec<f64>> = diags.iter().map(|g| vec![g.t, g.rmse, g.trace_p, g.mean_norm]).collect();
            write_rows(&diag_path, &BASE_HEADER, &rows)?;
            diags.iter().map(|g| g.rmse).collect()
        }
        FilterKind::DlrKbp => run_dlr_kbp(f, scn, &mut means, &diag_path, dir, rep, opts)?,
        FilterKind::Enkf => {
            let p = f.particles.expect("resolved");
            let init = initial_particles(scn, plan, rep, p)?;
            let mut streams = ParticleStreams::new(plan, rep, p);
            let mut rows = Vec::with_capacity(n_steps + 1);
            run_enkf(model, &init, &scn.obs, &mut streams, None, |n, e| {
                let m = sample_mean(e)?;
                let spread: f64 = (0..e.len()).map(|k| wnorm(w, &(e.x.column(k) - &m)).powi(2)).sum();
                let rmse = metrics::ensemble_rmse(&e.x, &scn.signal[n], w);
                rows.push(vec![n as f64 * dt, rmse, spread / (e.len() - 1) as f64, wnorm(w, &m)]);
                means.push(n, &m)
            })?;
            write_rows(&diag_path, &BASE_HEADER, &rows)?;
            rows.iter().map(|r| r[1]).collect()
        }
        FilterKind::DlrEnkf => {
            let p = f.particles.expect("resolved");
            let r = f.rank.expect("resolved");
            let x0 = initial_particles(scn, plan, rep, p)?;
            let mut complement = plan.stream(StreamTag::Complement, rep, 0);
            let (init, _) = ReducedEnsemble::from_particles(&x0.x, w, r, &mut complement)?;
            let mut streams = ParticleStreams::new(plan, rep, p);
            let integrator = f.integrator.expect("resolved");
            let mut mean_norm = Vec::with_capacity(n_steps + 1);
            let (last, diags) = run_dlr_enkf(
                model,
                &init,
                &scn.obs,
                integrator,
                &mut streams,
                &mut complement,
                Some(&scn.signal),
                |n, e| {
                    mean_norm.push(wnorm(w, &e.u0));
                    means.push(n, &e.u0)
                },
            )?;
            let header = ["t", "rmse", "trace_P", "mean_norm", "trunc_err", "stiefel_defect", "dropped_cols"];
            let rows: Vec<Vec<f64>> = diags
                .iter()
                .zip(&mean_norm)
                .map(|(g, &mn)| vec![g.t, g.rmse_ensemble, g.trace_mhat, mn, g.trunc_err, g.stiefel_defect, g.dropped_cols])
                .collect();
            write_rows(&diag_path, &header, &rows)?;
            if opts.dump_modes {
                write_matrix_bin(dir.join(format!("modes_rep{rep}.lrkb")), &last.u)?;
                write_matrix_bin(dir.join(format!("coefficients_rep{rep}.lrkb")), &last.y)?;
                write_matrix_bin(dir.join(format!("mean_final_rep{rep}.lrkb")), &DMatrix::from_column_slice(d, 1, last.u0.as_slice()))?;
            }
            diags.iter().map(|g| g.rmse_ensemble).collect()
        }
    };
    means.finish()?;
    Ok(rmse)
}

/// Reduced moments, with errors against full-order moments advanced in
/// lockstep when the dimension allows it.
fn run_dlr_kbp(
    f: &FilterConfig,
    scn: &Scenario,
    means: &mut MeanWriter,
    diag_path: &Path,
    dir: &Path,
    rep: u64,
    opts: RunOptions,
) -> Result<Vec<f64>> {
    let model = &scn.model;
    let dt = scn.dt();
    let r = f.rank.expect("resolved");
    let mut run = ReducedKb::new(model, scn.ic.truncate(r)?, dt)?;
    let mut fom = (model.dim() <= REFERENCE_MAX_DIM).then(|| GaussianState::from_low_rank(&scn.ic));
    let header = [
        "t",
        "rmse",
        "trace_P",
        "mean_norm",
        "mean_err",
        "cov_err_frob",
        "bap",
        "stiefel_defect",
        "energy",
    ];
    let mut rows = Vec::with_capacity(scn.n_steps() + 1);
    for n in 0..=scn.n_steps() {
        let s = &run.state;
        let g = run.diagnostics();
        let (mean_err, cov_err, bap) = match &fom {
            Some(p) => (
                (&s.u0 - &p.m).norm(),
                (reconstruct_cov(&s.u, &s.my) - &p.p).norm(),
                metrics::best_rank_error(&p.p, r),
            ),
            None => (f64::NAN, f64::NAN, f64::NAN),
        };
        let rmse = metrics::rmse(&s.u0, s.my.trace(), &scn.signal[n]);
        rows.push(vec![g.t, rmse, g.trace_my, s.u0.norm(), mean_err, cov_err, bap, stiefel_defect(&s.u, None), g.energy]);
        means.push(n, &s.u0)?;
        if n == scn.n_steps() {
            break;
        }
        let dz = &scn.obs.dz[n];
        if let Some(p) = &mut fom {
            let m = lowrank_kbp::kbp::kb_mean_step(model, &p.m, &p.p, dz, dt).map_err(|e| e.at_step(n + 1))?;
            p.p = lowrank_kbp::kbp::riccati_step(model, &p.p, dt).map_err(|e| e.at_step(n + 1))?;
            p.m = m;
        }
        run.step(dz)?;
    }
    write_rows(diag_path, &header, &rows)?;
    if opts.dump_modes {
        let s = &run.state;
        write_matrix_bin(dir.join(format!("modes_rep{rep}.lrkb")), &s.u)?;
        write_matrix_bin(dir.join(format!("gram_rep{rep}.lrkb")), &s.my)?;
        write_matrix_bin(dir.join(format!("mean_final_rep{rep}.lrkb")), &DMatrix::from_column_slice(s.dim(), 1, s.u0.as_slice()))?;
    }
    Ok(rows.iter().map(|r| r[1]).collect())
}

struct ReplicateOutcome {
    rmse: Vec<Vec<f64>>,
    seconds: Vec<f64>,
}

fn single(
    cfg: &RunConfig,
    source: &Source,
    plan: &RngPlan,
    dir: &Path,
    opts: RunOptions,
    timings: &mut Timings,
) -> Result<Summary> {
    for (i, f) in cfg.filter.iter().enumerate() {
        create_dir(&dir.join(filter_dir(i, f)))?;
    }
    let pairs = consistency_pairs(cfg);
    let reps = cfg.study.replicates as u64;
    let outcomes: Vec<ReplicateOutcome> = (0..reps)
        .into_par_iter()
        .map(|rep| -> Result<ReplicateOutcome> {
            let scn = source.scenario(cfg, plan, rep)?;
            let mut out = ReplicateOutcome { rmse: Vec::new(), seconds: Vec::new() };
            for (i, f) in cfg.filter.iter().enumerate() {
                let t0 = Instant::now();
                out.rmse.push(run_filter(cfg, f, &scn, plan, rep, &dir.join(filter_dir(i, f)), opts)?);
                out.seconds.push(t0.elapsed().as_secs_f64());
            }
            for &(a, b) in &pairs {
                let (p, r) = (cfg.filter[b].particles.unwrap(), cfg.filter[b].rank.unwrap());
                let dist = ensemble_consistency(&scn, plan, rep, p, r)?;
                let rows: Vec<Vec<f64>> =
                    (0..dist.t.len()).map(|k| vec![dist.t[k], dist.distance[k], dist.relative[k]]).collect();
                write_rows(&dir.join(format!("l2p_f{a}_f{b}_rep{rep}.csv")), &["t", "distance", "relative"], &rows)?;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let dt = cfg.discretization.dt;
    let t_end = cfg.discretization.t_end;
    let mut results = Vec::new();
    let mut extra = Vec::new();
    for (i, f) in cfg.filter.iter().enumerate() {
        let series: Vec<Vec<f64>> = outcomes.iter().map(|o| o.rmse[i].clone()).collect();
        let irmse: Vec<f64> = series.iter().map(|s| RankComparison::irmse(s, dt, t_end)).collect();
        let x = f.rank.or(f.particles).unwrap_or(0) as f64;
        results.push(StudyResult::from_samples(format!("{}_irmse", filter_dir(i, f)), vec![x], &[irmse]));
        extra.push(json!({
            "filter": filter_dir(i, f),
            "rmse_spread": time_averaged_spread(&series),
        }));
        for (rep, o) in outcomes.iter().enumerate() {
            timings.runs.push(json!({"filter": filter_dir(i, f), "replicate": rep, "seconds": o.seconds[i]}));
        }
    }
    Ok(Summary { study: StudyKind::Single, results, extra: Value::Array(extra) })
}

/// `(enkf, dlr-enkf)` filter indices sharing a particle count, whose
/// particles are matched one to one.
fn consistency_pairs(cfg: &RunConfig) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (a, fa) in cfg.filter.iter().enumerate() {
        for (b, fb) in cfg.filter.iter().enumerate() {
            if fa.kind == FilterKind::Enkf
                && fb.kind == FilterKind::DlrEnkf
                && fa.particles == fb.particles
                && fb.integrator == Some(lowrank_kbp::enkf::Integrator::Bug)
            {
                out.push((a, b));
            }
        }
    }
    out
}

fn rank_sweep(cfg: &RunConfig, source: &Source, plan: &RngPlan, dir: &Path, timings: &mut Timings) -> Result<Summary> {
    let Source::Advection(setup) = source else { unreachable!("validated") };
    let ranks = &cfg.study.ranks;
    let scn = source.scenario(cfg, plan, 0)?;
    let cmp = compare_ranks(&scn, ranks, true)?;
    let mut header: Vec<String> =
        ["t", "fom_mean_norm", "fom_cov_norm", "rmse_fom", "rmse_open_loop"].iter().map(|s| s.to_string()).collect();
    for r in ranks {
        for k in ["mean_err", "cov_err", "bap", "rmse"] {
            header.push(format!("{k}_r{r}"));
        }
    }
    let stride = cfg.study.output_every;
    let rows: Vec<Vec<f64>> = (0..cmp.t.len())
        .filter(|&n| n % stride == 0 || n + 1 == cmp.t.len())
        .map(|n| {
            let mut row = vec![cmp.t[n], cmp.fom_mean_norm[n], cmp.fom_cov_norm[n], cmp.rmse_fom[n], cmp.rmse_open_loop[n]];
            for s in &cmp.ranks {
                row.extend([s.mean_err[n], s.cov_err[n], s.bap[n], s.rmse[n]]);
            }
            row
        })
        .collect();
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_rows(&dir.join("rank_sweep_rep0.csv"), &refs, &rows)?;

    let x: Vec<f64> = ranks.iter().map(|&r| r as f64).collect();
    let last = |v: &[f64]| vec![*v.last().unwrap()];
    let mut results = vec![
        StudyResult::from_samples("terminal_mean_err", x.clone(), &cmp.ranks.iter().map(|s| last(&s.mean_err)).collect::<Vec<_>>()),
        StudyResult::from_samples("terminal_cov_err", x.clone(), &cmp.ranks.iter().map(|s| last(&s.cov_err)).collect::<Vec<_>>()),
        StudyResult::from_samples("terminal_bap", x.clone(), &cmp.ranks.iter().map(|s| last(&s.bap)).collect::<Vec<_>>()),
    ];
    let tracking = tracking_study(setup, plan, cfg.study.replicates, ranks)?;
    results.push(StudyResult::from_samples("irmse", x.clone(), &tracking.dlr));

    for &r in ranks {
        let t0 = Instant::now();
        lowrank_kbp::dlr::run_reduced_kb(&scn.model, &scn.ic.truncate(r)?, &scn.obs, |_, _| Ok(()))?;
        timings.runs.push(json!({"filter": "dlr-kbp", "rank": r, "seconds": t0.elapsed().as_secs_f64()}));
    }
    let t0 = Instant::now();
    run_kbp(&scn.model, &GaussianState::from_low_rank(&scn.ic), &scn.obs, None, |_, _| Ok(()))?;
    timings.runs.push(json!({"filter": "kbp", "seconds": t0.elapsed().as_secs_f64()}));

    let extra = json!({
        "irmse_fom": tracking.mean_fom(),
        "irmse_open_loop": tracking.mean_open_loop(),
        "irmse_fom_replicates": tracking.fom,
        "irmse_open_loop_replicates": tracking.open_loop,
        "max_relative_mean_err": cmp.ranks.iter().map(|s| RankComparison::max_relative(&s.mean_err, &cmp.fom_mean_norm)).collect::<Vec<_>>(),
        "max_relative_cov_err": cmp.ranks.iter().map(|s| RankComparison::max_relative(&s.cov_err, &cmp.fom_cov_norm)).collect::<Vec<_>>(),
    });
    Ok(Summary { study: StudyKind::RankSweep, results, extra })
}

fn sigma_sweep(cfg: &RunConfig, plan: &RngPlan, dir: &Path, timings: &mut Timings) -> Result<Summary> {
    let ModelConfig::Advection(m) = &cfg.model else { unreachable!("validated") };
    let r = cfg.filter[0].rank.expect("resolved");
    let sigmas = &cfg.study.sigmas;
    let reps = cfg.study.replicates as u64;
    let jobs: Vec<(usize, u64)> = (0..sigmas.len()).flat_map(|k| (0..reps).map(move |j| (k, j))).collect();
    let runs: Vec<(RankComparison, f64)> = jobs
        .par_iter()
        .map(|&(k, j)| -> Result<_> {
            let t0 = Instant::now();
            let mut setup = cfg.advection_setup(m);
            setup.sigma = sigmas[k];
            let cmp = compare_ranks(&setup.scenario(plan, j)?, &[r], true)?;
            Ok((cmp, t0.elapsed().as_secs_f64()))
        })
        .collect::<Result<_>>()?;

    let first: Vec<&RankComparison> = jobs.iter().zip(&runs).filter(|((_, j), _)| *j == 0).map(|(_, (c, _))| c).collect();
    let mut header = vec!["t".to_string()];
    for k in 0..sigmas.len() {
        for name in ["mean_err", "cov_err", "bap", "rmse"] {
            header.push(format!("{name}_s{k}"));
        }
    }
    let stride = cfg.study.output_every;
    let len = first[0].t.len();
    let rows: Vec<Vec<f64>> = (0..len)
        .filter(|&n| n % stride == 0 || n + 1 == len)
        .map(|n| {
            let mut row = vec![first[0].t[n]];
            for c in &first {
                let s = &c.ranks[0];
                row.extend([s.mean_err[n], s.cov_err[n], s.bap[n], s.rmse[n]]);
            }
            row
        })
        .collect();
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_rows(&dir.join("sigma_sweep_rep0.csv"), &refs, &rows)?;

    let collect = |f: &dyn Fn(&RankComparison) -> f64| -> Vec<Vec<f64>> {
        (0..sigmas.len())
            .map(|k| jobs.iter().zip(&runs).filter(|((kk, _), _)| *kk == k).map(|(_, (c, _))| f(c)).collect())
            .collect()
    };
    let x = sigmas.clone();
    let results = vec![
        StudyResult::from_samples("max_relative_mean_err", x.clone(), &collect(&|c| {
            RankComparison::max_relative(&c.ranks[0].mean_err, &c.fom_mean_norm)
        })),
        StudyResult::from_samples("max_relative_cov_err", x.clone(), &collect(&|c| {
            RankComparison::max_relative(&c.ranks[0].cov_err, &c.fom_cov_norm)
        })),
        StudyResult::from_samples("terminal_cov_err", x.clone(), &collect(&|c| *c.ranks[0].cov_err.last().unwrap())),
        StudyResult::from_samples("terminal_bap", x, &collect(&|c| *c.ranks[0].bap.last().unwrap())),
    ];
    for (&(k, j), (_, secs)) in jobs.iter().zip(&runs) {
        timings.runs.push(json!({"sigma": sigmas[k], "replicate": j, "seconds": secs}));
    }
    Ok(Summary { study: StudyKind::SigmaSweep, results, extra: json!({"sigmas": sigmas, "rank": r}) })
}

fn poc(cfg: &RunConfig, plan: &RngPlan, timings: &mut Timings) -> Result<Summary> {
    let ModelConfig::Advection(m) = &cfg.model else { unreachable!("validated") };
    let t0 = Instant::now();
    let results = poc_study(&cfg.advection_setup(m), plan, cfg.study.replicates, &cfg.study.particles)?;
    timings.runs.push(json!({"study": "poc", "seconds": t0.elapsed().as_secs_f64()}));
    let slopes: Vec<Value> = results
        .iter()
        .map(|r| json!({"name": r.name, "slope": r.slope, "half_width": r.slope_half_width}))
        .collect();
    Ok(Summary { study: StudyKind::Poc, results, extra: json!({"slopes": slopes}) })
}
