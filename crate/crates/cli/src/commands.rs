//! The subcommands.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;

use rayon::prelude::*;
use serde_json::Value;

use qtraj::adaptive::{
    ideal_coefficient, povm_ideal_phase, povm_standard_phase, reconstruct_povm,
    reconstruct_povm_shared, run_phase_measurement_shared, PhasePovm, PhaseSampleLine,
    PhaseSampleSet, ReconstructedPovm, SharedPhaseSample,
};
use qtraj::detection::{
    effect_heterodyne, effect_homodyne, gaussian_effect_params, polygon_area,
    simulate_completed_measurement, wigner_contour, CompletedMeasurement, PovmEntry, PovmLabel,
    RecordFunctionals, COMPLETION_TIME,
};
use qtraj::dynamics::{evolve_master_at, LindbladModel, ModelJson};
use qtraj::fock::number_operator;
use qtraj::rng::trajectory_seed;
use qtraj::stats::mean_and_stderr;
use qtraj::trajectories::{
    ensemble_average, ensemble_density, run_ensemble, Scheme, TrajectorySettings, WeightedState,
};
use qtraj::{DensityMatrix, FockSpace, OperatorMatrix, StateVector, C64};

use crate::config::{
    parse_complex, parse_state, phase_input, phase_inputs, Format, PovmKind, RunConfig,
};
use crate::error::CliError;
use crate::output::Output;

/// Weight factor applied by the hidden `--corrupt-weights` debug flag.
const CORRUPTION_FACTOR: f64 = 1.25;
const MASTER_CHECK_NSIGMA: f64 = 3.0;

fn load_model(cfg: &RunConfig) -> Result<LindbladModel, CliError> {
    match &cfg.model {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let json: ModelJson = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            Ok(LindbladModel::try_from(json)?)
        }
        None => Ok(LindbladModel::damped_mode(FockSpace::new(cfg.nmax)?)),
    }
}

fn settings(cfg: &RunConfig, sample_times: Vec<f64>, keep_record: bool) -> TrajectorySettings {
    TrajectorySettings {
        scheme: cfg.scheme,
        strategy: cfg.method.strategy(),
        lo_amplitude: cfg.lo_amplitude,
        dt: cfg.dt,
        t_final: cfg.t_final,
        sample_times,
        keep_record,
        ..TrajectorySettings::default()
    }
}

pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let model = load_model(cfg)?;
    let space = model.space();
    let psi0 = parse_state(&cfg.state, space)?;
    let ctrl = cfg.controller()?;
    if cfg.completed {
        return simulate_completed(cfg, &psi0);
    }
    let runs = run_ensemble(
        &psi0,
        &model,
        &settings(cfg, Vec::new(), cfg.format == Format::Jsonl),
        &ctrl,
        cfg.n_traj,
        cfg.seed,
    )?;
    let number = number_operator(space);
    let mut out = Output::open(cfg)?;
    out.header(cfg)?;
    if cfg.format == Format::Csv {
        out.line("seed,weight,jumps,mean_n")?;
    }
    for r in &runs {
        match (&r.record, cfg.format) {
            (Some(rec), Format::Jsonl) => out.json_line(rec)?,
            _ => {
                let amps = r.final_state.state.amps();
                let n = amps.dotc(&(number.entries() * amps)).re;
                out.line(&format!(
                    "{},{},{},{}",
                    r.seed, r.final_state.weight, r.jumps, n
                ))?;
            }
        }
    }
    let finals: Vec<WeightedState> = runs.iter().map(|r| r.final_state.clone()).collect();
    let n_est = ensemble_average(&finals, &number)?;
    let weight_est = mean_and_stderr(&finals.iter().map(|s| s.weight).collect::<Vec<_>>());
    out.report(&format!(
        "trajectories {}  scheme {:?}  method {:?}  controller {}  t_final {}",
        cfg.n_traj, cfg.scheme, cfg.method, cfg.controller, cfg.t_final
    ));
    out.report(&format!(
        "mean photon number at t_final: {:.6} +- {:.6}",
        n_est.mean, n_est.stderr
    ));
    out.report(&format!(
        "mean weight: {:.6} +- {:.6}",
        weight_est.0, weight_est.1
    ));
    if cfg.scheme == Scheme::Jump {
        let jumps = mean_and_stderr(&runs.iter().map(|r| r.jumps as f64).collect::<Vec<_>>());
        let total: usize = runs.iter().map(|r| r.jumps).sum();
        out.report(&format!(
            "jumps: {total} total, {:.4} +- {:.4} per trajectory",
            jumps.0, jumps.1
        ));
    }
    let warned = runs.iter().filter(|r| r.truncation_warning).count();
    if warned > 0 {
        out.report(&format!(
            "warning: {warned} trajectories reached the top Fock level; consider a larger --nmax"
        ));
    }
    out.finish()
}

fn simulate_completed(cfg: &RunConfig, psi0: &StateVector) -> Result<(), CliError> {
    if cfg.model.is_some() {
        return Err(CliError::Config(
            "completed measurements use the freely damped mode; drop --model".into(),
        ));
    }
    if cfg.format != Format::Jsonl {
        return Err(CliError::Config(
            "completed measurements are written as jsonl".into(),
        ));
    }
    let ctrl = cfg.controller()?;
    let samples: Vec<CompletedMeasurement> = (0..cfg.n_traj as u64)
        .into_par_iter()
        .map(|i| {
            simulate_completed_measurement(
                psi0,
                &ctrl,
                cfg.dt,
                cfg.t_final,
                trajectory_seed(cfg.seed, i),
            )
        })
        .collect::<Result<_, _>>()?;
    let mut out = Output::open(cfg)?;
    out.header(cfg)?;
    for s in &samples {
        out.json_line(s)?;
    }
    let n = samples.len() as f64;
    let mean_a = samples.iter().map(|s| s.a * s.weight).sum::<C64>() / n;
    let mean_w = samples.iter().map(|s| s.weight).sum::<f64>() / n;
    let max_s = samples.iter().map(|s| s.b.norm()).fold(0.0, f64::max);
    out.report(&format!(
        "completed measurements {}  controller {}  t_final {}",
        samples.len(),
        cfg.controller,
        cfg.t_final
    ));
    out.report(&format!(
        "weighted mean A: {:.6} {:+.6}i  mean weight {mean_w:.6}  max |B| {max_s:.4}",
        mean_a.re, mean_a.im
    ));
    out.finish()
}

pub fn master_check(cfg: &RunConfig) -> Result<(), CliError> {
    let model = load_model(cfg)?;
    let psi0 = parse_state(&cfg.state, model.space())?;
    let ctrl = cfg.controller()?;
    let mut times = cfg.times.clone();
    times.push(cfg.t_final);
    times.sort_by(f64::total_cmp);
    times.dedup();
    let runs = run_ensemble(
        &psi0,
        &model,
        &settings(cfg, times.clone(), false),
        &ctrl,
        cfg.n_traj,
        cfg.seed,
    )?;
    let exact = evolve_master_at(&DensityMatrix::from_state(&psi0)?, &model, &times, cfg.dt)?;
    let mut out = Output::open(cfg)?;
    out.header(cfg)?;
    let mut ok = true;
    out.line("t,i,j,dev_re,dev_im,stderr_re,stderr_im")?;
    let mut summary = Vec::new();
    for (k, t) in times.iter().enumerate() {
        let mut samples: Vec<WeightedState> = runs.iter().map(|r| r.snapshots[k].clone()).collect();
        if cfg.corrupt_weights {
            for s in &mut samples {
                s.weight *= CORRUPTION_FACTOR;
            }
        }
        let est = ensemble_density(&samples)?;
        let reference = exact[k].entries();
        let d = reference.nrows();
        for j in 0..d {
            for i in 0..d {
                let dev = est.mean[(i, j)] - reference[(i, j)];
                out.line(&format!(
                    "{t},{i},{j},{:.3e},{:.3e},{:.3e},{:.3e}",
                    dev.re,
                    dev.im,
                    est.stderr_re[(i, j)],
                    est.stderr_im[(i, j)]
                ))?;
            }
        }
        let cmp = est.compare(reference, 1e-12);
        let pass = cmp.max_deviation <= MASTER_CHECK_NSIGMA * cmp.max_stderr + 1e-12;
        ok &= pass;
        summary.push(format!(
            "t={t}: max |dev| {:.3e}  max stderr {:.3e}  worst element |dev|/stderr {:.2}  {}",
            cmp.max_deviation,
            cmp.max_stderr,
            cmp.worst_ratio,
            if pass { "ok" } else { "FAIL" }
        ));
    }
    for s in &summary {
        out.report(s);
    }
    out.report(&format!(
        "master-check {} ({} trajectories, pass iff max |dev| <= {MASTER_CHECK_NSIGMA} x max stderr at every time)",
        if ok { "PASS" } else { "FAIL" },
        cfg.n_traj
    ));
    out.finish()?;
    if ok {
        Ok(())
    } else {
        Err(CliError::Consistency(
            "ensemble disagrees with the master equation".into(),
        ))
    }
}

pub fn povm(cfg: &RunConfig) -> Result<(), CliError> {
    if !cfg.reconstruct.is_empty() {
        return povm_reconstruct(cfg);
    }
    let kind = cfg
        .kind
        .ok_or_else(|| CliError::Config("povm needs --kind or --reconstruct".into()))?;
    match kind {
        PovmKind::Ideal | PovmKind::Standard => {
            let povm = if kind == PovmKind::Ideal {
                povm_ideal_phase(cfg.nbins)?
            } else {
                povm_standard_phase(cfg.nbins)?
            };
            let mut out = Output::open(cfg)?;
            out.header(cfg)?;
            out.json_document(&povm.entries())?;
            let (kappa, _) = ideal_coefficient(&exact(povm.clone()))?;
            out.report(&format!("{kind:?} phase POVM, {} bins", cfg.nbins));
            out.report(&format!(
                "completeness residual: {:.3e}",
                povm.completeness_residual()
            ));
            out.report(&format!(
                "coefficient of the ideal POVM: {kappa:.6} (sqrt(pi)/2 = {:.6})",
                PI.sqrt() / 2.0
            ));
            out.finish()
        }
        PovmKind::Homodyne => grid_povm(cfg, false),
        PovmKind::Heterodyne => grid_povm(cfg, true),
    }
}

/// An analytic POVM in the shape of a reconstruction, with zero errors.
fn exact(povm: PhasePovm) -> ReconstructedPovm {
    let n = povm.nbins();
    ReconstructedPovm {
        povm,
        stderr: vec![[0.0; 4]; n],
        completeness: [0.0; 4],
        completeness_stderr: [0.0; 4],
        inversion_residual: 0.0,
    }
}

/// Midpoint-rule POVM on a grid: `E(X) dX` for homodyne, `E(A) d^2A` for
/// heterodyne.
fn grid_povm(cfg: &RunConfig, heterodyne: bool) -> Result<(), CliError> {
    let space = FockSpace::new(cfg.nmax)?;
    let n = cfg.nbins;
    let half = match cfg.xmax {
        Some(w) => w,
        // covers the support of the effects that matter for n <= nmax
        None if heterodyne => (cfg.nmax as f64).sqrt() + 3.0,
        None => 2.0 * (cfg.nmax as f64).sqrt(),
    };
    let h = 2.0 * half / n as f64;
    let node = |k: usize| -half + (k as f64 + 0.5) * h;
    let mut entries = Vec::new();
    let mut total = OperatorMatrix::zeros(space);
    if heterodyne {
        for i in 0..n {
            for j in 0..n {
                let a = C64::new(node(i), node(j));
                let e = effect_heterodyne(a, space)?.scale(C64::new(h * h, 0.0));
                total = total.add(&e)?;
                entries.push(PovmEntry::new(PovmLabel::Amplitude(a), &e));
            }
        }
    } else {
        let phi = match cfg.controller()? {
            qtraj::adaptive::PhaseController::Constant { phase } => phase,
            other => {
                return Err(CliError::Config(format!(
                    "homodyne POVMs need a constant phase, got {other}"
                )))
            }
        };
        for k in 0..n {
            let e = effect_homodyne(node(k), phi, space)?.scale(C64::new(h, 0.0));
            total = total.add(&e)?;
            entries.push(PovmEntry::new(PovmLabel::Quadrature(node(k)), &e));
        }
    }
    let residual = |dim: usize| {
        let m = total.entries();
        let mut worst = 0.0f64;
        for i in 0..dim {
            for j in 0..dim {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((m[(i, j)] - target).norm());
            }
        }
        worst
    };
    let mut out = Output::open(cfg)?;
    out.header(cfg)?;
    out.json_document(&entries)?;
    out.report(&format!(
        "{} POVM: {} elements on [-{half}, {half}]{}, nmax {}",
        if heterodyne { "heterodyne" } else { "homodyne" },
        entries.len(),
        if heterodyne { "^2" } else { "" },
        cfg.nmax
    ));
    out.report(&format!(
        "completeness residual: {:.3e} on n <= {}, {:.3e} on the full space",
        residual(cfg.nmax / 2 + 1),
        cfg.nmax / 2,
        residual(space.dim())
    ));
    out.finish()
}

fn read_jsonl(path: &std::path::Path) -> Result<(Option<Value>, Vec<Value>), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut config = None;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line)
            .map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        match v {
            Value::Object(mut m) if m.contains_key("config") => config = m.remove("config"),
            v => rows.push(v),
        }
    }
    Ok((config, rows))
}

fn povm_reconstruct(cfg: &RunConfig) -> Result<(), CliError> {
    let mut ids: Vec<String> = Vec::new();
    let mut lines: Vec<PhaseSampleLine> = Vec::new();
    for path in &cfg.reconstruct {
        for v in read_jsonl(path)?.1 {
            let line: PhaseSampleLine = serde_json::from_value(v)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            if !ids.contains(&line.state) {
                ids.push(line.state.clone());
            }
            lines.push(line);
        }
    }
    let states: Vec<StateVector> = ids
        .iter()
        .map(|id| phase_input(id))
        .collect::<Result<_, _>>()?;
    let index: HashMap<&str, usize> = ids
        .iter()
        .enumerate()
        .map(|(k, id)| (id.as_str(), k))
        .collect();

    // records shared by every input (as written by `adaptive`) keep their pairing
    let mut by_seed: Vec<(u64, f64, Vec<Option<f64>>)> = Vec::new();
    let mut seed_pos: HashMap<u64, usize> = HashMap::new();
    let mut shared = true;
    for l in &lines {
        let pos = *seed_pos.entry(l.seed).or_insert_with(|| {
            by_seed.push((l.seed, l.phi, vec![None; ids.len()]));
            by_seed.len() - 1
        });
        let (_, phi, weights) = &mut by_seed[pos];
        let slot = &mut weights[index[l.state.as_str()]];
        shared &= slot.is_none() && *phi == l.phi;
        *slot = Some(l.weight);
    }
    shared &= by_seed.iter().all(|s| s.2.iter().all(Option::is_some));
    let rec = if shared {
        let samples: Vec<SharedPhaseSample> = by_seed
            .iter()
            .map(|(seed, phi, w)| SharedPhaseSample {
                phi: *phi,
                a: C64::from_polar(1.0, *phi),
                weights: w.iter().map(|x| x.unwrap_or(0.0)).collect(),
                seed: *seed,
            })
            .collect();
        reconstruct_povm_shared(&states, &samples, cfg.nbins)?
    } else {
        let sets: Vec<PhaseSampleSet> = states
            .iter()
            .enumerate()
            .map(|(k, s)| PhaseSampleSet {
                state: s.clone(),
                samples: lines
                    .iter()
                    .filter(|l| index[l.state.as_str()] == k)
                    .map(|l| (l.phi, l.weight))
                    .collect(),
            })
            .collect();
        reconstruct_povm(&sets, cfg.nbins)?
    };
    let (kappa, kse) = ideal_coefficient(&rec)?;
    let mut out = Output::open(cfg)?;
    out.header(cfg)?;
    out.json_document(&rec.povm.entries())?;
    out.report(&format!(
        "reconstructed {} bins from {} samples over inputs [{}] ({} records)",
        cfg.nbins,
        lines.len(),
        ids.join(", "),
        if shared { "shared" } else { "independent" }
    ));
    let c = rec.completeness;
    let cs = rec.completeness_stderr;
    out.report(&format!(
        "completeness residual (00, 11, Re 01, Im 01): {:.2e}+-{:.1e} {:.2e}+-{:.1e} {:.2e}+-{:.1e} {:.2e}+-{:.1e}",
        c[0], cs[0], c[1], cs[1], c[2], cs[2], c[3], cs[3]
    ));
    out.report(&format!(
        "inversion residual: {:.3e}",
        rec.inversion_residual
    ));
    out.report(&format!(
        "coefficient of the ideal POVM: {kappa:.4} +- {kse:.4}"
    ));
    out.report(&format!(
        "max deviation in standard errors: {:.2} from ideal, {:.2} from standard",
        rec.max_deviation_sigma(&povm_ideal_phase(cfg.nbins)?),
        rec.max_deviation_sigma(&povm_standard_phase(cfg.nbins)?)
    ));
    out.finish()
}

pub fn wigner(cfg: &RunConfig) -> Result<(), CliError> {
    let (f, source) = match &cfg.record {
        Some(path) => {
            let (header, rows) = read_jsonl(path)?;
            let row = rows.into_iter().nth(cfg.record_index).ok_or_else(|| {
                CliError::Config(format!(
                    "{} has no record {}",
                    path.display(),
                    cfg.record_index
                ))
            })?;
            let m: CompletedMeasurement = serde_json::from_value(row)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let t = header
                .as_ref()
                .and_then(|h| h.get("t_final"))
                .and_then(Value::as_f64)
                .unwrap_or(COMPLETION_TIME);
            (
                RecordFunctionals::new(m.a, m.b, t),
                format!("record {} of {}", cfg.record_index, path.display()),
            )
        }
        None => {
            let r = parse_complex(cfg.r.as_deref().unwrap_or("0,0"), "R")?;
            let s = parse_complex(cfg.s.as_deref().unwrap_or("0,0"), "S")?;
            (
                RecordFunctionals::new(r, s, cfg.t_final),
                "flags".to_string(),
            )
        }
    };
    let g = gaussian_effect_params(&f)?;
    let points = wigner_contour(&g, cfg.npoints)?;
    let area = polygon_area(&points);
    let summary = format!(
        "R={} S={} t={} theta={} x={} y={} vx={} vy={} area={}",
        f.r, f.s, f.t, g.theta, g.x, g.y, g.vx, g.vy, area
    );
    let mut out = Output::open(cfg)?;
    out.header(cfg)?;
    out.line(&format!("# {summary}"))?;
    out.line("q,p")?;
    for (q, p) in &points {
        out.line(&format!("{q},{p}"))?;
    }
    out.report(&format!("contour from {source}: {summary}"));
    out.report(&format!(
        "polygon area {area:.6} (ellipse area pi = {PI:.6})"
    ));
    out.finish()
}

pub fn adaptive(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.t_final != COMPLETION_TIME {
        return Err(CliError::Config(format!(
            "phase measurements run to t = {COMPLETION_TIME}; got t_final = {}",
            cfg.t_final
        )));
    }
    if cfg.scheme != Scheme::Diffusive {
        return Err(CliError::Config(
            "phase measurements use the diffusive scheme".into(),
        ));
    }
    let inputs = phase_inputs(&cfg.state)?;
    let states: Vec<StateVector> = inputs.iter().map(|(_, s)| s.clone()).collect();
    let ctrl = cfg.controller()?;
    let samples: Vec<SharedPhaseSample> = (0..cfg.n_traj as u64)
        .into_par_iter()
        .map(|i| run_phase_measurement_shared(&states, &ctrl, cfg.dt, trajectory_seed(cfg.seed, i)))
        .collect::<Result<_, _>>()?;
    let mut out = Output::open(cfg)?;
    out.header(cfg)?;
    for s in &samples {
        for (k, (id, _)) in inputs.iter().enumerate() {
            out.json_line(&PhaseSampleLine {
                phi: s.phi,
                weight: s.weights[k],
                state: id.clone(),
                seed: s.seed,
            })?;
        }
    }
    out.report(&format!(
        "{} phase measurements with controller {} on {} input(s)",
        samples.len(),
        cfg.controller,
        inputs.len()
    ));
    if cfg.state == "tomographic" {
        let rec = reconstruct_povm_shared(&states, &samples, cfg.nbins)?;
        let (kappa, kse) = ideal_coefficient(&rec)?;
        out.report(&format!(
            "{}-bin reconstruction: coefficient of the ideal POVM {kappa:.4} +- {kse:.4}; max deviation from ideal {:.2} standard errors",
            cfg.nbins,
            rec.max_deviation_sigma(&povm_ideal_phase(cfg.nbins)?)
        ));
    }
    out.finish()
}
