//! Stochastic unravelings of the master equation.
//!
//! Jump schemes detect `c + gamma` photons one time step at a time. Records
//! can be drawn three ways:
//!
//! * method A: outcomes with their actual probabilities, normalized states;
//! * method B: every outcome equally likely (only by exhaustive enumeration,
//!   since a fair coin per step breaks the small-jump-probability guard);
//! * method C: outcomes from a fixed ostensible distribution, linear
//!   unnormalized states whose squared norm is the importance weight.
//!
//! The diffusive scheme is the large local-oscillator limit of method C.
//! The ostensible record is white noise with variance `dt`, and the state
//! obeys `d psi_bar = [e^{-i Phi} dW c - dt (iH + c^dag c / 2)] psi_bar`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::PhaseController;
use crate::detection::RecordFunctionals;
use crate::dynamics::{LindbladModel, MeasurementOperatorPair};
use crate::error::{Error, Result};
use crate::fock::{OperatorMatrix, StateVector, C64, TOP_LEVEL_WARN};
use crate::linalg;
use crate::rng::{trajectory_rng, trajectory_seed};

/// Largest probability of a click in one step.
pub const MAX_JUMP_PROBABILITY: f64 = 0.1;
/// Longest record that [`enumerate_records`] will expand.
pub const MAX_ENUMERATION_STEPS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Jump,
    Diffusive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SamplingStrategy {
    PhysicalA,
    UniformB,
    /// Click probability `lambda1` per step; `None` means `|gamma|^2 dt`.
    OstensibleC {
        lambda1: Option<f64>,
    },
}

impl SamplingStrategy {
    pub fn tag(&self) -> &'static str {
        match self {
            SamplingStrategy::PhysicalA => "A",
            SamplingStrategy::UniformB => "B",
            SamplingStrategy::OstensibleC { .. } => "C",
        }
    }
}

/// How the linear diffusive equation is integrated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiffusiveStepper {
    /// Exact factorized step for the freely damped mode, Euler otherwise.
    Auto,
    Euler,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySettings {
    pub scheme: Scheme,
    pub strategy: SamplingStrategy,
    /// `|gamma|` for jump schemes; the phase comes from the controller.
    pub lo_amplitude: f64,
    pub dt: f64,
    pub t_final: f64,
    /// Times (multiples of `dt`) at which to keep the state.
    pub sample_times: Vec<f64>,
    pub keep_record: bool,
    pub diffusive_stepper: DiffusiveStepper,
}

impl Default for TrajectorySettings {
    fn default() -> Self {
        Self {
            scheme: Scheme::Jump,
            strategy: SamplingStrategy::PhysicalA,
            lo_amplitude: 0.0,
            dt: 1e-3,
            t_final: 1.0,
            sample_times: Vec::new(),
            keep_record: false,
            diffusive_stepper: DiffusiveStepper::Auto,
        }
    }
}

/// Number of steps of length `dt` in `t`; `t` must be a multiple of `dt`.
pub fn step_count(dt: f64, t: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "dt must be positive, got {dt}"
        )));
    }
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "time must be non-negative, got {t}"
        )));
    }
    let n = (t / dt).round();
    if (n * dt - t).abs() > 1e-9 * t.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "time {t} is not a multiple of dt = {dt}"
        )));
    }
    Ok(n as usize)
}

impl TrajectorySettings {
    fn validate(&self) -> Result<(usize, Vec<usize>)> {
        let nsteps = step_count(self.dt, self.t_final)?;
        let mut samples = Vec::with_capacity(self.sample_times.len());
        for &t in &self.sample_times {
            let k = step_count(self.dt, t)?;
            if k > nsteps {
                return Err(Error::InvalidArgument(format!(
                    "sample time {t} is after t_final = {}",
                    self.t_final
                )));
            }
            samples.push(k);
        }
        Ok((nsteps, samples))
    }
}

/// A normalized state with its importance weight.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedState {
    pub state: StateVector,
    pub weight: f64,
}

/// Serialized measurement record: one JSON line per trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub seed: u64,
    pub scheme: Scheme,
    pub method: String,
    pub dt: f64,
    /// Indices of the steps in which a click was recorded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub events: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dw: Option<Vec<f64>>,
    /// Local-oscillator phase in each step; omitted for a constant phase.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phases: Option<Vec<f64>>,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub seed: u64,
    pub final_state: WeightedState,
    pub snapshots: Vec<WeightedState>,
    /// `R`, `S` at the end of a diffusive run (zero for jump runs).
    pub functionals: RecordFunctionals,
    pub jumps: usize,
    pub record: Option<TrajectoryRecord>,
    /// Set if the top Fock level ever held more than `1e-6` of the norm.
    pub truncation_warning: bool,
}

/// Where outcomes come from: fresh randomness or a stored record.
enum Driver<'a> {
    Random(&'a mut dyn RngCore),
    Replay {
        events: &'a [u64],
        dw: &'a [f64],
        cursor: usize,
    },
}

impl Driver<'_> {
    fn click(&mut self, step: usize, probability: f64) -> bool {
        match self {
            Driver::Random(rng) => rng.random::<f64>() < probability,
            Driver::Replay { events, cursor, .. } => {
                if events.get(*cursor) == Some(&(step as u64)) {
                    *cursor += 1;
                    true
                } else {
                    false
                }
            }
        }
    }

    fn increment(&mut self, step: usize, dt: f64) -> Result<f64> {
        match self {
            Driver::Random(rng) => Ok(wiener_increment(*rng, dt)),
            Driver::Replay { dw, .. } => dw.get(step).copied().ok_or_else(|| {
                Error::InvalidArgument(format!("record has no increment for step {step}"))
            }),
        }
    }
}

/// `sqrt(dt) N(0, 1)`.
pub fn wiener_increment<R: Rng + ?Sized>(rng: &mut R, dt: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    dt.sqrt() * z
}

/// Unnormalized state stored as `amps * 2^exponent` so that long linear runs
/// neither overflow nor underflow.
#[derive(Clone, Debug)]
struct ScaledVector {
    amps: DVector<C64>,
    exponent: i32,
}

impl ScaledVector {
    fn new(amps: DVector<C64>) -> Self {
        Self { amps, exponent: 0 }
    }

    fn norm_sqr(&self) -> f64 {
        self.amps.norm_squared()
    }

    /// Keeps the stored norm near one with exact power-of-two rescaling.
    fn rebalance(&mut self, n2: f64) {
        if n2 > 0.0 && !(1e-60..=1e60).contains(&n2) {
            let shift = (n2.log2() / 2.0).round() as i32;
            self.amps.scale_mut(2f64.powi(-shift));
            self.exponent += shift;
        }
    }

    fn weight(&self) -> f64 {
        self.norm_sqr() * 2f64.powi(2 * self.exponent)
    }

    fn snapshot(&self, space: crate::fock::FockSpace) -> Result<WeightedState> {
        let n2 = self.norm_sqr();
        let state = StateVector::from_vector(space, self.amps.clone());
        let state = if n2 > 0.0 { state.normalize()? } else { state };
        Ok(WeightedState {
            state,
            weight: self.weight(),
        })
    }
}

fn top_fraction(v: &DVector<C64>, n2: f64) -> f64 {
    if n2 > 0.0 {
        v[v.len() - 1].norm_sqr() / n2
    } else {
        0.0
    }
}

/// Propagators for one jump scheme at fixed `gamma` and `dt`.
struct JumpEngine {
    /// `exp(-dt K/2) (c + gamma) exp(-dt K/2)`: the click occurs mid-step, so
    /// a click costs no no-jump evolution. Equal to `c + gamma` to first order
    /// and exact on coherent states of the damped mode.
    jump: DMatrix<C64>,
    /// `exp(-dt K)`, `K = iH + (c gamma* - c^dag gamma)/2 + (c^dag + gamma*)(c + gamma)/2`
    no_jump: DMatrix<C64>,
    dt: f64,
    linear: Option<LinearJump>,
    buf: DVector<C64>,
}

struct LinearJump {
    lambda1: f64,
    jump_scale: C64,
    no_jump_scale: f64,
}

impl JumpEngine {
    fn new(model: &LindbladModel, gamma: C64, dt: f64, strategy: SamplingStrategy) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "dt must be positive, got {dt}"
            )));
        }
        let c = model.single_collapse()?.entries();
        let d = model.space().dim();
        let id = DMatrix::<C64>::identity(d, d);
        let jump = c + &id * gamma;
        let k = model.hamiltonian().entries() * C64::new(0.0, 1.0)
            + (c * gamma.conj() - c.adjoint() * gamma) * C64::new(0.5, 0.0)
            + jump.adjoint() * &jump * C64::new(0.5, 0.0);
        let half = linalg::expm(&(k * C64::new(-dt / 2.0, 0.0)));
        let no_jump = &half * &half;
        let jump = &half * jump * &half;
        let linear = match strategy {
            SamplingStrategy::PhysicalA => None,
            SamplingStrategy::UniformB => {
                return Err(Error::InvalidArgument(
                    "uniform sampling is available only through enumerate_records".into(),
                ))
            }
            SamplingStrategy::OstensibleC { lambda1 } => {
                let lambda1 = match lambda1 {
                    Some(l) => l,
                    None if gamma.norm() == 0.0 => return Err(Error::ZeroGamma),
                    None => gamma.norm_sqr() * dt,
                };
                if !(lambda1 > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "ostensible click probability must be positive, got {lambda1}"
                    )));
                }
                if lambda1 >= MAX_JUMP_PROBABILITY {
                    return Err(Error::StepSize(format!(
                        "ostensible click probability {lambda1} per step"
                    )));
                }
                let phase = if gamma.norm() > 0.0 {
                    C64::from_polar(1.0, -gamma.arg())
                } else {
                    C64::new(1.0, 0.0)
                };
                Some(LinearJump {
                    lambda1,
                    jump_scale: phase * (dt / lambda1).sqrt(),
                    no_jump_scale: 1.0 / (1.0 - lambda1).sqrt(),
                })
            }
        };
        Ok(Self {
            jump,
            no_jump,
            dt,
            linear,
            buf: DVector::zeros(d),
        })
    }

    /// One step of method A on a normalized vector; returns whether it clicked.
    fn step_physical(
        &mut self,
        psi: &mut DVector<C64>,
        step: usize,
        driver: &mut Driver,
    ) -> Result<bool> {
        self.buf
            .gemv(C64::new(1.0, 0.0), &self.jump, psi, C64::new(0.0, 0.0));
        let p = self.dt * self.buf.norm_squared();
        if p >= MAX_JUMP_PROBABILITY {
            return Err(Error::StepSize(format!("click probability {p} per step")));
        }
        let click = driver.click(step, p);
        if click {
            if p == 0.0 {
                return Err(Error::ZeroJumpRate);
            }
        } else {
            self.buf
                .gemv(C64::new(1.0, 0.0), &self.no_jump, psi, C64::new(0.0, 0.0));
        }
        let n = self.buf.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroNorm);
        }
        psi.copy_from(&self.buf);
        psi.unscale_mut(n);
        Ok(click)
    }

    /// One step of method C on an unnormalized vector.
    fn step_linear(
        &mut self,
        psi: &mut DVector<C64>,
        step: usize,
        driver: &mut Driver,
    ) -> Result<bool> {
        let lin = self.linear.as_ref().expect("linear engine");
        let click = driver.click(step, lin.lambda1);
        if click {
            self.buf
                .gemv(lin.jump_scale, &self.jump, psi, C64::new(0.0, 0.0));
            if self.buf.norm_squared() == 0.0 && psi.norm_squared() > 0.0 {
                return Err(Error::ZeroJumpRate);
            }
        } else {
            self.buf.gemv(
                C64::new(lin.no_jump_scale, 0.0),
                &self.no_jump,
                psi,
                C64::new(0.0, 0.0),
            );
        }
        psi.copy_from(&self.buf);
        Ok(click)
    }
}

/// Integrator for the linear diffusive equation.
enum DiffusiveKernel {
    /// `exp(-N dt/2) exp(k dW e^{-i phi} a - e^{-2i phi} a^2 k^2 dt/2)` with
    /// `k^2 dt = 1 - e^{-dt}`. For `H = 0`, `c = a` a run of these steps equals
    /// the closed-form solution with the accumulated `R`, `S`.
    FreeDamping {
        kappa: f64,
        sqrt1: Vec<f64>,
        sqrt2: Vec<f64>,
        decay: Vec<f64>,
        term: Vec<C64>,
        next: Vec<C64>,
    },
    Euler {
        c: DMatrix<C64>,
        k: DMatrix<C64>,
        buf: DVector<C64>,
    },
}

impl DiffusiveKernel {
    fn new(model: &LindbladModel, dt: f64, stepper: DiffusiveStepper) -> Result<Self> {
        let c = model.single_collapse()?.entries().clone();
        let d = model.space().dim();
        if stepper == DiffusiveStepper::Auto && model.is_free_damping() {
            return Ok(DiffusiveKernel::FreeDamping {
                kappa: (-(-dt).exp_m1() / dt).sqrt(),
                sqrt1: (0..d).map(|n| ((n + 1) as f64).sqrt()).collect(),
                sqrt2: (0..d)
                    .map(|n| (((n + 1) * (n + 2)) as f64).sqrt())
                    .collect(),
                decay: (0..d).map(|n| (-(n as f64) * dt / 2.0).exp()).collect(),
                term: vec![C64::new(0.0, 0.0); d],
                next: vec![C64::new(0.0, 0.0); d],
            });
        }
        let k = model.hamiltonian().entries() * C64::new(0.0, 1.0)
            + c.adjoint() * &c * C64::new(0.5, 0.0);
        Ok(DiffusiveKernel::Euler {
            c,
            k,
            buf: DVector::zeros(d),
        })
    }

    fn step(&mut self, psi: &mut DVector<C64>, phi: f64, dw: f64, dt: f64) {
        match self {
            DiffusiveKernel::FreeDamping {
                kappa,
                sqrt1,
                sqrt2,
                decay,
                term,
                next,
            } => {
                let e = C64::from_polar(1.0, -phi);
                let x = e * (*kappa * dw);
                let y = e * e * (-*kappa * *kappa * dt / 2.0);
                let d = psi.len();
                let v = psi.as_mut_slice();
                term.copy_from_slice(v);
                let total: f64 = v.iter().map(|z| z.norm_sqr()).sum();
                for order in 1..=2 * d {
                    let inv = 1.0 / order as f64;
                    let mut size = 0.0;
                    for n in 0..d {
                        let mut z = C64::new(0.0, 0.0);
                        if n + 1 < d {
                            z += x * (sqrt1[n] * term[n + 1]);
                        }
                        if n + 2 < d {
                            z += y * (sqrt2[n] * term[n + 2]);
                        }
                        z *= inv;
                        next[n] = z;
                        size += z.norm_sqr();
                    }
                    for n in 0..d {
                        v[n] += next[n];
                    }
                    std::mem::swap(term, next);
                    if size <= 1e-36 * total {
                        break;
                    }
                }
                for n in 0..d {
                    v[n] *= decay[n];
                }
            }
            DiffusiveKernel::Euler { c, k, buf } => {
                let e = C64::from_polar(dw, -phi);
                buf.gemv(e, c, psi, C64::new(0.0, 0.0));
                buf.gemv(C64::new(-dt, 0.0), k, psi, C64::new(1.0, 0.0));
                *psi += &*buf;
            }
        }
    }
}

fn jump_gamma(settings: &TrajectorySettings, controller: &PhaseController) -> Result<C64> {
    match controller {
        PhaseController::Constant { phase } => Ok(C64::from_polar(settings.lo_amplitude, *phase)),
        other => Err(Error::InvalidArgument(format!(
            "jump schemes need a constant local-oscillator phase, got {other}"
        ))),
    }
}

/// Simulates one trajectory from `psi0`, seeded with `seed`.
pub fn run_trajectory(
    psi0: &StateVector,
    model: &LindbladModel,
    settings: &TrajectorySettings,
    controller: &PhaseController,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = trajectory_rng(seed);
    let mut driver = Driver::Random(&mut rng);
    simulate(psi0, model, settings, controller, seed, &mut driver)
}

/// Re-runs a stored record. For the same inputs this reproduces the states
/// and weights of the run that produced it.
pub fn replay_trajectory(
    psi0: &StateVector,
    model: &LindbladModel,
    settings: &TrajectorySettings,
    controller: &PhaseController,
    record: &TrajectoryRecord,
) -> Result<Trajectory> {
    if record.scheme != settings.scheme {
        return Err(Error::InvalidArgument(
            "record scheme does not match settings".into(),
        ));
    }
    if record.dt != settings.dt {
        return Err(Error::InvalidArgument(
            "record dt does not match settings".into(),
        ));
    }
    let events = record.events.as_deref().unwrap_or(&[]);
    let dw = record.dw.as_deref().unwrap_or(&[]);
    let mut driver = Driver::Replay {
        events,
        dw,
        cursor: 0,
    };
    simulate(psi0, model, settings, controller, record.seed, &mut driver)
}

fn simulate(
    psi0: &StateVector,
    model: &LindbladModel,
    settings: &TrajectorySettings,
    controller: &PhaseController,
    seed: u64,
    driver: &mut Driver,
) -> Result<Trajectory> {
    psi0.space().ensure_same(&model.space())?;
    let (nsteps, sample_steps) = settings.validate()?;
    match settings.scheme {
        Scheme::Jump => simulate_jump(
            psi0,
            model,
            settings,
            controller,
            seed,
            driver,
            nsteps,
            &sample_steps,
        ),
        Scheme::Diffusive => simulate_diffusive(
            psi0,
            model,
            settings,
            controller,
            seed,
            driver,
            nsteps,
            &sample_steps,
        ),
    }
}

#[allow(clippy::too_many_arguments)]
fn simulate_jump(
    psi0: &StateVector,
    model: &LindbladModel,
    settings: &TrajectorySettings,
    controller: &PhaseController,
    seed: u64,
    driver: &mut Driver,
    nsteps: usize,
    sample_steps: &[usize],
) -> Result<Trajectory> {
    let space = model.space();
    let gamma = jump_gamma(settings, controller)?;
    let mut engine = JumpEngine::new(model, gamma, settings.dt, settings.strategy)?;
    let physical = engine.linear.is_none();
    let mut v = if physical {
        ScaledVector::new(psi0.normalize()?.amps().clone())
    } else {
        ScaledVector::new(psi0.amps().clone())
    };
    let mut snapshots = vec![None; sample_steps.len()];
    let mut events = Vec::new();
    let mut warn = false;
    let take = |k: usize, v: &ScaledVector, snaps: &mut Vec<Option<WeightedState>>| -> Result<()> {
        for (slot, &s) in snaps.iter_mut().zip(sample_steps) {
            if s == k {
                *slot = Some(v.snapshot(space)?);
            }
        }
        Ok(())
    };
    take(0, &v, &mut snapshots)?;
    for k in 0..nsteps {
        let click = if physical {
            engine.step_physical(&mut v.amps, k, driver)?
        } else {
            engine.step_linear(&mut v.amps, k, driver)?
        };
        if click {
            events.push(k as u64);
        }
        let n2 = v.norm_sqr();
        warn |= top_fraction(&v.amps, n2) > TOP_LEVEL_WARN;
        if !physical {
            v.rebalance(n2);
        }
        take(k + 1, &v, &mut snapshots)?;
    }
    let final_state = v.snapshot(space)?;
    let record = settings.keep_record.then(|| TrajectoryRecord {
        seed,
        scheme: Scheme::Jump,
        method: settings.strategy.tag().to_string(),
        dt: settings.dt,
        events: Some(events.clone()),
        dw: None,
        phases: None,
        weight: final_state.weight,
    });
    Ok(Trajectory {
        seed,
        final_state,
        snapshots: snapshots.into_iter().map(|s| s.expect("sampled")).collect(),
        functionals: RecordFunctionals::default(),
        jumps: events.len(),
        record,
        truncation_warning: warn,
    })
}

#[allow(clippy::too_many_arguments)]
fn simulate_diffusive(
    psi0: &StateVector,
    model: &LindbladModel,
    settings: &TrajectorySettings,
    controller: &PhaseController,
    seed: u64,
    driver: &mut Driver,
    nsteps: usize,
    sample_steps: &[usize],
) -> Result<Trajectory> {
    let mut run = DiffusiveRun::new(std::slice::from_ref(psi0), model, settings, controller)?;
    let mut snapshots = vec![None; sample_steps.len()];
    let mut dws = Vec::new();
    let mut phases = Vec::new();
    let record_snap =
        |k: usize, run: &DiffusiveRun, snaps: &mut Vec<Option<WeightedState>>| -> Result<()> {
            for (slot, &s) in snaps.iter_mut().zip(sample_steps) {
                if s == k {
                    *slot = Some(run.columns[0].snapshot(run.space)?);
                }
            }
            Ok(())
        };
    record_snap(0, &run, &mut snapshots)?;
    for k in 0..nsteps {
        let dw = driver.increment(k, settings.dt)?;
        let phi = run.step(dw)?;
        if settings.keep_record {
            dws.push(dw);
            phases.push(phi);
        }
        record_snap(k + 1, &run, &mut snapshots)?;
    }
    let final_state = run.columns[0].snapshot(run.space)?;
    let record = settings.keep_record.then(|| TrajectoryRecord {
        seed,
        scheme: Scheme::Diffusive,
        method: settings.strategy.tag().to_string(),
        dt: settings.dt,
        events: None,
        dw: Some(dws),
        phases: (!controller.is_constant()).then_some(phases),
        weight: final_state.weight,
    });
    Ok(Trajectory {
        seed,
        final_state,
        snapshots: snapshots.into_iter().map(|s| s.expect("sampled")).collect(),
        functionals: run.functionals,
        jumps: 0,
        record,
        truncation_warning: run.warn,
    })
}

/// Several initial states driven by one diffusive record.
struct DiffusiveRun<'a> {
    space: crate::fock::FockSpace,
    kernel: DiffusiveKernel,
    columns: Vec<ScaledVector>,
    functionals: RecordFunctionals,
    controller: &'a PhaseController,
    dt: f64,
    warn: bool,
}

impl<'a> DiffusiveRun<'a> {
    fn new(
        inputs: &[StateVector],
        model: &LindbladModel,
        settings: &TrajectorySettings,
        controller: &'a PhaseController,
    ) -> Result<Self> {
        if !matches!(settings.strategy, SamplingStrategy::OstensibleC { .. }) {
            return Err(Error::InvalidArgument(
                "the diffusive scheme is simulated only with ostensible (method C) records".into(),
            ));
        }
        for psi in inputs {
            psi.space().ensure_same(&model.space())?;
        }
        Ok(Self {
            space: model.space(),
            kernel: DiffusiveKernel::new(model, settings.dt, settings.diffusive_stepper)?,
            columns: inputs
                .iter()
                .map(|p| ScaledVector::new(p.amps().clone()))
                .collect(),
            functionals: RecordFunctionals::default(),
            controller,
            dt: settings.dt,
            warn: false,
        })
    }

    /// Advances every column by one step; returns the phase used.
    fn step(&mut self, dw: f64) -> Result<f64> {
        let phi = self.controller.phase(&self.functionals);
        for col in &mut self.columns {
            self.kernel.step(&mut col.amps, phi, dw, self.dt);
            let n2 = col.norm_sqr();
            if !n2.is_finite() {
                return Err(Error::StepSize("linear diffusive state diverged".into()));
            }
            self.warn |= top_fraction(&col.amps, n2) > TOP_LEVEL_WARN;
            col.rebalance(n2);
        }
        self.functionals = self.functionals.accumulate(phi, dw, self.dt);
        Ok(phi)
    }
}

/// Final weights of several inputs under one shared diffusive record.
#[derive(Clone, Debug)]
pub struct SharedDiffusiveRun {
    pub functionals: RecordFunctionals,
    pub weights: Vec<f64>,
    pub states: Vec<StateVector>,
    pub truncation_warning: bool,
}

/// Propagates all `inputs` through the same ostensible white-noise record.
pub fn run_diffusive_shared(
    inputs: &[StateVector],
    model: &LindbladModel,
    settings: &TrajectorySettings,
    controller: &PhaseController,
    seed: u64,
) -> Result<SharedDiffusiveRun> {
    let (nsteps, _) = settings.validate()?;
    let mut run = DiffusiveRun::new(inputs, model, settings, controller)?;
    let mut rng = trajectory_rng(seed);
    for _ in 0..nsteps {
        let dw = wiener_increment(&mut rng, settings.dt);
        run.step(dw)?;
    }
    let mut weights = Vec::with_capacity(inputs.len());
    let mut states = Vec::with_capacity(inputs.len());
    for col in &run.columns {
        let snap = col.snapshot(run.space)?;
        weights.push(snap.weight);
        states.push(snap.state);
    }
    Ok(SharedDiffusiveRun {
        functionals: run.functionals,
        weights,
        states,
        truncation_warning: run.warn,
    })
}

/// One step of method A. Returns the normalized state and the outcome.
pub fn step_jump_physical<R: RngCore>(
    psi: &StateVector,
    model: &LindbladModel,
    gamma: C64,
    dt: f64,
    rng: &mut R,
) -> Result<(StateVector, u8)> {
    psi.space().ensure_same(&model.space())?;
    let mut engine = JumpEngine::new(model, gamma, dt, SamplingStrategy::PhysicalA)?;
    let mut v = psi.normalize()?.amps().clone();
    let mut driver = Driver::Random(rng);
    let click = engine.step_physical(&mut v, 0, &mut driver)?;
    Ok((StateVector::from_vector(psi.space(), v), click as u8))
}

/// One step of method C with click probability `lambda1` (default `|gamma|^2 dt`).
pub fn step_jump_linear<R: RngCore>(
    psi_bar: &StateVector,
    model: &LindbladModel,
    gamma: C64,
    dt: f64,
    lambda1: Option<f64>,
    rng: &mut R,
) -> Result<(StateVector, u8)> {
    psi_bar.space().ensure_same(&model.space())?;
    let mut engine = JumpEngine::new(model, gamma, dt, SamplingStrategy::OstensibleC { lambda1 })?;
    let mut v = psi_bar.amps().clone();
    let mut driver = Driver::Random(rng);
    let click = engine.step_linear(&mut v, 0, &mut driver)?;
    Ok((StateVector::from_vector(psi_bar.space(), v), click as u8))
}

/// One step of the linear diffusive equation with phase `phi` and increment `dw`.
pub fn step_diffusive_linear(
    psi_bar: &StateVector,
    model: &LindbladModel,
    phi: f64,
    dw: f64,
    dt: f64,
) -> Result<StateVector> {
    psi_bar.space().ensure_same(&model.space())?;
    let mut kernel = DiffusiveKernel::new(model, dt, DiffusiveStepper::Auto)?;
    let mut v = psi_bar.amps().clone();
    kernel.step(&mut v, phi, dw, dt);
    Ok(StateVector::from_vector(psi_bar.space(), v))
}

/// Runs `n_traj` trajectories in parallel. Trajectory `i` uses
/// `trajectory_seed(root_seed, i)`, so results do not depend on thread count.
pub fn run_ensemble(
    psi0: &StateVector,
    model: &LindbladModel,
    settings: &TrajectorySettings,
    controller: &PhaseController,
    n_traj: usize,
    root_seed: u64,
) -> Result<Vec<Trajectory>> {
    let out: Vec<Trajectory> = (0..n_traj as u64)
        .into_par_iter()
        .map(|i| {
            run_trajectory(
                psi0,
                model,
                settings,
                controller,
                trajectory_seed(root_seed, i),
            )
        })
        .collect::<Result<_>>()?;
    let warned = out.iter().filter(|t| t.truncation_warning).count();
    if warned > 0 {
        log::warn!(
            "{warned} of {n_traj} trajectories put more than {TOP_LEVEL_WARN:e} of their norm on the top Fock level"
        );
    }
    Ok(out)
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleEstimate {
    pub n_traj: usize,
    pub mean: f64,
    pub stderr: f64,
}

/// `(1/N) sum_j w_j <psi_j| X |psi_j>` for Hermitian `X`.
pub fn ensemble_average(
    samples: &[WeightedState],
    observable: &OperatorMatrix,
) -> Result<EnsembleEstimate> {
    if samples.len() < 2 {
        return Err(Error::EmptyEnsemble(samples.len()));
    }
    let mut values = Vec::with_capacity(samples.len());
    for s in samples {
        s.state.space().ensure_same(&observable.space())?;
        let amps = s.state.amps();
        let x = amps.dotc(&(observable.entries() * amps)).re;
        values.push(s.weight * x);
    }
    let (mean, stderr) = crate::stats::mean_and_stderr(&values);
    Ok(EnsembleEstimate {
        n_traj: samples.len(),
        mean,
        stderr,
    })
}

/// Element-wise Monte Carlo estimate of a density matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityEstimate {
    pub n_traj: usize,
    pub mean: DMatrix<C64>,
    pub stderr_re: DMatrix<f64>,
    pub stderr_im: DMatrix<f64>,
}

/// Result of comparing an estimate with a reference matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Comparison {
    pub max_deviation: f64,
    pub max_stderr: f64,
    /// Largest `|deviation| / (stderr + floor)` over real and imaginary parts.
    pub worst_ratio: f64,
}

impl DensityEstimate {
    pub fn compare(&self, reference: &DMatrix<C64>, floor: f64) -> Comparison {
        let mut max_deviation = 0.0f64;
        let mut max_stderr = 0.0f64;
        let mut worst_ratio = 0.0f64;
        for (i, (m, r)) in self.mean.iter().zip(reference.iter()).enumerate() {
            let (sr, si) = (self.stderr_re[i], self.stderr_im[i]);
            let (dr, di) = ((m.re - r.re).abs(), (m.im - r.im).abs());
            max_deviation = max_deviation.max((m - r).norm());
            max_stderr = max_stderr.max(sr.max(si));
            worst_ratio = worst_ratio.max(dr / (sr + floor)).max(di / (si + floor));
        }
        Comparison {
            max_deviation,
            max_stderr,
            worst_ratio,
        }
    }
}

/// `(1/N) sum_j w_j |psi_j><psi_j|` with element-wise standard errors.
pub fn ensemble_density(samples: &[WeightedState]) -> Result<DensityEstimate> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::EmptyEnsemble(n));
    }
    let d = samples[0].state.space().dim();
    let mut sum = DMatrix::<C64>::zeros(d, d);
    let mut sq_re = DMatrix::<f64>::zeros(d, d);
    let mut sq_im = DMatrix::<f64>::zeros(d, d);
    for s in samples {
        samples[0].state.space().ensure_same(&s.state.space())?;
        let a = s.state.amps();
        for j in 0..d {
            for i in 0..d {
                let z = a[i] * a[j].conj() * s.weight;
                sum[(i, j)] += z;
                sq_re[(i, j)] += z.re * z.re;
                sq_im[(i, j)] += z.im * z.im;
            }
        }
    }
    let nf = n as f64;
    let mean = &sum / C64::new(nf, 0.0);
    let err = |sq: f64, m: f64| ((sq / nf - m * m).max(0.0) * nf / (nf - 1.0) / nf).sqrt();
    let stderr_re = DMatrix::from_fn(d, d, |i, j| err(sq_re[(i, j)], mean[(i, j)].re));
    let stderr_im = DMatrix::from_fn(d, d, |i, j| err(sq_im[(i, j)], mean[(i, j)].im));
    Ok(DensityEstimate {
        n_traj: n,
        mean,
        stderr_re,
        stderr_im,
    })
}

/// One record of an exhaustive enumeration.
#[derive(Clone, Debug)]
pub struct EnumeratedRecord {
    pub outcomes: Vec<u8>,
    /// Probability of the record under the sampling distribution.
    pub probability: f64,
    /// Normalized conditioned state (zero if the record is impossible).
    pub state: StateVector,
    /// Importance weight (one for method A).
    pub weight: f64,
}

/// Every record of `nsteps` steps of `pair`, as method `strategy` would
/// produce it. `sum probability * weight * |state><state|` is the
/// non-selective evolution for all three methods.
pub fn enumerate_records(
    psi0: &StateVector,
    pair: &MeasurementOperatorPair,
    nsteps: usize,
    strategy: SamplingStrategy,
) -> Result<Vec<EnumeratedRecord>> {
    psi0.space().ensure_same(&pair.omega0.space())?;
    if nsteps > MAX_ENUMERATION_STEPS {
        return Err(Error::InvalidArgument(format!(
            "enumeration of {nsteps} steps exceeds {MAX_ENUMERATION_STEPS}"
        )));
    }
    let lambda1 = match strategy {
        SamplingStrategy::PhysicalA => None,
        SamplingStrategy::UniformB => Some(0.5),
        SamplingStrategy::OstensibleC { lambda1 } => Some(match lambda1 {
            Some(l) => l,
            None if pair.gamma.norm() == 0.0 => return Err(Error::ZeroGamma),
            None => pair.gamma.norm_sqr() * pair.dt,
        }),
    };
    if let Some(l) = lambda1 {
        if !(l > 0.0 && l < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "click probability {l} outside (0, 1)"
            )));
        }
    }
    let start = if lambda1.is_none() {
        psi0.normalize()?
    } else {
        psi0.clone()
    };
    let mut layer = vec![(Vec::<u8>::new(), 1.0f64, start.amps().clone())];
    for _ in 0..nsteps {
        let mut next = Vec::with_capacity(layer.len() * 2);
        for (outcomes, prob, v) in &layer {
            for r in 0..2u8 {
                let w = pair.operator(r).entries() * v;
                let (lam, v_next) = match lambda1 {
                    None => {
                        let p = w.norm_squared();
                        let v_next = if p > 0.0 { w.unscale(p.sqrt()) } else { w };
                        (p, v_next)
                    }
                    Some(l) => {
                        let lam = if r == 1 { l } else { 1.0 - l };
                        (lam, w.unscale(lam.sqrt()))
                    }
                };
                let mut o = outcomes.clone();
                o.push(r);
                next.push((o, prob * lam, v_next));
            }
        }
        layer = next;
    }
    layer
        .into_iter()
        .map(|(outcomes, probability, v)| {
            let space = psi0.space();
            let weight = v.norm_squared();
            let state = StateVector::from_vector(space, v);
            let state = if weight > 0.0 {
                state.normalize()?
            } else {
                state
            };
            Ok(EnumeratedRecord {
                outcomes,
                probability,
                state,
                weight,
            })
        })
        .collect()
}

/// `sum_r probability_r * weight_r * |state_r><state_r|`.
pub fn enumeration_average(records: &[EnumeratedRecord]) -> DMatrix<C64> {
    let d = records.first().map_or(0, |r| r.state.space().dim());
    let mut out = DMatrix::<C64>::zeros(d, d);
    for r in records {
        let a = r.state.amps();
        out += a * a.adjoint() * C64::new(r.probability * r.weight, 0.0);
    }
    out
}
