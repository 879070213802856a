//! Local-oscillator phase control and phase measurements on the one-photon
//! subspace.
//!
//! The adaptive schemes set the local-oscillator phase to `pi/2` ahead of the
//! running phase estimate, so the measured quadrature is always the one that
//! carries no phase information. For a state in `span{|0>, |1>}` the single
//! photon scheme realizes the ideal phase POVM `(1/2pi)|phi><phi|` with
//! `|phi> = |0> + e^{i phi}|1>`.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::detection::{
    self, PovmEntry, PovmLabel, RecordFunctionals, COMPLETION_TIME, HETERODYNE_DETUNING,
};
use crate::error::{Error, Result};
use crate::fock::{FockSpace, OperatorMatrix, StateVector, C64};

/// Completion coefficient of heterodyne phase estimation, `sqrt(pi)/2`.
pub fn standard_efficiency() -> f64 {
    PI.sqrt() / 2.0
}

fn wrap(phi: f64) -> f64 {
    let w = phi.rem_euclid(TAU);
    // rem_euclid can round up to exactly 2pi for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

fn arg_or(z: C64, zero: f64) -> f64 {
    if z.re == 0.0 && z.im == 0.0 {
        zero
    } else {
        wrap(z.arg())
    }
}

/// `arg R(t)` in `[0, 2pi)`, or `0` when `R = 0`.
pub fn estimate_phase_single_photon(f: &RecordFunctionals) -> f64 {
    arg_or(f.r, 0.0)
}

/// `arg[R (1 - e^{-t}) + S R*]` in `[0, 2pi)`, or `0` when it vanishes. This is
/// the polar angle of the centre of the Gaussian effect.
pub fn estimate_phase_mean(f: &RecordFunctionals) -> f64 {
    arg_or(f.r * -(-f.t).exp_m1() + f.s * f.r.conj(), 0.0)
}

/// Rule for the local-oscillator phase. Outputs lie in `[0, 2pi)` and depend
/// on the record only through `(R, S, t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PhaseController {
    Constant {
        phase: f64,
    },
    Heterodyne {
        phase0: f64,
        detuning: f64,
    },
    /// `arg R + pi/2`; `zero_phase` is used for `arg 0`.
    AdaptiveSinglePhoton {
        zero_phase: f64,
    },
    AdaptiveMean,
}

impl PhaseController {
    pub fn adaptive_single() -> Self {
        PhaseController::AdaptiveSinglePhoton { zero_phase: 0.0 }
    }

    pub fn heterodyne() -> Self {
        PhaseController::Heterodyne {
            phase0: 0.0,
            detuning: HETERODYNE_DETUNING,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, PhaseController::Constant { .. })
    }

    /// Phase to apply over the step that starts at `f.t`.
    pub fn phase(&self, f: &RecordFunctionals) -> f64 {
        match *self {
            PhaseController::Constant { phase } => wrap(phase),
            PhaseController::Heterodyne { phase0, detuning } => wrap(phase0 + detuning * f.t),
            PhaseController::AdaptiveSinglePhoton { zero_phase } => {
                wrap(arg_or(f.r, zero_phase) + PI / 2.0)
            }
            PhaseController::AdaptiveMean => wrap(estimate_phase_mean(f) + PI / 2.0),
        }
    }
}

/// `controller.phase` with an explicit time.
pub fn controller_phase(ctrl: &PhaseController, f: &RecordFunctionals, t: f64) -> f64 {
    ctrl.phase(&RecordFunctionals { t, ..*f })
}

impl fmt::Display for PhaseController {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhaseController::Constant { phase } => write!(f, "constant:{phase}"),
            PhaseController::Heterodyne { phase0, detuning } => {
                write!(f, "heterodyne:{phase0},{detuning}")
            }
            PhaseController::AdaptiveSinglePhoton { zero_phase } if *zero_phase == 0.0 => {
                write!(f, "adaptive-single")
            }
            PhaseController::AdaptiveSinglePhoton { zero_phase } => {
                write!(f, "adaptive-single:{zero_phase}")
            }
            PhaseController::AdaptiveMean => write!(f, "adaptive-mean"),
        }
    }
}

impl FromStr for PhaseController {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unrecognized controller `{s}`"));
        let num = |x: &str| x.trim().parse::<f64>().map_err(|_| bad());
        let (kind, args) = match s.split_once(':') {
            Some((k, a)) => (k.trim(), Some(a)),
            None => (s.trim(), None),
        };
        match (kind, args) {
            ("constant", Some(a)) => Ok(PhaseController::Constant { phase: num(a)? }),
            ("heterodyne", None) => Ok(PhaseController::heterodyne()),
            ("heterodyne", Some(a)) => {
                let (p, d) = a.split_once(',').ok_or_else(bad)?;
                Ok(PhaseController::Heterodyne {
                    phase0: num(p)?,
                    detuning: num(d)?,
                })
            }
            ("adaptive-single", None) => Ok(PhaseController::adaptive_single()),
            ("adaptive-single", Some(a)) => Ok(PhaseController::AdaptiveSinglePhoton {
                zero_phase: num(a)?,
            }),
            ("adaptive-mean", None) => Ok(PhaseController::AdaptiveMean),
            _ => Err(bad()),
        }
    }
}

/// Binned phase POVM on `span{|0>, |1>}`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhasePovm {
    pub edges: Vec<f64>,
    pub effects: Vec<OperatorMatrix>,
}

impl PhasePovm {
    pub fn nbins(&self) -> usize {
        self.effects.len()
    }

    /// Bin index of `phi` (wrapped into `[0, 2pi)`).
    pub fn bin_of(&self, phi: f64) -> usize {
        bin_index(wrap(phi), self.nbins())
    }

    /// `max |sum_k F_k - 1|`
    pub fn completeness_residual(&self) -> f64 {
        let mut sum = DMatrix::<C64>::zeros(2, 2);
        for e in &self.effects {
            sum += e.entries();
        }
        (sum - DMatrix::<C64>::identity(2, 2))
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// Outcome probabilities `tr(F_k rho)` for a pure state.
    pub fn probabilities(&self, psi: &StateVector) -> Result<Vec<f64>> {
        let v = qubit_amps(psi)?;
        Ok(self
            .effects
            .iter()
            .map(|e| v.dotc(&(e.entries() * &v)).re)
            .collect())
    }

    /// Entries of the POVM JSON dump.
    pub fn entries(&self) -> Vec<PovmEntry> {
        self.effects
            .iter()
            .enumerate()
            .map(|(k, e)| PovmEntry::new(PovmLabel::Bin(k), e))
            .collect()
    }
}

fn bin_index(phi: f64, nbins: usize) -> usize {
    ((phi / TAU * nbins as f64) as usize).min(nbins - 1)
}

fn bin_edges(nbins: usize) -> Vec<f64> {
    (0..=nbins).map(|k| TAU * k as f64 / nbins as f64).collect()
}

/// `int_a^b (1/2pi) e^{-i phi} d phi`, the `<0|F|1>` element of an ideal bin.
fn ideal_offdiag(a: f64, b: f64) -> C64 {
    C64::new(0.0, 1.0 / TAU) * (C64::from_polar(1.0, -b) - C64::from_polar(1.0, -a))
}

fn qubit_effect(diag: f64, off: C64) -> OperatorMatrix {
    let m = DMatrix::from_row_slice(
        2,
        2,
        &[C64::new(diag, 0.0), off, off.conj(), C64::new(diag, 0.0)],
    );
    OperatorMatrix::hermitian(FockSpace::qubit(), m).expect("2x2 Hermitian by construction")
}

fn check_bins(nbins: usize) -> Result<()> {
    if nbins < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least two bins, got {nbins}"
        )));
    }
    Ok(())
}

/// Bins of `(1/2pi)|phi><phi|`, integrated in closed form.
pub fn povm_ideal_phase(nbins: usize) -> Result<PhasePovm> {
    check_bins(nbins)?;
    Ok(binned_povm(nbins, 1.0))
}

/// Bins of `(sqrt(pi)/2) F_ideal + (1 - sqrt(pi)/2)/(2pi)`, the phase marginal
/// of heterodyne detection.
pub fn povm_standard_phase(nbins: usize) -> Result<PhasePovm> {
    check_bins(nbins)?;
    Ok(binned_povm(nbins, standard_efficiency()))
}

fn binned_povm(nbins: usize, kappa: f64) -> PhasePovm {
    let edges = bin_edges(nbins);
    let effects = edges
        .windows(2)
        .map(|w| qubit_effect((w[1] - w[0]) / TAU, ideal_offdiag(w[0], w[1]) * kappa))
        .collect();
    PhasePovm { edges, effects }
}

/// Density `(1/2pi)|phi><phi|`.
pub fn ideal_phase_effect(phi: f64) -> OperatorMatrix {
    qubit_effect(1.0 / TAU, C64::from_polar(1.0 / TAU, -phi))
}

/// Density `(sqrt(pi)/2)(1/2pi)|phi><phi| + (1 - sqrt(pi)/2)/(2pi)`.
pub fn standard_phase_effect(phi: f64) -> OperatorMatrix {
    qubit_effect(
        1.0 / TAU,
        C64::from_polar(standard_efficiency() / TAU, -phi),
    )
}

fn qubit_amps(psi: &StateVector) -> Result<DVector<C64>> {
    let a = psi.amps();
    if a.iter().skip(2).any(|z| z.norm() > 0.0) {
        return Err(Error::InvalidArgument(
            "phase measurements need a state in span{|0>, |1>}".into(),
        ));
    }
    Ok(DVector::from_vec(vec![a[0], a[1]]))
}

/// The four inputs used for reconstruction, with their identifiers.
pub fn tomographic_inputs() -> Vec<(&'static str, StateVector)> {
    let q = FockSpace::qubit();
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let make = |a: C64, b: C64| StateVector::from_amps(q, vec![a, b]).expect("qubit");
    vec![
        ("zero", make(C64::new(1.0, 0.0), C64::new(0.0, 0.0))),
        ("one", make(C64::new(0.0, 0.0), C64::new(1.0, 0.0))),
        ("plus", make(C64::new(h, 0.0), C64::new(h, 0.0))),
        ("plus-i", make(C64::new(h, 0.0), C64::new(0.0, h))),
    ]
}

/// Outcome of one completed phase measurement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseMeasurementSample {
    pub phi_hat_final: f64,
    #[serde(with = "detection::complex_pair")]
    pub a: C64,
    pub weight: f64,
    pub seed: u64,
}

/// One line of the phase-sample JSONL format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSampleLine {
    pub phi: f64,
    pub weight: f64,
    pub state: String,
    pub seed: u64,
}

fn qubit_space(psi: &StateVector) -> Result<StateVector> {
    let v = qubit_amps(psi)?;
    Ok(StateVector::from_amps(
        FockSpace::qubit(),
        v.iter().copied().collect(),
    )?)
}

/// Completed adaptive single-photon measurement; `phi_hat_final = arg A`.
pub fn run_adaptive_phase_measurement(
    psi0: &StateVector,
    dt: f64,
    seed: u64,
) -> Result<PhaseMeasurementSample> {
    let psi = qubit_space(psi0)?;
    let m = detection::simulate_completed_measurement(
        &psi,
        &PhaseController::adaptive_single(),
        dt,
        COMPLETION_TIME,
        seed,
    )?;
    Ok(PhaseMeasurementSample {
        phi_hat_final: arg_or(m.a, 0.0),
        a: m.a,
        weight: m.weight,
        seed,
    })
}

/// One ostensible record of a completed phase measurement, weighted for
/// several inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedPhaseSample {
    pub phi: f64,
    pub a: C64,
    pub weights: Vec<f64>,
    pub seed: u64,
}

/// Runs `controller` to completion on all `inputs` under one shared record.
/// `phi` is `arg A`.
pub fn run_phase_measurement_shared(
    inputs: &[StateVector],
    controller: &PhaseController,
    dt: f64,
    seed: u64,
) -> Result<SharedPhaseSample> {
    let inputs: Vec<StateVector> = inputs.iter().map(qubit_space).collect::<Result<_>>()?;
    let m = detection::simulate_completed_measurement_shared(
        &inputs,
        controller,
        dt,
        COMPLETION_TIME,
        seed,
    )?;
    Ok(SharedPhaseSample {
        phi: arg_or(m.a, 0.0),
        a: m.a,
        weights: m.weights,
        seed,
    })
}

/// Weighted phase outcomes recorded for one input state.
#[derive(Clone, Debug)]
pub struct PhaseSampleSet {
    pub state: StateVector,
    /// `(phi, weight)` pairs.
    pub samples: Vec<(f64, f64)>,
}

/// A POVM estimated from weighted samples.
#[derive(Clone, Debug)]
pub struct ReconstructedPovm {
    pub povm: PhasePovm,
    /// Standard errors of `(F_00, F_11, Re F_01, Im F_01)` per bin.
    pub stderr: Vec<[f64; 4]>,
    /// `sum_k F_k - 1` as `(00, 11, Re 01, Im 01)`.
    pub completeness: [f64; 4],
    pub completeness_stderr: [f64; 4],
    /// Least-squares residual of the linear inversion.
    pub inversion_residual: f64,
}

impl ReconstructedPovm {
    /// Largest `|F_k - G_k| / stderr` over bins and matrix elements.
    pub fn max_deviation_sigma(&self, reference: &PhasePovm) -> f64 {
        let mut worst = 0.0f64;
        for (k, (e, r)) in self.povm.effects.iter().zip(&reference.effects).enumerate() {
            let d = components(e);
            let g = components(r);
            for j in 0..4 {
                let se = self.stderr[k][j];
                let dev = (d[j] - g[j]).abs();
                worst = worst.max(if se > 0.0 {
                    dev / se
                } else if dev > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                });
            }
        }
        worst
    }

    /// Largest `|sum_k F_k - 1| / stderr` over matrix elements.
    pub fn completeness_sigma(&self) -> f64 {
        (0..4)
            .map(|j| {
                let se = self.completeness_stderr[j];
                let dev = self.completeness[j].abs();
                if se > 0.0 {
                    dev / se
                } else if dev > 1e-12 {
                    f64::INFINITY
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max)
    }
}

fn components(e: &OperatorMatrix) -> [f64; 4] {
    let m = e.entries();
    [m[(0, 0)].re, m[(1, 1)].re, m[(0, 1)].re, m[(0, 1)].im]
}

/// `tr(F rho) = F00 rho00 + F11 rho11 + 2 Re F01 Re rho10 - 2 Im F01 Im rho10`.
fn design_row(psi: &StateVector) -> Result<[f64; 4]> {
    let v = qubit_amps(psi)?;
    let n2 = v.norm_squared();
    let rho10 = v[1] * v[0].conj() / n2;
    Ok([
        v[0].norm_sqr() / n2,
        v[1].norm_sqr() / n2,
        2.0 * rho10.re,
        -2.0 * rho10.im,
    ])
}

/// Pseudo-inverse of the design matrix, rejecting poorly conditioned inputs.
fn design_pinv(states: &[StateVector]) -> Result<DMatrix<f64>> {
    if states.len() < 4 {
        return Err(Error::IllConditioned(format!(
            "{} input states cannot determine a 2x2 effect",
            states.len()
        )));
    }
    let rows: Vec<[f64; 4]> = states.iter().map(design_row).collect::<Result<_>>()?;
    let m = DMatrix::from_fn(rows.len(), 4, |i, j| rows[i][j]);
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-6 * smax) {
        return Err(Error::IllConditioned(format!(
            "input states are not informationally complete (singular values {smin:.3e} / {smax:.3e})"
        )));
    }
    svd.pseudo_inverse(1e-12 * smax)
        .map_err(|e| Error::IllConditioned(e.to_string()))
        .map(|p| p.map(|x| x))
}

/// Samples grouped by shared record: each sample has one phase and one
/// weight per member state of its group.
struct Group {
    members: Vec<usize>,
    phis: Vec<f64>,
    weights: Vec<Vec<f64>>,
}

fn reconstruct(
    states: &[StateVector],
    groups: &[Group],
    nbins: usize,
) -> Result<ReconstructedPovm> {
    check_bins(nbins)?;
    let pinv = design_pinv(states)?;
    let ns = states.len();
    // column nbins holds the total weight, for the completeness estimate
    let nb = nbins + 1;
    let mut probs = DMatrix::<f64>::zeros(ns, nb);
    for g in groups {
        if g.phis.is_empty() {
            return Err(Error::EmptyEnsemble(0));
        }
        let n = g.phis.len() as f64;
        for (phi, w) in g.phis.iter().zip(&g.weights) {
            let k = bin_index(wrap(*phi), nbins);
            for (slot, &s) in g.members.iter().enumerate() {
                probs[(s, k)] += w[slot] / n;
                probs[(s, nbins)] += w[slot] / n;
            }
        }
    }
    // unknowns (e00, e11, Re e01, Im e01) per bin
    let est = &pinv * &probs;
    let predicted = DMatrix::from_fn(ns, 4, |i, j| {
        design_row(&states[i]).map(|r| r[j]).unwrap_or(0.0)
    });
    let resid = (&predicted * &est - &probs).abs().max();
    if resid > 0.1 {
        return Err(Error::IllConditioned(format!(
            "inversion residual {resid:.3e}"
        )));
    }

    // variance of each estimate as a linear functional of the per-sample data
    let mut var = DMatrix::<f64>::zeros(4, nb);
    for g in groups {
        let n = g.phis.len() as f64;
        for col in 0..nb {
            for j in 0..4 {
                let contrib = |phi: f64, w: &[f64]| -> f64 {
                    let k = bin_index(wrap(phi), nbins);
                    if col != k && col != nbins {
                        return 0.0;
                    }
                    g.members
                        .iter()
                        .enumerate()
                        .map(|(slot, &s)| pinv[(j, s)] * w[slot])
                        .sum()
                };
                let vals: Vec<f64> = g
                    .phis
                    .iter()
                    .zip(&g.weights)
                    .map(|(p, w)| contrib(*p, w))
                    .collect();
                let mean = vals.iter().sum::<f64>() / n;
                let ss: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum();
                var[(j, col)] += ss / (n - 1.0).max(1.0) / n;
            }
        }
    }

    let edges = bin_edges(nbins);
    let mut effects = Vec::with_capacity(nbins);
    let mut stderr = Vec::with_capacity(nbins);
    for k in 0..nbins {
        let m = DMatrix::from_row_slice(
            2,
            2,
            &[
                C64::new(est[(0, k)], 0.0),
                C64::new(est[(2, k)], est[(3, k)]),
                C64::new(est[(2, k)], -est[(3, k)]),
                C64::new(est[(1, k)], 0.0),
            ],
        );
        effects.push(OperatorMatrix::hermitian(FockSpace::qubit(), m)?);
        stderr.push([0, 1, 2, 3].map(|j| var[(j, k)].sqrt()));
    }
    let completeness = [
        est[(0, nbins)] - 1.0,
        est[(1, nbins)] - 1.0,
        est[(2, nbins)],
        est[(3, nbins)],
    ];
    let completeness_stderr = [0, 1, 2, 3].map(|j| var[(j, nbins)].sqrt());
    Ok(ReconstructedPovm {
        povm: PhasePovm { edges, effects },
        stderr,
        completeness,
        completeness_stderr,
        inversion_residual: resid,
    })
}

/// Linear-inversion estimate of a binned phase POVM from independent
/// weighted sample sets, one per input state.
pub fn reconstruct_povm(sets: &[PhaseSampleSet], nbins: usize) -> Result<ReconstructedPovm> {
    let states: Vec<StateVector> = sets.iter().map(|s| s.state.clone()).collect();
    let groups: Vec<Group> = sets
        .iter()
        .enumerate()
        .map(|(i, s)| Group {
            members: vec![i],
            phis: s.samples.iter().map(|p| p.0).collect(),
            weights: s.samples.iter().map(|p| vec![p.1]).collect(),
        })
        .collect();
    reconstruct(&states, &groups, nbins)
}

/// As [`reconstruct_povm`], for samples whose records are shared by all inputs.
pub fn reconstruct_povm_shared(
    states: &[StateVector],
    samples: &[SharedPhaseSample],
    nbins: usize,
) -> Result<ReconstructedPovm> {
    if samples.iter().any(|s| s.weights.len() != states.len()) {
        return Err(Error::DimensionMismatch {
            expected: states.len(),
            found: samples
                .iter()
                .map(|s| s.weights.len())
                .find(|&l| l != states.len())
                .unwrap_or(0),
        });
    }
    let group = Group {
        members: (0..states.len()).collect(),
        phis: samples.iter().map(|s| s.phi).collect(),
        weights: samples.iter().map(|s| s.weights.clone()).collect(),
    };
    reconstruct(states, &[group], nbins)
}

/// Least-squares fit of the off-diagonal elements to `kappa` times those of
/// the ideal POVM, with its standard error.
pub fn ideal_coefficient(rec: &ReconstructedPovm) -> Result<(f64, f64)> {
    let ideal = povm_ideal_phase(rec.povm.nbins())?;
    let mut num = 0.0;
    let mut den = 0.0;
    let mut var = 0.0;
    for (k, (e, g)) in rec.povm.effects.iter().zip(&ideal.effects).enumerate() {
        let off = e.entries()[(0, 1)];
        let gi = g.entries()[(0, 1)];
        num += gi.re * off.re + gi.im * off.im;
        den += gi.norm_sqr();
        // treats bins as independent; the per-bin errors dominate
        var += gi.re.powi(2) * rec.stderr[k][2].powi(2) + gi.im.powi(2) * rec.stderr[k][3].powi(2);
    }
    Ok((num / den, var.sqrt() / den))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::gaussian_effect_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rf(r: C64, s: C64, t: f64) -> RecordFunctionals {
        RecordFunctionals::new(r, s, t)
    }

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn single_photon_estimator() {
        assert_eq!(
            estimate_phase_single_photon(&rf(c(1.0, 0.0), c(0.0, 0.0), 1.0)),
            0.0
        );
        assert!(
            (estimate_phase_single_photon(&rf(c(0.0, 1.0), c(0.0, 0.0), 1.0)) - PI / 2.0).abs()
                < 1e-15
        );
        assert_eq!(
            estimate_phase_single_photon(&RecordFunctionals::default()),
            0.0
        );
        let neg = estimate_phase_single_photon(&rf(c(0.0, -1.0), c(0.0, 0.0), 1.0));
        assert!((neg - 1.5 * PI).abs() < 1e-15);
    }

    #[test]
    fn mean_estimator() {
        let f = rf(c(0.3, -0.7), c(0.0, 0.0), 0.8);
        assert!((estimate_phase_mean(&f) - estimate_phase_single_photon(&f)).abs() < 1e-14);
        let f = rf(c(0.5, 0.0), c(-0.6, 0.0), 50.0);
        assert_eq!(estimate_phase_mean(&f), 0.0);
    }

    #[test]
    fn mean_estimator_is_centre_angle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        while checked < 100 {
            let t = rng.random_range(0.1..6.0);
            let k = 1.0 - (-t as f64).exp();
            let s = C64::from_polar(rng.random_range(0.0..0.95) * k, rng.random_range(0.0..TAU));
            let r = c(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let f = rf(r, s, t);
            let g = gaussian_effect_params(&f).unwrap();
            let expect = wrap(g.theta + g.y.atan2(g.x));
            let got = estimate_phase_mean(&f);
            let diff = (got - expect).rem_euclid(TAU);
            assert!(diff.min(TAU - diff) < 1e-10, "{got} vs {expect}");
            checked += 1;
        }
    }

    #[test]
    fn controller_examples() {
        let het = PhaseController::Heterodyne {
            phase0: 0.0,
            detuning: 50.0,
        };
        let f = RecordFunctionals::default();
        assert!((controller_phase(&het, &f, 0.1) - 5.0).abs() < 1e-12);
        let ad = PhaseController::adaptive_single();
        assert!((ad.phase(&rf(c(1.0, 0.0), c(0.0, 0.0), 0.3)) - PI / 2.0).abs() < 1e-15);
        assert!((ad.phase(&f) - PI / 2.0).abs() < 1e-15);
        let k = PhaseController::Constant { phase: 1.3 };
        assert_eq!(k.phase(&rf(c(4.0, 2.0), c(-0.1, 0.0), 3.0)), 1.3);
        assert_eq!(
            PhaseController::Constant { phase: -0.5 }.phase(&f),
            TAU - 0.5
        );
        for g in [het, ad, k, PhaseController::AdaptiveMean] {
            let phi = g.phase(&rf(c(-0.3, -1e-3), c(0.2, 0.1), 7.0));
            assert!((0.0..TAU).contains(&phi));
        }
    }

    #[test]
    fn controller_strings_round_trip() {
        for s in [
            "constant:0.5",
            "heterodyne:0,50",
            "adaptive-single",
            "adaptive-mean",
            "adaptive-single:1.5",
        ] {
            let c: PhaseController = s.parse().unwrap();
            assert_eq!(c.to_string().parse::<PhaseController>().unwrap(), c);
        }
        assert_eq!(
            "heterodyne".parse::<PhaseController>().unwrap(),
            PhaseController::heterodyne()
        );
        assert!("constant".parse::<PhaseController>().is_err());
        assert!("spin:1".parse::<PhaseController>().is_err());
    }

    #[test]
    fn single_photon_feedback_locks_amplitude() {
        // Phi = arg R + pi/2 makes the change of |R|^2 purely second order
        let ad = PhaseController::adaptive_single();
        let fixed = PhaseController::Constant { phase: 0.0 };
        let dt: f64 = 1e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut unlocked = 0.0f64;
        for _ in 0..50 {
            let f = rf(
                C64::from_polar(0.7, rng.random_range(0.0..TAU)),
                c(0.0, 0.0),
                rng.random_range(0.0..5.0),
            );
            let dw = rng.random_range(-3.0..3.0) * dt.sqrt();
            let locked = f.accumulate(ad.phase(&f), dw, dt).r.norm_sqr() - f.r.norm_sqr();
            assert!((locked / dw).abs() <= 3.0 * dt.sqrt() * (1.0 + 1e-9));
            assert!(locked.abs() <= 9.0 * dt + 1e-15);
            let free = f.accumulate(fixed.phase(&f), dw, dt).r.norm_sqr() - f.r.norm_sqr();
            unlocked = unlocked.max((free / dw).abs());
        }
        assert!(unlocked > 0.3, "{unlocked}");
    }

    #[test]
    fn ideal_povm_properties() {
        let p = povm_ideal_phase(16).unwrap();
        assert!(p.completeness_residual() < 1e-12);
        let one = binned_povm(1, 1.0);
        assert!((one.effects[0].entries() - DMatrix::<C64>::identity(2, 2)).norm() < 1e-12);
        let plus = &tomographic_inputs()[2].1;
        let dens = ideal_phase_effect(0.0);
        let v = plus.amps();
        assert!((v.dotc(&(dens.entries() * v)).re - 1.0 / PI).abs() < 1e-15);
        for e in &p.effects {
            assert!(e.min_eigenvalue() >= -1e-15);
        }
        assert!(povm_ideal_phase(1).is_err());
    }

    #[test]
    fn standard_povm_properties() {
        let s = povm_standard_phase(16).unwrap();
        let i = povm_ideal_phase(16).unwrap();
        assert!(s.completeness_residual() < 1e-12);
        assert!((standard_efficiency() - 0.886_226_925).abs() < 1e-9);
        for (a, b) in s.effects.iter().zip(&i.effects) {
            let ratio = a.entries()[(0, 1)].norm() / b.entries()[(0, 1)].norm();
            assert!((ratio - standard_efficiency()).abs() < 1e-12);
        }
        let d = standard_phase_effect(0.3).entries()[(0, 1)].norm()
            / ideal_phase_effect(0.3).entries()[(0, 1)].norm();
        assert!((d - standard_efficiency()).abs() < 1e-12);
    }

    /// Deterministic stand-in for samples from `tr(F_ideal(phi) rho)`: a fine
    /// midpoint grid with the density as weight.
    fn analytic_set(psi: &StateVector, n: usize) -> PhaseSampleSet {
        let samples = (0..n)
            .map(|i| {
                let phi = TAU * (i as f64 + 0.5) / n as f64;
                let v = psi.amps();
                let w = TAU * v.dotc(&(ideal_phase_effect(phi).entries() * v)).re;
                (phi, w)
            })
            .collect();
        PhaseSampleSet {
            state: psi.clone(),
            samples,
        }
    }

    #[test]
    fn reconstruction_recovers_analytic_povm() {
        let sets: Vec<PhaseSampleSet> = tomographic_inputs()
            .iter()
            .map(|(_, s)| analytic_set(s, 160_000))
            .collect();
        let rec = reconstruct_povm(&sets, 16).unwrap();
        let ideal = povm_ideal_phase(16).unwrap();
        for (a, b) in rec.povm.effects.iter().zip(&ideal.effects) {
            assert!(crate::linalg::max_abs(&(a.entries() - b.entries())) < 1e-3);
        }
        assert!(rec.completeness.iter().all(|x| x.abs() < 1e-9));
        let (kappa, _) = ideal_coefficient(&rec).unwrap();
        assert!((kappa - 1.0).abs() < 1e-3);
    }

    #[test]
    fn reconstruction_rejects_incomplete_inputs() {
        let inputs = tomographic_inputs();
        let sets: Vec<PhaseSampleSet> = [0, 1, 2, 2]
            .iter()
            .map(|&i| analytic_set(&inputs[i].1, 100))
            .collect();
        assert!(matches!(
            reconstruct_povm(&sets, 4).unwrap_err(),
            Error::IllConditioned(_)
        ));
        assert!(matches!(
            reconstruct_povm(&sets[..3], 4).unwrap_err(),
            Error::IllConditioned(_)
        ));
    }

    #[test]
    fn shared_and_independent_layouts_agree() {
        let inputs: Vec<StateVector> = tomographic_inputs().into_iter().map(|p| p.1).collect();
        let n = 2000;
        let samples: Vec<SharedPhaseSample> = (0..n)
            .map(|i| {
                let phi = TAU * (i as f64 + 0.5) / n as f64;
                let weights = inputs
                    .iter()
                    .map(|s| {
                        TAU * s
                            .amps()
                            .dotc(&(ideal_phase_effect(phi).entries() * s.amps()))
                            .re
                    })
                    .collect();
                SharedPhaseSample {
                    phi,
                    a: C64::from_polar(1.0, phi),
                    weights,
                    seed: i as u64,
                }
            })
            .collect();
        let shared = reconstruct_povm_shared(&inputs, &samples, 8).unwrap();
        let sets: Vec<PhaseSampleSet> = inputs.iter().map(|s| analytic_set(s, n)).collect();
        let indep = reconstruct_povm(&sets, 8).unwrap();
        for (a, b) in shared.povm.effects.iter().zip(&indep.povm.effects) {
            assert!((a.entries() - b.entries()).norm() < 1e-12);
        }
    }

    #[test]
    fn phase_sample_line_schema() {
        let line = PhaseSampleLine {
            phi: 1.5,
            weight: 0.25,
            state: "plus".into(),
            seed: 7,
        };
        assert_eq!(
            serde_json::to_string(&line).unwrap(),
            r#"{"phi":1.5,"weight":0.25,"state":"plus","seed":7}"#
        );
    }

    #[test]
    fn adaptive_run_rejects_multiphoton_input() {
        let space = FockSpace::new(3).unwrap();
        let psi = StateVector::fock(space, 2).unwrap();
        assert!(run_adaptive_phase_measurement(&psi, 1e-3, 0).is_err());
        let ok = StateVector::fock(space, 1).unwrap();
        assert!(qubit_space(&ok).is_ok());
    }
}
