//! Photocurrent functionals and the effects of large local-oscillator
//! photodetection on a freely damped mode (`H = 0`, `c = a`).
//!
//! A diffusive record enters the conditioned state only through
//!
//! ```text
//! R(t) =  int_0^t e^{i Phi(s)} e^{-s/2} dW(s)
//! S(t) = -int_0^t e^{2i Phi(s)} e^{-s} ds
//! ```
//!
//! and the unnormalized conditioned state is
//! `exp(-a^dag a t / 2) exp(S* a^2 / 2 + R* a) |psi_0>`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::adaptive::PhaseController;
use crate::dynamics::LindbladModel;
use crate::error::{Error, Result};
use crate::fock::{
    annihilation, matrix_to_rows, quadrature_operator, FockSpace, OperatorMatrix, StateVector, C64,
};
use crate::linalg;
use crate::trajectories::{self, SamplingStrategy, Scheme, TrajectorySettings};

/// Stand-in for `t -> infinity`: the light left in the mode is `e^{-12} < 1e-5`.
pub const COMPLETION_TIME: f64 = 12.0;
/// Detuning used for heterodyne detection.
pub const HETERODYNE_DETUNING: f64 = 50.0;

const DEGENERATE_TOL: f64 = 1e-9;
const CLOSED_FORM_TOP_AMP: f64 = 1e-6;
const EFFECT_POSITIVITY_TOL: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct RecordFunctionals {
    pub r: C64,
    pub s: C64,
    pub t: f64,
}

impl RecordFunctionals {
    pub fn new(r: C64, s: C64, t: f64) -> Self {
        Self { r, s, t }
    }

    /// Advances by one step of length `dt` during which the local-oscillator
    /// phase is held at `phi` and the Wiener increment is `dw`.
    ///
    /// Each step is weighted by the exact integral of `e^{-s}` over the step:
    /// `dW` enters `R` with amplitude `sqrt((e^{-t} - e^{-t-dt}) / dt)`, and `S`
    /// moves by `e^{2i phi}(e^{-t} - e^{-t-dt})`. This keeps
    /// `|S| <= 1 - e^{-t}`, gives `S -> -e^{2i phi}` for a constant phase, and
    /// makes the functionals agree exactly with the factorized diffusive step.
    pub fn accumulate(&self, phi: f64, dw: f64, dt: f64) -> Self {
        let lo = C64::from_polar(1.0, phi);
        let mass = (-self.t).exp() * -(-dt).exp_m1();
        let r = self.r + lo * (dw * (mass / dt).sqrt());
        let s = self.s - lo * lo * mass;
        Self {
            r,
            s,
            t: self.t + dt,
        }
    }
}

/// `exp(-a^dag a t/2) exp(S* a^2/2 + R* a) |psi_0>` via dense exponentials.
pub fn conditioned_state_closed_form(
    psi0: &StateVector,
    f: &RecordFunctionals,
) -> Result<StateVector> {
    let space = psi0.space();
    let lowering = lowering_exponential(space, f)?;
    let decay = number_decay(space, f.t / 2.0);
    let amps = decay.component_mul(&(lowering * psi0.amps()));
    let out = StateVector::from_vector(space, amps);
    let norm = out.norm_sqr().sqrt();
    let top = out.amp(space.nmax()).norm();
    if norm > 0.0 && top > CLOSED_FORM_TOP_AMP * norm {
        return Err(Error::Truncation(format!(
            "closed-form state has relative top-level amplitude {:.3e}",
            top / norm
        )));
    }
    Ok(out)
}

/// `exp(S* a^2 / 2 + R* a)`
fn lowering_exponential(space: FockSpace, f: &RecordFunctionals) -> Result<DMatrix<C64>> {
    let a = annihilation(space);
    let a = a.entries();
    let gen = (a * a) * (f.s.conj() * 0.5) + a * f.r.conj();
    let e = linalg::expm(&gen);
    if e.iter().any(|z| !z.is_finite()) {
        return Err(Error::Truncation("operator exponential overflowed".into()));
    }
    Ok(e)
}

/// Diagonal of `exp(-a^dag a tau)`.
fn number_decay(space: FockSpace, tau: f64) -> DVector<C64> {
    DVector::from_fn(space.dim(), |n, _| C64::new((-(n as f64) * tau).exp(), 0.0))
}

/// The finite-time effect
/// `P0 exp(S a^dag^2/2 + R a^dag) exp(-a^dag a t) exp(S* a^2/2 + R* a)`.
///
/// `p0_density` is the ostensible density of `(R, S)`; it only scales the
/// operator.
pub fn effect_finite_time(f: &RecordFunctionals, p0_density: f64) -> Result<OperatorMatrix> {
    effect_finite_time_on(FockSpace::new(40)?, f, p0_density)
}

/// [`effect_finite_time`] on an explicit space.
pub fn effect_finite_time_on(
    space: FockSpace,
    f: &RecordFunctionals,
    p0_density: f64,
) -> Result<OperatorMatrix> {
    if !(p0_density >= 0.0) || !p0_density.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "ostensible density must be finite and non-negative, got {p0_density}"
        )));
    }
    let g = lowering_exponential(space, f)?;
    let decay = number_decay(space, f.t);
    let mut dg = g.clone();
    for (i, mut row) in dg.row_iter_mut().enumerate() {
        row *= decay[i];
    }
    let mut m = g.adjoint() * dg * C64::new(p0_density, 0.0);
    m = (&m + m.adjoint()) * C64::new(0.5, 0.0);
    let scale = linalg::max_abs(&m);
    let min = linalg::hermitian_eigenvalues(&m)[0];
    if min < -EFFECT_POSITIVITY_TOL * scale {
        return Err(Error::Positivity(min));
    }
    Ok(OperatorMatrix::from_parts(space, m, true, true))
}

/// Phase-space geometry of the finite-time effect: orientation `theta`,
/// centre `(x, y)` and variances along the rotated axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianEffect {
    pub theta: f64,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub t: f64,
    pub weight: f64,
}

impl GaussianEffect {
    /// Variances of the exact finite-`t` Wigner function of the effect,
    /// `(1 + e^{-t} +- |S|) / (1 - e^{-t} -+ |S|)`. They reduce to `vx`, `vy`
    /// as `t -> infinity`.
    pub fn finite_time_variances(f: &RecordFunctionals) -> Result<(f64, f64)> {
        let (k, s) = gaussian_denominators(f)?;
        let e = (-f.t).exp();
        Ok(((1.0 + e + s) / (k - s), (1.0 + e - s) / (k + s)))
    }

    /// Centre of the ellipse in `(q, p)` with `q = a + a^dag`, `p = -ia + ia^dag`.
    pub fn center_qp(&self) -> (f64, f64) {
        rotate(self.x, self.y, self.theta)
    }
}

fn rotate(x: f64, y: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (x * c - y * s, x * s + y * c)
}

fn gaussian_denominators(f: &RecordFunctionals) -> Result<(f64, f64)> {
    let k = -(-f.t).exp_m1();
    let s = f.s.norm();
    if k - s <= DEGENERATE_TOL {
        return Err(Error::DegenerateEffect(k - s));
    }
    Ok((k, s))
}

/// `theta = arg(S)/2`,
/// `x = 2 Re(R e^{-i theta}) / (1 - e^{-t} - |S|)`,
/// `y = 2 Im(R e^{-i theta}) / (1 - e^{-t} + |S|)`,
/// `Vx = (1 - e^{-t} + |S|)/(1 - e^{-t} - |S|)`, `Vy = 1/Vx`.
pub fn gaussian_effect_params(f: &RecordFunctionals) -> Result<GaussianEffect> {
    let (k, s) = gaussian_denominators(f)?;
    let theta = if s > 0.0 { f.s.arg() / 2.0 } else { 0.0 };
    let rot = f.r * C64::from_polar(1.0, -theta);
    Ok(GaussianEffect {
        theta,
        x: 2.0 * rot.re / (k - s),
        y: 2.0 * rot.im / (k + s),
        vx: (k + s) / (k - s),
        vy: (k - s) / (k + s),
        t: f.t,
        weight: 1.0,
    })
}

/// One-standard-deviation ellipse of `g` in the `(q, p)` plane.
pub fn wigner_contour(g: &GaussianEffect, npoints: usize) -> Result<Vec<(f64, f64)>> {
    if npoints < 8 {
        return Err(Error::InvalidArgument(format!(
            "contour needs at least 8 points, got {npoints}"
        )));
    }
    let (sx, sy) = (g.vx.sqrt(), g.vy.sqrt());
    Ok((0..npoints)
        .map(|k| {
            let s = 2.0 * PI * k as f64 / npoints as f64;
            rotate(g.x + sx * s.cos(), g.y + sy * s.sin(), g.theta)
        })
        .collect())
}

/// Shoelace area of a closed polygon.
pub fn polygon_area(points: &[(f64, f64)]) -> f64 {
    let n = points.len();
    let twice: f64 = (0..n)
        .map(|i| {
            let (x0, y0) = points[i];
            let (x1, y1) = points[(i + 1) % n];
            x0 * y1 - x1 * y0
        })
        .sum();
    twice.abs() / 2.0
}

/// Wigner-function moments of a positive operator, normalized by its trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WignerMoments {
    pub mean_q: f64,
    pub mean_p: f64,
    pub var_q: f64,
    pub var_p: f64,
    pub cov_qp: f64,
}

impl WignerMoments {
    /// Mean and variance of `X_theta = q cos(theta) + p sin(theta)`.
    pub fn along(&self, theta: f64) -> (f64, f64) {
        let (s, c) = theta.sin_cos();
        let mean = c * self.mean_q + s * self.mean_p;
        let var = c * c * self.var_q + s * s * self.var_p + 2.0 * s * c * self.cov_qp;
        (mean, var)
    }

    /// Covariance of `X_theta` and `X_{theta + pi/2}`.
    pub fn cross(&self, theta: f64) -> f64 {
        let (s, c) = theta.sin_cos();
        s * c * (self.var_p - self.var_q) + (c * c - s * s) * self.cov_qp
    }
}

/// Symmetrically ordered first and second moments of `q` and `p` under `op`.
/// Accurate when `op` has negligible weight on the top Fock level.
pub fn wigner_moments(op: &OperatorMatrix) -> Result<WignerMoments> {
    let space = op.space();
    let m = op.entries();
    let tr = m.trace().re;
    if !(tr > 0.0) {
        return Err(Error::ZeroNorm);
    }
    let q = quadrature_operator(space, 0.0);
    let p = quadrature_operator(space, PI / 2.0);
    let (q, p) = (q.entries(), p.entries());
    let ev = |x: &DMatrix<C64>| (m * x).trace().re / tr;
    let mean_q = ev(q);
    let mean_p = ev(p);
    let qq = q * q;
    let pp = p * p;
    let sym = (q * p + p * q) * C64::new(0.5, 0.0);
    Ok(WignerMoments {
        mean_q,
        mean_p,
        var_q: ev(&qq) - mean_q * mean_q,
        var_p: ev(&pp) - mean_p * mean_p,
        cov_qp: ev(&sym) - mean_q * mean_p,
    })
}

/// `E(X)|0>` with `E(X) = exp(-e^{2i phi} a^dag^2 / 2 + X e^{i phi} a^dag)`.
///
/// Built from the generating function of the Hermite polynomials, which gives
/// the retained amplitudes `e^{i n phi} He_n(X) / sqrt(n!)` exactly.
pub fn homodyne_vector(space: FockSpace, x: f64, phi: f64) -> StateVector {
    let d = space.dim();
    let mut v: Vec<C64> = Vec::with_capacity(d);
    let mut prev2 = 0.0f64;
    let mut prev1 = 1.0f64;
    v.push(C64::new(1.0, 0.0));
    for n in 1..d {
        let nf = n as f64;
        let cur = (x * prev1 - (nf - 1.0).sqrt() * prev2) / nf.sqrt();
        v.push(C64::from_polar(cur, nf * phi));
        prev2 = prev1;
        prev1 = cur;
    }
    StateVector::from_vector(space, DVector::from_vec(v))
}

/// `|| (X_phi - x) v || / || v ||` over the rows the truncation represents
/// exactly (all but the top level, where `a` would need `|nmax + 1>`).
pub fn quadrature_eigen_residual(v: &StateVector, phi: f64, x: f64) -> f64 {
    let space = v.space();
    let xop = quadrature_operator(space, phi);
    let xv = xop.entries() * v.amps() - v.amps() * C64::new(x, 0.0);
    let inner = xv.rows(0, space.nmax()).norm();
    inner / v.amps().norm()
}

/// Completed homodyne effect `(2 pi)^{-1/2} e^{-X^2/2} E(X)|0><0|E(X)^dag`.
pub fn effect_homodyne(x: f64, phi: f64, space: FockSpace) -> Result<OperatorMatrix> {
    let bound = 2.0 * (space.nmax() as f64).sqrt();
    if x.abs() > bound {
        return Err(Error::Truncation(format!(
            "|X| = {} exceeds 2 sqrt(nmax) = {bound}",
            x.abs()
        )));
    }
    let v = homodyne_vector(space, x, phi);
    let pref = (-x * x / 2.0).exp() / (2.0 * PI).sqrt();
    let m = v.amps() * v.amps().adjoint() * C64::new(pref, 0.0);
    Ok(OperatorMatrix::from_parts(space, m, true, true))
}

/// Completed heterodyne effect `|A><A| / pi`, projected onto the truncated
/// space without renormalizing, so every retained matrix element is exact
/// and the effects integrate to the truncated identity.
pub fn effect_heterodyne(amplitude: C64, space: FockSpace) -> Result<OperatorMatrix> {
    if !(amplitude.re.is_finite() && amplitude.im.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "amplitude {amplitude} is not finite"
        )));
    }
    let mut v = DVector::zeros(space.dim());
    v[0] = C64::new((-amplitude.norm_sqr() / 2.0).exp(), 0.0);
    for n in 1..space.dim() {
        v[n] = v[n - 1] * amplitude / (n as f64).sqrt();
    }
    let m = &v * v.adjoint() * C64::new(1.0 / PI, 0.0);
    Ok(OperatorMatrix::from_parts(space, m, true, true))
}

/// Outcome of one completed large local-oscillator measurement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletedMeasurement {
    #[serde(rename = "A", with = "complex_pair")]
    pub a: C64,
    #[serde(rename = "B", with = "complex_pair")]
    pub b: C64,
    pub weight: f64,
    pub seed: u64,
}

/// One ostensible record weighted for several initial states.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedCompletedMeasurement {
    pub a: C64,
    pub b: C64,
    pub weights: Vec<f64>,
    pub seed: u64,
}

fn completion_settings(dt: f64, t_final: f64) -> Result<TrajectorySettings> {
    if t_final < COMPLETION_TIME {
        return Err(Error::InvalidArgument(format!(
            "completed measurements need t_final >= {COMPLETION_TIME}, got {t_final}"
        )));
    }
    Ok(TrajectorySettings {
        scheme: Scheme::Diffusive,
        strategy: SamplingStrategy::OstensibleC { lambda1: None },
        dt,
        t_final,
        ..TrajectorySettings::default()
    })
}

/// Runs the linear diffusive unraveling of the damped mode under `controller`
/// and returns `A = R(t_final)`, `B = S(t_final)` with the importance weight
/// `<psi_bar|psi_bar>`.
pub fn simulate_completed_measurement(
    psi0: &StateVector,
    controller: &PhaseController,
    dt: f64,
    t_final: f64,
    seed: u64,
) -> Result<CompletedMeasurement> {
    let settings = completion_settings(dt, t_final)?;
    let model = LindbladModel::damped_mode(psi0.space());
    let traj = trajectories::run_trajectory(psi0, &model, &settings, controller, seed)?;
    Ok(CompletedMeasurement {
        a: traj.functionals.r,
        b: traj.functionals.s,
        weight: traj.final_state.weight,
        seed,
    })
}

/// Like [`simulate_completed_measurement`], propagating every state in
/// `inputs` through the same ostensible record. The record measure does not
/// depend on the state, so each weight is that input's importance weight.
pub fn simulate_completed_measurement_shared(
    inputs: &[StateVector],
    controller: &PhaseController,
    dt: f64,
    t_final: f64,
    seed: u64,
) -> Result<SharedCompletedMeasurement> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidArgument("no input states".into()))?;
    let settings = completion_settings(dt, t_final)?;
    let model = LindbladModel::damped_mode(first.space());
    let shared = trajectories::run_diffusive_shared(inputs, &model, &settings, controller, seed)?;
    Ok(SharedCompletedMeasurement {
        a: shared.functionals.r,
        b: shared.functionals.s,
        weights: shared.weights,
        seed,
    })
}

/// Label of one entry in a POVM dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PovmLabel {
    #[serde(rename = "A", with = "complex_pair")]
    Amplitude(C64),
    #[serde(rename = "X")]
    Quadrature(f64),
    #[serde(rename = "bin")]
    Bin(usize),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PovmEntry {
    pub label: PovmLabel,
    pub matrix: Vec<Vec<[f64; 2]>>,
}

impl PovmEntry {
    pub fn new(label: PovmLabel, op: &OperatorMatrix) -> Self {
        Self {
            label,
            matrix: matrix_to_rows(op.entries()),
        }
    }
}

pub(crate) mod complex_pair {
    use num_complex::Complex64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(z: &Complex64, s: S) -> Result<S::Ok, S::Error> {
        [z.re, z.im].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Complex64, D::Error> {
        let [re, im] = <[f64; 2]>::deserialize(d)?;
        Ok(Complex64::new(re, im))
    }
}
