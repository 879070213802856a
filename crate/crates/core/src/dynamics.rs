//! Lindblad master equation and the infinitesimal measurement operators that
//! generate its unravelings.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{
    annihilation, matrix_to_rows, rows_to_matrix, DensityMatrix, FockSpace, OperatorMatrix, C64,
    TOP_LEVEL_WARN,
};
use crate::linalg;

/// Largest master-equation step accepted, in units of the decay rate.
pub const MAX_MASTER_DT: f64 = 1e-2;
const TRACE_DRIFT_TOL: f64 = 1e-6;
const POSITIVITY_TOL: f64 = 1e-7;

/// `rho' = -i[H, rho] + sum_mu D[c_mu] rho`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelJson", into = "ModelJson")]
pub struct LindbladModel {
    space: FockSpace,
    hamiltonian: OperatorMatrix,
    collapse: Vec<OperatorMatrix>,
    #[serde(skip)]
    collapse_dag_collapse: Vec<DMatrix<C64>>,
}

impl LindbladModel {
    pub fn new(hamiltonian: OperatorMatrix, collapse: Vec<OperatorMatrix>) -> Result<Self> {
        let space = hamiltonian.space();
        let hamiltonian = if hamiltonian.is_hermitian() {
            hamiltonian
        } else {
            OperatorMatrix::hermitian(space, hamiltonian.into_entries())?
        };
        for c in &collapse {
            space.ensure_same(&c.space())?;
        }
        let collapse_dag_collapse = collapse
            .iter()
            .map(|c| c.entries().adjoint() * c.entries())
            .collect();
        Ok(Self {
            space,
            hamiltonian,
            collapse,
            collapse_dag_collapse,
        })
    }

    /// Freely damped mode: `H = 0`, `c = a`, unit decay rate.
    pub fn damped_mode(space: FockSpace) -> Self {
        Self::new(OperatorMatrix::zeros(space), vec![annihilation(space)])
            .expect("damped mode is well formed")
    }

    pub fn space(&self) -> FockSpace {
        self.space
    }

    pub fn hamiltonian(&self) -> &OperatorMatrix {
        &self.hamiltonian
    }

    pub fn collapse_ops(&self) -> &[OperatorMatrix] {
        &self.collapse
    }

    /// The single collapse operator required by every unraveling.
    pub fn single_collapse(&self) -> Result<&OperatorMatrix> {
        match self.collapse.as_slice() {
            [c] => Ok(c),
            other => Err(Error::MultiChannelUnsupported(other.len())),
        }
    }

    /// True when `H = 0` and the only collapse operator is exactly `a`.
    pub fn is_free_damping(&self) -> bool {
        let a = annihilation(self.space);
        self.collapse.len() == 1
            && self.collapse[0].entries() == a.entries()
            && linalg::max_abs(self.hamiltonian.entries()) == 0.0
    }

    /// `c -> c + gamma`, `H -> H - (i/2)(gamma* c - gamma c^dag)`; leaves the
    /// master equation unchanged.
    pub fn shifted(&self, gamma: C64) -> Result<Self> {
        let c = self.single_collapse()?;
        let id = DMatrix::<C64>::identity(self.space.dim(), self.space.dim());
        let c_new = c.entries() + &id * gamma;
        let h_shift =
            (c.entries() * gamma.conj() - c.entries().adjoint() * gamma) * C64::new(0.0, -0.5);
        let h_new = self.hamiltonian.entries() + h_shift;
        Self::new(
            OperatorMatrix::hermitian(self.space, h_new)?,
            vec![OperatorMatrix::new(self.space, c_new)?],
        )
    }

    /// Right-hand side `L rho` on a raw matrix.
    pub fn generator(&self, rho: &DMatrix<C64>) -> DMatrix<C64> {
        let h = self.hamiltonian.entries();
        let mut out = (h * rho - rho * h) * C64::new(0.0, -1.0);
        for (c, cdc) in self.collapse.iter().zip(&self.collapse_dag_collapse) {
            out += dissipator(c.entries(), cdc, rho);
        }
        out
    }
}

fn dissipator(c: &DMatrix<C64>, cdc: &DMatrix<C64>, rho: &DMatrix<C64>) -> DMatrix<C64> {
    c * rho * c.adjoint() - (cdc * rho + rho * cdc) * C64::new(0.5, 0.0)
}

/// `D[c] rho = c rho c^dag - (c^dag c rho + rho c^dag c)/2`
pub fn superop_d(c: &OperatorMatrix, rho: &DensityMatrix) -> Result<DMatrix<C64>> {
    c.space().ensure_same(&rho.space())?;
    let cdc = c.entries().adjoint() * c.entries();
    Ok(dissipator(c.entries(), &cdc, rho.entries()))
}

/// `J[a] rho = a rho a^dag`
pub fn superop_j(op: &OperatorMatrix, rho: &DensityMatrix) -> Result<DMatrix<C64>> {
    op.space().ensure_same(&rho.space())?;
    Ok(sandwich(op.entries(), rho.entries()))
}

pub(crate) fn sandwich(op: &DMatrix<C64>, rho: &DMatrix<C64>) -> DMatrix<C64> {
    op * rho * op.adjoint()
}

fn rk4_step(model: &LindbladModel, rho: &DMatrix<C64>, h: f64) -> DMatrix<C64> {
    let half = C64::new(h / 2.0, 0.0);
    let full = C64::new(h, 0.0);
    let k1 = model.generator(rho);
    let k2 = model.generator(&(rho + &k1 * half));
    let k3 = model.generator(&(rho + &k2 * half));
    let k4 = model.generator(&(rho + &k3 * full));
    rho + (k1 + (k2 + k3) * C64::new(2.0, 0.0) + k4) * C64::new(h / 6.0, 0.0)
}

/// Integrates the master equation to `t_final` with fixed-step fourth-order
/// Runge-Kutta. The step is shrunk slightly when needed so that an integer
/// number of steps lands exactly on `t_final`.
pub fn evolve_master(
    rho0: &DensityMatrix,
    model: &LindbladModel,
    t_final: f64,
    dt: f64,
) -> Result<DensityMatrix> {
    let mut out = evolve_master_at(rho0, model, &[t_final], dt)?;
    Ok(out.pop().expect("one requested time"))
}

/// Like [`evolve_master`], returning the state at each of the ascending `times`.
pub fn evolve_master_at(
    rho0: &DensityMatrix,
    model: &LindbladModel,
    times: &[f64],
    dt: f64,
) -> Result<Vec<DensityMatrix>> {
    rho0.space().ensure_same(&model.space())?;
    if !(dt > 0.0) || dt > MAX_MASTER_DT {
        return Err(Error::StepSize(format!(
            "master-equation dt = {dt} must lie in (0, {MAX_MASTER_DT}]"
        )));
    }
    let space = model.space();
    let top = space.nmax();
    let mut warned = false;
    let mut rho = rho0.entries().clone();
    let mut t = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        if target < t || !target.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "sample times must be finite and ascending, got {target} after {t}"
            )));
        }
        let span = target - t;
        let nsteps = (span / dt - 1e-9).ceil().max(0.0) as usize;
        if nsteps > 0 {
            let h = span / nsteps as f64;
            for _ in 0..nsteps {
                rho = rk4_step(model, &rho, h);
                if !warned && rho[(top, top)].re > TOP_LEVEL_WARN {
                    log::warn!(
                        "top Fock level population {:.3e} exceeds {TOP_LEVEL_WARN:e}; consider a larger nmax",
                        rho[(top, top)].re
                    );
                    warned = true;
                }
            }
        }
        t = target;
        let drift = (rho.trace() - C64::new(1.0, 0.0)).norm();
        if drift > TRACE_DRIFT_TOL {
            return Err(Error::StepSize(format!(
                "trace drifted by {drift:e} at t = {t}"
            )));
        }
        let min = linalg::hermitian_eigenvalues(&rho)[0];
        if min < -POSITIVITY_TOL {
            return Err(Error::Positivity(min));
        }
        out.push(DensityMatrix::from_entries_unchecked(space, rho.clone()));
    }
    Ok(out)
}

/// The two infinitesimal measurement operators `Omega_0(dt)`, `Omega_1(dt)`.
#[derive(Clone, Debug)]
pub struct MeasurementOperatorPair {
    pub omega0: OperatorMatrix,
    pub omega1: OperatorMatrix,
    pub dt: f64,
    pub gamma: C64,
}

impl MeasurementOperatorPair {
    /// `max |Omega_0^dag Omega_0 + Omega_1^dag Omega_1 - 1|`, which is O(dt^2).
    pub fn completeness_residual(&self) -> f64 {
        let d = self.omega0.space().dim();
        let sum = self.omega0.entries().adjoint() * self.omega0.entries()
            + self.omega1.entries().adjoint() * self.omega1.entries()
            - DMatrix::<C64>::identity(d, d);
        linalg::max_abs(&sum)
    }

    /// Non-selective one-step map `sum_r J[Omega_r] rho`.
    pub fn nonselective(&self, rho: &DMatrix<C64>) -> DMatrix<C64> {
        sandwich(self.omega0.entries(), rho) + sandwich(self.omega1.entries(), rho)
    }

    pub fn operator(&self, outcome: u8) -> &OperatorMatrix {
        if outcome == 0 {
            &self.omega0
        } else {
            &self.omega1
        }
    }
}

/// Direct detection of `c + gamma`:
/// `Omega_1 = sqrt(dt)(c + gamma)`,
/// `Omega_0 = 1 - dt[iH + (c gamma* - c^dag gamma)/2 + (c^dag + gamma*)(c + gamma)/2]`.
pub fn direct_detection_ops(
    model: &LindbladModel,
    gamma: C64,
    dt: f64,
) -> Result<MeasurementOperatorPair> {
    let space = model.space();
    let c = model.single_collapse()?.entries();
    let d = space.dim();
    let id = DMatrix::<C64>::identity(d, d);
    let cg = c + &id * gamma;
    let omega1 = &cg * C64::new(dt.sqrt(), 0.0);
    let generator = model.hamiltonian().entries() * C64::new(0.0, 1.0)
        + (c * gamma.conj() - c.adjoint() * gamma) * C64::new(0.5, 0.0)
        + cg.adjoint() * &cg * C64::new(0.5, 0.0);
    let omega0 = &id - generator * C64::new(dt, 0.0);
    Ok(MeasurementOperatorPair {
        omega0: OperatorMatrix::new(space, omega0)?,
        omega1: OperatorMatrix::new(space, omega1)?,
        dt,
        gamma,
    })
}

/// Mixes the `gamma = 0` pair with the 2x2 unitary
///
/// ```text
/// U = [[ sqrt(1 - |g|^2 dt),  g sqrt(dt)          ],
///      [ -g* sqrt(dt),        sqrt(1 - |g|^2 dt)  ]]
/// ```
///
/// as `Omega'_s = sum_r U_{r,s} Omega_r`. The diagonal is the exactly unitary
/// completion of `1 - |g|^2 dt / 2`, so the non-selective map is unchanged to
/// rounding error, and the result agrees with `direct_detection_ops(model, g,
/// dt)` up to O(dt^{3/2}).
pub fn unitary_rearrange(
    pair: &MeasurementOperatorPair,
    gamma: C64,
) -> Result<MeasurementOperatorPair> {
    if pair.gamma != C64::new(0.0, 0.0) {
        return Err(Error::InvalidArgument(
            "rearrangement expects a pair built with gamma = 0".into(),
        ));
    }
    let dt = pair.dt;
    let g2dt = gamma.norm_sqr() * dt;
    if g2dt > 1.0 {
        return Err(Error::StepSize(format!(
            "|gamma|^2 dt = {g2dt} exceeds 1; rearrangement is not unitary"
        )));
    }
    let diag = C64::new((1.0 - g2dt).sqrt(), 0.0);
    let u01 = gamma * dt.sqrt();
    let u10 = -gamma.conj() * dt.sqrt();
    let o0 = pair.omega0.entries();
    let o1 = pair.omega1.entries();
    let space = pair.omega0.space();
    Ok(MeasurementOperatorPair {
        omega0: OperatorMatrix::new(space, o0 * diag + o1 * u10)?,
        omega1: OperatorMatrix::new(space, o0 * u01 + o1 * diag)?,
        dt,
        gamma,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelJson {
    pub nmax: usize,
    #[serde(rename = "H")]
    pub hamiltonian: Vec<Vec<[f64; 2]>>,
    pub collapse: Vec<Vec<Vec<[f64; 2]>>>,
}

impl From<LindbladModel> for ModelJson {
    fn from(m: LindbladModel) -> Self {
        ModelJson {
            nmax: m.space.nmax(),
            hamiltonian: matrix_to_rows(m.hamiltonian.entries()),
            collapse: m
                .collapse
                .iter()
                .map(|c| matrix_to_rows(c.entries()))
                .collect(),
        }
    }
}

impl TryFrom<ModelJson> for LindbladModel {
    type Error = Error;
    fn try_from(j: ModelJson) -> Result<Self> {
        let space = FockSpace::new(j.nmax)?;
        let h = OperatorMatrix::hermitian(space, rows_to_matrix(space.dim(), &j.hamiltonian)?)?;
        let collapse = j
            .collapse
            .iter()
            .map(|rows| OperatorMatrix::new(space, rows_to_matrix(space.dim(), rows)?))
            .collect::<Result<Vec<_>>>()?;
        LindbladModel::new(h, collapse)
    }
}
