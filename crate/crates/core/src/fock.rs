//! Truncated Fock-space linear algebra.
//!
//! Everything lives on the span of `|0>, ..., |nmax>`. Operators are dense
//! complex matrices; states are dense complex vectors. The ladder operators
//! are the plain truncations of the infinite ones, so `a^dag |nmax> = 0` and
//! `[a, a^dag]` equals the identity everywhere except the top level.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

pub type C64 = Complex64;

/// Tail mass beyond `nmax` tolerated when building a coherent state.
pub const COHERENT_TAIL_TOL: f64 = 1e-8;
/// Top-level population above which evolution emits a truncation warning.
pub const TOP_LEVEL_WARN: f64 = 1e-6;

const HERMITIAN_TOL: f64 = 1e-12;
const NORMALIZED_TOL: f64 = 1e-10;
const POSITIVE_TOL: f64 = 1e-9;
const ZERO_NORM: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct FockSpace {
    nmax: usize,
}

impl FockSpace {
    pub fn new(nmax: usize) -> Result<Self> {
        if nmax < 1 {
            return Err(Error::InvalidSpace(nmax));
        }
        Ok(Self { nmax })
    }

    /// The two-level space spanned by `|0>` and `|1>`.
    pub fn qubit() -> Self {
        Self { nmax: 1 }
    }

    pub fn nmax(&self) -> usize {
        self.nmax
    }

    pub fn dim(&self) -> usize {
        self.nmax + 1
    }

    pub(crate) fn ensure_same(&self, other: &FockSpace) -> Result<()> {
        if self != other {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(())
    }

    pub(crate) fn ensure_dim(&self, found: usize) -> Result<()> {
        if found != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found,
            });
        }
        Ok(())
    }
}

impl TryFrom<usize> for FockSpace {
    type Error = Error;
    fn try_from(nmax: usize) -> Result<Self> {
        FockSpace::new(nmax)
    }
}

impl From<FockSpace> for usize {
    fn from(space: FockSpace) -> usize {
        space.nmax
    }
}

/// A pure state, possibly unnormalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StateJson", into = "StateJson")]
pub struct StateVector {
    space: FockSpace,
    amps: DVector<C64>,
    normalized: bool,
}

impl StateVector {
    pub fn from_amps(space: FockSpace, amps: Vec<C64>) -> Result<Self> {
        space.ensure_dim(amps.len())?;
        Ok(Self::from_vector(space, DVector::from_vec(amps)))
    }

    pub(crate) fn from_vector(space: FockSpace, amps: DVector<C64>) -> Self {
        let normalized = (amps.norm_squared() - 1.0).abs() < NORMALIZED_TOL;
        Self {
            space,
            amps,
            normalized,
        }
    }

    pub fn fock(space: FockSpace, n: usize) -> Result<Self> {
        if n > space.nmax() {
            return Err(Error::Truncation(format!(
                "Fock level {n} exceeds nmax = {}",
                space.nmax()
            )));
        }
        let mut amps = DVector::zeros(space.dim());
        amps[n] = C64::new(1.0, 0.0);
        Ok(Self::from_vector(space, amps))
    }

    pub fn vacuum(space: FockSpace) -> Self {
        Self::fock(space, 0).expect("vacuum always fits")
    }

    pub fn space(&self) -> FockSpace {
        self.space
    }

    pub fn amps(&self) -> &DVector<C64> {
        &self.amps
    }

    pub fn amp(&self, n: usize) -> C64 {
        self.amps[n]
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.norm_squared()
    }

    pub fn normalize(&self) -> Result<Self> {
        let n2 = self.norm_sqr();
        if !(n2 > ZERO_NORM) || !n2.is_finite() {
            return Err(Error::ZeroNorm);
        }
        let amps = self.amps.unscale(n2.sqrt());
        Ok(Self {
            space: self.space,
            amps,
            normalized: true,
        })
    }

    pub fn scale(&self, factor: C64) -> Self {
        Self::from_vector(self.space, self.amps.scale_complex(factor))
    }

    /// `<self|other>`
    pub fn inner(&self, other: &StateVector) -> Result<C64> {
        self.space.ensure_same(&other.space)?;
        Ok(self.amps.dotc(&other.amps))
    }

    /// Population of the top retained level, relative to the norm.
    pub fn top_population(&self) -> f64 {
        let n2 = self.norm_sqr();
        if n2 <= 0.0 {
            return 0.0;
        }
        self.amps[self.space.nmax()].norm_sqr() / n2
    }

    /// `|psi><psi| / <psi|psi>`
    pub fn projector(&self) -> Result<DensityMatrix> {
        let psi = self.normalize()?;
        let entries = &psi.amps * psi.amps.adjoint();
        Ok(DensityMatrix {
            space: self.space,
            entries,
        })
    }
}

trait ScaleComplex {
    fn scale_complex(&self, s: C64) -> Self;
}

impl ScaleComplex for DVector<C64> {
    fn scale_complex(&self, s: C64) -> Self {
        self.map(|z| z * s)
    }
}

/// `|<a|b>|^2 / (<a|a><b|b>)`; insensitive to global phase and norm.
pub fn fidelity(a: &StateVector, b: &StateVector) -> Result<f64> {
    let ab = a.inner(b)?;
    let na = a.norm_sqr();
    let nb = b.norm_sqr();
    if !(na > ZERO_NORM && nb > ZERO_NORM) {
        return Err(Error::ZeroNorm);
    }
    Ok(ab.norm_sqr() / (na * nb))
}

/// A dense operator on a truncated Fock space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "OperatorJson", into = "OperatorJson")]
pub struct OperatorMatrix {
    space: FockSpace,
    entries: DMatrix<C64>,
    hermitian: bool,
    positive: bool,
}

impl OperatorMatrix {
    pub fn new(space: FockSpace, entries: DMatrix<C64>) -> Result<Self> {
        space.ensure_dim(entries.nrows())?;
        space.ensure_dim(entries.ncols())?;
        Ok(Self {
            space,
            entries,
            hermitian: false,
            positive: false,
        })
    }

    /// Builds an operator flagged Hermitian, checking the flag's invariant.
    pub fn hermitian(space: FockSpace, entries: DMatrix<C64>) -> Result<Self> {
        let mut op = Self::new(space, entries)?;
        let dev = linalg::hermitian_deviation(&op.entries);
        if dev >= HERMITIAN_TOL * linalg::max_abs(&op.entries).max(1.0) {
            return Err(Error::NotHermitian(dev));
        }
        op.hermitian = true;
        Ok(op)
    }

    /// Builds an effect: Hermitian with no eigenvalue below `-1e-9` (relative
    /// to the operator norm when that exceeds one).
    pub fn positive(space: FockSpace, entries: DMatrix<C64>) -> Result<Self> {
        let mut op = Self::hermitian(space, entries)?;
        let scale = linalg::max_abs(&op.entries).max(1.0);
        let min = op.min_eigenvalue();
        if min < -POSITIVE_TOL * scale {
            return Err(Error::Positivity(min));
        }
        op.positive = true;
        Ok(op)
    }

    /// Trusted constructor for operators whose properties hold by construction.
    pub(crate) fn from_parts(
        space: FockSpace,
        entries: DMatrix<C64>,
        hermitian: bool,
        positive: bool,
    ) -> Self {
        debug_assert_eq!(entries.nrows(), space.dim());
        Self {
            space,
            entries,
            hermitian,
            positive,
        }
    }

    pub fn identity(space: FockSpace) -> Self {
        let entries = DMatrix::identity(space.dim(), space.dim());
        Self {
            space,
            entries,
            hermitian: true,
            positive: true,
        }
    }

    pub fn zeros(space: FockSpace) -> Self {
        Self {
            space,
            entries: DMatrix::zeros(space.dim(), space.dim()),
            hermitian: true,
            positive: true,
        }
    }

    pub fn space(&self) -> FockSpace {
        self.space
    }

    pub fn entries(&self) -> &DMatrix<C64> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<C64> {
        self.entries
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }

    pub fn is_positive(&self) -> bool {
        self.positive
    }

    pub fn dagger(&self) -> Self {
        Self {
            space: self.space,
            entries: self.entries.adjoint(),
            hermitian: self.hermitian,
            positive: self.positive,
        }
    }

    pub fn compose(&self, rhs: &OperatorMatrix) -> Result<Self> {
        self.space.ensure_same(&rhs.space)?;
        Self::new(self.space, &self.entries * &rhs.entries)
    }

    pub fn add(&self, rhs: &OperatorMatrix) -> Result<Self> {
        self.space.ensure_same(&rhs.space)?;
        let mut out = Self::new(self.space, &self.entries + &rhs.entries)?;
        out.hermitian = self.hermitian && rhs.hermitian;
        out.positive = self.positive && rhs.positive;
        Ok(out)
    }

    pub fn scale(&self, s: C64) -> Self {
        let real = s.im == 0.0;
        Self {
            space: self.space,
            entries: self.entries.map(|z| z * s),
            hermitian: self.hermitian && real,
            positive: self.positive && real && s.re >= 0.0,
        }
    }

    pub fn apply(&self, psi: &StateVector) -> Result<StateVector> {
        self.space.ensure_same(&psi.space)?;
        Ok(StateVector::from_vector(
            self.space,
            &self.entries * &psi.amps,
        ))
    }

    pub fn trace(&self) -> C64 {
        self.entries.trace()
    }

    /// Smallest eigenvalue of the Hermitian part.
    pub fn min_eigenvalue(&self) -> f64 {
        linalg::hermitian_eigenvalues(&self.entries)
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        linalg::hermitian_eigenvalues(&self.entries)
    }
}

/// A normalized mixed state.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    space: FockSpace,
    entries: DMatrix<C64>,
}

impl DensityMatrix {
    /// Validates Hermiticity (1e-12), unit trace (1e-10) and positivity (-1e-9).
    pub fn new(space: FockSpace, entries: DMatrix<C64>) -> Result<Self> {
        space.ensure_dim(entries.nrows())?;
        space.ensure_dim(entries.ncols())?;
        let dev = linalg::hermitian_deviation(&entries);
        if dev >= HERMITIAN_TOL {
            return Err(Error::NotHermitian(dev));
        }
        let tr = entries.trace();
        if (tr.re - 1.0).abs() > NORMALIZED_TOL || tr.im.abs() > NORMALIZED_TOL {
            return Err(Error::InvalidArgument(format!(
                "density matrix trace {tr} is not 1"
            )));
        }
        let min = linalg::hermitian_eigenvalues(&entries)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        if min < -POSITIVE_TOL {
            return Err(Error::Positivity(min));
        }
        Ok(Self { space, entries })
    }

    /// Skips validation; used for integrator output whose trace and positivity
    /// are checked separately against looser tolerances.
    pub fn from_entries_unchecked(space: FockSpace, entries: DMatrix<C64>) -> Self {
        debug_assert_eq!(entries.nrows(), space.dim());
        Self { space, entries }
    }

    pub fn from_state(psi: &StateVector) -> Result<Self> {
        psi.projector()
    }

    pub fn space(&self) -> FockSpace {
        self.space
    }

    pub fn entries(&self) -> &DMatrix<C64> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<C64> {
        self.entries
    }

    pub fn trace(&self) -> C64 {
        self.entries.trace()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        linalg::hermitian_eigenvalues(&self.entries)
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }

    /// `Tr(rho op)`
    pub fn expect(&self, op: &OperatorMatrix) -> Result<C64> {
        self.space.ensure_same(&op.space())?;
        Ok((&self.entries * op.entries()).trace())
    }
}

/// `a|n> = sqrt(n)|n-1>`
pub fn annihilation(space: FockSpace) -> OperatorMatrix {
    let d = space.dim();
    let mut m = DMatrix::zeros(d, d);
    for n in 1..d {
        m[(n - 1, n)] = C64::new((n as f64).sqrt(), 0.0);
    }
    OperatorMatrix::new(space, m).expect("dimension matches by construction")
}

pub fn creation(space: FockSpace) -> OperatorMatrix {
    annihilation(space).dagger()
}

/// `a^dag a`, diagonal with entries `0..=nmax`.
pub fn number_operator(space: FockSpace) -> OperatorMatrix {
    let d = space.dim();
    let m = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            C64::new(i as f64, 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    });
    OperatorMatrix::positive(space, m).expect("number operator is positive")
}

/// `a e^{-i phi} + a^dag e^{i phi}`; vacuum variance 1.
pub fn quadrature_operator(space: FockSpace, phi: f64) -> OperatorMatrix {
    let a = annihilation(space);
    let e = C64::from_polar(1.0, phi);
    let m = a.entries() * e.conj() + a.entries().adjoint() * e;
    OperatorMatrix::hermitian(space, m).expect("quadrature is Hermitian")
}

/// Normalized coherent state `|alpha>` on the truncated space.
///
/// Requires `|alpha|^2 <= nmax / 4` and a tail population beyond `nmax`
/// below [`COHERENT_TAIL_TOL`]; the retained amplitudes are renormalized.
pub fn coherent_state(space: FockSpace, alpha: C64) -> Result<StateVector> {
    let mean = alpha.norm_sqr();
    let nmax = space.nmax();
    if mean > nmax as f64 / 4.0 {
        return Err(Error::Truncation(format!(
            "|alpha|^2 = {mean} exceeds nmax/4 = {}",
            nmax as f64 / 4.0
        )));
    }
    let mut amps = Vec::with_capacity(space.dim());
    let mut c = C64::new((-mean / 2.0).exp(), 0.0);
    amps.push(c);
    for n in 1..=nmax {
        c = c * alpha / (n as f64).sqrt();
        amps.push(c);
    }
    let tail = poisson_tail(mean, nmax);
    if tail > COHERENT_TAIL_TOL {
        return Err(Error::Truncation(format!(
            "coherent amplitude {alpha} leaks {tail:e} of its population above nmax = {nmax}"
        )));
    }
    StateVector::from_amps(space, amps)?.normalize()
}

/// `exp(a^dag A - a A*)|0> = |A>`, the normalized coherent state.
pub fn displacement_apply(space: FockSpace, amplitude: C64) -> Result<StateVector> {
    coherent_state(space, amplitude)
}

/// `P(N > nmax)` for `N ~ Poisson(mean)`, summed term by term.
fn poisson_tail(mean: f64, nmax: usize) -> f64 {
    if mean == 0.0 {
        return 0.0;
    }
    // log of the (nmax+1)-th term
    let mut n = nmax + 1;
    let mut log_term = -mean + (n as f64) * mean.ln() - ln_factorial(n);
    let mut total = 0.0;
    loop {
        let term = log_term.exp();
        total += term;
        if term < 1e-30 && (n as f64) > mean {
            break;
        }
        n += 1;
        log_term += mean.ln() - (n as f64).ln();
        if n > nmax + 100_000 {
            break;
        }
    }
    total
}

fn ln_factorial(n: usize) -> f64 {
    statrs::function::factorial::ln_factorial(n as u64)
}

/// `<psi|M|psi> / <psi|psi>`
pub fn expectation(state: &StateVector, op: &OperatorMatrix) -> Result<C64> {
    state.space.ensure_same(&op.space)?;
    let n2 = state.norm_sqr();
    if !(n2 > ZERO_NORM) {
        return Err(Error::ZeroNorm);
    }
    let m_psi = op.entries() * state.amps();
    Ok(state.amps.dotc(&m_psi) / n2)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StateJson {
    pub nmax: usize,
    pub amps: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OperatorJson {
    pub nmax: usize,
    pub rows: Vec<Vec<[f64; 2]>>,
}

pub(crate) fn matrix_to_rows(m: &DMatrix<C64>) -> Vec<Vec<[f64; 2]>> {
    (0..m.nrows())
        .map(|i| {
            (0..m.ncols())
                .map(|j| [m[(i, j)].re, m[(i, j)].im])
                .collect()
        })
        .collect()
}

pub(crate) fn rows_to_matrix(dim: usize, rows: &[Vec<[f64; 2]>]) -> Result<DMatrix<C64>> {
    if rows.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: rows.len(),
        });
    }
    let mut m = DMatrix::zeros(dim, dim);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: row.len(),
            });
        }
        for (j, z) in row.iter().enumerate() {
            m[(i, j)] = C64::new(z[0], z[1]);
        }
    }
    Ok(m)
}

impl From<StateVector> for StateJson {
    fn from(s: StateVector) -> Self {
        StateJson {
            nmax: s.space.nmax(),
            amps: s.amps.iter().map(|z| [z.re, z.im]).collect(),
        }
    }
}

impl TryFrom<StateJson> for StateVector {
    type Error = Error;
    fn try_from(j: StateJson) -> Result<Self> {
        let space = FockSpace::new(j.nmax)?;
        StateVector::from_amps(space, j.amps.iter().map(|z| C64::new(z[0], z[1])).collect())
    }
}

impl From<OperatorMatrix> for OperatorJson {
    fn from(op: OperatorMatrix) -> Self {
        OperatorJson {
            nmax: op.space.nmax(),
            rows: matrix_to_rows(&op.entries),
        }
    }
}

impl TryFrom<OperatorJson> for OperatorMatrix {
    type Error = Error;
    fn try_from(j: OperatorJson) -> Result<Self> {
        let space = FockSpace::new(j.nmax)?;
        let m = rows_to_matrix(space.dim(), &j.rows)?;
        // Recover the Hermitian flag when the data supports it.
        OperatorMatrix::hermitian(space, m.clone()).or_else(|_| OperatorMatrix::new(space, m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn rejects_trivial_space() {
        assert_eq!(FockSpace::new(0), Err(Error::InvalidSpace(0)));
        assert_eq!(FockSpace::new(1).unwrap().dim(), 2);
    }

    #[test]
    fn annihilation_two_level() {
        let a = annihilation(FockSpace::qubit());
        assert_eq!(a.entries()[(0, 1)], c(1.0, 0.0));
        assert_eq!(a.entries()[(0, 0)], c(0.0, 0.0));
        assert_eq!(a.entries()[(1, 0)], c(0.0, 0.0));
        assert_eq!(a.entries()[(1, 1)], c(0.0, 0.0));
    }

    #[test]
    fn commutator_is_identity_below_cutoff() {
        let space = FockSpace::new(8).unwrap();
        let a = annihilation(space);
        let ad = creation(space);
        let comm = a.entries() * ad.entries() - ad.entries() * a.entries();
        for i in 0..space.dim() {
            for j in 0..space.dim() {
                let expected = if i == j && i < space.nmax() { 1.0 } else { 0.0 };
                if i == space.nmax() && j == space.nmax() {
                    // truncation: [a, a^dag]_{nmax,nmax} = -nmax
                    assert!((comm[(i, j)].re + space.nmax() as f64).abs() < 1e-12);
                    continue;
                }
                assert!((comm[(i, j)] - c(expected, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn number_operator_is_exact_diagonal() {
        let space = FockSpace::new(6).unwrap();
        let n = number_operator(space);
        let ad_a = creation(space).compose(&annihilation(space)).unwrap();
        for i in 0..space.dim() {
            assert_eq!(n.entries()[(i, i)], c(i as f64, 0.0));
        }
        assert!((n.entries() - ad_a.entries()).norm() < 1e-12);
    }

    #[test]
    fn coherent_is_eigenstate_of_a() {
        let space = FockSpace::new(30).unwrap();
        let alpha = c(1.5, 0.0);
        let psi = coherent_state(space, alpha).unwrap();
        let a_psi = annihilation(space).apply(&psi).unwrap();
        let residual = (a_psi.amps() - psi.amps() * alpha).norm();
        assert!(residual < 1e-8, "residual {residual}");
    }

    #[test]
    fn coherent_amplitudes() {
        let psi = coherent_state(FockSpace::new(20).unwrap(), c(0.0, 0.0)).unwrap();
        assert_eq!(psi, StateVector::vacuum(FockSpace::new(20).unwrap()));

        let psi = coherent_state(FockSpace::new(20).unwrap(), c(1.0, 0.0)).unwrap();
        assert!((psi.amp(0).re - (-0.5f64).exp()).abs() < 1e-12);
        assert!((psi.amp(0).re - 0.6065).abs() < 1e-4);

        let space = FockSpace::new(30).unwrap();
        let alpha = c(0.7, -1.1);
        let psi = coherent_state(space, alpha).unwrap();
        let n = expectation(&psi, &number_operator(space)).unwrap();
        assert!((n.re - alpha.norm_sqr()).abs() < 1e-8);
    }

    #[test]
    fn coherent_truncation_guards() {
        // violates |alpha|^2 <= nmax/4
        let err = coherent_state(FockSpace::new(4).unwrap(), c(1.1, 0.0)).unwrap_err();
        assert!(matches!(err, Error::Truncation(_)));
        // satisfies the ratio bound but leaks ~4e-3 above nmax = 4
        let err = coherent_state(FockSpace::new(4).unwrap(), c(1.0, 0.0)).unwrap_err();
        assert!(matches!(err, Error::Truncation(_)));
        assert!(coherent_state(FockSpace::new(11).unwrap(), c(1.0, 0.0)).is_ok());
    }

    #[test]
    fn quadrature_conventions() {
        let space = FockSpace::new(10).unwrap();
        let a = annihilation(space);
        let q = quadrature_operator(space, 0.0);
        assert!((q.entries() - (a.entries() + a.entries().adjoint())).norm() < 1e-14);
        let p = quadrature_operator(space, std::f64::consts::FRAC_PI_2);
        let expected = a.entries() * c(0.0, -1.0) + a.entries().adjoint() * c(0.0, 1.0);
        assert!((p.entries() - expected).norm() < 1e-14);
        assert!(q.is_hermitian() && p.is_hermitian());

        let vac = StateVector::vacuum(space);
        for &phi in &[0.0, 0.3, 1.2, 4.0] {
            let x = quadrature_operator(space, phi);
            let x2 = x.compose(&x).unwrap();
            let v = expectation(&vac, &x2).unwrap();
            assert!((v.re - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn expectation_examples() {
        let space = FockSpace::new(30).unwrap();
        let n = number_operator(space);
        let vac = StateVector::vacuum(space);
        assert_eq!(expectation(&vac, &n).unwrap(), c(0.0, 0.0));

        let coh = coherent_state(space, c(2.0, 0.0)).unwrap();
        assert!((expectation(&coh, &n).unwrap().re - 4.0).abs() < 1e-6);

        let two_one = StateVector::fock(space, 1).unwrap().scale(c(2.0, 0.0));
        assert!(!two_one.is_normalized());
        assert!((expectation(&two_one, &n).unwrap().re - 1.0).abs() < 1e-14);

        let zero = StateVector::from_amps(space, vec![c(0.0, 0.0); space.dim()]).unwrap();
        assert_eq!(expectation(&zero, &n), Err(Error::ZeroNorm));
    }

    #[test]
    fn coherent_overlap_formula() {
        let space = FockSpace::new(30).unwrap();
        let a1 = c(1.0, 0.0);
        let a2 = c(0.0, 1.0);
        let s1 = displacement_apply(space, a1).unwrap();
        let s2 = displacement_apply(space, a2).unwrap();
        let overlap = s1.inner(&s2).unwrap();
        let expected = (-a1.norm_sqr() / 2.0 - a2.norm_sqr() / 2.0 + a1.conj() * a2).exp();
        assert!((overlap - expected).norm() < 1e-8);
        assert_eq!(
            displacement_apply(space, c(0.0, 0.0)).unwrap(),
            StateVector::vacuum(space)
        );
    }

    #[test]
    fn displaced_vacuum_matches_normal_ordered_series() {
        // exp(-|A|^2/2 + a^dag A)|0> built by the dense exponential
        let space = FockSpace::new(30).unwrap();
        let amp = c(0.6, -0.8);
        let gen = creation(space).entries() * amp;
        let e = linalg::expm(&gen);
        let v = e.column(0).into_owned() * C64::new((-amp.norm_sqr() / 2.0).exp(), 0.0);
        let series = StateVector::from_vector(space, v);
        let coh = displacement_apply(space, amp).unwrap();
        let overlap = coh.inner(&series).unwrap();
        assert!((overlap - c(1.0, 0.0)).norm() < 1e-8);
    }

    #[test]
    fn cross_dimension_rejected() {
        let s1 = FockSpace::new(2).unwrap();
        let s2 = FockSpace::new(3).unwrap();
        let err = expectation(&StateVector::vacuum(s1), &number_operator(s2)).unwrap_err();
        assert_eq!(
            err,
            Error::DimensionMismatch {
                expected: 3,
                found: 4
            }
        );
    }

    #[test]
    fn json_schema() {
        let space = FockSpace::qubit();
        let psi = StateVector::from_amps(space, vec![c(0.6, 0.0), c(0.0, 0.8)]).unwrap();
        let text = serde_json::to_string(&psi).unwrap();
        assert_eq!(text, r#"{"nmax":1,"amps":[[0.6,0.0],[0.0,0.8]]}"#);
        let back: StateVector = serde_json::from_str(&text).unwrap();
        assert_eq!(back, psi);

        let a = annihilation(space);
        let text = serde_json::to_string(&a).unwrap();
        assert_eq!(
            text,
            r#"{"nmax":1,"rows":[[[0.0,0.0],[1.0,0.0]],[[0.0,0.0],[0.0,0.0]]]}"#
        );
        let back: OperatorMatrix = serde_json::from_str(&text).unwrap();
        assert_eq!(back.entries(), a.entries());

        let bad = r#"{"nmax":1,"amps":[[1.0,0.0]]}"#;
        assert!(serde_json::from_str::<StateVector>(bad).is_err());
    }

    #[test]
    fn density_matrix_validation() {
        let space = FockSpace::qubit();
        let rho = DensityMatrix::from_state(&StateVector::fock(space, 1).unwrap()).unwrap();
        assert!((rho.trace() - c(1.0, 0.0)).norm() < 1e-14);
        let bad =
            DMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]);
        assert!(DensityMatrix::new(space, bad).is_err());
    }
}
