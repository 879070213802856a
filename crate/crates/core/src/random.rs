//! Random states and operators for property checks and benchmarks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::fock::{DensityMatrix, FockSpace, OperatorMatrix, StateVector, C64};

fn gaussian_c64<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
}

/// Haar-random normalized pure state.
pub fn state<R: Rng + ?Sized>(space: FockSpace, rng: &mut R) -> StateVector {
    let v = DVector::from_fn(space.dim(), |_, _| gaussian_c64(rng));
    StateVector::from_vector(space, v)
        .normalize()
        .expect("gaussian vector is nonzero")
}

/// Ginibre-random full-rank density matrix.
pub fn density<R: Rng + ?Sized>(space: FockSpace, rng: &mut R) -> DensityMatrix {
    let d = space.dim();
    let g = DMatrix::from_fn(d, d, |_, _| gaussian_c64(rng));
    let m = &g * g.adjoint();
    let m = &m / m.trace();
    // symmetrize away rounding so the strict constructor accepts it
    let m = (&m + m.adjoint()) * C64::new(0.5, 0.0);
    DensityMatrix::new(space, m).expect("Ginibre matrix is a valid state")
}

/// Operator with independent complex Gaussian entries.
pub fn operator<R: Rng + ?Sized>(space: FockSpace, rng: &mut R) -> OperatorMatrix {
    let d = space.dim();
    OperatorMatrix::new(space, DMatrix::from_fn(d, d, |_, _| gaussian_c64(rng)))
        .expect("dimension matches")
}
