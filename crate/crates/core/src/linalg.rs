//! Small dense helpers over `nalgebra`.

use nalgebra::DMatrix;

use crate::fock::C64;

/// Matrix exponential (Padé approximant with scaling and squaring).
pub fn expm(m: &DMatrix<C64>) -> DMatrix<C64> {
    m.clone().exp()
}

/// `max |M - M^dag|`
pub fn hermitian_deviation(m: &DMatrix<C64>) -> f64 {
    let n = m.nrows();
    let mut dev = 0.0f64;
    for i in 0..n {
        for j in i..n {
            dev = dev.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    dev
}

pub fn max_abs(m: &DMatrix<C64>) -> f64 {
    m.iter().fold(0.0f64, |acc, z| acc.max(z.norm()))
}

/// Eigenvalues of the Hermitian part `(M + M^dag)/2`, ascending.
pub fn hermitian_eigenvalues(m: &DMatrix<C64>) -> Vec<f64> {
    let h = (m + m.adjoint()) * C64::new(0.5, 0.0);
    let mut ev: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Eigen-decomposition of the Hermitian part; eigenvalues ascending with the
/// matching eigenvectors as columns.
pub fn hermitian_eigen(m: &DMatrix<C64>) -> (Vec<f64>, DMatrix<C64>) {
    let h = (m + m.adjoint()) * C64::new(0.5, 0.0);
    let eig = h.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(m.nrows(), order.len(), |i, k| {
        eig.eigenvectors[(i, order[k])]
    });
    (values, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expm_of_diagonal_and_nilpotent() {
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            C64::new(-1.0, 0.0),
            C64::new(0.0, 2.0),
        ]));
        let e = expm(&d);
        assert!((e[(0, 0)] - C64::new((-1.0f64).exp(), 0.0)).norm() < 1e-14);
        assert!((e[(1, 1)] - C64::new(0.0, 2.0).exp()).norm() < 1e-14);

        // exp([[0, z], [0, 0]]) = [[1, z], [0, 1]]
        let z = C64::new(0.3, -1.7);
        let n = DMatrix::from_row_slice(
            2,
            2,
            &[
                C64::new(0.0, 0.0),
                z,
                C64::new(0.0, 0.0),
                C64::new(0.0, 0.0),
            ],
        );
        let e = expm(&n);
        assert!((e[(0, 1)] - z).norm() < 1e-14);
        assert!((e[(0, 0)] - C64::new(1.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn eigen_of_pauli_y() {
        let y = DMatrix::from_row_slice(
            2,
            2,
            &[
                C64::new(0.0, 0.0),
                C64::new(0.0, -1.0),
                C64::new(0.0, 1.0),
                C64::new(0.0, 0.0),
            ],
        );
        let (vals, vecs) = hermitian_eigen(&y);
        assert!((vals[0] + 1.0).abs() < 1e-14 && (vals[1] - 1.0).abs() < 1e-14);
        let v = vecs.column(1).into_owned();
        let yv = &y * &v;
        assert!((yv - v).norm() < 1e-12);
    }
}
