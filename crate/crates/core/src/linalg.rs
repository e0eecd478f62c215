//! Small dense helpers on d x d matrices stored row-major in slices.

use nalgebra::{DMatrix, SymmetricEigen};

pub fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

pub fn to_dmatrix(d: usize, m: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, d, m)
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = m[(i, j)];
        }
    }
    out
}

/// Eigenvalues of the symmetric part, ascending.
pub fn sym_eigenvalues(d: usize, m: &[f64]) -> Vec<f64> {
    let a = to_dmatrix(d, m);
    let s = (&a + a.transpose()) * 0.5;
    let mut ev: Vec<f64> = SymmetricEigen::new(s).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}

pub fn inverse(d: usize, m: &[f64]) -> Option<Vec<f64>> {
    to_dmatrix(d, m).try_inverse().map(|x| from_dmatrix(&x))
}

/// Symmetric square root of a symmetric positive semidefinite matrix.
pub fn sym_sqrt(d: usize, m: &[f64]) -> Vec<f64> {
    let a = to_dmatrix(d, m);
    let s = (&a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(s);
    let sq = eig.eigenvalues.map(|x| x.max(0.0).sqrt());
    let r = &eig.eigenvectors * DMatrix::from_diagonal(&sq) * eig.eigenvectors.transpose();
    from_dmatrix(&r)
}

pub fn det(d: usize, m: &[f64]) -> f64 {
    to_dmatrix(d, m).determinant()
}

#[inline]
pub fn matvec(d: usize, m: &[f64], x: &[f64], y: &mut [f64]) {
    for i in 0..d {
        let mut s = 0.0;
        for j in 0..d {
            s += m[i * d + j] * x[j];
        }
        y[i] = s;
    }
}

#[inline]
pub fn quad(d: usize, m: &[f64], x: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            s += x[i] * m[i * d + j] * y[j];
        }
    }
    s
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_squares_back() {
        let m = [4.0, 1.0, 1.0, 3.0];
        let r = sym_sqrt(2, &m);
        let rr = from_dmatrix(&(to_dmatrix(2, &r) * to_dmatrix(2, &r)));
        assert!(max_abs_diff(&rr, &m) < 1e-12);
    }

    #[test]
    fn inverse_and_eigenvalues() {
        let m = [2.0, 0.0, 0.0, 4.0];
        assert_eq!(inverse(2, &m).unwrap(), vec![0.5, 0.0, 0.0, 0.25]);
        let ev = sym_eigenvalues(2, &m);
        assert!((ev[0] - 2.0).abs() < 1e-14 && (ev[1] - 4.0).abs() < 1e-14);
    }
}
