//! Fast diagonalization of tensor-product operators built from the 1D
//! matrices `L = delta^T delta` and `M = avg^T avg` of the one-point Q1 scheme.
//!
//! Along each axis the pencil `L v = theta (L + 4M) v` is diagonalized by
//!
//! ```text
//! dirichlet  interior nodes 1..N-1   sin(pi j k / N)    (DST-I)
//! neumann    nodes 0..N              cos(pi j k / N)    (DCT-I)
//! periodic   nodes 0..N-1            exp(2 pi i j k / N)
//! ```
//!
//! with `theta = (1 - cos w) / 2`, so that `V^T L V = Theta` and
//! `V^T M V = (I - Theta) / 4` for B-normalized `V`. Any operator that is a
//! polynomial in these pencils becomes diagonal, and its pseudo-inverse is
//! applied with two passes of sine/cosine/Fourier transforms.

use crate::grid::{fft_nd, increment};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Dirichlet,
    Neumann,
    Periodic,
}

impl Boundary {
    /// Unknowns per axis for `n` cells.
    pub fn unknowns(self, n: usize) -> usize {
        match self {
            Boundary::Dirichlet => n - 1,
            Boundary::Neumann => n + 1,
            Boundary::Periodic => n,
        }
    }

    /// Generalized eigenvalues and B-norms `v^T B v` per axis.
    pub fn spectrum(self, n: usize) -> (Vec<f64>, Vec<f64>) {
        let pi = std::f64::consts::PI;
        let nf = n as f64;
        match self {
            Boundary::Dirichlet => (1..n)
                .map(|k| ((1.0 - (pi * k as f64 / nf).cos()) / 2.0, 2.0 * nf))
                .unzip(),
            Boundary::Neumann => (0..=n)
                .map(|k| {
                    let norm = if k == 0 || k == n { 4.0 * nf } else { 2.0 * nf };
                    ((1.0 - (pi * k as f64 / nf).cos()) / 2.0, norm)
                })
                .unzip(),
            Boundary::Periodic => (0..n)
                .map(|k| ((1.0 - (2.0 * pi * k as f64 / nf).cos()) / 2.0, 4.0 * nf))
                .unzip(),
        }
    }
}

/// Raw DCT-I of a line of length `N+1` through an FFT of length `2N`.
fn dct1(x: &mut [f64], fft: &dyn Fft<f64>, buf: &mut [Complex<f64>], scratch: &mut [Complex<f64>]) {
    let n = x.len() - 1;
    for j in 0..=n {
        buf[j] = Complex::new(x[j], 0.0);
    }
    for j in 1..n {
        buf[2 * n - j] = Complex::new(x[j], 0.0);
    }
    fft.process_with_scratch(buf, scratch);
    let (x0, xn) = (x[0], x[n]);
    for k in 0..=n {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        x[k] = 0.5 * (buf[k].re + x0 + sign * xn);
    }
}

/// Raw DST-I of a line of length `N-1` through an FFT of length `2N`.
fn dst1(x: &mut [f64], fft: &dyn Fft<f64>, buf: &mut [Complex<f64>], scratch: &mut [Complex<f64>]) {
    let n = x.len() + 1;
    buf.iter_mut().for_each(|b| *b = Complex::new(0.0, 0.0));
    for j in 1..n {
        buf[j] = Complex::new(x[j - 1], 0.0);
        buf[2 * n - j] = Complex::new(-x[j - 1], 0.0);
    }
    fft.process_with_scratch(buf, scratch);
    for k in 1..n {
        x[k - 1] = -0.5 * buf[k].im;
    }
}

/// Pseudo-inverse of a diagonalizable tensor operator on one grid.
pub struct FastDiag {
    pub kind: Boundary,
    /// Shape of the unknown array.
    pub dims: Vec<usize>,
    inv: Vec<f64>,
    ffts: Vec<Arc<dyn Fft<f64>>>,
}

impl std::fmt::Debug for FastDiag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FastDiag")
            .field("kind", &self.kind)
            .field("dims", &self.dims)
            .finish()
    }
}

impl FastDiag {
    /// `symbol(theta)` gives the eigenvalue of the operator for the mode with
    /// per-axis generalized eigenvalues `theta`. Modes with a vanishing symbol
    /// are projected out.
    pub fn new(kind: Boundary, cells: &[usize], symbol: impl Fn(&[f64]) -> f64) -> Self {
        let d = cells.len();
        let spectra: Vec<(Vec<f64>, Vec<f64>)> = cells.iter().map(|&n| kind.spectrum(n)).collect();
        let dims: Vec<usize> = cells.iter().map(|&n| kind.unknowns(n)).collect();
        let total: usize = dims.iter().product();
        let mut vals = vec![0.0; total];
        let mut idx = vec![0usize; d];
        let mut theta = vec![0.0; d];
        for v in vals.iter_mut() {
            let mut norm = 1.0;
            for j in 0..d {
                theta[j] = spectra[j].0[idx[j]];
                norm *= spectra[j].1[idx[j]];
            }
            // periodic transforms are normalized inside the inverse FFT
            if kind == Boundary::Periodic {
                norm /= total as f64;
            }
            *v = symbol(&theta) * norm;
            increment(&mut idx, &dims);
        }
        let vmax = vals.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        let inv = vals
            .iter()
            .map(|&v| if v.abs() > 1e-11 * vmax { 1.0 / v } else { 0.0 })
            .collect();
        let mut planner = FftPlanner::<f64>::new();
        let ffts = cells
            .iter()
            .map(|&n| match kind {
                Boundary::Periodic => planner.plan_fft_forward(n),
                _ => planner.plan_fft_forward(2 * n),
            })
            .collect();
        FastDiag {
            kind,
            dims,
            inv,
            ffts,
        }
    }

    pub fn len(&self) -> usize {
        self.inv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inv.is_empty()
    }

    /// Number of modes projected out.
    pub fn kernel_dim(&self) -> usize {
        self.inv.iter().filter(|&&v| v == 0.0).count()
    }

    fn real_pass(&self, x: &mut [f64]) {
        let total = x.len();
        for axis in 0..self.dims.len() {
            let m = self.dims[axis];
            if m == 0 {
                continue;
            }
            let stride: usize = self.dims[axis + 1..].iter().product();
            let outer = total / (m * stride);
            let fft = &self.ffts[axis];
            let mut buf = vec![Complex::new(0.0, 0.0); fft.len()];
            let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
            let mut line = vec![0.0; m];
            for o in 0..outer {
                for s in 0..stride {
                    let base = o * m * stride + s;
                    for k in 0..m {
                        line[k] = x[base + k * stride];
                    }
                    match self.kind {
                        Boundary::Neumann => dct1(&mut line, fft.as_ref(), &mut buf, &mut scratch),
                        Boundary::Dirichlet => {
                            dst1(&mut line, fft.as_ref(), &mut buf, &mut scratch)
                        }
                        Boundary::Periodic => unreachable!(),
                    }
                    for k in 0..m {
                        x[base + k * stride] = line[k];
                    }
                }
            }
        }
    }

    /// `z = A^+ r` on the unknown array.
    pub fn apply(&self, r: &[f64]) -> Vec<f64> {
        assert_eq!(r.len(), self.inv.len());
        match self.kind {
            Boundary::Periodic => {
                let mut c: Vec<Complex<f64>> = r.iter().map(|&v| Complex::new(v, 0.0)).collect();
                fft_nd(&mut c, &self.dims, false);
                for (v, w) in c.iter_mut().zip(&self.inv) {
                    *v *= *w;
                }
                fft_nd(&mut c, &self.dims, true);
                c.iter().map(|v| v.re).collect()
            }
            _ => {
                let mut x = r.to_vec();
                self.real_pass(&mut x);
                for (v, w) in x.iter_mut().zip(&self.inv) {
                    *v *= *w;
                }
                self.real_pass(&mut x);
                x
            }
        }
    }
}

/// Symbol of `sum_j D_j^T D_j` weighted by the cell volume, that is of the
/// constant-coefficient stiffness matrix with `a = I`.
pub fn stiffness_symbol(h: f64) -> impl Fn(&[f64]) -> f64 {
    move |theta: &[f64]| {
        let d = theta.len();
        let mut s = 0.0;
        for j in 0..d {
            let mut p = theta[j];
            for (l, t) in theta.iter().enumerate() {
                if l != j {
                    p *= (1.0 - t) / 4.0;
                }
            }
            s += p;
        }
        s * h.powi(d as i32 - 2)
    }
}

/// Symbol of the constant-coefficient stiffness matrix with a diagonal
/// coefficient `diag(c_1, .., c_d)`.
pub fn diagonal_stiffness_symbol(h: f64, c: Vec<f64>) -> impl Fn(&[f64]) -> f64 {
    move |theta: &[f64]| {
        let d = theta.len();
        let mut s = 0.0;
        for j in 0..d {
            let mut p = c[j] * theta[j];
            for (l, t) in theta.iter().enumerate() {
                if l != j {
                    p *= (1.0 - t) / 4.0;
                }
            }
            s += p;
        }
        s * h.powi(d as i32 - 2)
    }
}

/// Symbol of the cell-average mass form `h^d (avg^T avg)^{(x) d}`.
pub fn mass_symbol(h: f64) -> impl Fn(&[f64]) -> f64 {
    move |theta: &[f64]| {
        theta.iter().map(|t| (1.0 - t) / 4.0).product::<f64>() * h.powi(theta.len() as i32)
    }
}
