//! Discrete operators for `-div(a grad u)` with multilinear (Q1) elements and
//! one-point (cell-center) quadrature, and their preconditioned CG solves.
//!
//! On a cell with corners `b in {0,1}^d` the gradient is
//!
//! ```text
//! (D u)_j = 1/(h 2^{d-1}) * sum_b (2 b_j - 1) u(b)
//! ```
//!
//! and the stiffness matrix is `A = sum_cells |cell| D^T a D`. The default
//! preconditioner is the exact pseudo-inverse of the same operator with
//! `a = I`, applied by fast diagonalization, so the condition number is
//! bounded by the ellipticity ratio independently of the grid.

use crate::error::{Error, Result};
use crate::field::CellCoefficients;
use crate::grid::{fourier_multiplier, Grid};
use crate::linalg;
use crate::transform::{stiffness_symbol, Boundary, FastDiag};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preconditioner {
    #[default]
    Spectral,
    Jacobi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Quadrature {
    #[default]
    Midpoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Elements {
    #[default]
    Q1,
}

fn default_tol() -> f64 {
    1e-10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Defaults to `max(200, 50 * cells per side)`.
    #[serde(default)]
    pub max_iter: Option<usize>,
    #[serde(default)]
    pub preconditioner: Preconditioner,
    #[serde(default)]
    pub quadrature: Quadrature,
    #[serde(default)]
    pub elements: Elements,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: default_tol(),
            max_iter: None,
            preconditioner: Preconditioner::Spectral,
            quadrature: Quadrature::Midpoint,
            elements: Elements::Q1,
        }
    }
}

impl SolverConfig {
    pub fn with_tol(tol: f64) -> Self {
        SolverConfig {
            tol,
            ..Default::default()
        }
    }

    fn max_iter(&self, grid: &Grid) -> usize {
        self.max_iter
            .unwrap_or_else(|| 200.max(50 * grid.n.iter().copied().max().unwrap_or(1)))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveReport {
    pub solution: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    /// Energy per unit volume `(1/|U|) int 1/2 grad u . a grad u` (for the
    /// cell problem, of the tilted field).
    pub energy: f64,
}

impl SolveReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Stiffness action on one grid with fixed coefficients.
#[derive(Clone, Debug)]
pub struct DiscreteOperator {
    pub grid: Grid,
    pub coeffs: CellCoefficients,
    pub bc: Boundary,
    corners: Vec<usize>,
}

pub fn assemble(coeffs: &CellCoefficients, grid: &Grid, bc: Boundary) -> Result<DiscreteOperator> {
    if coeffs.dim != grid.dim || coeffs.ncells() != grid.ncells() {
        return Err(Error::Dimension(format!(
            "coefficient array has {} cells of dimension {}, grid has {} cells of dimension {}",
            coeffs.ncells(),
            coeffs.dim,
            grid.ncells(),
            grid.dim
        )));
    }
    if (bc == Boundary::Periodic) != grid.periodic {
        return Err(Error::Dimension(
            "periodic boundary condition requires a periodic grid".into(),
        ));
    }
    if grid.n.iter().any(|&n| n < 2) {
        return Err(Error::Grid("need at least two cells per side".into()));
    }
    Ok(DiscreteOperator {
        grid: grid.clone(),
        coeffs: coeffs.clone(),
        bc,
        corners: grid.cell_corners(),
    })
}

impl DiscreteOperator {
    pub fn dim(&self) -> usize {
        self.grid.dim
    }

    pub fn nnodes(&self) -> usize {
        self.grid.nnodes()
    }

    pub fn ncells(&self) -> usize {
        self.grid.ncells()
    }

    #[inline]
    fn cell_gradient(&self, c: usize, u: &[f64], g: &mut [f64]) {
        let d = self.dim();
        let nc = 1usize << d;
        let scale = 1.0 / (self.grid.h * (1usize << (d - 1)) as f64);
        g[..d].iter_mut().for_each(|v| *v = 0.0);
        let cs = &self.corners[c * nc..(c + 1) * nc];
        for (b, &v) in cs.iter().enumerate() {
            let uv = u[v];
            for j in 0..d {
                if (b >> (d - 1 - j)) & 1 == 1 {
                    g[j] += uv;
                } else {
                    g[j] -= uv;
                }
            }
        }
        g[..d].iter_mut().for_each(|v| *v *= scale);
    }

    #[inline]
    fn scatter_adjoint(&self, c: usize, w: &[f64], y: &mut [f64]) {
        let d = self.dim();
        let nc = 1usize << d;
        let scale = 1.0 / (self.grid.h * (1usize << (d - 1)) as f64);
        let cs = &self.corners[c * nc..(c + 1) * nc];
        for (b, &v) in cs.iter().enumerate() {
            let mut s = 0.0;
            for j in 0..d {
                if (b >> (d - 1 - j)) & 1 == 1 {
                    s += w[j];
                } else {
                    s -= w[j];
                }
            }
            y[v] += s * scale;
        }
    }

    /// Cell gradients, `d` entries per cell.
    pub fn gradient(&self, u: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut g = vec![0.0; self.ncells() * d];
        for c in 0..self.ncells() {
            self.cell_gradient(c, u, &mut g[c * d..(c + 1) * d]);
        }
        g
    }

    /// `D^T g` (plain adjoint, no volume weight) for a cell vector field.
    pub fn gradient_adjoint(&self, g: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut y = vec![0.0; self.nnodes()];
        for c in 0..self.ncells() {
            self.scatter_adjoint(c, &g[c * d..(c + 1) * d], &mut y);
        }
        y
    }

    /// Average of the corner values of every cell.
    pub fn cell_values(&self, u: &[f64]) -> Vec<f64> {
        let nc = 1usize << self.dim();
        (0..self.ncells())
            .map(|c| {
                self.corners[c * nc..(c + 1) * nc]
                    .iter()
                    .map(|&v| u[v])
                    .sum::<f64>()
                    / nc as f64
            })
            .collect()
    }

    /// `y = A u`.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let vol = self.grid.cell_volume();
        let mut y = vec![0.0; self.nnodes()];
        let mut g = [0.0; 3];
        let mut w = [0.0; 3];
        for c in 0..self.ncells() {
            self.cell_gradient(c, u, &mut g);
            let a = self.coeffs.cell(c);
            for i in 0..d {
                let mut s = 0.0;
                for j in 0..d {
                    s += a[i * d + j] * g[j];
                }
                w[i] = s * vol;
            }
            self.scatter_adjoint(c, &w[..d], &mut y);
        }
        y
    }

    /// Diagonal of `A`.
    pub fn diagonal(&self) -> Vec<f64> {
        let d = self.dim();
        let nc = 1usize << d;
        let vol = self.grid.cell_volume();
        let scale = 1.0 / (self.grid.h * (1usize << (d - 1)) as f64);
        let mut diag = vec![0.0; self.nnodes()];
        let mut s = [0.0; 3];
        for c in 0..self.ncells() {
            let a = self.coeffs.cell(c);
            for b in 0..nc {
                for j in 0..d {
                    s[j] = if (b >> (d - 1 - j)) & 1 == 1 {
                        scale
                    } else {
                        -scale
                    };
                }
                diag[self.corners[c * nc + b]] += vol * linalg::quad(d, a, &s[..d], &s[..d]);
            }
        }
        diag
    }

    /// `D^T (|cell| a g)` for a cell vector field `g`.
    pub fn flux_adjoint(&self, g: &[f64], with_coeff: bool) -> Vec<f64> {
        let d = self.dim();
        let vol = self.grid.cell_volume();
        let mut y = vec![0.0; self.nnodes()];
        let mut w = [0.0; 3];
        for c in 0..self.ncells() {
            let gc = &g[c * d..(c + 1) * d];
            if with_coeff {
                linalg::matvec(d, self.coeffs.cell(c), gc, &mut w[..d]);
            } else {
                w[..d].copy_from_slice(gc);
            }
            w[..d].iter_mut().for_each(|v| *v *= vol);
            self.scatter_adjoint(c, &w[..d], &mut y);
        }
        y
    }

    /// `(1/|U|) sum_cells |cell| 1/2 g . a g` for a cell vector field `g`.
    pub fn field_energy(&self, g: &[f64]) -> f64 {
        let d = self.dim();
        let mut e = 0.0;
        for c in 0..self.ncells() {
            let gc = &g[c * d..(c + 1) * d];
            e += 0.5 * linalg::quad(d, self.coeffs.cell(c), gc, gc);
        }
        e / self.ncells() as f64
    }

    /// Normalized energy of a node function.
    pub fn energy(&self, u: &[f64]) -> f64 {
        self.field_energy(&self.gradient(u))
    }

    /// Mean of `a g` over cells.
    pub fn flux_average(&self, g: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut m = vec![0.0; d];
        let mut w = [0.0; 3];
        for c in 0..self.ncells() {
            linalg::matvec(d, self.coeffs.cell(c), &g[c * d..(c + 1) * d], &mut w[..d]);
            for j in 0..d {
                m[j] += w[j];
            }
        }
        m.iter_mut().for_each(|v| *v /= self.ncells() as f64);
        m
    }

    /// Mean of a cell vector field.
    pub fn vector_average(&self, g: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut m = vec![0.0; d];
        for c in 0..self.ncells() {
            for j in 0..d {
                m[j] += g[c * d + j];
            }
        }
        m.iter_mut().for_each(|v| *v /= self.ncells() as f64);
        m
    }

    /// Constant-coefficient preconditioner for the boundary condition.
    pub fn spectral_preconditioner(&self) -> FastDiag {
        FastDiag::new(self.bc, &self.grid.n, stiffness_symbol(self.grid.h))
    }
}

/// Outcome of a conjugate gradient run.
#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub history: Vec<f64>,
}

/// Preconditioned conjugate gradients for a symmetric positive semidefinite
/// system with consistent right-hand side. Stops at `|r| <= tol |b|`.
pub fn pcg(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    precond: impl Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<CgOutcome> {
    let n = b.len();
    let bnorm = linalg::norm(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(CgOutcome {
            x,
            iterations: 0,
            residual: 0.0,
            history: vec![0.0],
        });
    }
    let mut r = b.to_vec();
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = linalg::dot(&r, &z);
    let mut history = vec![1.0];
    for it in 1..=max_iter {
        let ap = apply(&p);
        let pap = linalg::dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rel = linalg::norm(&r) / bnorm;
        history.push(rel);
        if rel <= tol {
            let ax = apply(&x);
            let true_rel = b
                .iter()
                .zip(&ax)
                .map(|(u, v)| (u - v).powi(2))
                .sum::<f64>()
                .sqrt()
                / bnorm;
            return Ok(CgOutcome {
                x,
                iterations: it,
                residual: true_rel,
                history,
            });
        }
        z = precond(&r);
        let rz_new = linalg::dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NotConverged {
        iterations: history.len() - 1,
        residual: *history.last().unwrap(),
        history,
    })
}

/// Solves `A_FF u_F = b_F` on the free nodes.
fn solve_on_free(
    op: &DiscreteOperator,
    free: &[usize],
    b_full: &[f64],
    cfg: &SolverConfig,
    spectral: bool,
) -> Result<CgOutcome> {
    let n = op.nnodes();
    let gather = |v: &[f64]| -> Vec<f64> { free.iter().map(|&i| v[i]).collect() };
    let apply = |x: &[f64]| {
        let mut full = vec![0.0; n];
        for (k, &i) in free.iter().enumerate() {
            full[i] = x[k];
        }
        gather(&op.apply(&full))
    };
    let b = gather(b_full);
    let max_iter = cfg.max_iter(&op.grid);
    if spectral && cfg.preconditioner == Preconditioner::Spectral {
        let fd = op.spectral_preconditioner();
        assert_eq!(fd.len(), free.len());
        pcg(apply, |r| fd.apply(r), &b, cfg.tol, max_iter)
    } else {
        let diag = gather(&op.diagonal());
        pcg(
            apply,
            |r| r.iter().zip(&diag).map(|(v, d)| v / d).collect(),
            &b,
            cfg.tol,
            max_iter,
        )
    }
}

fn scatter_solution(n: usize, free: &[usize], x: &[f64], fixed_values: &[f64]) -> Vec<f64> {
    let mut u = fixed_values.to_vec();
    debug_assert_eq!(u.len(), n);
    for (k, &i) in free.iter().enumerate() {
        u[i] = x[k];
    }
    u
}

/// Dirichlet problem with data `g` on the nodes flagged in `fixed`.
pub fn solve_dirichlet(
    op: &DiscreteOperator,
    fixed: &[bool],
    g: &[f64],
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    if op.bc == Boundary::Periodic {
        return Err(Error::Input(
            "Dirichlet solve on a periodic operator".into(),
        ));
    }
    let n = op.nnodes();
    let boundary = op.grid.boundary_mask();
    let is_box = fixed == &boundary[..];
    let free: Vec<usize> = (0..n).filter(|&i| !fixed[i]).collect();
    let g0: Vec<f64> = (0..n).map(|i| if fixed[i] { g[i] } else { 0.0 }).collect();
    let rhs: Vec<f64> = op.apply(&g0).iter().map(|v| -v).collect();
    let out = solve_on_free(op, &free, &rhs, cfg, is_box && op.bc == Boundary::Dirichlet)?;
    let u = scatter_solution(n, &free, &out.x, &g0);
    let energy = op.energy(&u);
    Ok(SolveReport {
        solution: u,
        residual: out.residual,
        iterations: out.iterations,
        energy,
    })
}

/// Minimizer of the Dirichlet energy with affine boundary data `p . x`.
pub fn solve_dirichlet_affine(
    op: &DiscreteOperator,
    p: &[f64],
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    if op.bc != Boundary::Dirichlet {
        return Err(Error::Input(
            "solve_dirichlet_affine needs a dirichlet operator".into(),
        ));
    }
    let g: Vec<f64> = (0..op.nnodes())
        .map(|v| linalg::dot(p, &op.grid.node_position(v)))
        .collect();
    solve_dirichlet(op, &op.grid.boundary_mask(), &g, cfg)
}

/// Subtracts the cell-integral mean.
pub fn remove_mean(op: &DiscreteOperator, u: &mut [f64]) {
    let cv = op.cell_values(u);
    let m = cv.iter().sum::<f64>() / cv.len() as f64;
    u.iter_mut().for_each(|v| *v -= m);
}

/// Maximizer of `(1/|U|) int (-1/2 grad u . a grad u + q . grad u)` over all
/// node functions; `energy` holds the maximum.
pub fn solve_neumann_flux(
    op: &DiscreteOperator,
    q: &[f64],
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    if op.bc != Boundary::Neumann {
        return Err(Error::Input(
            "solve_neumann_flux needs a neumann operator".into(),
        ));
    }
    let d = op.dim();
    let qf: Vec<f64> = (0..op.ncells()).flat_map(|_| q.iter().copied()).collect();
    assert_eq!(qf.len(), op.ncells() * d);
    let b = op.flux_adjoint(&qf, false);
    let total: f64 = b.iter().sum();
    let scale: f64 = b.iter().map(|v| v.abs()).sum::<f64>().max(1e-300);
    if total.abs() > 1e-10 * scale {
        return Err(Error::Consistency(format!(
            "right-hand side has nonzero total {total:e}"
        )));
    }
    let free: Vec<usize> = (0..op.nnodes()).collect();
    let out = solve_on_free(op, &free, &b, cfg, true)?;
    let mut u = out.x;
    remove_mean(op, &mut u);
    let value = 0.5 * linalg::dot(&b, &u) / op.grid.volume();
    Ok(SolveReport {
        solution: u,
        residual: out.residual,
        iterations: out.iterations,
        energy: value,
    })
}

/// Mean-zero periodic corrector `phi_xi` with `-div a (xi + grad phi) = 0`;
/// `energy` holds `(1/|T|) int 1/2 (xi + grad phi) . a (xi + grad phi)`.
pub fn solve_periodic_cell(
    op: &DiscreteOperator,
    xi: &[f64],
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    if op.bc != Boundary::Periodic {
        return Err(Error::Input(
            "solve_periodic_cell needs a periodic operator".into(),
        ));
    }
    let d = op.dim();
    let xf: Vec<f64> = (0..op.ncells()).flat_map(|_| xi.iter().copied()).collect();
    let b: Vec<f64> = op.flux_adjoint(&xf, true).iter().map(|v| -v).collect();
    // Load assembled from a constant flux cancels up to roundoff; CG cannot resolve that.
    let mut w = vec![0.0; d];
    let cell_load = (0..op.ncells())
        .map(|c| {
            linalg::matvec(d, op.coeffs.cell(c), xi, &mut w);
            linalg::norm(&w)
        })
        .fold(0.0, f64::max)
        * op.grid.cell_volume()
        / op.grid.h;
    let free: Vec<usize> = (0..op.nnodes()).collect();
    let out = if linalg::norm(&b) <= 1e-11 * cell_load * (op.nnodes() as f64).sqrt() {
        CgOutcome {
            x: vec![0.0; op.nnodes()],
            iterations: 0,
            residual: 0.0,
            history: vec![0.0],
        }
    } else {
        solve_on_free(op, &free, &b, cfg, true)?
    };
    let mut u = out.x;
    remove_mean(op, &mut u);
    let mut g = op.gradient(&u);
    for c in 0..op.ncells() {
        for j in 0..d {
            g[c * d + j] += xi[j];
        }
    }
    let energy = op.field_energy(&g);
    Ok(SolveReport {
        solution: u,
        residual: out.residual,
        iterations: out.iterations,
        energy,
    })
}

/// Discrete gradient symbol factors `s_j(k) = sin(k_j h/2) prod_{l != j} cos(k_l h/2)`.
pub fn gradient_symbol(k: &[f64], h: f64) -> Vec<f64> {
    let d = k.len();
    (0..d)
        .map(|j| {
            let mut s = (k[j] * h / 2.0).sin();
            for (l, kl) in k.iter().enumerate() {
                if l != j {
                    s *= (kl * h / 2.0).cos();
                }
            }
            s
        })
        .collect()
}

/// Mean-zero spectral solution of `-div(c grad u) = rhs` on a periodic grid,
/// where the operator is the one-point Q1 stiffness divided by the cell
/// volume. Modes invisible to the discrete gradient are set to zero.
pub fn solve_constant_poisson(grid: &Grid, rhs: &[f64], c: &[f64]) -> Result<Vec<f64>> {
    if !grid.periodic {
        return Err(Error::Input(
            "constant-coefficient spectral solve needs a periodic grid".into(),
        ));
    }
    if rhs.len() != grid.nnodes() {
        return Err(Error::Dimension("right-hand side length".into()));
    }
    let mean = rhs.iter().sum::<f64>() / rhs.len() as f64;
    let scale = rhs.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    if mean.abs() > 1e-10 * scale {
        return Err(Error::Input(format!(
            "right-hand side has nonzero mean {mean:e}"
        )));
    }
    let d = grid.dim;
    let h = grid.h;
    let c = c.to_vec();
    Ok(fourier_multiplier(rhs, &grid.n, h, move |k| {
        let s = gradient_symbol(k, h);
        let sym = 4.0 / (h * h) * linalg::quad(d, &c, &s, &s);
        if sym.abs() < 1e-12 / (h * h) {
            0.0
        } else {
            1.0 / sym
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{restrict_to_grid, sample_field, FieldSpec};
    use crate::grid::TriadicCube;

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        (0..n)
            .map(|i| crate::seed::unit_uniform(crate::seed::hash_key(seed, 0, &[i as i64])) - 0.5)
            .collect()
    }

    fn checker_op(dim: usize, level: u32, k: usize, bc: Boundary, seed: u64) -> DiscreteOperator {
        let grid = match bc {
            Boundary::Periodic => Grid::torus(dim, 3usize.pow(level), k),
            _ => Grid::cube(&TriadicCube::new(dim, level), k),
        };
        let f = sample_field(&FieldSpec::checkerboard(dim, 1.0, 4.0), seed).unwrap();
        assemble(&restrict_to_grid(&f, &grid), &grid, bc).unwrap()
    }

    #[test]
    fn plane_wave_matches_symbol() {
        let grid = Grid::torus(2, 4, 2);
        let c = 2.5;
        let coeffs = CellCoefficients::constant(2, grid.ncells(), &[c, 0.0, 0.0, c]);
        let op = assemble(&coeffs, &grid, Boundary::Periodic).unwrap();
        let two_pi = 2.0 * std::f64::consts::PI;
        let (m1, m2) = (1.0, 3.0);
        let u: Vec<f64> = (0..grid.nnodes())
            .map(|v| {
                let x = grid.node_position(v);
                (two_pi * (m1 * x[0] + m2 * x[1]) / 4.0).cos()
            })
            .collect();
        let au = op.apply(&u);
        let k = [two_pi * m1 / 4.0, two_pi * m2 / 4.0];
        let s = gradient_symbol(&k, grid.h);
        let sym = c * 4.0 / (grid.h * grid.h) * (s[0] * s[0] + s[1] * s[1]) * grid.cell_volume();
        for v in 0..grid.nnodes() {
            assert!((au[v] - sym * u[v]).abs() < 1e-12 * sym.max(1.0));
        }
    }

    #[test]
    fn constants_in_kernel_and_symmetry() {
        for bc in [Boundary::Neumann, Boundary::Periodic] {
            let op = checker_op(2, 1, 2, bc, 4);
            let one = vec![1.0; op.nnodes()];
            assert!(op.apply(&one).iter().all(|v| v.abs() < 1e-12));
        }
        for bc in [Boundary::Dirichlet, Boundary::Neumann, Boundary::Periodic] {
            let op = checker_op(2, 1, 3, bc, 5);
            let u = random_vec(op.nnodes(), 1);
            let v = random_vec(op.nnodes(), 2);
            let a = linalg::dot(&op.apply(&u), &v);
            let b = linalg::dot(&u, &op.apply(&v));
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }
        let op = checker_op(3, 1, 1, Boundary::Neumann, 6);
        let u = random_vec(op.nnodes(), 3);
        let v = random_vec(op.nnodes(), 4);
        let a = linalg::dot(&op.apply(&u), &v);
        assert!((a - linalg::dot(&u, &op.apply(&v))).abs() < 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn spectral_preconditioner_inverts_the_constant_operator() {
        use nalgebra::DMatrix;
        for bc in [Boundary::Dirichlet, Boundary::Neumann, Boundary::Periodic] {
            let grid = match bc {
                Boundary::Periodic => Grid::torus(2, 2, 3),
                _ => Grid::cube(&TriadicCube::new(2, 1), 2),
            };
            let coeffs = CellCoefficients::constant(2, grid.ncells(), &[1.0, 0.0, 0.0, 1.0]);
            let op = assemble(&coeffs, &grid, bc).unwrap();
            let free: Vec<usize> = match bc {
                Boundary::Dirichlet => {
                    let m = grid.boundary_mask();
                    (0..op.nnodes()).filter(|&i| !m[i]).collect()
                }
                _ => (0..op.nnodes()).collect(),
            };
            let nf = free.len();
            let mut a = DMatrix::zeros(nf, nf);
            for (col, &j) in free.iter().enumerate() {
                let mut e = vec![0.0; op.nnodes()];
                e[j] = 1.0;
                let ae = op.apply(&e);
                for (row, &i) in free.iter().enumerate() {
                    a[(row, col)] = ae[i];
                }
            }
            let pinv = a.clone().pseudo_inverse(1e-10).unwrap();
            let r = random_vec(nf, 9);
            let rr = &a * &pinv * DMatrix::from_column_slice(nf, 1, &r);
            let z = op.spectral_preconditioner().apply(rr.as_slice());
            let az = &a * DMatrix::from_column_slice(nf, 1, &z);
            for i in 0..nf {
                assert!((az[i] - rr[i]).abs() < 1e-9, "{bc:?}");
            }
        }
    }

    #[test]
    fn affine_data_is_exact_for_constant_fields() {
        let grid = Grid::cube(&TriadicCube::new(2, 1), 4);
        let coeffs = CellCoefficients::constant(2, grid.ncells(), &[3.0, 0.0, 0.0, 3.0]);
        let op = assemble(&coeffs, &grid, Boundary::Dirichlet).unwrap();
        let p = [0.7, -1.2];
        let rep = solve_dirichlet_affine(&op, &p, &SolverConfig::default()).unwrap();
        for v in 0..op.nnodes() {
            assert!((rep.solution[v] - linalg::dot(&p, &grid.node_position(v))).abs() < 1e-10);
        }
        assert!((rep.energy - 0.5 * 3.0 * linalg::dot(&p, &p)).abs() < 1e-10);
        let zero = solve_dirichlet_affine(&op, &[0.0, 0.0], &SolverConfig::default()).unwrap();
        assert!(zero.solution.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_dimensional_layered_solution_matches_cumulative_integral() {
        let spec = FieldSpec::layered(1.0, 4.0);
        let f = sample_field(&spec, 12).unwrap();
        let grid = Grid::cube(&TriadicCube::new(1, 3), 4);
        let a = restrict_to_grid(&f, &grid);
        let op = assemble(&a, &grid, Boundary::Dirichlet).unwrap();
        let rep = solve_dirichlet_affine(&op, &[1.0], &SolverConfig::default()).unwrap();
        // u(x) = u(x0) + (u(x1)-u(x0)) int_{x0}^x a^{-1} / int a^{-1}
        let inv: Vec<f64> = (0..grid.ncells()).map(|c| 1.0 / a.cell(c)[0]).collect();
        let m: f64 = inv.iter().sum::<f64>() * grid.h;
        let (x0, x1) = (grid.origin[0], grid.origin[0] + grid.n[0] as f64 * grid.h);
        let mut acc = 0.0;
        for v in 0..op.nnodes() {
            let exact = x0 + (x1 - x0) * acc / m;
            assert!((rep.solution[v] - exact).abs() < 1e-8);
            if v < grid.ncells() {
                acc += inv[v] * grid.h;
            }
        }
    }

    #[test]
    fn neumann_constant_field_gives_explicit_maximizer() {
        let grid = Grid::cube(&TriadicCube::new(2, 1), 3);
        let coeffs = CellCoefficients::constant(2, grid.ncells(), &[2.0, 0.0, 0.0, 2.0]);
        let op = assemble(&coeffs, &grid, Boundary::Neumann).unwrap();
        let rep = solve_neumann_flux(&op, &[1.0, 0.0], &SolverConfig::default()).unwrap();
        assert!((rep.energy - 0.25).abs() < 1e-10);
        for v in 0..op.nnodes() {
            assert!((rep.solution[v] - grid.node_position(v)[0] / 2.0).abs() < 1e-9);
        }
        let zero = solve_neumann_flux(&op, &[0.0, 0.0], &SolverConfig::default()).unwrap();
        assert_eq!(zero.energy, 0.0);
    }

    #[test]
    fn neumann_one_dimensional_matches_quadrature() {
        // exact value: sup over u of mean(-a u'^2/2 + q u') = q^2/2 * mean(1/a)
        let coeffs = CellCoefficients::from_scalars(1, &[1.0, 1.0, 4.0, 4.0, 1.0, 4.0]);
        let grid = Grid::new(vec![0.0], vec![6], 0.5, false);
        let op = assemble(&coeffs, &grid, Boundary::Neumann).unwrap();
        let rep = solve_neumann_flux(&op, &[1.5], &SolverConfig::default()).unwrap();
        let exact = 0.5 * 1.5 * 1.5 * (3.0 * 1.0 + 3.0 * 0.25) / 6.0;
        assert!((rep.energy - exact).abs() < 1e-8);
    }

    #[test]
    fn periodic_cell_problem() {
        let grid = Grid::torus(2, 3, 2);
        let coeffs = CellCoefficients::constant(2, grid.ncells(), &[2.0, 0.0, 0.0, 2.0]);
        let op = assemble(&coeffs, &grid, Boundary::Periodic).unwrap();
        let rep = solve_periodic_cell(&op, &[1.0, 0.0], &SolverConfig::default()).unwrap();
        assert!(rep.solution.iter().all(|v| v.abs() < 1e-12));
        // 1D constant-flux oracle
        let grid = Grid::torus(1, 9, 4);
        let f = sample_field(&FieldSpec::layered(1.0, 4.0), 3).unwrap();
        let a = restrict_to_grid(&f, &grid);
        let op = assemble(&a, &grid, Boundary::Periodic).unwrap();
        let rep = solve_periodic_cell(&op, &[1.0], &SolverConfig::default()).unwrap();
        let harm = a.harmonic_mean()[0];
        let g = op.gradient(&rep.solution);
        for c in 0..grid.ncells() {
            assert!((g[c] - (harm / a.cell(c)[0] - 1.0)).abs() < 1e-8);
        }
        // linearity
        let op = checker_op(2, 2, 2, Boundary::Periodic, 1);
        let cfg = SolverConfig::with_tol(1e-12);
        let p1 = solve_periodic_cell(&op, &[1.0, 0.0], &cfg)
            .unwrap()
            .solution;
        let p2 = solve_periodic_cell(&op, &[0.0, 1.0], &cfg)
            .unwrap()
            .solution;
        let p12 = solve_periodic_cell(&op, &[1.0, 1.0], &cfg)
            .unwrap()
            .solution;
        for i in 0..p1.len() {
            assert!((p1[i] + p2[i] - p12[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_poisson_inverts_symbol() {
        let grid = Grid::torus(2, 4, 4);
        let c = [1.5, 0.3, 0.3, 2.0];
        let zero = solve_constant_poisson(&grid, &vec![0.0; grid.nnodes()], &c).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        let two_pi = 2.0 * std::f64::consts::PI;
        let k = [two_pi * 2.0 / 4.0, two_pi * 1.0 / 4.0];
        let rhs: Vec<f64> = (0..grid.nnodes())
            .map(|v| {
                let x = grid.node_position(v);
                (k[0] * x[0] + k[1] * x[1]).sin()
            })
            .collect();
        let u = solve_constant_poisson(&grid, &rhs, &c).unwrap();
        let s = gradient_symbol(&k, grid.h);
        let sym = 4.0 / (grid.h * grid.h) * linalg::quad(2, &c, &s, &s);
        for v in 0..grid.nnodes() {
            assert!((u[v] - rhs[v] / sym).abs() < 1e-12);
        }
        // recovers -g from rhs = discrete Laplacian of g
        let g: Vec<f64> = (0..grid.nnodes())
            .map(|v| {
                let x = grid.node_position(v);
                (two_pi * x[0] / 4.0).sin() * (two_pi * x[1] / 4.0).cos().exp()
            })
            .collect();
        let coeffs = CellCoefficients::constant(2, grid.ncells(), &[1.0, 0.0, 0.0, 1.0]);
        let op = assemble(&coeffs, &grid, Boundary::Periodic).unwrap();
        let lap: Vec<f64> = op
            .apply(&g)
            .iter()
            .map(|v| -v / grid.cell_volume())
            .collect();
        let mut u = solve_constant_poisson(&grid, &lap, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let mg = g.iter().sum::<f64>() / g.len() as f64;
        let mu = u.iter().sum::<f64>() / u.len() as f64;
        u.iter_mut().for_each(|v| *v -= mu);
        for v in 0..grid.nnodes() {
            // hourglass modes are invisible; g has none at this resolution beyond roundoff
            assert!((u[v] + (g[v] - mg)).abs() < 1e-8, "{} {}", u[v], g[v] - mg);
        }
        assert!(solve_constant_poisson(&grid, &vec![1.0; grid.nnodes()], &c).is_err());
    }

    #[test]
    fn pcg_reports_non_convergence() {
        let op = checker_op(2, 2, 3, Boundary::Dirichlet, 2);
        let cfg = SolverConfig {
            max_iter: Some(2),
            preconditioner: Preconditioner::Jacobi,
            ..Default::default()
        };
        match solve_dirichlet_affine(&op, &[1.0, 0.0], &cfg) {
            Err(Error::NotConverged { history, .. }) => assert_eq!(history.len(), 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn spectral_and_jacobi_agree() {
        let op = checker_op(2, 2, 2, Boundary::Dirichlet, 8);
        let a = solve_dirichlet_affine(&op, &[1.0, 0.5], &SolverConfig::with_tol(1e-12)).unwrap();
        let cfg = SolverConfig {
            tol: 1e-12,
            preconditioner: Preconditioner::Jacobi,
            ..Default::default()
        };
        let b = solve_dirichlet_affine(&op, &[1.0, 0.5], &cfg).unwrap();
        assert!(linalg::max_abs_diff(&a.solution, &b.solution) < 1e-9);
        assert!(a.iterations < b.iterations);
        assert!(a.iterations < 40, "{}", a.iterations);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let grid = Grid::cube(&TriadicCube::new(2, 1), 2);
        let coeffs = CellCoefficients::constant(2, 10, &[1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            assemble(&coeffs, &grid, Boundary::Dirichlet),
            Err(Error::Dimension(_))
        ));
    }
}
