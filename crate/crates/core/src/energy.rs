//! Subadditive energy quantities `nu`, `nu*`, `J` on triadic cubes, the
//! matrices `a_U`, `b_U`, and the corrector-basis value of `J_1` on a
//! heat-kernel mask.

use crate::error::{Error, Result};
use crate::field::{restrict_to_grid, CellCoefficients, CoefficientSample};
use crate::grid::{Grid, HeatKernelMask, TriadicCube};
use crate::linalg;
use crate::seed;
use crate::solver::{
    assemble, solve_dirichlet_affine, solve_neumann_flux, DiscreteOperator, SolveReport,
    SolverConfig,
};
use crate::transform::Boundary;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One coefficient sample restricted to a cube, with both operators.
#[derive(Clone, Debug)]
pub struct CubeProblem {
    pub cube: TriadicCube,
    pub cfg: SolverConfig,
    dir: DiscreteOperator,
    neu: DiscreteOperator,
}

impl CubeProblem {
    pub fn new(
        sample: &CoefficientSample,
        cube: &TriadicCube,
        k: usize,
        cfg: SolverConfig,
    ) -> Result<Self> {
        if sample.dim() != cube.dim() {
            return Err(Error::Dimension("field and cube dimensions differ".into()));
        }
        let grid = Grid::cube(cube, k);
        let coeffs = restrict_to_grid(sample, &grid);
        Self::from_coefficients(cube, &grid, &coeffs, cfg)
    }

    pub fn from_coefficients(
        cube: &TriadicCube,
        grid: &Grid,
        coeffs: &CellCoefficients,
        cfg: SolverConfig,
    ) -> Result<Self> {
        Ok(CubeProblem {
            cube: cube.clone(),
            cfg,
            dir: assemble(coeffs, grid, Boundary::Dirichlet)?,
            neu: assemble(coeffs, grid, Boundary::Neumann)?,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.dir.grid
    }

    pub fn coeffs(&self) -> &CellCoefficients {
        &self.dir.coeffs
    }

    pub fn dirichlet_operator(&self) -> &DiscreteOperator {
        &self.dir
    }

    pub fn neumann_operator(&self) -> &DiscreteOperator {
        &self.neu
    }

    /// Problem on an aligned subcube, reusing the cell coefficients.
    pub fn child(&self, sub: &TriadicCube) -> Result<Self> {
        let grid = self.grid();
        let d = grid.dim;
        let (lo, hi) = grid.cell_range(&sub.lower(), sub.side() as f64)?;
        let ext: Vec<usize> = lo.iter().zip(&hi).map(|(a, b)| b - a).collect();
        let sub_grid = Grid::new(sub.lower(), ext.clone(), grid.h, false);
        let dd = d * d;
        let mut data = Vec::with_capacity(sub_grid.ncells() * dd);
        let mut m = vec![0usize; d];
        let mut full = vec![0usize; d];
        for _ in 0..sub_grid.ncells() {
            for j in 0..d {
                full[j] = lo[j] + m[j];
            }
            let c = crate::grid::ravel(&full, &grid.n);
            data.extend_from_slice(self.coeffs().cell(c));
            crate::grid::increment(&mut m, &ext);
        }
        let coeffs = CellCoefficients { dim: d, data };
        Self::from_coefficients(sub, &sub_grid, &coeffs, self.cfg.clone())
    }

    /// Extreme eigenvalues over all cells.
    pub fn ellipticity(&self) -> (f64, f64) {
        let d = self.grid().dim;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in 0..self.coeffs().ncells() {
            let e = linalg::sym_eigenvalues(d, self.coeffs().cell(c));
            lo = lo.min(e[0]);
            hi = hi.max(e[d - 1]);
        }
        (lo, hi)
    }

    pub fn dirichlet(&self, p: &[f64]) -> Result<SolveReport> {
        solve_dirichlet_affine(&self.dir, p, &self.cfg)
    }

    pub fn neumann(&self, q: &[f64]) -> Result<SolveReport> {
        solve_neumann_flux(&self.neu, q, &self.cfg)
    }
}

pub fn nu(prob: &CubeProblem, p: &[f64]) -> Result<f64> {
    Ok(prob.dirichlet(p)?.energy)
}

pub fn nu_star(prob: &CubeProblem, q: &[f64]) -> Result<f64> {
    Ok(prob.neumann(q)?.energy)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnergyReport {
    pub level: u32,
    pub center: Vec<i64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub nu: f64,
    pub nu_star: f64,
    pub j: f64,
    pub grad_avg_nu: Vec<f64>,
    pub flux_avg_nu: Vec<f64>,
    pub grad_avg_nu_star: Vec<f64>,
    pub flux_avg_nu_star: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// `J(U,p,q) = nu(U,p) + nu*(U,q) - p.q` with the averages of both extremizers.
pub fn j_quantity(prob: &CubeProblem, p: &[f64], q: &[f64]) -> Result<EnergyReport> {
    let v = prob.dirichlet(p)?;
    let u = prob.neumann(q)?;
    let gv = prob.dir.gradient(&v.solution);
    let gu = prob.neu.gradient(&u.solution);
    Ok(EnergyReport {
        level: prob.cube.level,
        center: prob.cube.center.clone(),
        p: p.to_vec(),
        q: q.to_vec(),
        nu: v.energy,
        nu_star: u.energy,
        j: v.energy + u.energy - linalg::dot(p, q),
        grad_avg_nu: prob.dir.vector_average(&gv),
        flux_avg_nu: prob.dir.flux_average(&gv),
        grad_avg_nu_star: prob.neu.vector_average(&gu),
        flux_avg_nu_star: prob.neu.flux_average(&gu),
        residual: v.residual.max(u.residual),
        iterations: v.iterations + u.iterations,
    })
}

fn join(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x}"))
        .collect::<Vec<_>>()
        .join(";")
}

/// Appends reports to a CSV file, writing the header when the file is new.
pub fn append_csv(path: &Path, law: &str, seed: u64, reports: &[EnergyReport]) -> Result<()> {
    let exists = path.exists() && std::fs::metadata(path)?.len() > 0;
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if !exists {
        w.write_record([
            "law", "seed", "level", "p", "q", "nu", "nu_star", "J", "residual",
        ])?;
    }
    for r in reports {
        w.write_record([
            law.to_string(),
            seed.to_string(),
            r.level.to_string(),
            join(&r.p),
            join(&r.q),
            format!("{:e}", r.nu),
            format!("{:e}", r.nu_star),
            format!("{:e}", r.j),
            format!("{:e}", r.residual),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `J(U,p,q) = 1/2 p.a p + 1/2 q.b q - p.q`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuadraticFormPair {
    pub dim: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// Largest gap between the energy and the flux route to `a`.
    pub residual_a: f64,
    /// Largest gap between the energy and the gradient route to `b`.
    pub residual_b: f64,
}

impl QuadraticFormPair {
    pub fn j(&self, p: &[f64], q: &[f64]) -> f64 {
        0.5 * linalg::quad(self.dim, &self.a, p, p) + 0.5 * linalg::quad(self.dim, &self.b, q, q)
            - linalg::dot(p, q)
    }

    pub fn b_inverse(&self) -> Vec<f64> {
        linalg::inverse(self.dim, &self.b).expect("b is positive definite")
    }
}

/// Recovers `a_U` and `b_U` by polarization. With `v_i` the minimizer for
/// slope `e_i`, `a_ij = mean(grad v_i . a grad v_j)`; the first variation
/// also gives `a_ij = mean(e_i . a grad v_j)`, and the gap between the two is
/// the reconstruction residual. `b_U` is built the same way from the
/// Neumann maximizers.
pub fn recover_quadratic_forms(prob: &CubeProblem) -> Result<QuadraticFormPair> {
    let d = prob.grid().dim;
    let mut gv = Vec::with_capacity(d);
    let mut gu = Vec::with_capacity(d);
    for i in 0..d {
        let mut e = vec![0.0; d];
        e[i] = 1.0;
        gv.push(prob.dir.gradient(&prob.dirichlet(&e)?.solution));
        gu.push(prob.neu.gradient(&prob.neumann(&e)?.solution));
    }
    let (a, ra) = polarize(&prob.dir, &gv, true);
    let (b, rb) = polarize(&prob.neu, &gu, false);
    let scale_a = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let scale_b = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if ra > 1e-8 * scale_a || rb > 1e-8 * scale_b {
        return Err(Error::Consistency(format!(
            "quadratic form reconstruction residual {ra:e} / {rb:e}"
        )));
    }
    Ok(QuadraticFormPair {
        dim: d,
        a,
        b,
        residual_a: ra,
        residual_b: rb,
    })
}

fn polarize(op: &DiscreteOperator, g: &[Vec<f64>], flux: bool) -> (Vec<f64>, f64) {
    let d = g.len();
    let mut m = vec![0.0; d * d];
    let mut res: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            let sum: Vec<f64> = g[i].iter().zip(&g[j]).map(|(x, y)| x + y).collect();
            let diff: Vec<f64> = g[i].iter().zip(&g[j]).map(|(x, y)| x - y).collect();
            // 2 mean(x.a y) = E(x + y) - E(x - y) with E = mean(1/2 g.a g)
            m[i * d + j] = 0.5 * (op.field_energy(&sum) - op.field_energy(&diff));
            let linear = if flux {
                op.flux_average(&g[j])[i]
            } else {
                op.vector_average(&g[j])[i]
            };
            res = res.max((m[i * d + j] - linear).abs());
        }
    }
    (m, res)
}

#[derive(Clone, Debug, Serialize)]
pub struct SubadditivitySlack {
    /// `sum |U_i|/|U| nu(U_i,p) - nu(U,p)`.
    pub nu: f64,
    pub nu_star: f64,
    pub j: f64,
}

/// Slack of subadditivity over the `3^d` children of the cube.
pub fn subadditivity_check(prob: &CubeProblem, p: &[f64], q: &[f64]) -> Result<SubadditivitySlack> {
    if prob.cube.level == 0 {
        return Err(Error::Input(
            "subadditivity needs a cube of level at least 1".into(),
        ));
    }
    let parent = j_quantity(prob, p, q)?;
    let children = prob.cube.subdivide(prob.cube.level - 1)?;
    let w = 1.0 / children.len() as f64;
    let mut s = SubadditivitySlack {
        nu: -parent.nu,
        nu_star: -parent.nu_star,
        j: -parent.j,
    };
    for c in &children {
        let r = j_quantity(&prob.child(c)?, p, q)?;
        s.nu += w * r.nu;
        s.nu_star += w * r.nu_star;
        s.j += w * r.j;
    }
    Ok(s)
}

#[derive(Clone, Debug, Serialize)]
pub struct DerivativeResiduals {
    /// `|grad_p J (finite differences) + mean(a grad v)|` with `v` the maximizer of `J`.
    pub dj_dp: f64,
    /// `|grad_q J (finite differences) - mean(grad v)|`.
    pub dj_dq: f64,
    /// `|grad nu(p) (finite differences) - mean(a grad v(.,p))|`.
    pub flux_identity: f64,
    /// Smallest slack of the two-sided quadratic response bounds over the
    /// tested competitors; nonnegative when the bounds hold.
    pub quadratic_response: f64,
}

pub const FD_STEP: f64 = 1e-4;

/// Finite-difference checks of the derivative formulas for `J` and `nu`,
/// and the quadratic response of `nu` around its minimizer.
pub fn derivative_identities_check(
    prob: &CubeProblem,
    p: &[f64],
    q: &[f64],
    seed_: u64,
) -> Result<DerivativeResiduals> {
    let d = p.len();
    let vp = prob.dirichlet(p)?;
    let uq = prob.neumann(q)?;
    let gvp = prob.dir.gradient(&vp.solution);
    let guq = prob.neu.gradient(&uq.solution);
    // maximizer of J is u*_q - v_p
    let gj: Vec<f64> = guq.iter().zip(&gvp).map(|(a, b)| a - b).collect();
    let minus_flux: Vec<f64> = prob.dir.flux_average(&gj).iter().map(|v| -v).collect();
    let grad = prob.dir.vector_average(&gj);
    let flux_p = prob.dir.flux_average(&gvp);
    let jf = |pp: &[f64], qq: &[f64]| -> Result<f64> {
        Ok(nu(prob, pp)? + nu_star(prob, qq)? - linalg::dot(pp, qq))
    };
    let (mut rp, mut rq, mut rf) = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..d {
        let mut pp = p.to_vec();
        let mut pm = p.to_vec();
        pp[k] += FD_STEP;
        pm[k] -= FD_STEP;
        let (np, nm) = (nu(prob, &pp)?, nu(prob, &pm)?);
        let fd_nu = (np - nm) / (2.0 * FD_STEP);
        rf = rf.max((fd_nu - flux_p[k]).abs());
        let fd_jp = (np - linalg::dot(&pp, q) - nm + linalg::dot(&pm, q)) / (2.0 * FD_STEP);
        rp = rp.max((fd_jp - minus_flux[k]).abs());
        let mut qp = q.to_vec();
        let mut qm = q.to_vec();
        qp[k] += FD_STEP;
        qm[k] -= FD_STEP;
        let fd_jq = (jf(p, &qp)? - jf(p, &qm)?) / (2.0 * FD_STEP);
        rq = rq.max((fd_jq - grad[k]).abs());
    }
    let qr = quadratic_response(prob, &vp, seed_, 5);
    Ok(DerivativeResiduals {
        dj_dp: rp,
        dj_dq: rq,
        flux_identity: rf,
        quadratic_response: qr,
    })
}

/// For competitors `w = v + phi` with `phi` vanishing on the boundary,
/// `lo/2 |grad phi|^2 <= E(w) - nu <= hi/2 |grad phi|^2` with `lo, hi` the
/// ellipticity bounds. Returns the smallest slack.
pub fn quadratic_response(prob: &CubeProblem, v: &SolveReport, seed_: u64, trials: usize) -> f64 {
    let (lo, hi) = prob.ellipticity();
    let bnd = prob.grid().boundary_mask();
    let mut slack = f64::INFINITY;
    for t in 0..trials {
        let phi: Vec<f64> = (0..bnd.len())
            .map(|i| {
                if bnd[i] {
                    0.0
                } else {
                    0.1 * (seed::unit_uniform(seed::hash_key(
                        seed_,
                        seed::tags::PERTURB,
                        &[t as i64, i as i64],
                    )) - 0.5)
                }
            })
            .collect();
        let w: Vec<f64> = v.solution.iter().zip(&phi).map(|(a, b)| a + b).collect();
        let gphi = prob.dir.gradient(&phi);
        let dist2: f64 = gphi.iter().map(|x| x * x).sum::<f64>() / prob.grid().ncells() as f64;
        let excess = prob.dir.energy(&w) - v.energy;
        slack = slack
            .min(excess - 0.5 * lo * dist2)
            .min(0.5 * hi * dist2 - excess);
    }
    slack
}

/// Value of `J_1` on the mask `Phi_{z,r}` over the span of corrector-tilted
/// affines `xi + grad phi_xi`:
///
/// ```text
/// max_xi int Phi (-1/2 X.a X - p.a X + q.X),  X = xi + grad phi_xi,
/// ```
///
/// which is `1/2 w.M^{-1} w` with `M_ij = int Phi X_i.a X_j` and
/// `w_j = int Phi (q - a p).X_j`.
pub fn j1_mask(
    op: &DiscreteOperator,
    correctors: &[Vec<f64>],
    mask: &HeatKernelMask,
    p: &[f64],
    q: &[f64],
) -> Result<f64> {
    let d = op.dim();
    if correctors.len() != d || p.len() != d || q.len() != d {
        return Err(Error::Dimension("need one corrector per direction".into()));
    }
    let grads: Vec<Vec<f64>> = correctors.iter().map(|phi| op.gradient(phi)).collect();
    let mut m = vec![0.0; d * d];
    let mut w = vec![0.0; d];
    let mut x = vec![0.0; d * d];
    let mut ax = vec![0.0; d];
    let mut ap = vec![0.0; d];
    for &(c, wt) in &mask.entries {
        for j in 0..d {
            for l in 0..d {
                x[j * d + l] = grads[j][c * d + l] + if j == l { 1.0 } else { 0.0 };
            }
        }
        let a = op.coeffs.cell(c);
        linalg::matvec(d, a, p, &mut ap);
        for j in 0..d {
            let xj = &x[j * d..(j + 1) * d];
            w[j] += wt * (linalg::dot(q, xj) - linalg::dot(&ap, xj));
            linalg::matvec(d, a, xj, &mut ax);
            for i in 0..d {
                m[i * d + j] += wt * linalg::dot(&x[i * d..(i + 1) * d], &ax);
            }
        }
    }
    let minv = linalg::inverse(d, &m)
        .filter(|_| linalg::det(d, &m).abs() > 1e-14)
        .ok_or_else(|| Error::Singular("degenerate mask in the J_1 optimality system".into()))?;
    Ok(0.5 * linalg::quad(d, &minv, &w, &w))
}
