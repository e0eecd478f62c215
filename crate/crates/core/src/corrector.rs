//! Periodic first-order correctors and flux correctors on tori, and the
//! diagnostics built on them: heat-kernel averages, sublinear growth and the
//! large-scale Lipschitz profile.

use crate::analysis::{mean_stderr, slope_fit, SlopeFit};
use crate::error::{Error, Result};
use crate::field::{restrict_to_grid, sample_field, CoefficientSample, FieldSpec};
use crate::grid::{fourier_multiplier, write_binary, Grid, HeatKernelMask};
use crate::homogenize::periodic_matrix;
use crate::linalg;
use crate::seed::{derive_seed, hashed_normal, tags};
use crate::solver::{
    assemble, gradient_symbol, pcg, solve_constant_poisson, DiscreteOperator, SolverConfig,
};
use crate::transform::Boundary;
use rayon::prelude::*;
use serde::Serialize;
use std::path::Path;

/// Correctors `phi_{e_j}` and flux correctors `S_{e_j}` of one periodic medium.
#[derive(Clone, Debug)]
pub struct CorrectorSet {
    pub op: DiscreteOperator,
    /// `phi[j]`: node values of `phi_{e_j}`, mean zero.
    pub phi: Vec<Vec<f64>>,
    /// `s[j][i * d + l]`: node values of `S_{e_j, il}`.
    pub s: Vec<Vec<Vec<f64>>>,
    /// Periodic homogenized matrix of this sample.
    pub abar: Vec<f64>,
    /// Relative residual of `a(e + grad phi_e) - abar e = div S_e` on the
    /// Fourier modes the discrete gradient can see.
    pub flux_residual: Vec<f64>,
    /// Relative size of the part of `a(e + grad phi_e) - abar e` on modes
    /// annihilated by the discrete gradient (only on tori with an even
    /// number of cells per side).
    pub invisible_fraction: Vec<f64>,
}

impl CorrectorSet {
    pub fn dim(&self) -> usize {
        self.op.dim()
    }

    pub fn grid(&self) -> &Grid {
        &self.op.grid
    }

    /// Cell field `e_j + grad phi_{e_j}`.
    pub fn tilted_gradient(&self, j: usize) -> Vec<f64> {
        let d = self.dim();
        let mut g = self.op.gradient(&self.phi[j]);
        for c in 0..self.op.ncells() {
            g[c * d + j] += 1.0;
        }
        g
    }

    /// Writes the corrector arrays in the binary grid layout plus a JSON sidecar.
    pub fn save(&self, dir: &Path, spec: &FieldSpec, seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let dims = self.grid().n.clone();
        let d = self.dim();
        for j in 0..d {
            write_binary(
                &dir.join(format!("phi_e{}.bin", j + 1)),
                &dims,
                1,
                &self.phi[j],
            )?;
            let mut s = Vec::with_capacity(dims.iter().product::<usize>() * d * d);
            for v in 0..self.phi[j].len() {
                for comp in &self.s[j] {
                    s.push(comp[v]);
                }
            }
            write_binary(&dir.join(format!("flux_e{}.bin", j + 1)), &dims, d * d, &s)?;
        }
        let side = serde_json::json!({
            "spec": spec,
            "spec_hash": crate::homogenize::cache_key(spec, 0, 0, 0, 0),
            "seed": seed,
            "torus": self.grid().side_lengths()[0],
            "cells_per_side": self.grid().n[0],
            "abar_per": self.abar,
            "flux_residual": self.flux_residual,
            "invisible_fraction": self.invisible_fraction,
        });
        std::fs::write(
            dir.join("correctors.json"),
            serde_json::to_string_pretty(&side)?,
        )?;
        Ok(())
    }
}

/// `D_j^T f` for the scalar cell field `f` placed in component `j`.
fn component_adjoint(op: &DiscreteOperator, f: &[f64], j: usize) -> Vec<f64> {
    let d = op.dim();
    let mut g = vec![0.0; op.ncells() * d];
    for c in 0..op.ncells() {
        g[c * d + j] = f[c];
    }
    op.gradient_adjoint(&g)
}

fn invisible(k: &[f64], h: f64) -> bool {
    k.iter().any(|v| *v != 0.0) && gradient_symbol(k, h).iter().map(|s| s * s).sum::<f64>() < 1e-24
}

/// Part of a cell function on modes annihilated by the discrete gradient.
pub fn invisible_part(grid: &Grid, f: &[f64]) -> Vec<f64> {
    let h = grid.h;
    fourier_multiplier(f, &grid.n, h, |k| if invisible(k, h) { 1.0 } else { 0.0 })
}

/// Solves the `d` cell problems and the flux corrector equations
/// `-Lap S_{e,il} = D_l g_i - D_i g_l` with `g = a(e + grad phi_e) - abar e`.
pub fn compute_correctors(op: &DiscreteOperator, cfg: &SolverConfig) -> Result<CorrectorSet> {
    if op.bc != Boundary::Periodic {
        return Err(Error::Input("correctors need a periodic operator".into()));
    }
    let d = op.dim();
    let grid = op.grid.clone();
    let (abar, phi) = periodic_matrix(op, cfg)?;
    let mut s_all = Vec::with_capacity(d);
    let mut flux_residual = Vec::with_capacity(d);
    let mut invisible_fraction = Vec::with_capacity(d);
    let ident = linalg::identity(d);
    let nc = op.ncells();
    for j in 0..d {
        let mut tilted = op.gradient(&phi[j]);
        for c in 0..nc {
            tilted[c * d + j] += 1.0;
        }
        let mut flux = vec![0.0; nc * d];
        let mut w = vec![0.0; d];
        for c in 0..nc {
            linalg::matvec(d, op.coeffs.cell(c), &tilted[c * d..(c + 1) * d], &mut w);
            flux[c * d..(c + 1) * d].copy_from_slice(&w);
        }
        let g: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..nc).map(|c| flux[c * d + i] - abar[i * d + j]).collect())
            .collect();
        let mut s = vec![vec![0.0; op.nnodes()]; d * d];
        for i in 0..d {
            for l in (i + 1)..d {
                let a = component_adjoint(op, &g[i], l);
                let b = component_adjoint(op, &g[l], i);
                let rhs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
                let sil = solve_constant_poisson(&grid, &rhs, &ident)?;
                s[l * d + i] = sil.iter().map(|v| -v).collect();
                s[i * d + l] = sil;
            }
        }
        // residual g_i - sum_l D_l S_il on visible modes
        let mut num = 0.0;
        let mut den = 0.0;
        let mut inv_num = 0.0;
        let mut gnorm = 0.0;
        for i in 0..d {
            let mut r = g[i].clone();
            for l in 0..d {
                if l == i {
                    continue;
                }
                let ds = op.gradient(&s[i * d + l]);
                for c in 0..nc {
                    r[c] -= ds[c * d + l];
                }
            }
            let hidden = invisible_part(&grid, &g[i]);
            for c in 0..nc {
                num += (r[c] - hidden[c]).powi(2);
                den += flux[c * d + i].powi(2);
                inv_num += hidden[c].powi(2);
                gnorm += g[i][c].powi(2);
            }
        }
        flux_residual.push((num / den).sqrt());
        invisible_fraction.push(if gnorm > 0.0 {
            (inv_num / gnorm).sqrt()
        } else {
            0.0
        });
        s_all.push(s);
    }
    Ok(CorrectorSet {
        op: op.clone(),
        phi,
        s: s_all,
        abar,
        flux_residual,
        invisible_fraction,
    })
}

/// Correctors of one realization wrapped onto the torus of side `l`.
pub fn correctors_for_sample(
    sample: &CoefficientSample,
    l: usize,
    k: usize,
    cfg: &SolverConfig,
) -> Result<CorrectorSet> {
    let grid = Grid::torus(sample.dim(), l, k);
    let op = assemble(&restrict_to_grid(sample, &grid), &grid, Boundary::Periodic)?;
    compute_correctors(&op, cfg)
}

/// `L^2` distance between the corrector gradients on tori of side `l` and
/// `2l` over the central box of side `l/2`, relative to the norm on the
/// larger torus.
pub fn doubling_check(
    sample: &CoefficientSample,
    l: usize,
    k: usize,
    cfg: &SolverConfig,
) -> Result<f64> {
    let d = sample.dim();
    let small = Grid::torus(d, l, k);
    let big = Grid::torus(d, 2 * l, k);
    let mut e = vec![0.0; d];
    e[0] = 1.0;
    let grad_on = |grid: &Grid| -> Result<(DiscreteOperator, Vec<f64>)> {
        let op = assemble(&restrict_to_grid(sample, grid), grid, Boundary::Periodic)?;
        let phi = crate::solver::solve_periodic_cell(&op, &e, cfg)?.solution;
        let g = op.gradient(&phi);
        Ok((op, g))
    };
    let (_, gs) = grad_on(&small)?;
    let (_, gb) = grad_on(&big)?;
    let half = l as f64 / 4.0;
    let (mut num, mut den) = (0.0, 0.0);
    for c in 0..small.ncells() {
        let x = small.cell_center(c);
        if x.iter().any(|v| v.abs() > half) {
            continue;
        }
        let lo = big.origin.clone();
        let idx: Vec<usize> = x
            .iter()
            .zip(&lo)
            .map(|(v, o)| ((v - o) / big.h).floor() as usize)
            .collect();
        let cb = crate::grid::ravel(&idx, &big.n);
        for j in 0..d {
            num += (gs[c * d + j] - gb[cb * d + j]).powi(2);
            den += gb[cb * d + j].powi(2);
        }
    }
    Ok(if den > 0.0 {
        (num / den).sqrt()
    } else {
        num.sqrt()
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayDiagnostic {
    pub statistic: String,
    pub scales: Vec<f64>,
    pub rms: Vec<f64>,
    pub fit: Option<SlopeFit>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayReport {
    pub direction: Vec<f64>,
    pub samples: usize,
    pub torus: usize,
    pub k: usize,
    /// Mean periodic matrix across samples, used to center the statistics.
    pub abar: Vec<f64>,
    pub gradient: DecayDiagnostic,
    pub flux: DecayDiagnostic,
    pub energy: DecayDiagnostic,
}

impl DecayReport {
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["statistic", "r", "rms"])?;
        for dgn in [&self.gradient, &self.flux, &self.energy] {
            for (r, v) in dgn.scales.iter().zip(&dgn.rms) {
                w.write_record([dgn.statistic.clone(), format!("{r}"), format!("{v:e}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn diagnostic(name: &str, scales: &[f64], values: &[Vec<f64>]) -> DecayDiagnostic {
    let rms: Vec<f64> = (0..scales.len())
        .map(|s| (values.iter().map(|v| v[s] * v[s]).sum::<f64>() / values.len() as f64).sqrt())
        .collect();
    let fit = if scales.len() >= 3 && rms.iter().all(|v| *v > 1e-14) {
        slope_fit(scales, &rms).ok()
    } else {
        None
    };
    DecayDiagnostic {
        statistic: name.into(),
        scales: scales.to_vec(),
        rms,
        fit,
    }
}

/// Heat-kernel averages at the origin of `grad phi_e`, of the centered flux
/// `a(e + grad phi_e) - abar e` and of the centered energy density, over
/// independent samples on tori of side `l`.
pub fn heat_average_decay(
    spec: &FieldSpec,
    e: &[f64],
    scales: &[f64],
    samples: usize,
    l: usize,
    k: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<DecayReport> {
    spec.validate()?;
    let d = spec.dim;
    if e.len() != d {
        return Err(Error::Dimension("direction length".into()));
    }
    if scales.iter().any(|r| *r > l as f64 / 4.0 + 1e-12) {
        return Err(Error::Input(
            "heat-average scales must satisfy r <= L/4".into(),
        ));
    }
    let grid = Grid::torus(d, l, k);
    let center = vec![0.0; d];
    let masks: Vec<HeatKernelMask> = scales
        .iter()
        .map(|&r| HeatKernelMask::new(&grid, &center, r))
        .collect::<Result<_>>()?;
    struct Row {
        grad: Vec<f64>,
        flux: Vec<Vec<f64>>,
        energy: Vec<f64>,
        abar_e: Vec<f64>,
        e_abar_e: f64,
    }
    let rows: Vec<Row> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let s = sample_field(spec, derive_seed(seed, &format!("decay/{i}")))?;
            let op = assemble(&restrict_to_grid(&s, &grid), &grid, Boundary::Periodic)?;
            let phi = crate::solver::solve_periodic_cell(&op, e, cfg)?.solution;
            let mut g = op.gradient(&phi);
            let nc = op.ncells();
            let mut flux = vec![0.0; nc * d];
            let mut dens = vec![0.0; nc];
            let mut w = vec![0.0; d];
            for c in 0..nc {
                for j in 0..d {
                    g[c * d + j] += e[j];
                }
                let t = &g[c * d..(c + 1) * d];
                linalg::matvec(d, op.coeffs.cell(c), t, &mut w);
                flux[c * d..(c + 1) * d].copy_from_slice(&w);
                dens[c] = 0.5 * linalg::dot(t, &w);
            }
            let abar_e = op.vector_average(&flux);
            let mut grad_stats = Vec::new();
            let mut flux_stats = Vec::new();
            let mut en_stats = Vec::new();
            for m in &masks {
                let mut gv = vec![0.0; d];
                let mut fv = vec![0.0; d];
                let mut ev = 0.0;
                for &(c, wt) in &m.entries {
                    for j in 0..d {
                        gv[j] += wt * (g[c * d + j] - e[j]);
                        fv[j] += wt * flux[c * d + j];
                    }
                    ev += wt * dens[c];
                }
                grad_stats.push(linalg::norm(&gv));
                flux_stats.push(fv);
                en_stats.push(ev);
            }
            Ok(Row {
                grad: grad_stats,
                flux: flux_stats,
                energy: en_stats,
                e_abar_e: linalg::dot(e, &abar_e),
                abar_e,
            })
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let mut abar_e = vec![0.0; d];
    for r in &rows {
        for j in 0..d {
            abar_e[j] += r.abar_e[j] / n;
        }
    }
    let e_abar_e = rows.iter().map(|r| r.e_abar_e).sum::<f64>() / n;
    let grads: Vec<Vec<f64>> = rows.iter().map(|r| r.grad.clone()).collect();
    let fluxes: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            r.flux
                .iter()
                .map(|f| {
                    f.iter()
                        .zip(&abar_e)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect();
    let energies: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.energy.iter().map(|v| v - 0.5 * e_abar_e).collect())
        .collect();
    // full matrix column for reporting
    let mut abar = vec![f64::NAN; d * d];
    if let Some(j) = e
        .iter()
        .position(|v| *v == 1.0)
        .filter(|_| e.iter().filter(|v| **v != 0.0).count() == 1)
    {
        for i in 0..d {
            abar[i * d + j] = abar_e[i];
        }
    }
    Ok(DecayReport {
        direction: e.to_vec(),
        samples,
        torus: l,
        k,
        abar,
        gradient: diagnostic("gradient", scales, &grads),
        flux: diagnostic("flux", scales, &fluxes),
        energy: diagnostic("energy", scales, &energies),
    })
}

/// Ball average of `|f - c|^2` over the cells with centers in `B_r(0)`.
fn ball_mean_square(grid: &Grid, f: &[f64], c: f64, r: f64) -> (f64, usize) {
    let mut s = 0.0;
    let mut n = 0;
    for cell in 0..grid.ncells() {
        let x = grid.cell_center(cell);
        if linalg::dot(&x, &x) < r * r {
            s += (f[cell] - c).powi(2);
            n += 1;
        }
    }
    (if n > 0 { s / n as f64 } else { 0.0 }, n)
}

#[derive(Clone, Debug, Serialize)]
pub struct GrowthTable {
    pub radii: Vec<f64>,
    /// `(mean_{B_r} |phi_e - (phi_e * Phi_r)(0)|^2)^{1/2}`.
    pub profile: Vec<f64>,
    /// Slope of the profile against `sqrt(log r)` (two dimensions).
    pub log_fit: Option<(f64, f64)>,
}

/// Oscillation of `phi_{e_j}` on balls `B_r(0)`, each anchored by its own
/// heat-kernel average at scale `r`.
pub fn sublinearity_profile(set: &CorrectorSet, j: usize, radii: &[f64]) -> Result<GrowthTable> {
    let grid = set.grid();
    let cellv = set.op.cell_values(&set.phi[j]);
    let center = vec![0.0; grid.dim];
    let mut profile = Vec::with_capacity(radii.len());
    for &r in radii {
        if 2.0 * r > grid.side_lengths()[0] {
            return Err(Error::Input(format!(
                "radius {r} does not fit in the torus"
            )));
        }
        let anchor = HeatKernelMask::new(grid, &center, r)?.integrate(&cellv);
        profile.push(ball_mean_square(grid, &cellv, anchor, r).0.sqrt());
    }
    let log_fit = if grid.dim == 2 && radii.len() >= 2 && radii.iter().all(|r| *r > 1.0) {
        let x: Vec<f64> = radii.iter().map(|r| r.ln().sqrt()).collect();
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = profile.iter().sum::<f64>() / n;
        let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
        let sxy: f64 = x
            .iter()
            .zip(&profile)
            .map(|(a, b)| (a - mx) * (b - my))
            .sum();
        let slope = sxy / sxx;
        Some((slope, my - slope * mx))
    } else {
        None
    };
    Ok(GrowthTable {
        radii: radii.to_vec(),
        profile,
        log_fit,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct LipschitzReport {
    pub radius: f64,
    pub radii: Vec<f64>,
    /// `(1/r) (mean_{B_r} |u - (u)_{B_r}|^2)^{1/2}`, radii decreasing from `R`.
    pub profile: Vec<f64>,
    pub c0: f64,
    /// Smallest listed radius from which the profile stays below
    /// `c0 * profile(R)`.
    pub minimal_scale: f64,
    pub iterations: usize,
}

/// Random smooth boundary data on the sphere of radius `r`.
pub fn random_boundary_data(dim: usize, r: f64, seed: u64) -> impl Fn(&[f64]) -> f64 {
    let modes = 3i64;
    let mut coef = Vec::new();
    let mut idx = vec![-modes; dim];
    loop {
        let key: Vec<i64> = idx.clone();
        coef.push((key.clone(), hashed_normal(seed, tags::BOUNDARY, &key)));
        let mut j = dim;
        let more = loop {
            if j == 0 {
                break false;
            }
            j -= 1;
            idx[j] += 1;
            if idx[j] <= modes {
                break true;
            }
            idx[j] = -modes;
        };
        if !more {
            break;
        }
    }
    move |x: &[f64]| {
        let mut v = 0.0;
        for (m, c) in &coef {
            let phase: f64 = m.iter().zip(x).map(|(k, xi)| *k as f64 * xi).sum::<f64>()
                * std::f64::consts::PI
                / (2.0 * r);
            let norm = 1.0 + m.iter().map(|k| (k * k) as f64).sum::<f64>();
            v += c * phase.cos() / norm;
        }
        v
    }
}

/// Dirichlet problem on the ball `B_R(0)` (nodes outside are fixed to the
/// data) and the profile of normalized oscillations on dyadic sub-balls.
pub fn lipschitz_profile(
    sample: &CoefficientSample,
    radius: f64,
    k: usize,
    data: impl Fn(&[f64]) -> f64,
    c0: f64,
    cfg: &SolverConfig,
) -> Result<LipschitzReport> {
    let d = sample.dim();
    let half = (radius + 1.0).ceil() as usize;
    let cells = (2 * half + 1) * k;
    let origin = vec![-(half as f64) - 0.5; d];
    let grid = Grid::new(origin, vec![cells; d], 1.0 / k as f64, false);
    let op = assemble(&restrict_to_grid(sample, &grid), &grid, Boundary::Dirichlet)?;
    let n = op.nnodes();
    let fixed: Vec<bool> = (0..n)
        .map(|v| {
            let x = grid.node_position(v);
            linalg::dot(&x, &x) >= radius * radius
        })
        .collect();
    let g: Vec<f64> = (0..n)
        .map(|v| {
            if fixed[v] {
                data(&grid.node_position(v))
            } else {
                0.0
            }
        })
        .collect();
    let free: Vec<usize> = (0..n).filter(|&i| !fixed[i]).collect();
    let rhs_full: Vec<f64> = op.apply(&g).iter().map(|v| -v).collect();
    let diag = op.diagonal();
    let apply = |x: &[f64]| {
        let mut full = vec![0.0; n];
        for (kk, &i) in free.iter().enumerate() {
            full[i] = x[kk];
        }
        let y = op.apply(&full);
        free.iter().map(|&i| y[i]).collect::<Vec<f64>>()
    };
    let b: Vec<f64> = free.iter().map(|&i| rhs_full[i]).collect();
    let dfree: Vec<f64> = free.iter().map(|&i| diag[i]).collect();
    let max_iter = cfg.max_iter.unwrap_or(200.max(100 * cells));
    let out = pcg(
        apply,
        |r| r.iter().zip(&dfree).map(|(v, dd)| v / dd).collect(),
        &b,
        cfg.tol,
        max_iter,
    )?;
    let mut u = g;
    for (kk, &i) in free.iter().enumerate() {
        u[i] = out.x[kk];
    }
    let cellv = op.cell_values(&u);
    let mut radii = Vec::new();
    let mut r = radius;
    // balls below four cells are dominated by lattice effects
    while r * k as f64 >= 4.0 {
        radii.push(r);
        r /= 2.0;
    }
    let mut profile = Vec::with_capacity(radii.len());
    for &r in &radii {
        let (mut s, mut cnt) = (0.0, 0usize);
        for c in 0..grid.ncells() {
            let x = grid.cell_center(c);
            if linalg::dot(&x, &x) < r * r {
                s += cellv[c];
                cnt += 1;
            }
        }
        let mean = s / cnt.max(1) as f64;
        let (ms, _) = ball_mean_square(&grid, &cellv, mean, r);
        profile.push(ms.sqrt() / r);
    }
    let bound = c0 * profile[0];
    let mut minimal = radii[0];
    for (i, p) in profile.iter().enumerate() {
        if *p <= bound * (1.0 + 1e-12) {
            minimal = radii[i];
        } else {
            break;
        }
    }
    Ok(LipschitzReport {
        radius,
        radii,
        profile,
        c0,
        minimal_scale: minimal,
        iterations: out.iterations,
    })
}

/// Mean and standard error of per-sample values; convenience for reports.
pub fn summarize(values: &[f64]) -> (f64, f64) {
    mean_stderr(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::CellCoefficients;

    #[test]
    fn constant_field_has_trivial_correctors() {
        let grid = Grid::torus(2, 4, 2);
        let op = assemble(
            &CellCoefficients::constant(2, grid.ncells(), &[2.0, 0.0, 0.0, 2.0]),
            &grid,
            Boundary::Periodic,
        )
        .unwrap();
        let set = compute_correctors(&op, &SolverConfig::default()).unwrap();
        assert!(set.phi.iter().flatten().all(|v| v.abs() < 1e-12));
        assert!(set.s.iter().flatten().flatten().all(|v| v.abs() < 1e-12));
        assert!(linalg::max_abs_diff(&set.abar, &[2.0, 0.0, 0.0, 2.0]) < 1e-12);
    }

    #[test]
    fn one_dimensional_corrector_gradient() {
        let s = sample_field(&FieldSpec::layered(1.0, 4.0), 8).unwrap();
        let set = correctors_for_sample(&s, 27, 2, &SolverConfig::default()).unwrap();
        let g = set.op.gradient(&set.phi[0]);
        let harm = set.op.coeffs.harmonic_mean()[0];
        for c in 0..g.len() {
            assert!((g[c] - (harm / set.op.coeffs.cell(c)[0] - 1.0)).abs() < 1e-8);
        }
    }

    #[test]
    fn flux_corrector_identity_and_skew_symmetry() {
        let spec = FieldSpec::checkerboard(2, 1.0, 4.0);
        let s = sample_field(&spec, 4).unwrap();
        // odd number of cells per side: every nonzero mode is visible
        let set = correctors_for_sample(&s, 9, 3, &SolverConfig::with_tol(1e-12)).unwrap();
        for j in 0..2 {
            assert!(set.flux_residual[j] < 1e-6, "{:?}", set.flux_residual);
            assert!(set.invisible_fraction[j] < 1e-12);
            for i in 0..2 {
                for l in 0..2 {
                    let a = &set.s[j][i * 2 + l];
                    let b = &set.s[j][l * 2 + i];
                    assert!(a.iter().zip(b).all(|(x, y)| *x == -*y));
                }
                let m = set.s[j][i * 2 + 1 - i].iter().sum::<f64>() / set.phi[j].len() as f64;
                assert!(m.abs() < 1e-10);
            }
            let m = set.phi[j].iter().sum::<f64>() / set.phi[j].len() as f64;
            assert!(m.abs() < 1e-10);
            let g = set.op.gradient(&set.phi[j]);
            assert!(set.op.vector_average(&g).iter().all(|v| v.abs() < 1e-10));
        }
        assert!((set.abar[1] - set.abar[2]).abs() < 1e-8);
        let h = set.op.coeffs.harmonic_mean();
        let a = set.op.coeffs.arithmetic_mean();
        assert!(set.abar[0] >= h[0] - 1e-9 && set.abar[0] <= a[0] + 1e-9);
        // even torus: the residual on visible modes is still exact
        let set = correctors_for_sample(&s, 8, 2, &SolverConfig::with_tol(1e-12)).unwrap();
        assert!(set.flux_residual.iter().all(|r| *r < 1e-6));
    }

    #[test]
    fn decay_statistics_vanish_for_constant_field() {
        let r = heat_average_decay(
            &FieldSpec::constant(2, 2.0, 2.0),
            &[1.0, 0.0],
            &[1.0, 2.0],
            2,
            8,
            2,
            1,
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(r
            .gradient
            .rms
            .iter()
            .chain(&r.flux.rms)
            .chain(&r.energy.rms)
            .all(|v| v.abs() < 1e-10));
        assert!(heat_average_decay(
            &FieldSpec::constant(2, 2.0, 2.0),
            &[1.0, 0.0],
            &[4.0],
            2,
            8,
            2,
            1,
            &SolverConfig::default()
        )
        .is_err());
    }

    #[test]
    fn sublinearity_profile_cases() {
        let grid = Grid::torus(2, 8, 2);
        let op = assemble(
            &CellCoefficients::constant(2, grid.ncells(), &[1.0, 0.0, 0.0, 1.0]),
            &grid,
            Boundary::Periodic,
        )
        .unwrap();
        let set = compute_correctors(&op, &SolverConfig::default()).unwrap();
        let t = sublinearity_profile(&set, 0, &[1.0, 2.0]).unwrap();
        assert!(t.profile.iter().all(|v| *v < 1e-12));
        // one dimension: the corrector is bounded
        let s = sample_field(&FieldSpec::layered(1.0, 4.0), 3).unwrap();
        let set = correctors_for_sample(&s, 256, 2, &SolverConfig::default()).unwrap();
        let t = sublinearity_profile(&set, 0, &[2.0, 8.0, 32.0, 64.0]).unwrap();
        let bound = set.phi[0].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(t.profile.iter().all(|v| *v <= 2.0 * bound));
    }

    #[test]
    fn lipschitz_profile_constant_field() {
        let s = sample_field(&FieldSpec::constant(2, 1.0, 1.0), 0).unwrap();
        let cfg = SolverConfig::with_tol(1e-12);
        let affine =
            lipschitz_profile(&s, 16.0, 1, |x| 0.3 * x[0] - 0.7 * x[1], 8.0, &cfg).unwrap();
        let p0 = affine.profile[0];
        assert!(affine.profile.iter().all(|p| (p - p0).abs() < 0.1 * p0));
        assert_eq!(affine.minimal_scale, *affine.radii.last().unwrap());
        let harm =
            lipschitz_profile(&s, 16.0, 1, |x| x[0] * x[0] - x[1] * x[1], 8.0, &cfg).unwrap();
        // radii decrease, so the profile of a quadratic harmonic function decreases
        for w in harm.profile.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "{:?}", harm.profile);
        }
    }
}
