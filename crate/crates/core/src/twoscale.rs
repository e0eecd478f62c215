//! Two-scale expansion for the Dirichlet problem on the unit box and the
//! homogenization errors it controls.
//!
//! For `eps = 3^{-k}` the box `U = (-1/2, 1/2)^d` is meshed with `K` cells per
//! `eps`-cell, `u^eps` solves `-div a(x/eps) grad u^eps = 0` with data `u` on
//! the boundary, and
//!
//! ```text
//! w^eps = u + eps sum_j (d_j u * zeta_eps) phi_{e_j}(x/eps)
//! ```
//!
//! with correctors computed on a torus covering `U/eps` with a margin.

use crate::analysis::{slope_fit, SlopeFit};
use crate::corrector::compute_correctors;
use crate::error::{Error, Result};
use crate::field::{
    restrict_to_grid, sample_field, CellCoefficients, CoefficientSample, FieldSpec,
};
use crate::grid::{mollify_with, Grid, HeatKernelMask, Mollifier};
use crate::linalg;
use crate::seed::derive_seed;
use crate::solver::{assemble, solve_dirichlet, SolverConfig};
use crate::transform::Boundary;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Boundary data, also the homogenized solution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Data {
    /// `u = p . x`.
    Affine { p: Vec<f64> },
    /// `u = sin(pi x_1) sinh(kappa . x) / sinh(|kappa|)` with `kappa` chosen
    /// so that `u` is `abar`-harmonic (two dimensions).
    Harmonic,
}

/// A smooth `abar`-harmonic function with its gradient.
#[derive(Clone, Debug)]
pub struct SmoothSolution {
    data: Data,
    kappa: Vec<f64>,
    norm: f64,
}

impl SmoothSolution {
    pub fn new(data: &Data, abar: &[f64], dim: usize) -> Result<Self> {
        match data {
            Data::Affine { p } => {
                if p.len() != dim {
                    return Err(Error::Dimension("affine slope length".into()));
                }
                Ok(SmoothSolution {
                    data: data.clone(),
                    kappa: vec![],
                    norm: 1.0,
                })
            }
            Data::Harmonic => {
                if dim != 2 {
                    return Err(Error::Input(
                        "harmonic data is defined in two dimensions".into(),
                    ));
                }
                // kappa = t abar^{-1} e_2 makes e_1.abar kappa = 0; t matches the
                // two quadratic forms so the operator annihilates u
                let inv = linalg::inverse(2, abar).ok_or_else(|| Error::Singular("abar".into()))?;
                let t = std::f64::consts::PI * (abar[0] / inv[3]).sqrt();
                let kappa = vec![t * inv[1], t * inv[3]];
                let norm = linalg::norm(&kappa).sinh();
                Ok(SmoothSolution {
                    data: data.clone(),
                    kappa,
                    norm,
                })
            }
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match &self.data {
            Data::Affine { p } => linalg::dot(p, x),
            Data::Harmonic => {
                let pi = std::f64::consts::PI;
                (pi * x[0]).sin() * linalg::dot(&self.kappa, x).sinh() / self.norm
            }
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match &self.data {
            Data::Affine { p } => p.clone(),
            Data::Harmonic => {
                let pi = std::f64::consts::PI;
                let s = (pi * x[0]).sin();
                let c = (pi * x[0]).cos();
                let kx = linalg::dot(&self.kappa, x);
                let (sh, ch) = (kx.sinh(), kx.cosh());
                vec![
                    (pi * c * sh + s * self.kappa[0] * ch) / self.norm,
                    s * self.kappa[1] * ch / self.norm,
                ]
            }
        }
    }
}

/// Grid on the unit box with `k` cells per `eps`-cell.
pub fn box_grid(dim: usize, eps: f64, k: usize) -> Result<Grid> {
    let inv = 1.0 / eps;
    if (inv - inv.round()).abs() > 1e-9 || inv.round() as i64 % 2 == 0 {
        return Err(Error::Input(format!(
            "1/eps = {inv} must be an odd integer"
        )));
    }
    let n = inv.round() as usize * k;
    Ok(Grid::new(
        vec![-0.5; dim],
        vec![n; dim],
        eps / k as f64,
        false,
    ))
}

/// `a(x/eps)` at the cell centers of `grid`.
pub fn scaled_coefficients(sample: &CoefficientSample, grid: &Grid, eps: f64) -> CellCoefficients {
    let scaled = Grid::new(
        grid.origin.iter().map(|o| o / eps).collect(),
        grid.n.clone(),
        grid.h / eps,
        false,
    );
    restrict_to_grid(sample, &scaled)
}

/// Correctors on a torus covering `U/eps` with two unit cells of margin,
/// sampled at the nodes of the box grid.
pub struct ScaledCorrectors {
    pub phi: Vec<Vec<f64>>,
    pub torus: usize,
}

pub fn scaled_correctors(
    sample: &CoefficientSample,
    box_grid: &Grid,
    eps: f64,
    k: usize,
    cfg: &SolverConfig,
) -> Result<ScaledCorrectors> {
    let d = box_grid.dim;
    let inv = (1.0 / eps).round() as usize;
    let l = inv + 4;
    let tgrid = Grid::torus(d, l, k);
    let op = assemble(
        &restrict_to_grid(sample, &tgrid),
        &tgrid,
        Boundary::Periodic,
    )?;
    let set = compute_correctors(&op, cfg)?;
    // node offset of the box origin -inv/2 inside the torus
    let shift = ((l / 2) - (inv - 1) / 2) * k;
    let bdims = box_grid.node_dims();
    let mut phi = Vec::with_capacity(d);
    for j in 0..d {
        let cellv = set.op.cell_values(&set.phi[j]);
        let anchor = if d == 2 {
            HeatKernelMask::new(&tgrid, &vec![0.0; d], inv as f64)?.integrate(&cellv)
        } else {
            0.0
        };
        let mut out = vec![0.0; box_grid.nnodes()];
        let mut m = vec![0usize; d];
        for v in out.iter_mut() {
            let t: Vec<usize> = m.iter().map(|&i| (i + shift) % tgrid.n[0]).collect();
            *v = set.phi[j][crate::grid::ravel(&t, &tgrid.n)] - anchor;
            crate::grid::increment(&mut m, &bdims);
        }
        phi.push(out);
    }
    Ok(ScaledCorrectors { phi, torus: l })
}

/// `w^eps` at the nodes of the box grid.
pub fn build_w_eps(
    grid: &Grid,
    u: &SmoothSolution,
    correctors: &[Vec<f64>],
    eps: f64,
) -> Result<Vec<f64>> {
    let d = grid.dim;
    if correctors.len() != d || correctors.iter().any(|c| c.len() != grid.nnodes()) {
        return Err(Error::Dimension(
            "corrector arrays do not match the grid".into(),
        ));
    }
    let moll = Mollifier::new(d, grid.h, eps)?;
    let margin = (eps / grid.h).ceil() as usize;
    let ext_dims: Vec<usize> = grid.node_dims().iter().map(|n| n + 2 * margin).collect();
    let ext_origin: Vec<f64> = grid
        .origin
        .iter()
        .map(|o| o - margin as f64 * grid.h)
        .collect();
    let total: usize = ext_dims.iter().product();
    let mut w: Vec<f64> = (0..grid.nnodes())
        .map(|v| u.value(&grid.node_position(v)))
        .collect();
    for j in 0..d {
        let dj: Vec<f64> = (0..total)
            .into_par_iter()
            .map(|i| {
                let m = crate::grid::unravel(i, &ext_dims);
                let x: Vec<f64> = m
                    .iter()
                    .zip(&ext_origin)
                    .map(|(&k, o)| o + k as f64 * grid.h)
                    .collect();
                u.gradient(&x)[j]
            })
            .collect();
        let sm = mollify_with(&moll, &ext_dims, false, &dj)?;
        let ndims = grid.node_dims();
        let mut m = vec![0usize; d];
        for (v, wv) in w.iter_mut().enumerate() {
            let e: Vec<usize> = m.iter().map(|&i| i + margin).collect();
            *wv += eps * sm[crate::grid::ravel(&e, &ext_dims)] * correctors[j][v];
            crate::grid::increment(&mut m, &ndims);
        }
    }
    Ok(w)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TwoScaleReport {
    pub eps: f64,
    pub sample: usize,
    pub l2_err: f64,
    pub h1_err: f64,
    pub weighted_err: f64,
    pub interior_err: f64,
    /// Mean of `a(x/eps) grad u^eps` over `U`.
    pub flux_avg: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Errors of one realization at one `eps`.
pub fn two_scale_sample(
    sample: &CoefficientSample,
    eps: f64,
    k: usize,
    u: &SmoothSolution,
    cfg: &SolverConfig,
    index: usize,
) -> Result<TwoScaleReport> {
    let d = sample.dim();
    let grid = box_grid(d, eps, k)?;
    let coeffs = scaled_coefficients(sample, &grid, eps);
    let op = assemble(&coeffs, &grid, Boundary::Dirichlet)?;
    let bnd = grid.boundary_mask();
    let g: Vec<f64> = (0..grid.nnodes())
        .map(|v| u.value(&grid.node_position(v)))
        .collect();
    let sol = solve_dirichlet(&op, &bnd, &g, cfg)?;
    let corr = scaled_correctors(sample, &grid, eps, k, cfg)?;
    let w = build_w_eps(&grid, u, &corr.phi, eps)?;
    let ue = &sol.solution;
    let vol = grid.cell_volume();
    let diff: Vec<f64> = ue.iter().zip(&g).map(|(a, b)| a - b).collect();
    let l2 = op
        .cell_values(&diff)
        .iter()
        .map(|v| v * v * vol)
        .sum::<f64>()
        .sqrt();
    let gd: Vec<f64> = op.gradient(&ue.iter().zip(&w).map(|(a, b)| a - b).collect::<Vec<_>>());
    let (mut h1, mut wt, mut inner) = (0.0, 0.0, 0.0);
    for c in 0..grid.ncells() {
        let x = grid.cell_center(c);
        let s: f64 = gd[c * d..(c + 1) * d].iter().map(|v| v * v).sum::<f64>() * vol;
        let dist = x
            .iter()
            .map(|v| 0.5 - v.abs())
            .fold(f64::INFINITY, f64::min);
        let rho = dist.max(eps);
        h1 += s;
        wt += s * rho * rho;
        if dist > 0.25 {
            inner += s;
        }
    }
    let flux_avg = op.flux_average(&op.gradient(ue));
    Ok(TwoScaleReport {
        eps,
        sample: index,
        l2_err: l2,
        h1_err: h1.sqrt(),
        weighted_err: wt.sqrt(),
        interior_err: inner.sqrt(),
        flux_avg,
        iterations: sol.iterations,
        residual: sol.residual,
    })
}

/// Runs every `(sample, eps)` pair with the homogenized matrix `abar`.
pub fn homogenization_errors(
    spec: &FieldSpec,
    abar: &[f64],
    data: &Data,
    eps: &[f64],
    samples: usize,
    k: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<Vec<TwoScaleReport>> {
    spec.validate()?;
    let u = SmoothSolution::new(data, abar, spec.dim)?;
    let tasks: Vec<(usize, f64)> = (0..samples)
        .flat_map(|i| eps.iter().map(move |&e| (i, e)))
        .collect();
    tasks
        .into_par_iter()
        .map(|(i, e)| {
            let s = sample_field(spec, derive_seed(seed, &format!("twoscale/{i}")))?;
            two_scale_sample(&s, e, k, &u, cfg, i)
        })
        .collect()
}

pub fn write_csv(path: &Path, reports: &[TwoScaleReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "eps",
        "sample",
        "l2_err",
        "h1_err",
        "weighted_err",
        "interior_err",
    ])?;
    for r in reports {
        w.write_record([
            format!("{}", r.eps),
            r.sample.to_string(),
            format!("{:e}", r.l2_err),
            format!("{:e}", r.h1_err),
            format!("{:e}", r.weighted_err),
            format!("{:e}", r.interior_err),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct SlopeReport {
    pub eps: Vec<f64>,
    pub l2: Option<SlopeFit>,
    pub h1: Option<SlopeFit>,
    pub weighted: Option<SlopeFit>,
    pub interior: Option<SlopeFit>,
    /// Norms whose errors vanish at some `eps` and cannot be fitted.
    pub degenerate: Vec<String>,
}

/// Log-log slopes of the root-mean-square errors against `eps`.
pub fn slope_report(reports: &[TwoScaleReport]) -> Result<SlopeReport> {
    let mut eps: Vec<f64> = reports.iter().map(|r| r.eps).collect();
    eps.sort_by(|a, b| b.partial_cmp(a).unwrap());
    eps.dedup();
    if eps.len() < 3 {
        return Err(Error::Input(
            "slope report needs at least 3 values of eps".into(),
        ));
    }
    let rms = |f: &dyn Fn(&TwoScaleReport) -> f64| -> Vec<f64> {
        eps.iter()
            .map(|e| {
                let v: Vec<f64> = reports.iter().filter(|r| r.eps == *e).map(f).collect();
                (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
            })
            .collect()
    };
    let mut degenerate = Vec::new();
    let mut fit = |name: &str, y: Vec<f64>| {
        if y.iter().all(|v| *v > 0.0) {
            slope_fit(&eps, &y).ok()
        } else {
            degenerate.push(name.to_string());
            None
        }
    };
    let l2 = fit("l2", rms(&|r| r.l2_err));
    let h1 = fit("h1", rms(&|r| r.h1_err));
    let weighted = fit("weighted", rms(&|r| r.weighted_err));
    let interior = fit("interior", rms(&|r| r.interior_err));
    Ok(SlopeReport {
        eps,
        l2,
        h1,
        weighted,
        interior,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(f: impl Fn(f64) -> f64) -> Vec<TwoScaleReport> {
        [1.0 / 9.0, 1.0 / 27.0, 1.0 / 81.0]
            .iter()
            .map(|&e| TwoScaleReport {
                eps: e,
                sample: 0,
                l2_err: f(e),
                h1_err: f(e),
                weighted_err: f(e),
                interior_err: f(e),
                flux_avg: vec![],
                iterations: 0,
                residual: 0.0,
            })
            .collect()
    }

    #[test]
    fn synthetic_slopes() {
        let r = slope_report(&synthetic(|e| 3.0 * e)).unwrap();
        assert!((r.l2.unwrap().slope - 1.0).abs() < 1e-6);
        let r = slope_report(&synthetic(|e| 0.7 * e.sqrt())).unwrap();
        assert!((r.h1.unwrap().slope - 0.5).abs() < 1e-6);
        let r = slope_report(&synthetic(|e| e + 5.0 * e * e)).unwrap();
        let s = r.l2.unwrap().slope;
        assert!((1.0..=2.0).contains(&s));
        let r = slope_report(&synthetic(|_| 0.0)).unwrap();
        assert_eq!(r.degenerate.len(), 4);
    }

    #[test]
    fn harmonic_data_is_abar_harmonic() {
        let abar = [2.0, 0.3, 0.3, 1.5];
        let u = SmoothSolution::new(&Data::Harmonic, &abar, 2).unwrap();
        let h = 1e-3;
        let x = [0.1, -0.2];
        let mut lap = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let mut pp = x;
                let mut pm = x;
                let mut mp = x;
                let mut mm = x;
                pp[i] += h;
                pp[j] += h;
                pm[i] += h;
                pm[j] -= h;
                mp[i] -= h;
                mp[j] += h;
                mm[i] -= h;
                mm[j] -= h;
                let dij =
                    (u.value(&pp) - u.value(&pm) - u.value(&mp) + u.value(&mm)) / (4.0 * h * h);
                lap += abar[i * 2 + j] * dij;
            }
        }
        assert!(lap.abs() < 1e-5, "{lap}");
        let g = u.gradient(&x);
        for j in 0..2 {
            let mut a = x;
            let mut b = x;
            a[j] += h;
            b[j] -= h;
            assert!(((u.value(&a) - u.value(&b)) / (2.0 * h) - g[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_field_has_no_error() {
        let spec = FieldSpec::constant(2, 2.0, 2.0);
        let reps = homogenization_errors(
            &spec,
            &[2.0, 0.0, 0.0, 2.0],
            &Data::Affine { p: vec![1.0, 0.5] },
            &[1.0 / 3.0],
            1,
            4,
            1,
            &SolverConfig::default(),
        )
        .unwrap();
        let r = &reps[0];
        assert!(r.l2_err < 1e-8 && r.h1_err < 1e-8 && r.weighted_err < 1e-8);
        assert!(r.interior_err <= r.h1_err + 1e-15);
    }

    #[test]
    fn one_dimensional_gradient_of_w_matches_exact_solution() {
        let spec = FieldSpec::layered(1.0, 4.0);
        let s = sample_field(&spec, 6).unwrap();
        let eps = 1.0 / 9.0;
        let k = 16;
        let grid = box_grid(1, eps, k).unwrap();
        let coeffs = scaled_coefficients(&s, &grid, eps);
        // periodic abar of the torus the correctors live on
        let u = SmoothSolution::new(&Data::Affine { p: vec![1.0] }, &[1.0], 1).unwrap();
        let corr = scaled_correctors(&s, &grid, eps, k, &SolverConfig::default()).unwrap();
        let w = build_w_eps(&grid, &u, &corr.phi, eps).unwrap();
        let op = assemble(&coeffs, &grid, Boundary::Dirichlet).unwrap();
        let gw = op.gradient(&w);
        // exact derivative of the corrector-tilted affine: harm_T / a
        let tgrid = Grid::torus(1, corr.torus, k);
        let harm = restrict_to_grid(&s, &tgrid).harmonic_mean()[0];
        let m = (eps / grid.h).ceil() as usize + 1;
        for c in m..grid.ncells() - m {
            let exact = harm / coeffs.cell(c)[0];
            assert!((gw[c] - exact).abs() < 1e-3, "{c} {} {exact}", gw[c]);
        }
    }

    #[test]
    fn eps_must_be_triadic() {
        assert!(box_grid(2, 0.25, 2).is_err());
        assert!(box_grid(2, 1.0 / 9.0, 2).is_ok());
    }

    #[test]
    fn weighted_error_bounded_by_unweighted() {
        let spec = FieldSpec::checkerboard(2, 1.0, 4.0);
        let reps = homogenization_errors(
            &spec,
            &[2.0, 0.0, 0.0, 2.0],
            &Data::Harmonic,
            &[1.0 / 3.0],
            1,
            4,
            2,
            &SolverConfig::default(),
        )
        .unwrap();
        let r = &reps[0];
        assert!(r.weighted_err <= 0.5 * r.h1_err + 1e-15);
        assert!(r.interior_err <= r.h1_err);
        assert!(r.l2_err > 0.0);
    }
}
