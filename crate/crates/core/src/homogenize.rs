//! Monte Carlo estimates of the homogenized matrix, the Voigt–Reiss bracket,
//! the two-dimensional geometric-mean case, empirical convergence rates, and
//! an on-disk cache of estimates.

use crate::analysis::{linear_fit, mean_stderr, variance, SlopeFit};
use crate::energy::{nu, recover_quadratic_forms, CubeProblem};
use crate::error::{Error, Result};
use crate::field::{restrict_to_grid, sample_field, FieldSpec};
use crate::grid::{Grid, TriadicCube};
use crate::linalg;
use crate::seed::derive_seed;
use crate::solver::{assemble, solve_periodic_cell, DiscreteOperator, SolverConfig};
use crate::transform::Boundary;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Seed of sample `i`; shared across levels so that cubes of different
/// levels see nested pieces of the same realization.
pub fn sample_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, &format!("sample/{i}"))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HomogenizedEstimate {
    pub spec: FieldSpec,
    pub level: u32,
    pub k: usize,
    pub samples: usize,
    pub seed: u64,
    pub succeeded: usize,
    pub failures: Vec<String>,
    /// Mean of `a_U` (row-major).
    pub a: Vec<f64>,
    pub a_stderr: Vec<f64>,
    pub b: Vec<f64>,
    pub b_stderr: Vec<f64>,
    pub b_inv: Vec<f64>,
    /// Largest entry of `|a - b^{-1}|`.
    pub route_gap: f64,
    /// Mean over samples of the cell harmonic and arithmetic means.
    pub harmonic: Vec<f64>,
    pub harmonic_stderr: Vec<f64>,
    pub arithmetic: Vec<f64>,
    pub arithmetic_stderr: Vec<f64>,
    pub per_sample_a: Vec<Vec<f64>>,
    pub per_sample_b: Vec<Vec<f64>>,
    pub solver: SolverConfig,
}

impl HomogenizedEstimate {
    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn max_stderr(&self) -> f64 {
        self.a_stderr.iter().cloned().fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("estimate serializes")
    }
}

fn entrywise_stats(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let m = rows[0].len();
    let mut mean = vec![0.0; m];
    let mut se = vec![0.0; m];
    for k in 0..m {
        let col: Vec<f64> = rows.iter().map(|r| r[k]).collect();
        let (a, b) = mean_stderr(&col);
        mean[k] = a;
        se[k] = b;
    }
    (mean, se)
}

struct SampleForms {
    a: Vec<f64>,
    b: Vec<f64>,
    harmonic: Vec<f64>,
    arithmetic: Vec<f64>,
}

/// Averages `a_U`, `b_U` over `samples` independent realizations on the
/// level-`level` cube with `k` grid cells per unit. Failed samples are
/// logged and skipped; at least half must succeed.
pub fn estimate_ahom(
    spec: &FieldSpec,
    level: u32,
    k: usize,
    samples: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<HomogenizedEstimate> {
    spec.validate()?;
    if samples < 2 {
        return Err(Error::Input(
            "estimate_ahom needs at least 2 samples".into(),
        ));
    }
    let cube = TriadicCube::new(spec.dim, level);
    let results: Vec<Result<SampleForms>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let s = sample_field(spec, sample_seed(seed, i))?;
            let prob = CubeProblem::new(&s, &cube, k, cfg.clone())?;
            let f = recover_quadratic_forms(&prob)?;
            Ok(SampleForms {
                a: f.a,
                b: f.b,
                harmonic: prob.coeffs().harmonic_mean(),
                arithmetic: prob.coeffs().arithmetic_mean(),
            })
        })
        .collect();
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(f) => ok.push(f),
            Err(e) => {
                eprintln!("estimate_ahom: sample {i} failed: {e}");
                failures.push(format!("sample {i}: {e}"));
            }
        }
    }
    if ok.len() * 2 < samples || ok.len() < 2 {
        return Err(Error::Input(format!(
            "only {} of {samples} samples succeeded: {}",
            ok.len(),
            failures.join("; ")
        )));
    }
    let d = spec.dim;
    let per_a: Vec<Vec<f64>> = ok.iter().map(|f| f.a.clone()).collect();
    let per_b: Vec<Vec<f64>> = ok.iter().map(|f| f.b.clone()).collect();
    let (a, a_se) = entrywise_stats(&per_a);
    let (b, b_se) = entrywise_stats(&per_b);
    let (harm, harm_se) =
        entrywise_stats(&ok.iter().map(|f| f.harmonic.clone()).collect::<Vec<_>>());
    let (arith, arith_se) =
        entrywise_stats(&ok.iter().map(|f| f.arithmetic.clone()).collect::<Vec<_>>());
    let b_inv =
        linalg::inverse(d, &b).ok_or_else(|| Error::Singular("mean b_U is singular".into()))?;
    Ok(HomogenizedEstimate {
        spec: spec.clone(),
        level,
        k,
        samples,
        seed,
        succeeded: ok.len(),
        failures,
        route_gap: linalg::max_abs_diff(&a, &b_inv),
        a,
        a_stderr: a_se,
        b,
        b_stderr: b_se,
        b_inv,
        harmonic: harm,
        harmonic_stderr: harm_se,
        arithmetic: arith,
        arithmetic_stderr: arith_se,
        per_sample_a: per_a,
        per_sample_b: per_b,
        solver: cfg.clone(),
    })
}

/// Homogenized matrix of a periodic medium on one torus, with the correctors.
/// `abar_ij = mean(e_i . a (e_j + grad phi_j))`.
pub fn periodic_matrix(
    op: &DiscreteOperator,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let d = op.dim();
    let mut a = vec![0.0; d * d];
    let mut phis = Vec::with_capacity(d);
    for j in 0..d {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        let phi = solve_periodic_cell(op, &e, cfg)?.solution;
        let mut g = op.gradient(&phi);
        for c in 0..op.ncells() {
            g[c * d + j] += 1.0;
        }
        let flux = op.flux_average(&g);
        for i in 0..d {
            a[i * d + j] = flux[i];
        }
        phis.push(phi);
    }
    Ok((a, phis))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PeriodicEstimate {
    pub spec: FieldSpec,
    pub torus: usize,
    pub k: usize,
    pub samples: usize,
    pub seed: u64,
    pub a: Vec<f64>,
    pub a_stderr: Vec<f64>,
}

/// Mean over samples of the periodic homogenized matrix of the realization
/// wrapped onto a torus of side `l`.
pub fn estimate_ahom_periodic(
    spec: &FieldSpec,
    l: usize,
    k: usize,
    samples: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<PeriodicEstimate> {
    spec.validate()?;
    let grid = Grid::torus(spec.dim, l, k);
    let rows: Vec<Vec<f64>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let s = sample_field(spec, derive_seed(seed, &format!("periodic/{i}")))?;
            let op = assemble(&restrict_to_grid(&s, &grid), &grid, Boundary::Periodic)?;
            Ok(periodic_matrix(&op, cfg)?.0)
        })
        .collect::<Result<_>>()?;
    let (a, se) = entrywise_stats(&rows);
    Ok(PeriodicEstimate {
        spec: spec.clone(),
        torus: l,
        k,
        samples,
        seed,
        a,
        a_stderr: se,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct Bracket {
    pub harmonic: Vec<f64>,
    pub harmonic_stderr: Vec<f64>,
    pub arithmetic: Vec<f64>,
    pub arithmetic_stderr: Vec<f64>,
}

/// Population Voigt–Reiss bracket: harmonic and arithmetic means of the
/// coefficient over unit cells, by Monte Carlo over `samples` level-1 cubes.
pub fn voigt_reiss(spec: &FieldSpec, samples: usize, k: usize, seed: u64) -> Result<Bracket> {
    spec.validate()?;
    if samples < 2 {
        return Err(Error::Input("voigt_reiss needs at least 2 samples".into()));
    }
    let d = spec.dim;
    let grid = Grid::cube(&TriadicCube::new(d, 1), k);
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let s = sample_field(spec, derive_seed(seed, &format!("bracket/{i}")))?;
            let c = restrict_to_grid(&s, &grid);
            let mut inv = vec![0.0; d * d];
            for cell in 0..c.ncells() {
                let m = linalg::inverse(d, c.cell(cell)).expect("elliptic");
                inv.iter_mut()
                    .zip(&m)
                    .for_each(|(a, b)| *a += b / c.ncells() as f64);
            }
            Ok((inv, c.arithmetic_mean()))
        })
        .collect::<Result<_>>()?;
    let (inv_mean, inv_se) = entrywise_stats(&rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>());
    let (arith, arith_se) = entrywise_stats(&rows.iter().map(|r| r.1.clone()).collect::<Vec<_>>());
    let harmonic = linalg::inverse(d, &inv_mean).expect("elliptic");
    // first-order propagation of the error through the inverse: |H dM H|
    let hse: Vec<f64> = (0..d * d)
        .map(|ij| {
            let (i, j) = (ij / d, ij % d);
            let mut s = 0.0;
            for k in 0..d {
                for l in 0..d {
                    s += (harmonic[i * d + k] * harmonic[l * d + j]).powi(2)
                        * inv_se[k * d + l].powi(2);
                }
            }
            s.sqrt()
        })
        .collect();
    Ok(Bracket {
        harmonic,
        harmonic_stderr: hse,
        arithmetic: arith,
        arithmetic_stderr: arith_se,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct BracketCheck {
    /// Smallest eigenvalue of `a - harmonic`.
    pub lower_margin: f64,
    /// Smallest eigenvalue of `arithmetic - a`.
    pub upper_margin: f64,
    /// Pooled standard error used for the tolerance.
    pub sigma: f64,
    pub holds: bool,
}

fn pooled(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x * x + y * y).sqrt())
        .fold(0.0, f64::max)
}

/// `harmonic <= a <= arithmetic` in the matrix order within two pooled
/// standard errors.
pub fn bracket_check(
    a: &[f64],
    a_se: &[f64],
    harmonic: &[f64],
    h_se: &[f64],
    arithmetic: &[f64],
    ar_se: &[f64],
) -> BracketCheck {
    let d = (a.len() as f64).sqrt().round() as usize;
    let lo: Vec<f64> = a.iter().zip(harmonic).map(|(x, y)| x - y).collect();
    let hi: Vec<f64> = arithmetic.iter().zip(a).map(|(x, y)| x - y).collect();
    let lower_margin = linalg::sym_eigenvalues(d, &lo)[0];
    let upper_margin = linalg::sym_eigenvalues(d, &hi)[0];
    let sigma = pooled(a_se, h_se).max(pooled(a_se, ar_se)) * d as f64;
    BracketCheck {
        lower_margin,
        upper_margin,
        sigma,
        holds: lower_margin >= -2.0 * sigma - 1e-12 && upper_margin >= -2.0 * sigma - 1e-12,
    }
}

impl HomogenizedEstimate {
    /// Bracket against the sample cube means.
    pub fn bracket(&self) -> BracketCheck {
        bracket_check(
            &self.a,
            &self.a_stderr,
            &self.harmonic,
            &self.harmonic_stderr,
            &self.arithmetic,
            &self.arithmetic_stderr,
        )
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DynkinReport {
    pub target: f64,
    pub a: Vec<f64>,
    pub a_stderr: Vec<f64>,
    /// Largest entry of `|a - sqrt(alpha beta) I|`.
    pub deviation: f64,
    pub deviation_stderr: f64,
    /// Largest `|a_12| / stderr`.
    pub offdiag_z: f64,
}

/// Distance of the estimate to the geometric mean `sqrt(alpha beta) I` for
/// the two-dimensional two-valued checkerboard.
pub fn dynkin_check(
    alpha: f64,
    beta: f64,
    level: u32,
    k: usize,
    samples: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<DynkinReport> {
    let spec = FieldSpec::checkerboard(2, alpha, beta);
    let est = estimate_ahom(&spec, level, k, samples, seed, cfg)?;
    Ok(dynkin_from_estimate(&est, alpha, beta))
}

pub fn dynkin_from_estimate(est: &HomogenizedEstimate, alpha: f64, beta: f64) -> DynkinReport {
    let target = (alpha * beta).sqrt();
    let t = [target, 0.0, 0.0, target];
    let mut deviation = 0.0f64;
    let mut dev_se = 0.0f64;
    for k in 0..4 {
        let dv = (est.a[k] - t[k]).abs();
        if dv >= deviation {
            deviation = dv;
            dev_se = est.a_stderr[k];
        }
    }
    let offdiag_z = [1usize, 2]
        .iter()
        .map(|&k| {
            if est.a_stderr[k] > 0.0 {
                est.a[k].abs() / est.a_stderr[k]
            } else if est.a[k].abs() < 1e-12 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max);
    DynkinReport {
        target,
        a: est.a.clone(),
        a_stderr: est.a_stderr.clone(),
        deviation,
        deviation_stderr: dev_se,
        offdiag_z,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RateFit {
    pub levels: Vec<u32>,
    pub means: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub variances: Vec<f64>,
    /// Mean at the level above the fitted range, used in place of the limit.
    pub proxy: f64,
    pub gaps: Vec<f64>,
    /// Fitted `alpha` in `gap ~ C 3^{-n alpha}`.
    pub alpha: Option<f64>,
    pub constant: Option<f64>,
    pub gap_fit: Option<SlopeFit>,
    pub degenerate: bool,
    /// The 95% band of the gap slope excludes nonnegative values.
    pub positive_slope_rejected: bool,
    /// Slope of `ln Var` against the level over all computed levels.
    pub variance_fit: Option<SlopeFit>,
}

/// Empirical rate for `|E nu(cube_n, p) - nu_bar(p)|`, with the mean at level
/// `n1 + 1` as proxy for the limit.
pub fn rate_fit(
    spec: &FieldSpec,
    n0: u32,
    n1: u32,
    k: usize,
    samples: usize,
    seed: u64,
    p: &[f64],
    cfg: &SolverConfig,
) -> Result<RateFit> {
    spec.validate()?;
    if n1 < n0 + 2 {
        return Err(Error::Input("rate_fit needs n1 >= n0 + 2".into()));
    }
    if p.len() != spec.dim {
        return Err(Error::Dimension("slope length".into()));
    }
    let levels: Vec<u32> = (n0..=n1 + 1).collect();
    let mut means = Vec::new();
    let mut stderrs = Vec::new();
    let mut variances = Vec::new();
    for &n in &levels {
        let cube = TriadicCube::new(spec.dim, n);
        let vals: Vec<f64> = (0..samples)
            .into_par_iter()
            .map(|i| {
                let s = sample_field(spec, sample_seed(seed, i))?;
                nu(&CubeProblem::new(&s, &cube, k, cfg.clone())?, p)
            })
            .collect::<Result<_>>()?;
        let (m, se) = mean_stderr(&vals);
        means.push(m);
        stderrs.push(se);
        variances.push(variance(&vals));
    }
    let proxy = *means.last().unwrap();
    let gaps: Vec<f64> = means[..means.len() - 1].iter().map(|m| m - proxy).collect();
    let scale = proxy.abs().max(1e-300);
    let degenerate = gaps.iter().any(|g| *g <= 1e-12 * scale);
    let gap_fit = if degenerate {
        None
    } else {
        let x: Vec<f64> = levels[..gaps.len()]
            .iter()
            .map(|&n| n as f64 * 3f64.ln())
            .collect();
        let y: Vec<f64> = gaps.iter().map(|g| g.ln()).collect();
        Some(linear_fit(&x, &y)?)
    };
    let variance_fit = if variances.iter().all(|v| *v > 0.0) && levels.len() >= 3 {
        let x: Vec<f64> = levels.iter().map(|&n| n as f64).collect();
        let y: Vec<f64> = variances.iter().map(|v| v.ln()).collect();
        Some(linear_fit(&x, &y)?)
    } else {
        None
    };
    Ok(RateFit {
        levels,
        means,
        stderrs,
        variances,
        proxy,
        gaps,
        alpha: gap_fit.as_ref().map(|f| -f.slope),
        constant: gap_fit.as_ref().map(|f| f.intercept.exp()),
        positive_slope_rejected: gap_fit.as_ref().is_some_and(|f| f.band.1 < 0.0),
        gap_fit,
        degenerate,
        variance_fit,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct RichardsonReport {
    pub coarse: HomogenizedEstimate,
    pub fine: HomogenizedEstimate,
    /// Largest entry of `|a_{2K} - a_K|`.
    pub gap: f64,
}

/// Estimates at resolutions `k` and `2k` with identical samples.
pub fn richardson(
    spec: &FieldSpec,
    level: u32,
    k: usize,
    samples: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<RichardsonReport> {
    let coarse = estimate_ahom(spec, level, k, samples, seed, cfg)?;
    let fine = estimate_ahom(spec, level, 2 * k, samples, seed, cfg)?;
    let gap = linalg::max_abs_diff(&coarse.a, &fine.a);
    Ok(RichardsonReport { coarse, fine, gap })
}

/// Hex digest identifying an estimate.
pub fn cache_key(spec: &FieldSpec, level: u32, k: usize, samples: usize, seed: u64) -> String {
    let text = format!(
        "{}|n={level}|k={k}|m={samples}|seed={seed}",
        spec.canonical_json()
    );
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn cache_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("ahom-{key}.json"))
}

pub fn load_cached(
    dir: &Path,
    spec: &FieldSpec,
    level: u32,
    k: usize,
    samples: usize,
    seed: u64,
) -> Result<Option<HomogenizedEstimate>> {
    let path = cache_path(dir, &cache_key(spec, level, k, samples, seed));
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&std::fs::read_to_string(path)?)?))
}

/// Estimate from the cache, computing and storing it on a miss.
pub fn estimate_ahom_cached(
    dir: &Path,
    spec: &FieldSpec,
    level: u32,
    k: usize,
    samples: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<HomogenizedEstimate> {
    if let Some(e) = load_cached(dir, spec, level, k, samples, seed)? {
        return Ok(e);
    }
    let est = estimate_ahom(spec, level, k, samples, seed, cfg)?;
    std::fs::create_dir_all(dir)?;
    let path = cache_path(dir, &cache_key(spec, level, k, samples, seed));
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, est.to_json())?;
    std::fs::rename(&tmp, &path)?;
    Ok(est)
}

/// Hex digest identifying a periodic estimate.
pub fn periodic_cache_key(
    spec: &FieldSpec,
    l: usize,
    k: usize,
    samples: usize,
    seed: u64,
) -> String {
    let text = format!(
        "{}|periodic|l={l}|k={k}|m={samples}|seed={seed}",
        spec.canonical_json()
    );
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn load_cached_periodic(
    dir: &Path,
    spec: &FieldSpec,
    l: usize,
    k: usize,
    samples: usize,
    seed: u64,
) -> Result<Option<PeriodicEstimate>> {
    let path = cache_path(dir, &periodic_cache_key(spec, l, k, samples, seed));
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&std::fs::read_to_string(path)?)?))
}

pub fn estimate_ahom_periodic_cached(
    dir: &Path,
    spec: &FieldSpec,
    l: usize,
    k: usize,
    samples: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<PeriodicEstimate> {
    if let Some(e) = load_cached_periodic(dir, spec, l, k, samples, seed)? {
        return Ok(e);
    }
    let est = estimate_ahom_periodic(spec, l, k, samples, seed, cfg)?;
    std::fs::create_dir_all(dir)?;
    let path = cache_path(dir, &periodic_cache_key(spec, l, k, samples, seed));
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(&est)?)?;
    std::fs::rename(&tmp, &path)?;
    Ok(est)
}
