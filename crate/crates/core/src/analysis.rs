//! Statistical and functional-analytic checks: tail certification, the
//! multiscale Poincaré right-hand side, heat-flow negative norms,
//! Gaussianity tests and log-log slope fits.

use crate::error::{Error, Result};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Sample mean and standard error of the mean.
pub fn mean_stderr(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (m, 0.0);
    }
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Least-squares line with a 95% confidence interval for the slope.
#[derive(Clone, Debug, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    pub band: (f64, f64),
    pub r_squared: f64,
    pub points: usize,
}

impl SlopeFit {
    pub fn contains(&self, v: f64) -> bool {
        self.band.0 <= v && v <= self.band.1
    }
}

/// Ordinary least squares of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<SlopeFit> {
    if x.len() != y.len() {
        return Err(Error::Dimension("x and y lengths differ".into()));
    }
    if x.len() < 3 {
        return Err(Error::Input("slope fit needs at least 3 points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::Input("slope fit needs distinct abscissae".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let dof = n - 2.0;
    let se = (sse / dof / sxx).sqrt();
    let t = if dof > 0.0 {
        StudentsT::new(0.0, 1.0, dof)
            .expect("valid dof")
            .inverse_cdf(0.975)
    } else {
        0.0
    };
    Ok(SlopeFit {
        slope,
        intercept,
        slope_stderr: se,
        band: (slope - t * se, slope + t * se),
        r_squared: if syy > 0.0 { 1.0 - sse / syy } else { 1.0 },
        points: x.len(),
    })
}

/// Fit of `log y = slope log x + c`.
pub fn slope_fit(x: &[f64], y: &[f64]) -> Result<SlopeFit> {
    if x.iter().chain(y).any(|&v| v <= 0.0 || !v.is_finite()) {
        return Err(Error::Input("log-log fit needs positive data".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    linear_fit(&lx, &ly)
}

/// Empirical check of `E exp((X_+/theta)^s) <= 2`.
#[derive(Clone, Debug, Serialize)]
pub struct TailCertificate {
    pub s: f64,
    pub theta: f64,
    pub n: usize,
    pub confidence: f64,
    pub mean: f64,
    /// One-sided bootstrap upper confidence bound of the mean.
    pub upper: f64,
    pub pass: bool,
    /// Smallest `theta` whose empirical mean is at most 2.
    pub theta_star: f64,
    /// Smallest `theta` whose upper bound is at most 2.
    pub theta_certified: f64,
}

const BOOTSTRAP_ROUNDS: usize = 1000;

struct Bootstrap {
    counts: Vec<Vec<u16>>,
}

impl Bootstrap {
    fn new(n: usize, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = crate::seed::rng_from(crate::seed::hash_key(
            seed,
            crate::seed::tags::BOOTSTRAP,
            &[n as i64],
        ));
        let counts = (0..BOOTSTRAP_ROUNDS)
            .map(|_| {
                let mut c = vec![0u16; n];
                for _ in 0..n {
                    c[rng.random_range(0..n)] += 1;
                }
                c
            })
            .collect();
        Bootstrap { counts }
    }

    /// 95% one-sided upper quantile of the resampled means of `v`.
    fn upper(&self, v: &[f64]) -> f64 {
        let n = v.len() as f64;
        let mut means: Vec<f64> = self
            .counts
            .iter()
            .map(|c| {
                c.iter()
                    .zip(v)
                    .filter(|(&k, _)| k > 0)
                    .map(|(&k, x)| k as f64 * x)
                    .sum::<f64>()
                    / n
            })
            .collect();
        means.sort_by(f64::total_cmp);
        means[(0.95 * (means.len() - 1) as f64).ceil() as usize]
    }
}

fn tail_values(x: &[f64], s: f64, theta: f64) -> Vec<f64> {
    x.iter()
        .map(|v| (v.max(0.0) / theta).powf(s).exp())
        .collect()
}

/// Smallest `theta` with `g(theta) <= 2` for a nonincreasing `g`.
fn bisect_theta(g: impl Fn(f64) -> f64) -> f64 {
    if g(f64::MIN_POSITIVE) <= 2.0 {
        return 0.0;
    }
    let mut hi = 1.0;
    while g(hi) > 2.0 {
        hi *= 2.0;
        if hi > 1e300 {
            return f64::INFINITY;
        }
    }
    let mut lo = hi / 2.0;
    while g(lo) <= 2.0 && lo > 1e-300 {
        lo /= 2.0;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if g(mid) <= 2.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Tail certification at `(s, theta)`; the bootstrap resamples are shared by
/// every `theta`, so the pass flag is monotone in `theta`.
pub fn os_certify(x: &[f64], s: f64, theta: f64, seed: u64) -> Result<TailCertificate> {
    if x.len() < 32 {
        return Err(Error::Input(format!(
            "tail certification needs at least 32 samples, got {}",
            x.len()
        )));
    }
    if s <= 0.0 || theta <= 0.0 {
        return Err(Error::Input("s and theta must be positive".into()));
    }
    let boot = Bootstrap::new(x.len(), seed);
    let mean_at = |t: f64| tail_values(x, s, t).iter().sum::<f64>() / x.len() as f64;
    let upper_at = |t: f64| boot.upper(&tail_values(x, s, t));
    let mean = mean_at(theta);
    let upper = upper_at(theta);
    Ok(TailCertificate {
        s,
        theta,
        n: x.len(),
        confidence: 0.95,
        mean,
        upper,
        pass: upper <= 2.0,
        theta_star: bisect_theta(mean_at),
        theta_certified: bisect_theta(upper_at),
    })
}

/// A negative-norm estimate with its per-scale contributions.
#[derive(Clone, Debug, Serialize)]
pub struct NormEstimate {
    pub kind: String,
    pub value: f64,
    pub contributions: Vec<f64>,
}

/// Multiscale Poincaré comparison on a triadic cube.
#[derive(Clone, Debug, Serialize)]
pub struct PoincareCheck {
    pub rhs: NormEstimate,
    /// Dual-norm value from the Neumann problem.
    pub direct: f64,
    /// `3^m ||f||_{L^2}`, the plain Poincaré bound.
    pub naive: f64,
    pub constant: f64,
    pub holds: bool,
}

/// Calibrated constant of the multiscale Poincaré comparison.
pub const POINCARE_CONSTANT: f64 = 2.0;

/// `||f||_{L^2} + sum_{n<m} 3^n (|Z_n|^{-1} sum_z |(f)_{z+cube_n}|^2)^{1/2}`
/// (normalized norms) and the dual value `max(3^m |(f)|, ||grad w||)` with
/// `-Lap w = f - (f)` under Neumann conditions.
pub fn multiscale_poincare_rhs(
    cube: &crate::grid::TriadicCube,
    k: usize,
    f: &[f64],
    constant: f64,
) -> Result<PoincareCheck> {
    use crate::field::CellCoefficients;
    use crate::grid::{cube_average, Grid};
    use crate::solver::{assemble, pcg};
    use crate::transform::Boundary;
    let grid = Grid::cube(cube, k);
    if f.len() != grid.ncells() {
        return Err(Error::Dimension(
            "cell function does not match the cube grid".into(),
        ));
    }
    let m = cube.level;
    let l2 = (f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64).sqrt();
    let mut contributions = vec![l2];
    for n in 0..m {
        let subs = cube.subdivide(n)?;
        let ms: f64 = subs
            .iter()
            .map(|c| cube_average(&grid, f, c).map(|a| a * a))
            .sum::<Result<f64>>()?;
        contributions.push(3f64.powi(n as i32) * (ms / subs.len() as f64).sqrt());
    }
    let rhs = contributions.iter().sum::<f64>();
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    let d = grid.dim;
    let op = assemble(
        &CellCoefficients::constant(d, grid.ncells(), &crate::linalg::identity(d)),
        &grid,
        Boundary::Neumann,
    )?;
    let w_c = grid.cell_volume() / (1usize << d) as f64;
    let mut b = vec![0.0; grid.nnodes()];
    for (c, corners) in grid.cell_corners().chunks(1 << d).enumerate() {
        for &v in corners {
            b[v] += w_c * (f[c] - mean);
        }
    }
    let spread = f.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
    let grad = if spread <= 1e-12 * mean.abs() {
        0.0
    } else {
        let pre = op.spectral_preconditioner();
        let out = pcg(|u| op.apply(u), |r| pre.apply(r), &b, 1e-12, 200)?;
        (crate::linalg::dot(&out.x, &op.apply(&out.x)) / grid.volume())
            .max(0.0)
            .sqrt()
    };
    let side = 3f64.powi(m as i32);
    let direct = (side * mean.abs()).max(grad);
    Ok(PoincareCheck {
        rhs: NormEstimate {
            kind: "multiscale_poincare".into(),
            value: rhs,
            contributions,
        },
        direct,
        naive: side * l2,
        constant,
        holds: direct <= constant * rhs * (1.0 + 1e-12) + 1e-300,
    })
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            (x, 2.0 / ((1.0 - x * x) * dp * dp))
        })
        .collect()
}

/// Number of quadrature nodes in `ln t` for the heat-flow norm.
pub const HEATFLOW_NODES: usize = 32;

/// `(int_0^1 t^alpha ||u * Phi(t)||^2 dt/t)^{1/2}` on a torus with normalized
/// `L^2`; Gauss-Legendre in `ln t` on `[1e-3 h^2, 1]` plus the analytic tail
/// `||u||^2 t_min^alpha / alpha` below.
pub fn heatflow_negnorm(grid: &crate::grid::Grid, u: &[f64], alpha: f64) -> Result<NormEstimate> {
    use crate::grid::{fft_nd, increment, wave_numbers};
    use rustfft::num_complex::Complex;
    if alpha <= 0.0 {
        return Err(Error::Input("alpha must be positive".into()));
    }
    if !grid.periodic || u.len() != grid.ncells() {
        return Err(Error::Grid(
            "heat-flow norm needs a cell function on a torus".into(),
        ));
    }
    let dims = grid.n.clone();
    let mut hat: Vec<Complex<f64>> = u.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft_nd(&mut hat, &dims, false);
    let n = u.len() as f64;
    let ks: Vec<Vec<f64>> = dims.iter().map(|&m| wave_numbers(m, grid.h)).collect();
    let mut modes = Vec::with_capacity(u.len());
    let mut idx = vec![0usize; grid.dim];
    for h in &hat {
        let k2: f64 = idx
            .iter()
            .enumerate()
            .map(|(j, &i)| ks[j][i] * ks[j][i])
            .sum();
        let p = h.norm_sqr() / (n * n);
        if p > 0.0 {
            modes.push((k2, p));
        }
        increment(&mut idx, &dims);
    }
    let heat = |t: f64| {
        modes
            .iter()
            .map(|(k2, p)| p * (-2.0 * k2 * t).exp())
            .sum::<f64>()
    };
    let tmin = 1e-3 * grid.h * grid.h;
    let (a, b) = (tmin.ln(), 0.0);
    let mut contributions = Vec::with_capacity(HEATFLOW_NODES + 1);
    contributions.push(heat(0.0) * tmin.powf(alpha) / alpha);
    for (x, w) in gauss_legendre(HEATFLOW_NODES) {
        let s = 0.5 * (b - a) * x + 0.5 * (a + b);
        let t = s.exp();
        contributions.push(0.5 * (b - a) * w * t.powf(alpha) * heat(t));
    }
    Ok(NormEstimate {
        kind: "heatflow".into(),
        value: contributions.iter().sum::<f64>().sqrt(),
        contributions,
    })
}

/// Moment bands and a Kolmogorov-Smirnov distance against the normal law.
#[derive(Clone, Debug, Serialize)]
pub struct GaussianityReport {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub ks: f64,
    pub skew_band: f64,
    pub kurtosis_band: f64,
    pub pass: bool,
}

pub fn gaussianity_test(x: &[f64]) -> Result<GaussianityReport> {
    use statrs::distribution::Normal;
    let n = x.len();
    if n < 256 {
        return Err(Error::Input(format!(
            "gaussianity test needs at least 256 samples, got {n}"
        )));
    }
    let nf = n as f64;
    let mean = x.iter().sum::<f64>() / nf;
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
    if m2 <= 0.0 {
        return Err(Error::Input("samples are constant".into()));
    }
    let m3 = x.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / nf;
    let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / nf;
    let skewness = m3 / m2.powf(1.5);
    let excess_kurtosis = m4 / (m2 * m2) - 3.0;
    let std = m2.sqrt();
    let mut z: Vec<f64> = x.iter().map(|v| (v - mean) / std).collect();
    z.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let normal = Normal::standard();
    let ks = z
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = normal.cdf(v);
            (c - i as f64 / nf)
                .abs()
                .max(((i + 1) as f64 / nf - c).abs())
        })
        .fold(0.0, f64::max);
    let skew_band = 4.0 * (6.0 / nf).sqrt();
    let kurtosis_band = 4.0 * (24.0 / nf).sqrt();
    Ok(GaussianityReport {
        n,
        mean,
        std,
        skewness,
        excess_kurtosis,
        ks,
        skew_band,
        kurtosis_band,
        pass: skewness.abs() <= skew_band && excess_kurtosis.abs() <= kurtosis_band,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Grid, TriadicCube};
    use rand::Rng;
    use rand_distr::{Exp1, StandardNormal};

    fn rng(s: u64) -> rand_chacha::ChaCha8Rng {
        crate::seed::rng_from(s)
    }

    #[test]
    fn exact_power_laws() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-1.5)).collect();
        let f = slope_fit(&x, &y).unwrap();
        assert!((f.slope + 1.5).abs() < 1e-12);
        assert!((f.intercept - 3f64.ln()).abs() < 1e-12);
        let c = slope_fit(&x, &[2.0; 4]).unwrap();
        assert!(c.slope.abs() < 1e-12);
        assert!(slope_fit(&x, &[1.0, 0.0, 1.0, 1.0]).is_err());
        assert!(slope_fit(&x[..2], &y[..2]).is_err());
    }

    #[test]
    fn slope_band_coverage() {
        let mut r = rng(4);
        let x = [1.0, 2.0, 4.0, 8.0, 16.0];
        let hits = (0..100)
            .filter(|_| {
                let y: Vec<f64> = x
                    .iter()
                    .map(|v: &f64| {
                        2.0 * v.powf(-0.5) * (0.1 * r.sample::<f64, _>(StandardNormal)).exp()
                    })
                    .collect();
                slope_fit(&x, &y).unwrap().contains(-0.5)
            })
            .count();
        assert!(hits >= 90, "{hits}");
    }

    #[test]
    fn certify_zero_and_exponential() {
        let z = vec![0.0; 64];
        let c = os_certify(&z, 1.5, 0.3, 1).unwrap();
        assert!(c.pass && c.mean == 1.0 && c.upper == 1.0);
        let mut r = rng(2);
        let x: Vec<f64> = (0..10_000).map(|_| r.sample(Exp1)).collect();
        let c = os_certify(&x, 1.0, 3.0, 1).unwrap();
        assert!(c.pass);
        assert!((c.theta_star - 2.0).abs() < 0.2, "{}", c.theta_star);
        assert!(c.theta_certified >= c.theta_star);
        assert!(os_certify(&x[..31], 1.0, 1.0, 1).is_err());
    }

    #[test]
    fn certify_truncated_normal_at_two() {
        let mut r = rng(3);
        let x: Vec<f64> = (0..10_000).map(|_| r.sample(StandardNormal)).collect();
        let c = os_certify(&x, 2.0, 2.0, 5).unwrap();
        // E exp(X_+^2 / 4) = 1/2 + 1/sqrt(2)
        assert!((c.mean - (0.5 + 0.5f64.sqrt())).abs() < 0.02, "{}", c.mean);
        assert!(c.pass);
    }

    #[test]
    fn certification_is_monotone() {
        let mut r = rng(9);
        let x: Vec<f64> = (0..200)
            .map(|_| r.sample::<f64, _>(StandardNormal) * 1.7)
            .collect();
        let mut prev = false;
        for i in 1..60 {
            let c = os_certify(&x, 1.0, 0.1 * i as f64, 3).unwrap();
            assert!(!prev || c.pass);
            prev = c.pass;
        }
        assert!(prev);
    }

    #[test]
    fn poincare_zero_and_constants() {
        let cube = TriadicCube::new(2, 2);
        let n = Grid::cube(&cube, 1).ncells();
        let z = multiscale_poincare_rhs(&cube, 1, &vec![0.0; n], POINCARE_CONSTANT).unwrap();
        assert_eq!(z.direct, 0.0);
        assert_eq!(z.rhs.value, 0.0);
        let c = multiscale_poincare_rhs(&cube, 1, &vec![-2.0; n], POINCARE_CONSTANT).unwrap();
        assert!((c.direct - 18.0).abs() < 1e-12);
        assert!((c.rhs.value - 2.0 * (1.0 + 1.0 + 3.0)).abs() < 1e-12);
        assert!(c.holds);
    }

    #[test]
    fn poincare_mean_zero_mode() {
        // one Fourier mode on the cube: direct value is ||f|| / k
        let cube = TriadicCube::new(1, 2);
        let k = 40;
        let g = Grid::cube(&cube, k);
        let kk = std::f64::consts::PI / 9.0;
        let f: Vec<f64> = (0..g.ncells())
            .map(|c| (kk * (g.cell_center(c)[0] + 4.5)).cos())
            .collect();
        let p = multiscale_poincare_rhs(&cube, k, &f, POINCARE_CONSTANT).unwrap();
        let expected = (0.5f64).sqrt() / kk;
        assert!(
            (p.direct - expected).abs() < 1e-2 * expected,
            "{} {expected}",
            p.direct
        );
        assert!(p.holds);
    }

    #[test]
    fn heatflow_single_mode() {
        let grid = Grid::torus(2, 4, 8);
        let w = 2.0 * std::f64::consts::PI / 4.0;
        let u: Vec<f64> = (0..grid.ncells())
            .map(|c| (w * grid.cell_center(c)[0]).cos())
            .collect();
        for alpha in [0.5, 1.0, 2.0] {
            let e = heatflow_negnorm(&grid, &u, alpha).unwrap();
            let a = 2.0 * w * w;
            let exact = 0.5 * statrs::function::gamma::gamma_li(alpha, a) / a.powf(alpha);
            assert!(
                (e.value * e.value - exact).abs() < 1e-2 * exact,
                "{alpha} {} {exact}",
                e.value * e.value
            );
        }
        assert_eq!(
            heatflow_negnorm(&grid, &vec![0.0; grid.ncells()], 1.0)
                .unwrap()
                .value,
            0.0
        );
        assert!(heatflow_negnorm(&grid, &u, 0.0).is_err());
    }

    #[test]
    fn heatflow_is_a_norm() {
        let grid = Grid::torus(2, 3, 4);
        let mut r = rng(7);
        for _ in 0..10 {
            let u: Vec<f64> = (0..grid.ncells())
                .map(|_| r.sample(StandardNormal))
                .collect();
            let v: Vec<f64> = (0..grid.ncells())
                .map(|_| r.sample(StandardNormal))
                .collect();
            let s = -2.7;
            let nu = heatflow_negnorm(&grid, &u, 0.8).unwrap().value;
            let nv = heatflow_negnorm(&grid, &v, 0.8).unwrap().value;
            let su: Vec<f64> = u.iter().map(|x| s * x).collect();
            let uv: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + b).collect();
            assert!(
                (heatflow_negnorm(&grid, &su, 0.8).unwrap().value - s.abs() * nu).abs() < 1e-8 * nu
            );
            assert!(heatflow_negnorm(&grid, &uv, 0.8).unwrap().value <= nu + nv + 1e-8);
        }
    }

    #[test]
    fn gaussianity_bands() {
        let mut r = rng(11);
        let x: Vec<f64> = (0..1000).map(|_| r.sample(StandardNormal)).collect();
        let g = gaussianity_test(&x).unwrap();
        assert!(g.pass && g.ks < 0.06);
        let e: Vec<f64> = (0..256).map(|_| r.sample(Exp1)).collect();
        let g = gaussianity_test(&e).unwrap();
        assert!(!g.pass && g.skewness > g.skew_band);
        assert!(gaussianity_test(&x[..255]).is_err());
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let q = gauss_legendre(HEATFLOW_NODES);
        let s: f64 = q.iter().map(|(x, w)| w * x.powi(10)).sum();
        assert!((s - 2.0 / 11.0).abs() < 1e-13);
        assert!((q.iter().map(|p| p.1).sum::<f64>() - 2.0).abs() < 1e-13);
    }

    /// Cell white noise on a fine torus and its block averages one level up.
    fn noise_pair(l: usize, k: usize, seed: u64) -> (Grid, Vec<f64>, Grid, Vec<f64>) {
        let fine = Grid::torus(3, l, 2 * k);
        let coarse = Grid::torus(3, l, k);
        let mut r = rng(seed);
        let scale = fine.cell_volume().powf(-0.5);
        let u: Vec<f64> = (0..fine.ncells())
            .map(|_| scale * r.sample::<f64, _>(StandardNormal))
            .collect();
        let mut v = vec![0.0; coarse.ncells()];
        for (c, x) in u.iter().enumerate() {
            let m: Vec<usize> = crate::grid::unravel(c, &fine.n)
                .iter()
                .map(|i| i / 2)
                .collect();
            v[crate::grid::ravel(&m, &coarse.n)] += x / 8.0;
        }
        (fine, u, coarse, v)
    }

    #[test]
    fn white_noise_refinement_dichotomy() {
        // d = 3: below d/2 the norm grows by about 2^{d/2 - alpha} per refinement
        let d = 3.0;
        let (mut lo, mut hi) = ((0.0, 0.0), (0.0, 0.0));
        for s in 0..4 {
            let (fg, u, cg, v) = noise_pair(4, 4, 100 + s);
            let a = 0.75 * d / 2.0;
            let b = 1.25 * d / 2.0;
            lo.0 += heatflow_negnorm(&cg, &v, a).unwrap().value.powi(2);
            lo.1 += heatflow_negnorm(&fg, &u, a).unwrap().value.powi(2);
            hi.0 += heatflow_negnorm(&cg, &v, b).unwrap().value.powi(2);
            hi.1 += heatflow_negnorm(&fg, &u, b).unwrap().value.powi(2);
        }
        let grow = (lo.1 / lo.0).sqrt();
        let change = ((hi.1 / hi.0).sqrt() - 1.0).abs();
        assert!(grow >= 1.2, "{grow}");
        assert!(change <= 0.1, "{change}");
    }
}
