//! Stationary random coefficient fields with unit range of dependence.
//!
//! Every law is evaluated pointwise from counter-based randomness keyed by
//! integer cell coordinates, so a sample is a pure function of `(seed, x)`.
//! Unit cells are the cubes `z + [-1/2, 1/2)^d`, `z` in `Z^d`, matching the
//! triadic cubes centered at the origin.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::linalg;
use crate::seed::{self, tags};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// A matrix given either as a multiple of the identity or in full.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixValue {
    Scalar(f64),
    Full(Vec<Vec<f64>>),
}

impl MatrixValue {
    pub fn to_flat(&self, d: usize) -> Result<Vec<f64>> {
        match self {
            MatrixValue::Scalar(c) => {
                let mut m = linalg::identity(d);
                m.iter_mut().for_each(|x| *x *= c);
                Ok(m)
            }
            MatrixValue::Full(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::Dimension(format!("expected a {d}x{d} matrix")));
                }
                Ok(rows.iter().flatten().copied().collect())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RadiusLaw {
    Fixed { r: f64 },
    Uniform { min: f64, max: f64 },
}

/// Pointwise map from the convolved noise into the elliptic set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseMap {
    /// `a = (1 + (lambda - 1) * sigmoid(gain * X)) I`.
    Sigmoid { gain: f64 },
}

impl Default for NoiseMap {
    fn default() -> Self {
        NoiseMap::Sigmoid { gain: 1.0 }
    }
}

fn default_noise_resolution() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Law {
    Constant {
        matrix: MatrixValue,
    },
    Checkerboard {
        values: Vec<MatrixValue>,
        probs: Vec<f64>,
    },
    PoissonInclusions {
        intensity: f64,
        radius: RadiusLaw,
        inside: MatrixValue,
        outside: MatrixValue,
    },
    MollifiedWhiteNoise {
        radius: f64,
        #[serde(default = "default_noise_resolution")]
        resolution: usize,
        #[serde(default)]
        map: NoiseMap,
    },
    Layered1d {
        values: Vec<MatrixValue>,
        probs: Vec<f64>,
    },
}

impl Law {
    pub fn name(&self) -> &'static str {
        match self {
            Law::Constant { .. } => "constant",
            Law::Checkerboard { .. } => "checkerboard",
            Law::PoissonInclusions { .. } => "poisson_inclusions",
            Law::MollifiedWhiteNoise { .. } => "mollified_white_noise",
            Law::Layered1d { .. } => "layered1d",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub dim: usize,
    pub lambda: f64,
    pub law: Law,
}

const SYM_TOL: f64 = 1e-12;

fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidSpec {
        field: field.to_string(),
        reason: reason.into(),
    }
}

impl FieldSpec {
    pub fn constant(dim: usize, lambda: f64, c: f64) -> Self {
        FieldSpec {
            dim,
            lambda,
            law: Law::Constant {
                matrix: MatrixValue::Scalar(c),
            },
        }
    }

    /// Two-valued scalar checkerboard with equal probabilities.
    pub fn checkerboard(dim: usize, alpha: f64, beta: f64) -> Self {
        FieldSpec {
            dim,
            lambda: alpha.max(beta),
            law: Law::Checkerboard {
                values: vec![MatrixValue::Scalar(alpha), MatrixValue::Scalar(beta)],
                probs: vec![0.5, 0.5],
            },
        }
    }

    pub fn layered(alpha: f64, beta: f64) -> Self {
        FieldSpec {
            dim: 1,
            lambda: alpha.max(beta),
            law: Law::Layered1d {
                values: vec![MatrixValue::Scalar(alpha), MatrixValue::Scalar(beta)],
                probs: vec![0.5, 0.5],
            },
        }
    }

    fn check_matrix(&self, name: &str, m: &MatrixValue) -> Result<Vec<f64>> {
        let d = self.dim;
        let flat = m
            .to_flat(d)
            .map_err(|_| invalid(name, format!("must be a scalar or a {d}x{d} matrix")))?;
        for i in 0..d {
            for j in 0..i {
                if (flat[i * d + j] - flat[j * d + i]).abs() > SYM_TOL {
                    return Err(invalid(name, "matrix is not symmetric"));
                }
            }
        }
        let ev = linalg::sym_eigenvalues(d, &flat);
        if ev[0] < 1.0 - SYM_TOL || ev[d - 1] > self.lambda + SYM_TOL {
            return Err(invalid(
                name,
                format!(
                    "eigenvalues [{:.6}, {:.6}] outside [1, {}]",
                    ev[0],
                    ev[d - 1],
                    self.lambda
                ),
            ));
        }
        Ok(flat)
    }

    fn check_probs(&self, values: &[MatrixValue], probs: &[f64]) -> Result<Vec<Vec<f64>>> {
        if values.is_empty() {
            return Err(invalid("law.values", "empty value list"));
        }
        if values.len() != probs.len() {
            return Err(invalid("law.probs", "length differs from law.values"));
        }
        if probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(invalid("law.probs", "negative probability"));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(invalid(
                "law.probs",
                format!("probabilities sum to {s}, not 1"),
            ));
        }
        values
            .iter()
            .enumerate()
            .map(|(i, v)| self.check_matrix(&format!("law.values[{i}]"), v))
            .collect()
    }

    /// Checks every invariant of the spec.
    pub fn validate(&self) -> Result<()> {
        self.resolve().map(|_| ())
    }

    fn resolve(&self) -> Result<Resolved> {
        if !(1..=3).contains(&self.dim) {
            return Err(invalid("dim", "must be 1, 2 or 3"));
        }
        if !(self.lambda >= 1.0) || !self.lambda.is_finite() {
            return Err(invalid("lambda", "must be a finite number >= 1"));
        }
        let d = self.dim;
        Ok(match &self.law {
            Law::Constant { matrix } => {
                Resolved::Constant(self.check_matrix("law.matrix", matrix)?)
            }
            Law::Checkerboard { values, probs } => Resolved::Discrete {
                values: self.check_probs(values, probs)?,
                cum: cumulative(probs),
                tag: tags::CHECKERBOARD,
            },
            Law::Layered1d { values, probs } => {
                if d != 1 {
                    return Err(invalid("law", "layered1d requires dim = 1"));
                }
                Resolved::Discrete {
                    values: self.check_probs(values, probs)?,
                    cum: cumulative(probs),
                    tag: tags::LAYERED,
                }
            }
            Law::PoissonInclusions {
                intensity,
                radius,
                inside,
                outside,
            } => {
                if !(*intensity > 0.0) || !intensity.is_finite() {
                    return Err(invalid("law.intensity", "must be positive"));
                }
                match radius {
                    RadiusLaw::Fixed { r } => {
                        if !(0.0..=0.5).contains(r) {
                            return Err(invalid("law.radius.r", "must lie in [0, 1/2]"));
                        }
                    }
                    RadiusLaw::Uniform { min, max } => {
                        if !(0.0..=0.5).contains(min) || !(0.0..=0.5).contains(max) || min > max {
                            return Err(invalid("law.radius", "need 0 <= min <= max <= 1/2"));
                        }
                    }
                }
                Resolved::Poisson {
                    intensity: *intensity,
                    radius: radius.clone(),
                    inside: self.check_matrix("law.inside", inside)?,
                    outside: self.check_matrix("law.outside", outside)?,
                }
            }
            Law::MollifiedWhiteNoise {
                radius,
                resolution,
                map,
            } => {
                if !(*radius > 0.0 && *radius <= 0.5) {
                    return Err(invalid("law.radius", "must lie in (0, 1/2]"));
                }
                if *resolution == 0 {
                    return Err(invalid("law.resolution", "must be positive"));
                }
                let NoiseMap::Sigmoid { gain } = map;
                if !(*gain > 0.0) || !gain.is_finite() {
                    return Err(invalid("law.map.gain", "must be positive"));
                }
                Resolved::Noise {
                    radius: *radius,
                    resolution: *resolution,
                    gain: *gain,
                }
            }
        })
    }

    /// Stable textual form used for hashing and provenance.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }
}

fn cumulative(probs: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    probs
        .iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect()
}

#[derive(Clone, Debug)]
enum Resolved {
    Constant(Vec<f64>),
    Discrete {
        values: Vec<Vec<f64>>,
        cum: Vec<f64>,
        tag: u64,
    },
    Poisson {
        intensity: f64,
        radius: RadiusLaw,
        inside: Vec<f64>,
        outside: Vec<f64>,
    },
    Noise {
        radius: f64,
        resolution: usize,
        gain: f64,
    },
}

/// One inclusion of the Poisson law.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Inclusion {
    pub center: Vec<f64>,
    pub radius: f64,
}

/// A realized coefficient field.
#[derive(Clone, Debug)]
pub struct CoefficientSample {
    pub spec: FieldSpec,
    pub seed: u64,
    resolved: Resolved,
}

pub fn sample_field(spec: &FieldSpec, seed: u64) -> Result<CoefficientSample> {
    let resolved = spec.resolve()?;
    Ok(CoefficientSample {
        spec: spec.clone(),
        seed,
        resolved,
    })
}

/// Unit cell containing `x`.
pub fn unit_cell(x: &[f64]) -> Vec<i64> {
    x.iter().map(|v| (v + 0.5).floor() as i64).collect()
}

fn bump(s2: f64) -> f64 {
    if s2 < 1.0 {
        (-1.0 / (1.0 - s2)).exp()
    } else {
        0.0
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl CoefficientSample {
    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    /// Inclusions attached to unit cell `z` (empty for other laws).
    pub fn poisson_points(&self, z: &[i64]) -> Vec<Inclusion> {
        let Resolved::Poisson {
            intensity, radius, ..
        } = &self.resolved
        else {
            return Vec::new();
        };
        let mut rng = seed::rng_from(seed::hash_key(self.seed, tags::POISSON, z));
        let u: f64 = rng.random();
        let mut k = 0usize;
        let mut p = (-intensity).exp();
        let mut cdf = p;
        while u > cdf && k < 10_000 {
            k += 1;
            p *= intensity / k as f64;
            cdf += p;
        }
        (0..k)
            .map(|_| {
                let center: Vec<f64> = z
                    .iter()
                    .map(|&zi| zi as f64 + rng.random::<f64>() - 0.5)
                    .collect();
                let r = match radius {
                    RadiusLaw::Fixed { r } => *r,
                    RadiusLaw::Uniform { min, max } => min + (max - min) * rng.random::<f64>(),
                };
                Inclusion { center, radius: r }
            })
            .collect()
    }

    fn noise_value(
        &self,
        x: &[f64],
        radius: f64,
        res: usize,
        lattice: Option<&NoiseLattice>,
    ) -> f64 {
        let d = x.len();
        let resf = res as f64;
        let lo: Vec<i64> = x
            .iter()
            .map(|v| ((v - radius) * resf - 0.5).floor() as i64)
            .collect();
        let hi: Vec<i64> = x
            .iter()
            .map(|v| ((v + radius) * resf - 0.5).ceil() as i64)
            .collect();
        let mut idx = lo.clone();
        let (mut num, mut den) = (0.0, 0.0);
        loop {
            let mut s2 = 0.0;
            for j in 0..d {
                let y = (idx[j] as f64 + 0.5) / resf;
                s2 += (x[j] - y).powi(2);
            }
            let w = bump(s2 / (radius * radius));
            if w > 0.0 {
                let xi = match lattice {
                    Some(l) => l.get(&idx),
                    None => seed::hashed_normal(self.seed, tags::NOISE_FIELD, &idx),
                };
                num += w * xi;
                den += w * w;
            }
            let mut j = d;
            loop {
                if j == 0 {
                    return if den > 0.0 { num / den.sqrt() } else { 0.0 };
                }
                j -= 1;
                idx[j] += 1;
                if idx[j] <= hi[j] {
                    break;
                }
                idx[j] = lo[j];
            }
        }
    }

    fn eval_with(&self, x: &[f64], out: &mut [f64], lattice: Option<&NoiseLattice>) {
        let d = self.dim();
        match &self.resolved {
            Resolved::Constant(m) => out.copy_from_slice(m),
            Resolved::Discrete { values, cum, tag } => {
                let z = unit_cell(x);
                let u = seed::unit_uniform(seed::hash_key(self.seed, *tag, &z));
                let i = cum.iter().position(|&c| u < c).unwrap_or(values.len() - 1);
                out.copy_from_slice(&values[i]);
            }
            Resolved::Poisson {
                inside, outside, ..
            } => {
                let z = unit_cell(x);
                let mut off = vec![-1i64; d];
                let mut hit = false;
                'outer: loop {
                    let zz: Vec<i64> = z.iter().zip(&off).map(|(a, b)| a + b).collect();
                    for inc in self.poisson_points(&zz) {
                        let dist2: f64 =
                            inc.center.iter().zip(x).map(|(c, v)| (c - v).powi(2)).sum();
                        if dist2 < inc.radius * inc.radius {
                            hit = true;
                            break 'outer;
                        }
                    }
                    let mut j = d;
                    loop {
                        if j == 0 {
                            break 'outer;
                        }
                        j -= 1;
                        off[j] += 1;
                        if off[j] <= 1 {
                            break;
                        }
                        off[j] = -1;
                    }
                }
                out.copy_from_slice(if hit { inside } else { outside });
            }
            Resolved::Noise {
                radius,
                resolution,
                gain,
            } => {
                let v = self.noise_value(x, *radius, *resolution, lattice);
                let s = 1.0 + (self.spec.lambda - 1.0) * sigmoid(gain * v);
                out.iter_mut().for_each(|o| *o = 0.0);
                for i in 0..d {
                    out[i * d + i] = s;
                }
            }
        }
    }

    /// Row-major `d x d` coefficient matrix at `x`.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d * d];
        self.eval_with(x, &mut out, None);
        out
    }
}

/// Pre-drawn normals on the noise lattice over a bounding box.
struct NoiseLattice {
    lo: Vec<i64>,
    len: Vec<usize>,
    values: Vec<f64>,
}

impl NoiseLattice {
    fn new(seed_: u64, lo: Vec<i64>, hi: Vec<i64>) -> Self {
        let len: Vec<usize> = lo
            .iter()
            .zip(&hi)
            .map(|(a, b)| (b - a + 1) as usize)
            .collect();
        let total: usize = len.iter().product();
        let d = lo.len();
        let mut values = Vec::with_capacity(total);
        let mut idx = lo.clone();
        for _ in 0..total {
            values.push(seed::hashed_normal(seed_, tags::NOISE_FIELD, &idx));
            for j in (0..d).rev() {
                idx[j] += 1;
                if idx[j] <= hi[j] {
                    break;
                }
                idx[j] = lo[j];
            }
        }
        NoiseLattice { lo, len, values }
    }

    fn get(&self, idx: &[i64]) -> f64 {
        let mut flat = 0usize;
        for j in 0..idx.len() {
            flat = flat * self.len[j] + (idx[j] - self.lo[j]) as usize;
        }
        self.values[flat]
    }
}

/// Cell-wise coefficient matrices on a grid, `d*d` entries per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellCoefficients {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl CellCoefficients {
    pub fn ncells(&self) -> usize {
        self.data.len() / (self.dim * self.dim)
    }

    pub fn cell(&self, c: usize) -> &[f64] {
        let dd = self.dim * self.dim;
        &self.data[c * dd..(c + 1) * dd]
    }

    pub fn constant(dim: usize, ncells: usize, m: &[f64]) -> Self {
        let mut data = Vec::with_capacity(ncells * dim * dim);
        for _ in 0..ncells {
            data.extend_from_slice(m);
        }
        CellCoefficients { dim, data }
    }

    pub fn from_scalars(dim: usize, s: &[f64]) -> Self {
        let id = linalg::identity(dim);
        let mut data = Vec::with_capacity(s.len() * dim * dim);
        for &v in s {
            data.extend(id.iter().map(|x| x * v));
        }
        CellCoefficients { dim, data }
    }

    /// Entry `(i, j)` of every cell.
    pub fn component(&self, i: usize, j: usize) -> Vec<f64> {
        (0..self.ncells())
            .map(|c| self.cell(c)[i * self.dim + j])
            .collect()
    }

    /// Cell average of the matrices (arithmetic mean).
    pub fn arithmetic_mean(&self) -> Vec<f64> {
        let dd = self.dim * self.dim;
        let mut m = vec![0.0; dd];
        for c in 0..self.ncells() {
            for (k, v) in self.cell(c).iter().enumerate() {
                m[k] += v;
            }
        }
        let n = self.ncells() as f64;
        m.iter_mut().for_each(|x| *x /= n);
        m
    }

    /// Inverse of the cell average of the inverses (harmonic mean).
    pub fn harmonic_mean(&self) -> Vec<f64> {
        let dd = self.dim * self.dim;
        let mut m = vec![0.0; dd];
        for c in 0..self.ncells() {
            let inv = linalg::inverse(self.dim, self.cell(c)).expect("elliptic");
            for k in 0..dd {
                m[k] += inv[k];
            }
        }
        let n = self.ncells() as f64;
        m.iter_mut().for_each(|x| *x /= n);
        linalg::inverse(self.dim, &m).expect("elliptic")
    }
}

/// Samples the field at every cell center of `grid`.
pub fn restrict_to_grid(field: &CoefficientSample, grid: &Grid) -> CellCoefficients {
    use rayon::prelude::*;
    let d = field.dim();
    assert_eq!(d, grid.dim, "field and grid dimensions differ");
    let dd = d * d;
    let lattice = match &field.resolved {
        Resolved::Noise {
            radius, resolution, ..
        } => {
            let r = *resolution as f64;
            let lo: Vec<i64> = (0..d)
                .map(|j| ((grid.origin[j] - radius) * r - 1.5).floor() as i64)
                .collect();
            let hi: Vec<i64> = (0..d)
                .map(|j| {
                    ((grid.origin[j] + grid.n[j] as f64 * grid.h + radius) * r + 0.5).ceil() as i64
                })
                .collect();
            Some(NoiseLattice::new(field.seed, lo, hi))
        }
        _ => None,
    };
    let mut data = vec![0.0; grid.ncells() * dd];
    data.par_chunks_mut(dd).enumerate().for_each(|(c, out)| {
        let x = grid.cell_center(c);
        field.eval_with(&x, out, lattice.as_ref());
    });
    CellCoefficients { dim: d, data }
}

#[derive(Clone, Debug, Serialize)]
pub struct DependenceRow {
    pub distance: f64,
    pub correlation: Option<f64>,
    pub band: f64,
    pub degenerate: bool,
}

/// Empirical correlation of `a_11` between two points at distance `r`
/// along `e_1`, over independent samples.
pub fn dependence_diagnostic(
    spec: &FieldSpec,
    seed_: u64,
    n_samples: usize,
) -> Result<Vec<DependenceRow>> {
    if n_samples < 2 {
        return Err(Error::Input(
            "dependence diagnostic needs at least 2 samples".into(),
        ));
    }
    let d = spec.dim;
    let base: Vec<f64> = [0.1, 0.2, 0.3][..d].to_vec();
    let distances = [0.25, 0.5, 1.0, 1.5, 2.0, 3.0];
    let samples: Vec<CoefficientSample> = (0..n_samples)
        .map(|i| sample_field(spec, seed::derive_seed(seed_, &format!("dependence/{i}"))))
        .collect::<Result<_>>()?;
    let band = 3.0 / (n_samples as f64).sqrt();
    Ok(distances
        .iter()
        .map(|&r| {
            let mut y = base.clone();
            y[0] += r;
            let a: Vec<f64> = samples.iter().map(|s| s.eval(&base)[0]).collect();
            let b: Vec<f64> = samples.iter().map(|s| s.eval(&y)[0]).collect();
            let corr = pearson(&a, &b);
            DependenceRow {
                distance: r,
                correlation: corr,
                band,
                degenerate: corr.is_none(),
            }
        })
        .collect())
}

pub(crate) fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa <= 1e-300 || sbb <= 1e-300 {
        None
    } else {
        Some(sab / (saa * sbb).sqrt())
    }
}
