//! Triadic cubes, uniform grids, heat-kernel masks and mollifiers.
//!
//! Arrays are row-major with the last axis fastest. A non-periodic grid with
//! `n` cells per side carries `n + 1` nodes per side; a periodic one carries
//! `n`. Continuum integrals are midpoint sums over cells.

use crate::error::{Error, Result};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// The cube `z + (-3^m/2, 3^m/2)^d`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriadicCube {
    pub level: u32,
    pub center: Vec<i64>,
}

impl TriadicCube {
    /// Cube of level `m` centered at the origin.
    pub fn new(dim: usize, level: u32) -> Self {
        TriadicCube {
            level,
            center: vec![0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn side(&self) -> i64 {
        3i64.pow(self.level)
    }

    pub fn volume(&self) -> f64 {
        (self.side() as f64).powi(self.dim() as i32)
    }

    pub fn lower(&self) -> Vec<f64> {
        let s = self.side() as f64;
        self.center.iter().map(|&z| z as f64 - s / 2.0).collect()
    }

    /// The `3^{d(m-n)}` level-`n` subcubes.
    pub fn subdivide(&self, n: u32) -> Result<Vec<TriadicCube>> {
        if n > self.level {
            return Err(Error::Grid(format!(
                "cannot subdivide a level-{} cube into level-{n} cubes",
                self.level
            )));
        }
        let d = self.dim();
        let per = 3i64.pow(self.level - n);
        let step = 3i64.pow(n);
        let mut out = Vec::with_capacity((per as usize).pow(d as u32));
        let mut idx = vec![0i64; d];
        loop {
            let center = (0..d)
                .map(|j| self.center[j] + step * (idx[j] - (per - 1) / 2))
                .collect();
            out.push(TriadicCube { level: n, center });
            let mut j = d;
            loop {
                if j == 0 {
                    return Ok(out);
                }
                j -= 1;
                idx[j] += 1;
                if idx[j] < per {
                    break;
                }
                idx[j] = 0;
            }
        }
    }
}

/// Value location on a grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Cell,
    Node,
}

/// Uniform grid on a box or torus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dim: usize,
    /// Cells per side.
    pub n: Vec<usize>,
    pub h: f64,
    /// Lower corner of the box.
    pub origin: Vec<f64>,
    pub periodic: bool,
}

impl Grid {
    pub fn new(origin: Vec<f64>, n: Vec<usize>, h: f64, periodic: bool) -> Self {
        assert_eq!(origin.len(), n.len());
        Grid {
            dim: n.len(),
            n,
            h,
            origin,
            periodic,
        }
    }

    /// Grid with `k` cells per unit length covering a triadic cube.
    pub fn cube(cube: &TriadicCube, k: usize) -> Self {
        let side = cube.side() as usize;
        Grid::new(
            cube.lower(),
            vec![side * k; cube.dim()],
            1.0 / k as f64,
            false,
        )
    }

    /// Torus of side `l` (integer) with `k` cells per unit, placed so that unit
    /// cells `z + [-1/2, 1/2)^d` are not cut.
    pub fn torus(dim: usize, l: usize, k: usize) -> Self {
        let o = -((l / 2) as f64) - 0.5;
        Grid::new(vec![o; dim], vec![l * k; dim], 1.0 / k as f64, true)
    }

    pub fn ncells(&self) -> usize {
        self.n.iter().product()
    }

    pub fn node_dims(&self) -> Vec<usize> {
        if self.periodic {
            self.n.clone()
        } else {
            self.n.iter().map(|v| v + 1).collect()
        }
    }

    pub fn nnodes(&self) -> usize {
        self.node_dims().iter().product()
    }

    pub fn dims(&self, loc: Location) -> Vec<usize> {
        match loc {
            Location::Cell => self.n.clone(),
            Location::Node => self.node_dims(),
        }
    }

    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    pub fn volume(&self) -> f64 {
        self.cell_volume() * self.ncells() as f64
    }

    pub fn side_lengths(&self) -> Vec<f64> {
        self.n.iter().map(|&v| v as f64 * self.h).collect()
    }

    pub fn cell_center(&self, c: usize) -> Vec<f64> {
        let m = unravel(c, &self.n);
        (0..self.dim)
            .map(|j| self.origin[j] + (m[j] as f64 + 0.5) * self.h)
            .collect()
    }

    pub fn node_position(&self, v: usize) -> Vec<f64> {
        let m = unravel(v, &self.node_dims());
        (0..self.dim)
            .map(|j| self.origin[j] + m[j] as f64 * self.h)
            .collect()
    }

    pub fn position(&self, loc: Location, i: usize) -> Vec<f64> {
        match loc {
            Location::Cell => self.cell_center(i),
            Location::Node => self.node_position(i),
        }
    }

    /// Nodes on the boundary of the box (none on a torus).
    pub fn boundary_mask(&self) -> Vec<bool> {
        let nd = self.node_dims();
        (0..self.nnodes())
            .map(|v| {
                !self.periodic
                    && unravel(v, &nd)
                        .iter()
                        .zip(&self.n)
                        .any(|(&i, &n)| i == 0 || i == n)
            })
            .collect()
    }

    /// Node indices of the `2^d` corners of every cell, corner `b` at bit
    /// pattern `b` (bit `j` set means the upper node along axis `j`).
    pub fn cell_corners(&self) -> Vec<usize> {
        let d = self.dim;
        let nc = 1usize << d;
        let nd = self.node_dims();
        let mut out = vec![0usize; self.ncells() * nc];
        let mut m = vec![0usize; d];
        for c in 0..self.ncells() {
            for b in 0..nc {
                let mut v = 0usize;
                for j in 0..d {
                    let mut i = m[j] + ((b >> (d - 1 - j)) & 1);
                    if self.periodic && i == self.n[j] {
                        i = 0;
                    }
                    v = v * nd[j] + i;
                }
                out[c * nc + b] = v;
            }
            increment(&mut m, &self.n);
        }
        out
    }

    /// Cell index range `[lo, hi)` per axis covering an axis-aligned box.
    pub fn cell_range(&self, lower: &[f64], side: f64) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut lo = vec![0; self.dim];
        let mut hi = vec![0; self.dim];
        for j in 0..self.dim {
            let a = (lower[j] - self.origin[j]) / self.h;
            let b = (lower[j] + side - self.origin[j]) / self.h;
            if (a - a.round()).abs() > 1e-9 || (b - b.round()).abs() > 1e-9 {
                return Err(Error::Grid("box is not aligned with grid cells".into()));
            }
            let (a, b) = (a.round() as i64, b.round() as i64);
            if a < 0 || b > self.n[j] as i64 || a >= b {
                return Err(Error::Grid("box is not inside the grid".into()));
            }
            lo[j] = a as usize;
            hi[j] = b as usize;
        }
        Ok((lo, hi))
    }
}

pub fn unravel(mut i: usize, dims: &[usize]) -> Vec<usize> {
    let mut m = vec![0; dims.len()];
    for j in (0..dims.len()).rev() {
        m[j] = i % dims[j];
        i /= dims[j];
    }
    m
}

pub fn ravel(m: &[usize], dims: &[usize]) -> usize {
    m.iter().zip(dims).fold(0, |acc, (&i, &n)| acc * n + i)
}

/// Row-major increment of a multi-index; returns false after wrapping around.
pub fn increment(m: &mut [usize], dims: &[usize]) -> bool {
    for j in (0..dims.len()).rev() {
        m[j] += 1;
        if m[j] < dims[j] {
            return true;
        }
        m[j] = 0;
    }
    false
}

/// Cell-weighted mean of a cell function over an aligned box.
pub fn box_average(grid: &Grid, f: &[f64], lower: &[f64], side: f64) -> Result<f64> {
    if f.len() != grid.ncells() {
        return Err(Error::Dimension("cell function length".into()));
    }
    let (lo, hi) = grid.cell_range(lower, side)?;
    let ext: Vec<usize> = lo.iter().zip(&hi).map(|(a, b)| b - a).collect();
    let count: usize = ext.iter().product();
    let mut m = vec![0usize; grid.dim];
    let mut sum = 0.0;
    let mut full = vec![0usize; grid.dim];
    for _ in 0..count {
        for j in 0..grid.dim {
            full[j] = lo[j] + m[j];
        }
        sum += f[ravel(&full, &grid.n)];
        increment(&mut m, &ext);
    }
    Ok(sum / count as f64)
}

/// Average `(f)_cube` of a cell function.
pub fn cube_average(grid: &Grid, f: &[f64], cube: &TriadicCube) -> Result<f64> {
    box_average(grid, f, &cube.lower(), cube.side() as f64)
}

/// Component-wise cube average of a vector field.
pub fn cube_average_vector(grid: &Grid, f: &[Vec<f64>], cube: &TriadicCube) -> Result<Vec<f64>> {
    f.iter().map(|c| cube_average(grid, c, cube)).collect()
}

/// `Phi(t, x) = (4 pi t)^{-d/2} exp(-|x|^2 / (4t))`.
pub fn heat_kernel(t: f64, x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let r2: f64 = x.iter().map(|v| v * v).sum();
    (4.0 * std::f64::consts::PI * t).powf(-d / 2.0) * (-r2 / (4.0 * t)).exp()
}

/// Angular wave numbers of a periodic axis with `n` points and spacing `h`.
pub fn wave_numbers(n: usize, h: f64) -> Vec<f64> {
    let l = n as f64 * h;
    (0..n)
        .map(|m| {
            let mm = if m <= n / 2 {
                m as f64
            } else {
                m as f64 - n as f64
            };
            2.0 * std::f64::consts::PI * mm / l
        })
        .collect()
}

/// In-place multidimensional FFT of a complex array.
pub fn fft_nd(data: &mut [Complex<f64>], dims: &[usize], inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let total: usize = dims.iter().product();
    let d = dims.len();
    for axis in 0..d {
        let n = dims[axis];
        if n == 1 {
            continue;
        }
        let fft = if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        };
        let stride: usize = dims[axis + 1..].iter().product();
        let outer = total / (n * stride);
        let mut line = vec![Complex::new(0.0, 0.0); n];
        let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        for o in 0..outer {
            for s in 0..stride {
                let base = o * n * stride + s;
                for k in 0..n {
                    line[k] = data[base + k * stride];
                }
                fft.process_with_scratch(&mut line, &mut scratch);
                for k in 0..n {
                    data[base + k * stride] = line[k];
                }
            }
        }
    }
    if inverse {
        let s = 1.0 / total as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }
}

/// Applies a real Fourier multiplier `m(k)` on a periodic array.
pub fn fourier_multiplier(
    f: &[f64],
    dims: &[usize],
    h: f64,
    m: impl Fn(&[f64]) -> f64,
) -> Vec<f64> {
    let mut data: Vec<Complex<f64>> = f.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft_nd(&mut data, dims, false);
    let ks: Vec<Vec<f64>> = dims.iter().map(|&n| wave_numbers(n, h)).collect();
    let mut idx = vec![0usize; dims.len()];
    let mut k = vec![0.0; dims.len()];
    for v in data.iter_mut() {
        for j in 0..dims.len() {
            k[j] = ks[j][idx[j]];
        }
        *v *= m(&k);
        increment(&mut idx, dims);
    }
    fft_nd(&mut data, dims, true);
    data.iter().map(|c| c.re).collect()
}

/// Convolution with `Phi(r^2, .)`: spectral on a torus, separable truncated
/// sums (cutoff `6r`, renormalized) on a box.
pub fn heat_convolve(grid: &Grid, loc: Location, f: &[f64], r: f64) -> Result<Vec<f64>> {
    let dims = grid.dims(loc);
    if f.len() != dims.iter().product::<usize>() {
        return Err(Error::Dimension("grid function length".into()));
    }
    if r < grid.h * (1.0 - 1e-12) {
        return Err(Error::Grid(format!(
            "heat scale {r} is below the grid spacing {}; refine the grid",
            grid.h
        )));
    }
    if grid.periodic {
        let t = r * r;
        return Ok(fourier_multiplier(f, &dims, grid.h, |k| {
            (-t * k.iter().map(|v| v * v).sum::<f64>()).exp()
        }));
    }
    let h = grid.h;
    let cut = (6.0 * r / h).ceil() as i64;
    let w: Vec<f64> = (-cut..=cut)
        .map(|i| {
            let x = i as f64 * h;
            (-x * x / (4.0 * r * r)).exp()
        })
        .collect();
    let mut cur = f.to_vec();
    let total = cur.len();
    for axis in 0..grid.dim {
        let n = dims[axis];
        let stride: usize = dims[axis + 1..].iter().product();
        let outer = total / (n * stride);
        let mut out = vec![0.0; total];
        for o in 0..outer {
            for s in 0..stride {
                let base = o * n * stride + s;
                for i in 0..n as i64 {
                    let (mut num, mut den) = (0.0, 0.0);
                    let lo = (i - cut).max(0);
                    let hi = (i + cut).min(n as i64 - 1);
                    for k in lo..=hi {
                        let wk = w[(k - i + cut) as usize];
                        num += wk * cur[base + k as usize * stride];
                        den += wk;
                    }
                    out[base + i as usize * stride] = num / den;
                }
            }
        }
        cur = out;
    }
    Ok(cur)
}

/// Discretized weights of `Phi_{z,r}` over cells; weights include the cell
/// volume and sum to one.
#[derive(Clone, Debug, Serialize)]
pub struct HeatKernelMask {
    pub center: Vec<f64>,
    pub r: f64,
    pub entries: Vec<(usize, f64)>,
}

impl HeatKernelMask {
    pub fn new(grid: &Grid, center: &[f64], r: f64) -> Result<Self> {
        if r < grid.h * (1.0 - 1e-12) {
            return Err(Error::Grid("mask scale below grid spacing".into()));
        }
        let d = grid.dim;
        let cut = 6.0 * r;
        let sides = grid.side_lengths();
        let t = r * r;
        let mut entries = Vec::new();
        let reps: Vec<i64> = sides
            .iter()
            .map(|l| {
                if grid.periodic {
                    (cut / l).ceil() as i64 + 1
                } else {
                    0
                }
            })
            .collect();
        let mut x = vec![0.0; d];
        for c in 0..grid.ncells() {
            let p = grid.cell_center(c);
            for j in 0..d {
                let mut v = p[j] - center[j];
                if grid.periodic {
                    v -= sides[j] * (v / sides[j]).round();
                }
                x[j] = v;
            }
            let mut w = 0.0;
            let mut img = reps.iter().map(|&m| -m).collect::<Vec<i64>>();
            loop {
                let mut r2 = 0.0;
                let mut inside = true;
                for j in 0..d {
                    let v = x[j] + img[j] as f64 * sides[j];
                    if v.abs() > cut {
                        inside = false;
                    }
                    r2 += v * v;
                }
                if inside {
                    w += (-r2 / (4.0 * t)).exp();
                }
                let mut j = d;
                let more = loop {
                    if j == 0 {
                        break false;
                    }
                    j -= 1;
                    img[j] += 1;
                    if img[j] <= reps[j] {
                        break true;
                    }
                    img[j] = -reps[j];
                };
                if !more {
                    break;
                }
            }
            if w > 0.0 {
                entries.push((c, w));
            }
        }
        let total: f64 = entries.iter().map(|e| e.1).sum();
        if total <= 0.0 {
            return Err(Error::Grid("mask has no support on the grid".into()));
        }
        entries.iter_mut().for_each(|e| e.1 /= total);
        Ok(HeatKernelMask {
            center: center.to_vec(),
            r,
            entries,
        })
    }

    pub fn mass(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }

    /// `int f Phi_{z,r}` for a cell function.
    pub fn integrate(&self, f: &[f64]) -> f64 {
        self.entries.iter().map(|&(c, w)| w * f[c]).sum()
    }

    pub fn write_csv(&self, grid: &Grid, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..grid.dim).map(|j| format!("x{j}")).collect();
        header.push("weight".into());
        w.write_record(&header)?;
        for &(c, wt) in &self.entries {
            let mut rec: Vec<String> = grid.cell_center(c).iter().map(|v| format!("{v}")).collect();
            rec.push(format!("{wt:e}"));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The standard bump `exp(-1/(1-|x|^2))` on the unit ball (unnormalized).
pub fn standard_bump(x2: f64) -> f64 {
    if x2 < 1.0 {
        (-1.0 / (1.0 - x2)).exp()
    } else {
        0.0
    }
}

/// Discretized `zeta_eps` with unit discrete mass.
#[derive(Clone, Debug)]
pub struct Mollifier {
    pub eps: f64,
    pub stencil: Vec<(Vec<i64>, f64)>,
}

impl Mollifier {
    pub fn new(dim: usize, h: f64, eps: f64) -> Result<Self> {
        if eps < h * (1.0 - 1e-12) {
            return Err(Error::Grid(format!(
                "mollifier scale {eps} is below the grid spacing {h}; refine the grid"
            )));
        }
        let m = (eps / h).ceil() as i64;
        let ext = vec![(2 * m + 1) as usize; dim];
        let mut idx = vec![0usize; dim];
        let mut stencil = Vec::new();
        loop {
            let off: Vec<i64> = idx.iter().map(|&i| i as i64 - m).collect();
            let x2: f64 = off.iter().map(|&o| (o as f64 * h / eps).powi(2)).sum();
            let w = standard_bump(x2);
            if w > 0.0 {
                stencil.push((off, w));
            }
            if !increment(&mut idx, &ext) {
                break;
            }
        }
        let total: f64 = stencil.iter().map(|s| s.1).sum();
        stencil.iter_mut().for_each(|s| s.1 /= total);
        Ok(Mollifier { eps, stencil })
    }
}

/// Convolution with `zeta_eps`; wraps on a torus, truncates and renormalizes
/// at box boundaries.
pub fn mollify(grid: &Grid, loc: Location, f: &[f64], eps: f64) -> Result<Vec<f64>> {
    let dims = grid.dims(loc);
    if f.len() != dims.iter().product::<usize>() {
        return Err(Error::Dimension("grid function length".into()));
    }
    let moll = Mollifier::new(grid.dim, grid.h, eps)?;
    mollify_with(&moll, &dims, grid.periodic, f)
}

pub fn mollify_with(
    moll: &Mollifier,
    dims: &[usize],
    periodic: bool,
    f: &[f64],
) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    let d = dims.len();
    let out: Vec<f64> = (0..f.len())
        .into_par_iter()
        .map(|i| {
            let m = unravel(i, dims);
            let (mut num, mut den) = (0.0, 0.0);
            let mut q = vec![0usize; d];
            'st: for (off, w) in &moll.stencil {
                for j in 0..d {
                    let v = m[j] as i64 + off[j];
                    let n = dims[j] as i64;
                    q[j] = if periodic {
                        v.rem_euclid(n) as usize
                    } else if v < 0 || v >= n {
                        continue 'st;
                    } else {
                        v as usize
                    };
                }
                num += w * f[ravel(&q, dims)];
                den += w;
            }
            num / den
        })
        .collect();
    Ok(out)
}

/// Flat binary layout: magic, number of axes, axis lengths, component count,
/// then little-endian `f64` values (row-major, components fastest).
pub fn write_binary(path: &Path, dims: &[usize], components: usize, values: &[f64]) -> Result<()> {
    let total: usize = dims.iter().product::<usize>() * components;
    if total != values.len() {
        return Err(Error::Dimension("binary export length".into()));
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(b"HLGRID01")?;
    w.write_all(&(dims.len() as u64).to_le_bytes())?;
    for &n in dims {
        w.write_all(&(n as u64).to_le_bytes())?;
    }
    w.write_all(&(components as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary(path: &Path) -> Result<(Vec<usize>, usize, Vec<f64>)> {
    let bytes = std::fs::read(path)?;
    let bad = || Error::Input("not a grid binary file".into());
    if bytes.len() < 16 || &bytes[..8] != b"HLGRID01" {
        return Err(bad());
    }
    let word = |i: usize| -> Result<u64> {
        bytes
            .get(i..i + 8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(bad)
    };
    let nd = word(8)? as usize;
    let mut dims = Vec::with_capacity(nd);
    for k in 0..nd {
        dims.push(word(16 + 8 * k)? as usize);
    }
    let comps = word(16 + 8 * nd)? as usize;
    let start = 24 + 8 * nd;
    let total = dims.iter().product::<usize>() * comps;
    if bytes.len() != start + 8 * total {
        return Err(bad());
    }
    let values = (0..total)
        .map(|i| f64::from_le_bytes(bytes[start + 8 * i..start + 8 * i + 8].try_into().unwrap()))
        .collect();
    Ok((dims, comps, values))
}

/// CSV export with one row per grid point: indices, then components.
pub fn write_csv(path: &Path, dims: &[usize], components: usize, values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..dims.len()).map(|j| format!("i{j}")).collect();
    header.extend((0..components).map(|c| format!("v{c}")));
    w.write_record(&header)?;
    let total: usize = dims.iter().product();
    let mut m = vec![0usize; dims.len()];
    for p in 0..total {
        let mut rec: Vec<String> = m.iter().map(|i| i.to_string()).collect();
        rec.extend((0..components).map(|c| format!("{:e}", values[p * components + c])));
        w.write_record(&rec)?;
        increment(&mut m, dims);
    }
    w.flush()?;
    Ok(())
}
