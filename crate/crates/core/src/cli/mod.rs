//! Command-line orchestration: strict experiment configs, subcommands,
//! provenance headers and exit codes.
//!
//! Exit codes: 0 success, 1 an experiment assertion failed, 2 infrastructure
//! error (bad config, I/O, solver breakdown, partial sample failures).

mod config;

pub use config::*;

use crate::analysis::{gaussianity_test, os_certify};
use crate::corrector::{correctors_for_sample, heat_average_decay};
use crate::energy::{append_csv, j_quantity, CubeProblem};
use crate::error::{Error, Result};
use crate::field::{restrict_to_grid, sample_field};
use crate::gaussian::{gff_variance, helmholtz_project, sample_gradient_gff};
use crate::grid::{write_binary, Grid, TriadicCube};
use crate::homogenize::{
    estimate_ahom_cached, estimate_ahom_periodic_cached, load_cached, load_cached_periodic,
    rate_fit, sample_seed,
};
use crate::seed::derive_seed;
use crate::twoscale::{homogenization_errors, slope_report};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ASSERTION: i32 = 1;
pub const EXIT_INFRA: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "homolab",
    version,
    about = "Numerical laboratory for stochastic homogenization"
)]
pub struct Cli {
    /// Experiment config (TOML); flags below override its entries.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default, Clone)]
pub struct Common {
    /// Field spec file (TOML or JSON).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Grid cells per unit length.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Export one coefficient sample on a triadic cube.
    SampleField {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        level: Option<u32>,
    },
    /// Energies nu, nu*, J on triadic cubes.
    Energies {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        level: Option<u32>,
        #[arg(long, value_delimiter = ',')]
        p: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        q: Option<Vec<f64>>,
    },
    /// Monte Carlo estimate of the homogenized matrix (cached).
    EstimateAhom {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        level: Option<u32>,
        #[arg(long, value_enum)]
        method: Option<Method>,
        #[arg(long)]
        torus: Option<usize>,
    },
    /// Empirical convergence rate of E nu over levels.
    RateFit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n0: Option<u32>,
        #[arg(long)]
        n1: Option<u32>,
        #[arg(long, value_delimiter = ',')]
        p: Option<Vec<f64>>,
    },
    /// Correctors and flux correctors on tori.
    Correctors {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        torus: Option<usize>,
    },
    /// Decay of heat-kernel averages of corrector gradients and fluxes.
    Decay {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        torus: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        direction: Option<Vec<f64>>,
    },
    /// Two-scale expansion errors on the unit box (needs a cached estimate).
    TwoScale {
        #[command(flatten)]
        common: Common,
        /// Comma-separated list such as 1/9,1/27,1/81.
        #[arg(long, value_delimiter = ',')]
        eps: Option<Vec<String>>,
        /// Affine data slope; harmonic data when absent.
        #[arg(long, value_delimiter = ',')]
        p: Option<Vec<f64>>,
    },
    /// Gradient Gaussian free field samples on a torus.
    Gff {
        #[arg(long)]
        dim: Option<usize>,
        /// Row-major upper triangle, e.g. Q11,Q12,Q22.
        #[arg(long, value_delimiter = ',')]
        q: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        ahom: Option<Vec<f64>>,
        /// Cells per side.
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Tail certification and Gaussianity of a CSV column.
    Certify {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        column: Option<String>,
        #[arg(long)]
        s: Option<f64>,
        #[arg(long)]
        theta: Option<f64>,
    },
    /// Collate prior runs into one summary table.
    Report,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SampleField { .. } => "sample-field",
            Command::Energies { .. } => "energies",
            Command::EstimateAhom { .. } => "estimate-ahom",
            Command::RateFit { .. } => "rate-fit",
            Command::Correctors { .. } => "correctors",
            Command::Decay { .. } => "decay",
            Command::TwoScale { .. } => "two-scale",
            Command::Gff { .. } => "gff",
            Command::Certify { .. } => "certify",
            Command::Report => "report",
        }
    }
}

/// Result of one subcommand: the numeric payload and whether its assertions held.
pub struct Outcome {
    pub payload: Value,
    pub assertions_hold: bool,
    pub failures: Vec<String>,
}

impl Outcome {
    fn ok(payload: Value) -> Self {
        Outcome {
            payload,
            assertions_hold: true,
            failures: vec![],
        }
    }
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("HOMOLAB_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            _ => {
                eprintln!("error: HOMOLAB_THREADS must be a positive integer, got {v:?}");
                return EXIT_INFRA;
            }
        }
    }
    match run_cli(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INFRA
        }
    }
}

pub fn run_cli(cli: &Cli) -> Result<i32> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &cli.output {
        cfg.output = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    apply_overrides(&mut cfg, &cli.command)?;
    let name = cli.command.name();
    let start = Instant::now();
    let outcome = run(&cli.command, &cfg)?;
    let wall = start.elapsed().as_secs_f64();
    std::fs::create_dir_all(&cfg.output)?;
    let prov = provenance(&cfg, name, wall);
    let doc = json!({ "provenance": prov, "payload": outcome.payload });
    let text = serde_json::to_string_pretty(&doc)?;
    std::fs::write(
        cfg.output.join(format!("{}.json", name.replace('-', "_"))),
        &text,
    )?;
    if name != "report" {
        let runs = cfg.output.join("runs");
        std::fs::create_dir_all(&runs)?;
        std::fs::write(
            runs.join(format!("{name}-{}.json", config_hash(&cfg))),
            &text,
        )?;
    }
    if !outcome.failures.is_empty() {
        let f = json!({ "command": name, "failures": outcome.failures });
        let t = serde_json::to_string_pretty(&f)?;
        std::fs::write(cfg.output.join("failures.json"), &t)?;
        eprintln!("{t}");
        return Ok(EXIT_INFRA);
    }
    Ok(if outcome.assertions_hold {
        EXIT_OK
    } else {
        EXIT_ASSERTION
    })
}

/// SHA-256 of the canonical JSON form of the config.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let text = serde_json::to_string(cfg).expect("config serializes");
    Sha256::digest(text.as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn provenance(cfg: &ExperimentConfig, command: &str, wall: f64) -> Value {
    json!({
        "command": command,
        "config_hash": config_hash(cfg),
        "version": env!("CARGO_PKG_VERSION"),
        "wall_time_s": wall,
        "config": cfg,
    })
}

fn apply_common(
    cfg: &mut ExperimentConfig,
    c: &Common,
    samples: impl FnOnce(&mut ExperimentConfig) -> &mut usize,
) -> Result<()> {
    if let Some(p) = &c.spec {
        cfg.field = Some(load_spec(p)?);
    }
    if let Some(k) = c.k {
        cfg.grid.k = k;
    }
    if let Some(m) = c.samples {
        *samples(cfg) = m;
    }
    Ok(())
}

fn apply_overrides(cfg: &mut ExperimentConfig, cmd: &Command) -> Result<()> {
    match cmd {
        Command::SampleField { common, level } => {
            apply_common(cfg, common, |c| &mut c.energies.samples)?;
            if let Some(l) = level {
                cfg.sample_field.level = *l;
            }
        }
        Command::Energies {
            common,
            level,
            p,
            q,
        } => {
            apply_common(cfg, common, |c| &mut c.energies.samples)?;
            if let Some(l) = level {
                cfg.energies.level = *l;
            }
            if let Some(p) = p {
                cfg.energies.p = p.clone();
            }
            if let Some(q) = q {
                cfg.energies.q = q.clone();
            }
        }
        Command::EstimateAhom {
            common,
            level,
            method,
            torus,
        } => {
            apply_common(cfg, common, |c| &mut c.estimate.samples)?;
            if let Some(l) = level {
                cfg.estimate.level = *l;
            }
            if let Some(m) = method {
                cfg.estimate.method = *m;
            }
            if let Some(t) = torus {
                cfg.estimate.torus = *t;
            }
        }
        Command::RateFit { common, n0, n1, p } => {
            apply_common(cfg, common, |c| &mut c.rate.samples)?;
            if let Some(v) = n0 {
                cfg.rate.n0 = *v;
            }
            if let Some(v) = n1 {
                cfg.rate.n1 = *v;
            }
            if let Some(p) = p {
                cfg.rate.p = p.clone();
            }
        }
        Command::Correctors { common, torus } => {
            apply_common(cfg, common, |c| &mut c.correctors.samples)?;
            if let Some(t) = torus {
                cfg.correctors.torus = *t;
            }
        }
        Command::Decay {
            common,
            torus,
            scales,
            direction,
        } => {
            apply_common(cfg, common, |c| &mut c.decay.samples)?;
            if let Some(t) = torus {
                cfg.decay.torus = *t;
            }
            if let Some(s) = scales {
                cfg.decay.scales = s.clone();
            }
            if let Some(e) = direction {
                cfg.decay.direction = e.clone();
            }
        }
        Command::TwoScale { common, eps, p } => {
            apply_common(cfg, common, |c| &mut c.twoscale.samples)?;
            if let Some(e) = eps {
                cfg.twoscale.eps = e.clone();
            }
            if let Some(p) = p {
                cfg.twoscale.affine = Some(p.clone());
            }
        }
        Command::Gff {
            dim,
            q,
            ahom,
            grid,
            samples,
        } => {
            if let Some(d) = dim {
                cfg.gff.dim = *d;
            }
            if let Some(q) = q {
                cfg.gff.q = q.clone();
            }
            if let Some(a) = ahom {
                cfg.gff.ahom = a.clone();
            }
            if let Some(n) = grid {
                cfg.gff.grid = *n;
            }
            if let Some(m) = samples {
                cfg.gff.samples = *m;
            }
        }
        Command::Certify {
            input,
            column,
            s,
            theta,
        } => {
            if let Some(i) = input {
                cfg.certify.input = Some(i.clone());
            }
            if let Some(c) = column {
                cfg.certify.column = c.clone();
            }
            if let Some(s) = s {
                cfg.certify.s = *s;
            }
            if let Some(t) = theta {
                cfg.certify.theta = *t;
            }
        }
        Command::Report => {}
    }
    cfg.validate()
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

/// Prepends `# key=value` provenance lines to a CSV file.
fn add_csv_header(path: &Path, cfg: &ExperimentConfig, command: &str) -> Result<()> {
    let body = std::fs::read_to_string(path)?;
    let head = format!(
        "# command={command}\n# config_hash={}\n# version={}\n",
        config_hash(cfg),
        env!("CARGO_PKG_VERSION")
    );
    std::fs::write(path, head + &body)?;
    Ok(())
}

/// Runs one subcommand; artifacts go under `cfg.output`.
pub fn run(cmd: &Command, cfg: &ExperimentConfig) -> Result<Outcome> {
    let out = &cfg.output;
    std::fs::create_dir_all(out)?;
    match cmd {
        Command::SampleField { .. } => {
            let spec = cfg.spec()?;
            let cube = TriadicCube::new(spec.dim, cfg.sample_field.level);
            let grid = Grid::cube(&cube, cfg.grid.k);
            let s = sample_field(spec, derive_seed(cfg.seed, "sample-field"))?;
            let coeffs = restrict_to_grid(&s, &grid);
            let d = spec.dim;
            write_binary(&out.join("field.bin"), &grid.n, d * d, &coeffs.data)?;
            Ok(Outcome::ok(json!({
                "level": cube.level,
                "cells_per_side": grid.n[0],
                "arithmetic_mean": coeffs.arithmetic_mean(),
                "harmonic_mean": coeffs.harmonic_mean(),
                "file": "field.bin",
            })))
        }
        Command::Energies { .. } => {
            let spec = cfg.spec()?;
            let e = &cfg.energies;
            let cube = TriadicCube::new(spec.dim, e.level);
            let p = e.p_or_default(spec.dim);
            let q = e.q_or_default(spec.dim);
            let reports: Vec<_> = (0..e.samples)
                .into_par_iter()
                .map(|i| {
                    let s = sample_field(spec, sample_seed(cfg.seed, i))?;
                    let prob = CubeProblem::new(&s, &cube, cfg.grid.k, cfg.solver.clone())?;
                    j_quantity(&prob, &p, &q)
                })
                .collect::<Result<_>>()?;
            let path = out.join("energies.csv");
            if path.exists() {
                std::fs::remove_file(&path)?;
            }
            append_csv(&path, spec.law.name(), cfg.seed, &reports)?;
            add_csv_header(&path, cfg, "energies")?;
            let duality_ok = reports.iter().all(|r| r.j >= -1e-8);
            Ok(Outcome {
                payload: to_value(&reports)?,
                assertions_hold: duality_ok,
                failures: vec![],
            })
        }
        Command::EstimateAhom { .. } => {
            let spec = cfg.spec()?;
            let e = &cfg.estimate;
            let cache = cfg.cache_dir();
            match e.method {
                Method::Dirichlet => {
                    let est = estimate_ahom_cached(
                        &cache,
                        spec,
                        e.level,
                        cfg.grid.k,
                        e.samples,
                        cfg.seed,
                        &cfg.solver,
                    )?;
                    let bracket = est.bracket();
                    Ok(Outcome {
                        payload: json!({ "estimate": est, "bracket": bracket }),
                        assertions_hold: bracket.holds,
                        failures: est.failures.clone(),
                    })
                }
                Method::Periodic => {
                    let est = estimate_ahom_periodic_cached(
                        &cache,
                        spec,
                        e.torus,
                        cfg.grid.k,
                        e.samples,
                        cfg.seed,
                        &cfg.solver,
                    )?;
                    Ok(Outcome::ok(json!({ "estimate": est })))
                }
            }
        }
        Command::RateFit { .. } => {
            let spec = cfg.spec()?;
            let r = &cfg.rate;
            let fit = rate_fit(
                spec,
                r.n0,
                r.n1,
                cfg.grid.k,
                r.samples,
                cfg.seed,
                &r.p_or_default(spec.dim),
                &cfg.solver,
            )?;
            Ok(Outcome::ok(to_value(&fit)?))
        }
        Command::Correctors { .. } => {
            let spec = cfg.spec()?;
            let c = &cfg.correctors;
            let rows: Vec<Value> = (0..c.samples)
                .map(|i| {
                    let seed = derive_seed(cfg.seed, &format!("correctors/{i}"));
                    let s = sample_field(spec, seed)?;
                    let set = correctors_for_sample(&s, c.torus, cfg.grid.k, &cfg.solver)?;
                    set.save(
                        &out.join("correctors").join(format!("sample-{i}")),
                        spec,
                        seed,
                    )?;
                    Ok(json!({
                        "sample": i,
                        "abar_per": set.abar,
                        "flux_residual": set.flux_residual,
                        "invisible_fraction": set.invisible_fraction,
                    }))
                })
                .collect::<Result<_>>()?;
            let odd = (c.torus * cfg.grid.k) % 2 == 1;
            let holds = !odd
                || rows.iter().all(|r| {
                    r["flux_residual"].as_array().is_some_and(|a| {
                        a.iter()
                            .all(|v| v.as_f64().unwrap_or(f64::INFINITY) <= 1e-6)
                    })
                });
            Ok(Outcome {
                payload: json!({ "torus": c.torus, "k": cfg.grid.k, "samples": rows }),
                assertions_hold: holds,
                failures: vec![],
            })
        }
        Command::Decay { .. } => {
            let spec = cfg.spec()?;
            let d = &cfg.decay;
            let rep = heat_average_decay(
                spec,
                &d.direction_or_default(spec.dim),
                &d.scales,
                d.samples,
                d.torus,
                cfg.grid.k,
                cfg.seed,
                &cfg.solver,
            )?;
            let path = out.join("decay.csv");
            rep.to_csv(&path)?;
            add_csv_header(&path, cfg, "decay")?;
            Ok(Outcome::ok(to_value(&rep)?))
        }
        Command::TwoScale { .. } => {
            let spec = cfg.spec()?;
            let t = &cfg.twoscale;
            let abar = cached_ahom(cfg)?;
            let eps = t.eps_values()?;
            let reports = homogenization_errors(
                spec,
                &abar,
                &t.data(),
                &eps,
                t.samples,
                t.k,
                cfg.seed,
                &cfg.solver,
            )?;
            let path = out.join("twoscale.csv");
            crate::twoscale::write_csv(&path, &reports)?;
            add_csv_header(&path, cfg, "two-scale")?;
            let slopes = if eps.len() >= 3 {
                Some(slope_report(&reports)?)
            } else {
                None
            };
            Ok(Outcome::ok(
                json!({ "abar": abar, "reports": reports, "slopes": slopes }),
            ))
        }
        Command::Gff { .. } => {
            let g = &cfg.gff;
            let d = g.dim;
            let q = g.q_matrix()?;
            let abar = g.ahom_matrix()?;
            let grid = Grid::torus(d, g.grid, 1);
            let test = smooth_test_field(&grid);
            let exact = gff_variance(&grid, &abar, &q, &test)?;
            let pf = helmholtz_project(&grid, &test, &abar)?;
            let vol = grid.cell_volume();
            let values: Vec<f64> = (0..g.samples)
                .into_par_iter()
                .map(|i| {
                    let xi = crate::gaussian::cell_noise(
                        &grid,
                        &q,
                        derive_seed(cfg.seed, &format!("gff/{i}")),
                    );
                    pf.iter()
                        .zip(&xi)
                        .map(|(a, b)| crate::linalg::dot(a, b))
                        .sum::<f64>()
                        * vol
                })
                .collect();
            let first = sample_gradient_gff(&grid, &abar, &q, derive_seed(cfg.seed, "gff/0"))?;
            let flat: Vec<f64> = (0..grid.ncells())
                .flat_map(|c| first.field.iter().map(move |f| f[c]))
                .collect();
            write_binary(&out.join("gff.bin"), &grid.n, d, &flat)?;
            let var = if values.len() > 1 {
                crate::analysis::variance(&values)
            } else {
                0.0
            };
            Ok(Outcome::ok(json!({
                "dim": d,
                "cells_per_side": g.grid,
                "samples": g.samples,
                "test_variance_exact": exact,
                "test_variance_empirical": var,
                "test_values": values,
                "file": "gff.bin",
            })))
        }
        Command::Certify { .. } => {
            let c = &cfg.certify;
            let input = c
                .input
                .as_ref()
                .ok_or_else(|| Error::Config("certify needs an input CSV (--input)".into()))?;
            let x = read_column(input, &c.column)?;
            let cert = os_certify(&x, c.s, c.theta, cfg.seed)?;
            let gauss = if x.len() >= 256 {
                Some(gaussianity_test(&x)?)
            } else {
                None
            };
            Ok(Outcome {
                payload: json!({ "certificate": cert, "gaussianity": gauss }),
                assertions_hold: cert.pass,
                failures: vec![],
            })
        }
        Command::Report => report(cfg),
    }
}

/// Smooth periodic test field used for GFF variance diagnostics.
fn smooth_test_field(grid: &Grid) -> Vec<Vec<f64>> {
    let l = grid.side_lengths()[0];
    let w = 2.0 * std::f64::consts::PI / l;
    (0..grid.dim)
        .map(|j| {
            (0..grid.ncells())
                .map(|c| {
                    let x = grid.cell_center(c);
                    (w * x[0] + j as f64).sin() + (w * x[grid.dim - 1]).cos()
                })
                .collect()
        })
        .collect()
}

/// Homogenized matrix from the cache filled by `estimate-ahom`.
pub fn cached_ahom(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    let spec = cfg.spec()?;
    let e = &cfg.estimate;
    let dir = cfg.cache_dir();
    let hit = match e.method {
        Method::Dirichlet => {
            load_cached(&dir, spec, e.level, cfg.grid.k, e.samples, cfg.seed)?.map(|x| x.a)
        }
        Method::Periodic => {
            load_cached_periodic(&dir, spec, e.torus, cfg.grid.k, e.samples, cfg.seed)?.map(|x| x.a)
        }
    };
    hit.ok_or_else(|| {
        Error::MissingCache(format!(
            "no cached homogenized matrix for this field spec in {}; run `homolab estimate-ahom` with the same config first",
            dir.display()
        ))
    })
}

fn read_column(path: &Path, column: &str) -> Result<Vec<f64>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let headers = r.headers()?.clone();
    let idx = headers.iter().position(|h| h == column).ok_or_else(|| {
        Error::Input(format!("column {column:?} not found in {}", path.display()))
    })?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let v: f64 = rec[idx].trim().parse().map_err(|_| {
            Error::Input(format!(
                "non-numeric value {:?} in column {column}",
                &rec[idx]
            ))
        })?;
        out.push(v);
    }
    Ok(out)
}

/// One row per file in `output/runs`.
fn report(cfg: &ExperimentConfig) -> Result<Outcome> {
    let runs = cfg.output.join("runs");
    let mut files: Vec<PathBuf> = match std::fs::read_dir(&runs) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(_) => vec![],
    };
    files.sort();
    let path = cfg.output.join("report.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "file",
        "command",
        "config_hash",
        "version",
        "wall_time_s",
        "seed",
    ])?;
    let mut rows = Vec::new();
    for f in &files {
        let v: Value = serde_json::from_str(&std::fs::read_to_string(f)?)?;
        let p = &v["provenance"];
        let row = [
            f.file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            p["command"].as_str().unwrap_or("").to_string(),
            p["config_hash"].as_str().unwrap_or("").to_string(),
            p["version"].as_str().unwrap_or("").to_string(),
            p["wall_time_s"]
                .as_f64()
                .map(|x| format!("{x:.3}"))
                .unwrap_or_default(),
            p["config"]["seed"]
                .as_u64()
                .map(|x| x.to_string())
                .unwrap_or_default(),
        ];
        w.write_record(&row)?;
        rows.push(json!(row));
    }
    w.flush()?;
    drop(w);
    add_csv_header(&path, cfg, "report")?;
    Ok(Outcome::ok(json!({ "rows": rows.len(), "table": rows })))
}
