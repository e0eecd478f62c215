//! Strict experiment configuration. Unknown keys are errors.

use crate::error::{Error, Result};
use crate::field::FieldSpec;
use crate::linalg;
use crate::solver::SolverConfig;
use crate::twoscale::Data;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

fn unit(d: usize) -> Vec<f64> {
    let mut e = vec![0.0; d];
    e[0] = 1.0;
    e
}

fn default_output() -> PathBuf {
    PathBuf::from("homolab-out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Estimate cache; `output/cache` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<FieldSpec>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub sample_field: SampleFieldConfig,
    #[serde(default)]
    pub energies: EnergiesConfig,
    #[serde(default)]
    pub estimate: EstimateConfig,
    #[serde(default)]
    pub rate: RateConfig,
    #[serde(default)]
    pub correctors: CorrectorsConfig,
    #[serde(default)]
    pub decay: DecayConfig,
    #[serde(default)]
    pub twoscale: TwoScaleConfig,
    #[serde(default)]
    pub gff: GffConfig,
    #[serde(default)]
    pub certify: CertifyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output: default_output(),
            cache: None,
            field: None,
            grid: GridConfig::default(),
            solver: SolverConfig::default(),
            sample_field: SampleFieldConfig::default(),
            energies: EnergiesConfig::default(),
            estimate: EstimateConfig::default(),
            rate: RateConfig::default(),
            correctors: CorrectorsConfig::default(),
            decay: DecayConfig::default(),
            twoscale: TwoScaleConfig::default(),
            gff: GffConfig::default(),
            certify: CertifyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg = Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn spec(&self) -> Result<&FieldSpec> {
        self.field
            .as_ref()
            .ok_or_else(|| Error::Config("this command needs a [field] block or --spec".into()))
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache
            .clone()
            .unwrap_or_else(|| self.output.join("cache"))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(f) = &self.field {
            f.validate()?;
        }
        if self.grid.k == 0 {
            return Err(Error::Config("grid.k must be positive".into()));
        }
        if !(self.solver.tol > 0.0) {
            return Err(Error::Config("solver.tol must be positive".into()));
        }
        if self.twoscale.k == 0 {
            return Err(Error::Config("twoscale.k must be positive".into()));
        }
        self.twoscale.eps_values()?;
        Ok(())
    }
}

/// Field spec from a TOML or JSON file.
pub fn load_spec(path: &Path) -> Result<FieldSpec> {
    let text = std::fs::read_to_string(path)?;
    let spec: FieldSpec = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Cells per unit length.
    pub k: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { k: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleFieldConfig {
    pub level: u32,
}

impl Default for SampleFieldConfig {
    fn default() -> Self {
        SampleFieldConfig { level: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergiesConfig {
    pub level: u32,
    pub samples: usize,
    /// Empty means `e_1`.
    pub p: Vec<f64>,
    /// Empty means `e_1`.
    pub q: Vec<f64>,
}

impl Default for EnergiesConfig {
    fn default() -> Self {
        EnergiesConfig {
            level: 2,
            samples: 8,
            p: vec![],
            q: vec![],
        }
    }
}

impl EnergiesConfig {
    pub fn p_or_default(&self, d: usize) -> Vec<f64> {
        if self.p.is_empty() {
            unit(d)
        } else {
            self.p.clone()
        }
    }

    pub fn q_or_default(&self, d: usize) -> Vec<f64> {
        if self.q.is_empty() {
            unit(d)
        } else {
            self.q.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Averages of `a_U` over triadic cubes.
    #[default]
    Dirichlet,
    /// Averages of the periodic matrix over tori.
    Periodic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateConfig {
    pub level: u32,
    pub samples: usize,
    pub method: Method,
    /// Torus side for the periodic method.
    pub torus: usize,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            level: 3,
            samples: 16,
            method: Method::Dirichlet,
            torus: 27,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateConfig {
    pub n0: u32,
    pub n1: u32,
    pub samples: usize,
    pub p: Vec<f64>,
}

impl Default for RateConfig {
    fn default() -> Self {
        RateConfig {
            n0: 0,
            n1: 2,
            samples: 16,
            p: vec![],
        }
    }
}

impl RateConfig {
    pub fn p_or_default(&self, d: usize) -> Vec<f64> {
        if self.p.is_empty() {
            unit(d)
        } else {
            self.p.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectorsConfig {
    pub torus: usize,
    pub samples: usize,
}

impl Default for CorrectorsConfig {
    fn default() -> Self {
        CorrectorsConfig {
            torus: 15,
            samples: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecayConfig {
    pub torus: usize,
    pub scales: Vec<f64>,
    pub samples: usize,
    pub direction: Vec<f64>,
}

impl Default for DecayConfig {
    fn default() -> Self {
        DecayConfig {
            torus: 32,
            scales: vec![1.0, 2.0, 4.0, 8.0],
            samples: 8,
            direction: vec![],
        }
    }
}

impl DecayConfig {
    pub fn direction_or_default(&self, d: usize) -> Vec<f64> {
        if self.direction.is_empty() {
            unit(d)
        } else {
            self.direction.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoScaleConfig {
    /// Values of `eps`, written as `1/9` or decimals.
    pub eps: Vec<String>,
    pub samples: usize,
    /// Grid cells per `eps`-cell.
    pub k: usize,
    /// Affine data slope; harmonic data when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub affine: Option<Vec<f64>>,
}

impl Default for TwoScaleConfig {
    fn default() -> Self {
        TwoScaleConfig {
            eps: vec!["1/3".into(), "1/9".into(), "1/27".into()],
            samples: 2,
            k: 8,
            affine: None,
        }
    }
}

pub fn parse_eps(s: &str) -> Result<f64> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad eps {s:?}")))?;
            let b: f64 = b
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad eps {s:?}")))?;
            a / b
        }
        None => s
            .parse()
            .map_err(|_| Error::Config(format!("bad eps {s:?}")))?,
    };
    let inv = 1.0 / v;
    let k = inv.ln() / 3f64.ln();
    if !(v > 0.0) || (k - k.round()).abs() > 1e-9 || k.round() < 0.0 {
        return Err(Error::Config(format!("eps must be a power 3^-k, got {s}")));
    }
    Ok(3f64.powi(-(k.round() as i32)))
}

impl TwoScaleConfig {
    pub fn eps_values(&self) -> Result<Vec<f64>> {
        self.eps.iter().map(|s| parse_eps(s)).collect()
    }

    pub fn data(&self) -> Data {
        match &self.affine {
            Some(p) => Data::Affine { p: p.clone() },
            None => Data::Harmonic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GffConfig {
    pub dim: usize,
    /// Upper triangle of `Q`, row by row; empty means the identity.
    pub q: Vec<f64>,
    /// Upper triangle of `abar`; empty means the identity.
    pub ahom: Vec<f64>,
    /// Cells per side of the unit-spacing torus.
    pub grid: usize,
    pub samples: usize,
}

impl Default for GffConfig {
    fn default() -> Self {
        GffConfig {
            dim: 2,
            q: vec![],
            ahom: vec![],
            grid: 32,
            samples: 64,
        }
    }
}

/// Symmetric matrix from its upper triangle (or a single scalar).
pub fn symmetric_from_upper(d: usize, v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Ok(linalg::identity(d));
    }
    if v.len() == 1 {
        return Ok(linalg::identity(d).iter().map(|x| x * v[0]).collect());
    }
    if v.len() != d * (d + 1) / 2 {
        return Err(Error::Config(format!(
            "expected {} upper-triangle entries, got {}",
            d * (d + 1) / 2,
            v.len()
        )));
    }
    let mut m = vec![0.0; d * d];
    let mut it = v.iter();
    for i in 0..d {
        for j in i..d {
            let x = *it.next().expect("length checked");
            m[i * d + j] = x;
            m[j * d + i] = x;
        }
    }
    Ok(m)
}

impl GffConfig {
    pub fn q_matrix(&self) -> Result<Vec<f64>> {
        symmetric_from_upper(self.dim, &self.q)
    }

    pub fn ahom_matrix(&self) -> Result<Vec<f64>> {
        symmetric_from_upper(self.dim, &self.ahom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertifyConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    pub column: String,
    pub s: f64,
    pub theta: f64,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        CertifyConfig {
            input: None,
            column: "value".into(),
            s: 1.0,
            theta: 1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identical() {
        let mut cfg = ExperimentConfig {
            seed: 17,
            field: Some(FieldSpec::checkerboard(2, 1.0, 4.0)),
            ..Default::default()
        };
        cfg.solver.tol = 1e-11;
        cfg.gff.q = vec![1.0, 0.1 + 0.2, 2.0];
        cfg.twoscale.affine = Some(vec![0.3, 1.0 / 7.0]);
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("seed = 1\nsede = 2\n").is_err());
        assert!(ExperimentConfig::from_toml("[grid]\nk = 2\ncells = 3\n").is_err());
        assert!(
            ExperimentConfig::from_toml("[solver]\ntol = 1e-8\nprecond = \"jacobi\"\n").is_err()
        );
        let ok = ExperimentConfig::from_toml("[solver]\ntol = 1e-8\npreconditioner = \"jacobi\"\n")
            .unwrap();
        assert_eq!(ok.solver.tol, 1e-8);
    }

    #[test]
    fn eps_parsing() {
        assert_eq!(parse_eps("1/9").unwrap(), 1.0 / 9.0);
        assert!((parse_eps("0.037037037037037035").unwrap() - 1.0 / 27.0).abs() < 1e-15);
        assert!(parse_eps("1/4").is_err());
        assert!(parse_eps("x").is_err());
    }

    #[test]
    fn upper_triangle() {
        assert_eq!(
            symmetric_from_upper(2, &[1.0, 2.0, 3.0]).unwrap(),
            vec![1.0, 2.0, 2.0, 3.0]
        );
        assert_eq!(
            symmetric_from_upper(2, &[]).unwrap(),
            vec![1.0, 0.0, 0.0, 1.0]
        );
        assert!(symmetric_from_upper(2, &[1.0, 2.0]).is_err());
    }
}
