//! TOML run configuration. Lengths are in wavelengths except `wavelength`
//! itself, which is in meters.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::WilsonHilferty;
use crate::error::{ConfigErrorKind, Error, Result};
use crate::estimator::ProtocolConfig;
use crate::experiments::{McConfig, ReceiverStudySpec, SourceModel, SweepSpec, SymbolModel};
use crate::geometry::{SimGeometry, DEFAULT_WAVELENGTH};
use crate::trainer::TrainConfig;

/// Physical layout. Defaults describe the best (2,2) stack:
/// thickness 9λ, 7 layers, 11×11 meta-atoms at λ/2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub wavelength: f64,
    pub nx: usize,
    pub ny: usize,
    pub input_spacing: f64,
    pub thickness: f64,
    pub layers: usize,
    pub atoms_x: usize,
    pub atoms_y: usize,
    pub atom_spacing: f64,
    /// Defaults to `nx`, `ny` and `input_spacing`.
    pub receiver_x: Option<usize>,
    pub receiver_y: Option<usize>,
    pub receiver_spacing: Option<f64>,
    pub rotation_deg: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            wavelength: DEFAULT_WAVELENGTH,
            nx: 2,
            ny: 2,
            input_spacing: 0.5,
            thickness: 9.0,
            layers: 7,
            atoms_x: 11,
            atoms_y: 11,
            atom_spacing: 0.5,
            receiver_x: None,
            receiver_y: None,
            receiver_spacing: None,
            rotation_deg: 0.0,
        }
    }
}

fn invariant(key: &str, message: impl std::fmt::Display) -> Error {
    Error::InvalidArgument(format!("{key}: {message}"))
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invariant(key, format!("must be a positive number (got {v})")))
    }
}

fn at_least_one(key: &str, v: usize) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(invariant(key, "must be at least 1"))
    }
}

impl GeometryConfig {
    pub fn validate(&self) -> Result<()> {
        positive("geometry.wavelength", self.wavelength)?;
        positive("geometry.input_spacing", self.input_spacing)?;
        positive("geometry.thickness", self.thickness)?;
        positive("geometry.atom_spacing", self.atom_spacing)?;
        if let Some(u) = self.receiver_spacing {
            positive("geometry.receiver_spacing", u)?;
        }
        for (key, v) in [
            ("geometry.nx", self.nx),
            ("geometry.ny", self.ny),
            ("geometry.layers", self.layers),
            ("geometry.atoms_x", self.atoms_x),
            ("geometry.atoms_y", self.atoms_y),
            ("geometry.receiver_x", self.receiver_x.unwrap_or(1)),
            ("geometry.receiver_y", self.receiver_y.unwrap_or(1)),
        ] {
            at_least_one(key, v)?;
        }
        if !self.rotation_deg.is_finite() {
            return Err(invariant("geometry.rotation_deg", "must be finite"));
        }
        Ok(())
    }

    pub fn to_geometry(&self) -> Result<SimGeometry> {
        self.validate()?;
        let lambda = self.wavelength;
        let d = self.input_spacing * lambda;
        let s = self.atom_spacing * lambda;
        let u = self.receiver_spacing.unwrap_or(self.input_spacing) * lambda;
        let geom = SimGeometry {
            wavelength: lambda,
            nx: self.nx,
            ny: self.ny,
            dx: d,
            dy: d,
            mx: self.atoms_x,
            my: self.atoms_y,
            sx: s,
            sy: s,
            layers: self.layers,
            thickness: self.thickness * lambda,
            rx: self.receiver_x.unwrap_or(self.nx),
            ry: self.receiver_y.unwrap_or(self.ny),
            ux: u,
            uy: u,
            rotation: self.rotation_deg.to_radians(),
        };
        geom.validate()?;
        Ok(geom)
    }
}

/// A single source for `spectrum` and `estimate`: either normalized
/// electrical angles or a physical direction in degrees.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceConfig {
    pub psi_x: Option<f64>,
    pub psi_y: Option<f64>,
    pub azimuth_deg: Option<f64>,
    pub elevation_deg: Option<f64>,
    /// Effective SNR in dB; omitted means noiseless.
    pub snr_db: Option<f64>,
    /// Transmitted symbol as `[re, im]`; defaults to `[1, 0]`.
    pub symbol: Option<[f64; 2]>,
    pub seed: u64,
}

impl SourceConfig {
    /// Normalized electrical angles of the configured source.
    pub fn electrical(&self, geom: &SimGeometry) -> Result<(f64, f64)> {
        match (self.psi_x, self.psi_y, self.azimuth_deg, self.elevation_deg) {
            (Some(x), Some(y), None, None) => {
                if !(-1.0..1.0).contains(&x) || !(-1.0..1.0).contains(&y) {
                    return Err(invariant("source.psi_x/psi_y", "must lie in [-1, 1)"));
                }
                Ok((x, y))
            }
            (None, None, Some(az), Some(el)) => {
                if !(0.0..=90.0).contains(&el) {
                    return Err(invariant("source.elevation_deg", "must lie in [0, 90]"));
                }
                Ok(crate::estimator::direction_to_electrical(az.to_radians(), el.to_radians(), geom))
            }
            _ => Err(invariant(
                "source",
                "give either psi_x and psi_y, or azimuth_deg and elevation_deg",
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(invariant("source.snr_db", "must be finite (omit it for a noiseless run)"));
            }
        }
        if let Some([re, im]) = self.symbol {
            if !(re.is_finite() && im.is_finite()) || re == 0.0 && im == 0.0 {
                return Err(invariant("source.symbol", "must be a finite nonzero complex number"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceMode {
    #[default]
    UniformAngles,
    UniformSolidAngle,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarloSection {
    pub trials: usize,
    pub snr_db: Vec<f64>,
    pub seed: u64,
    pub source: SourceMode,
    /// Normalized `[psi_x, psi_y]` pairs for `source = "fixed"`.
    pub points: Vec<[f64; 2]>,
    pub symbol: SymbolModel,
    pub bound_form: WilsonHilferty,
    /// Also run the digital DFT baseline on the same sources.
    pub digital: bool,
}

impl Default for MonteCarloSection {
    fn default() -> Self {
        let mc = McConfig::default();
        Self {
            trials: mc.trials,
            snr_db: mc.snr_db,
            seed: mc.seed,
            source: SourceMode::UniformAngles,
            points: vec![],
            symbol: SymbolModel::Gaussian,
            bound_form: WilsonHilferty::Standardized,
            digital: false,
        }
    }
}

impl MonteCarloSection {
    pub fn to_config(&self, protocol: ProtocolConfig) -> Result<McConfig> {
        let source = match self.source {
            SourceMode::UniformAngles => SourceModel::UniformAngles,
            SourceMode::UniformSolidAngle => SourceModel::UniformSolidAngle,
            SourceMode::Fixed => {
                if self.points.is_empty() {
                    return Err(invariant("montecarlo.points", "required when source = \"fixed\""));
                }
                SourceModel::Fixed(self.points.clone())
            }
        };
        if self.snr_db.iter().any(|v| !v.is_finite()) {
            return Err(invariant("montecarlo.snr_db", "values must be finite"));
        }
        let cfg = McConfig {
            trials: self.trials,
            snr_db: self.snr_db.clone(),
            protocol,
            seed: self.seed,
            source,
            symbol: self.symbol,
            bound_form: self.bound_form,
        };
        cfg.validate().map_err(|e| invariant("montecarlo", e))?;
        Ok(cfg)
    }
}

/// Where the trained response comes from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResponseConfig {
    /// Phase CSV written by `fit`, relative to the config file.
    pub stack: Option<PathBuf>,
    /// Use the exact DFT in place of a trained stack.
    pub ideal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            seed: 0,
            step: 1e-6,
            tolerance: 1e-6,
        }
    }
}

/// Complete configuration shared by all subcommands.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub train: TrainConfig,
    pub protocol: ProtocolSection,
    pub source: SourceConfig,
    pub response: ResponseConfig,
    pub montecarlo: MonteCarloSection,
    pub gradcheck: GradcheckConfig,
    pub sweep: Option<SweepSpec>,
    pub receiver_study: Option<ReceiverStudySpec>,
    /// Directory holding the config file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSection {
    pub tx: usize,
    pub ty: usize,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        Self { tx: 4, ty: 4 }
    }
}

impl ProtocolSection {
    pub fn to_protocol(self) -> Result<ProtocolConfig> {
        at_least_one("protocol.tx", self.tx)?;
        at_least_one("protocol.ty", self.ty)?;
        ProtocolConfig::new(self.tx, self.ty)
    }
}

impl RunConfig {
    /// Checks every section that does not depend on the subcommand.
    pub fn validate(&self) -> Result<()> {
        self.geometry.to_geometry()?;
        self.train.validate().map_err(|e| invariant("train", e))?;
        let proto = self.protocol.to_protocol()?;
        self.source.validate()?;
        self.montecarlo.to_config(proto)?;
        if self.gradcheck.instances == 0 {
            return Err(invariant("gradcheck.instances", "must be at least 1"));
        }
        positive("gradcheck.step", self.gradcheck.step)?;
        positive("gradcheck.tolerance", self.gradcheck.tolerance)?;
        if let Some(s) = &self.sweep {
            at_least_one("sweep.runs", s.runs)?;
            at_least_one("sweep.n_side", s.n_side)?;
            for (key, list) in [
                ("sweep.thickness_lambda", &s.thickness_lambda),
                ("sweep.spacing_lambda", &s.spacing_lambda),
            ] {
                if list.is_empty() {
                    return Err(invariant(key, "must not be empty"));
                }
                for &v in list {
                    positive(key, v)?;
                }
            }
            if s.layers.is_empty() || s.atoms.is_empty() {
                return Err(invariant("sweep.layers/atoms", "must not be empty"));
            }
            s.train.validate().map_err(|e| invariant("sweep.train", e))?;
        }
        if let Some(r) = &self.receiver_study {
            at_least_one("receiver_study.runs", r.runs)?;
            for &u in &r.receiver_spacing_lambda {
                positive("receiver_study.receiver_spacing_lambda", u)?;
            }
            r.train.validate().map_err(|e| invariant("receiver_study.train", e))?;
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

fn config_error(path: &Path, kind: ConfigErrorKind, message: String) -> Error {
    Error::Config {
        path: path.display().to_string(),
        kind,
        message,
    }
}

/// Parses configuration text; `path` is used for messages only.
pub fn parse_config_str(src: &str, path: &Path) -> Result<RunConfig> {
    let locate = |e: &toml::de::Error| {
        e.span()
            .map(|s| {
                let (l, c) = line_col(src, s.start);
                format!("line {l}, column {c}: ")
            })
            .unwrap_or_default()
    };
    if let Err(e) = src.parse::<toml::Table>() {
        return Err(config_error(path, ConfigErrorKind::Syntax, format!("{}{}", locate(&e), e.message())));
    }
    let mut cfg: RunConfig = toml::from_str(src).map_err(|e| {
        let kind = if e.message().starts_with("unknown field") || e.message().starts_with("unknown variant") {
            ConfigErrorKind::UnknownKey
        } else {
            ConfigErrorKind::Invariant
        };
        config_error(path, kind, format!("{}{}", locate(&e), e.message().trim()))
    })?;
    cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    cfg.validate().map_err(|e| {
        let message = match e {
            Error::InvalidArgument(m) => m,
            other => other.to_string(),
        };
        config_error(path, ConfigErrorKind::Invariant, message)
    })?;
    Ok(cfg)
}

/// Reads and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let src = std::fs::read_to_string(path).map_err(|e| {
        let kind = if e.kind() == std::io::ErrorKind::NotFound {
            ConfigErrorKind::Missing
        } else {
            ConfigErrorKind::Syntax
        };
        config_error(path, kind, e.to_string())
    })?;
    parse_config_str(&src, path)
}
