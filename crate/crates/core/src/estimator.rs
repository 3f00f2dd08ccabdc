//! Snapshot protocol: zeroth-layer phase schedules, energy collection, peak
//! search and angle recovery.
//!
//! Electrical angles are normalized by π throughout, so they lie in
//! `[-1, 1)`; the radian value is `π·ψ̂`.

use std::f64::consts::{PI, TAU};

use ndarray::{Array1, Array2, ArrayView2};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::geometry::{linear_to_grid, steering_vector, SimGeometry, SteeringVector};
use crate::wave::{cscg, wrap_phase, ZerothLayerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub tx: usize,
    pub ty: usize,
}

impl ProtocolConfig {
    pub fn new(tx: usize, ty: usize) -> Result<Self> {
        let p = Self { tx, ty };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tx == 0 || self.ty == 0 {
            return Err(Error::InvalidArgument(format!(
                "snapshot grid must be at least 1x1 (got {}x{})",
                self.tx, self.ty
            )));
        }
        Ok(())
    }

    pub fn snapshots(&self) -> usize {
        self.tx * self.ty
    }

    /// 1-based `(t_x, t_y)` of snapshot `t`.
    pub fn split(&self, t: usize) -> Result<(usize, usize)> {
        linear_to_grid(t, self.tx, self.ty)
    }
}

/// 1-based antenna and snapshot indices of one measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub antenna: usize,
    pub snapshot: usize,
}

/// Received power `|r_{n,t}|²`, stored antenna-by-snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyMap {
    pub values: Array2<f64>,
}

impl EnergyMap {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("energy map is empty".into()));
        }
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument("energy map has negative or NaN entries".into()));
        }
        Ok(Self { values })
    }

    pub fn antennas(&self) -> usize {
        self.values.nrows()
    }

    pub fn snapshots(&self) -> usize {
        self.values.ncols()
    }

    pub fn get(&self, cell: Cell) -> f64 {
        self.values[[cell.antenna - 1, cell.snapshot - 1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoaEstimate {
    pub cell: Cell,
    pub psi_x: f64,
    pub psi_y: f64,
    /// `None` when the electrical-angle pair has no physical direction.
    pub azimuth: Option<f64>,
    pub elevation: Option<f64>,
}

/// Phase of input atom `n` during snapshot `t` (both 1-based), in `[0, 2π)`.
pub fn zeroth_layer_phase(n: usize, t: usize, nx: usize, ny: usize, proto: &ProtocolConfig) -> Result<f64> {
    let (ix, iy) = linear_to_grid(n, nx, ny)?;
    let (tx, ty) = proto.split(t)?;
    // reduce the integer numerators first so large grids stay exact
    let kx = ((ix - 1) * (tx - 1)) % (nx * proto.tx);
    let ky = ((iy - 1) * (ty - 1)) % (ny * proto.ty);
    let phase = -TAU * kx as f64 / (nx * proto.tx) as f64 - TAU * ky as f64 / (ny * proto.ty) as f64;
    Ok(wrap_phase(phase))
}

/// Input-layer configuration for snapshot `t` (1-based).
pub fn zeroth_layer_config(t: usize, nx: usize, ny: usize, proto: &ProtocolConfig) -> Result<ZerothLayerConfig> {
    let phases = (1..=nx * ny)
        .map(|n| zeroth_layer_phase(n, t, nx, ny, proto))
        .collect::<Result<Array1<f64>>>()?;
    Ok(ZerothLayerConfig { phases })
}

/// Per-snapshot source symbols: one value held for every snapshot, or one
/// value per snapshot.
#[derive(Debug, Clone, PartialEq)]
pub enum Symbols {
    Constant(Complex64),
    PerSnapshot(Vec<Complex64>),
}

impl Symbols {
    fn at(&self, t: usize) -> Complex64 {
        match self {
            Symbols::Constant(s) => *s,
            Symbols::PerSnapshot(v) => v[t],
        }
    }
}

/// Noiseless received fields of every snapshot, antenna-by-snapshot:
/// column `t` is `G Υ_{0,t} a s_t`.
pub fn clean_fields(
    g: ArrayView2<Complex64>,
    sv: &SteeringVector,
    symbols: &Symbols,
    nx: usize,
    ny: usize,
    proto: &ProtocolConfig,
) -> Result<Array2<Complex64>> {
    proto.validate()?;
    let n = nx * ny;
    if g.ncols() != n || sv.entries.len() != n {
        return Err(dim_err("clean_fields", n, format!("{}/{}", g.ncols(), sv.entries.len())));
    }
    let t_total = proto.snapshots();
    if let Symbols::PerSnapshot(v) = symbols {
        if v.len() != t_total {
            return Err(dim_err("snapshot symbols", t_total, v.len()));
        }
    }
    let mut inputs = Array2::zeros((n, t_total));
    for t in 0..t_total {
        let s = symbols.at(t);
        for i in 0..n {
            let phase = zeroth_layer_phase(i + 1, t + 1, nx, ny, proto)?;
            inputs[[i, t]] = Complex64::from_polar(1.0, phase) * sv.entries[i] * s;
        }
    }
    Ok(g.dot(&inputs))
}

/// `R×T` matrix of i.i.d. `CN(0, 1)` receiver noise, drawn snapshot by
/// snapshot.
pub fn draw_noise<R: Rng + ?Sized>(antennas: usize, snapshots: usize, rng: &mut R) -> Array2<Complex64> {
    let mut out = Array2::zeros((antennas, snapshots));
    for t in 0..snapshots {
        for n in 0..antennas {
            out[[n, t]] = cscg(rng);
        }
    }
    out
}

/// Energy of `√ρ · clean + noise` for every antenna and snapshot.
pub fn energy_from_fields(clean: ArrayView2<Complex64>, rho: f64, noise: Option<ArrayView2<Complex64>>) -> Result<EnergyMap> {
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::InvalidArgument(format!("SNR must be finite and >= 0 (got {rho})")));
    }
    let amp = rho.sqrt();
    let values = match noise {
        Some(u) => {
            if u.dim() != clean.dim() {
                return Err(dim_err("receiver noise", format!("{:?}", clean.dim()), format!("{:?}", u.dim())));
            }
            ndarray::Zip::from(&clean).and(&u).map_collect(|&c, &w| (amp * c + w).norm_sqr())
        }
        None => clean.mapv(|c| (amp * c).norm_sqr()),
    };
    EnergyMap::new(values)
}

/// Runs the whole protocol for one source: builds each snapshot's input
/// configuration, propagates through `g` and records received powers.
#[allow(clippy::too_many_arguments)]
pub fn collect_snapshots(
    g: ArrayView2<Complex64>,
    sv: &SteeringVector,
    symbols: &Symbols,
    rho: f64,
    nx: usize,
    ny: usize,
    proto: &ProtocolConfig,
    noise: Option<ArrayView2<Complex64>>,
) -> Result<EnergyMap> {
    let clean = clean_fields(g, sv, symbols, nx, ny, proto)?;
    energy_from_fields(clean.view(), rho, noise)
}

/// Global maximum of the map; ties go to the smallest snapshot, then the
/// smallest antenna.
pub fn peak_index(map: &EnergyMap) -> Cell {
    let mut best = Cell { antenna: 1, snapshot: 1 };
    let mut best_val = f64::NEG_INFINITY;
    for t in 0..map.snapshots() {
        for n in 0..map.antennas() {
            let v = map.values[[n, t]];
            if v > best_val {
                best_val = v;
                best = Cell { antenna: n + 1, snapshot: t + 1 };
            }
        }
    }
    best
}

/// Normalized angle of lattice point `k` out of `size` points, in `[-1, 1)`.
fn lattice_angle(k: usize, size: usize) -> f64 {
    if 2 * k >= size {
        2.0 * k as f64 / size as f64 - 2.0
    } else {
        2.0 * k as f64 / size as f64
    }
}

/// Normalized electrical angles `(ψ̂_x, ψ̂_y)` associated with a cell.
pub fn electrical_angles(cell: Cell, nx: usize, ny: usize, proto: &ProtocolConfig) -> Result<(f64, f64)> {
    let (ix, iy) = linear_to_grid(cell.antenna, nx, ny)?;
    let (tx, ty) = proto.split(cell.snapshot)?;
    let kx = (ix - 1) * proto.tx + (tx - 1);
    let ky = (iy - 1) * proto.ty + (ty - 1);
    Ok((lattice_angle(kx, nx * proto.tx), lattice_angle(ky, ny * proto.ty)))
}

/// Azimuth and elevation (radians) from normalized electrical angles. When
/// the arcsine argument exceeds 1 the pair is unrealizable: with `clamp`
/// the elevation saturates at π/2, otherwise an error is returned.
pub fn physical_angles(psi_x: f64, psi_y: f64, geom: &SimGeometry, clamp: bool) -> Result<(f64, f64)> {
    let (px, py) = (PI * psi_x, PI * psi_y);
    let azimuth = if px == 0.0 && py == 0.0 {
        0.0
    } else {
        (py * geom.dx).atan2(px * geom.dy).rem_euclid(TAU)
    };
    let arg = ((px / geom.dx).powi(2) + (py / geom.dy).powi(2)).sqrt() / geom.wavenumber();
    // allow rounding noise on the unit circle itself
    let arg = if arg > 1.0 && arg <= 1.0 + 1e-12 { 1.0 } else { arg };
    if arg > 1.0 {
        if clamp {
            return Ok((azimuth, PI / 2.0));
        }
        return Err(Error::Unrealizable { argument: arg });
    }
    Ok((azimuth, arg.asin()))
}

/// Normalized electrical angles of a physical direction.
pub fn direction_to_electrical(azimuth: f64, elevation: f64, geom: &SimGeometry) -> (f64, f64) {
    let k = geom.wavenumber();
    let psi_x = k * geom.dx * elevation.sin() * azimuth.cos() / PI;
    let psi_y = k * geom.dy * elevation.sin() * azimuth.sin() / PI;
    (psi_x, psi_y)
}

/// Steering vector of a source given by normalized electrical angles.
pub fn source_steering(psi_x: f64, psi_y: f64, nx: usize, ny: usize) -> SteeringVector {
    steering_vector(PI * psi_x, PI * psi_y, nx, ny)
}

/// Peak search plus angle recovery.
pub fn estimate(map: &EnergyMap, geom: &SimGeometry, proto: &ProtocolConfig) -> Result<DoaEstimate> {
    let cell = peak_index(map);
    let (psi_x, psi_y) = electrical_angles(cell, geom.nx, geom.ny, proto)?;
    let (azimuth, elevation) = match physical_angles(psi_x, psi_y, geom, false) {
        Ok((a, e)) => (Some(a), Some(e)),
        Err(Error::Unrealizable { .. }) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(DoaEstimate {
        cell,
        psi_x,
        psi_y,
        azimuth,
        elevation,
    })
}

/// One point of the angular spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumPoint {
    pub psi_x: f64,
    pub psi_y: f64,
    pub power: f64,
}

/// Places every measurement on the `(N_x T_x) × (N_y T_y)` electrical-angle
/// lattice, sorted by `(ψ̂_y, ψ̂_x)` ascending, with the peak scaled to 1.
pub fn angular_spectrum(map: &EnergyMap, proto: &ProtocolConfig, nx: usize, ny: usize) -> Result<Vec<SpectrumPoint>> {
    if map.antennas() != nx * ny || map.snapshots() != proto.snapshots() {
        return Err(dim_err(
            "angular_spectrum",
            format!("{}x{}", nx * ny, proto.snapshots()),
            format!("{}x{}", map.antennas(), map.snapshots()),
        ));
    }
    let peak = map.values.iter().cloned().fold(0.0f64, f64::max);
    let mut points = Vec::with_capacity(map.values.len());
    for t in 1..=proto.snapshots() {
        for n in 1..=nx * ny {
            let cell = Cell { antenna: n, snapshot: t };
            let (psi_x, psi_y) = electrical_angles(cell, nx, ny, proto)?;
            let v = map.get(cell);
            points.push(SpectrumPoint {
                psi_x,
                psi_y,
                power: if peak > 0.0 { v / peak } else { 0.0 },
            });
        }
    }
    points.sort_by(|a, b| a.psi_y.total_cmp(&b.psi_y).then(a.psi_x.total_cmp(&b.psi_x)));
    Ok(points)
}
