//! Closed-form MSE upper bound of the energy-detection estimator.
//!
//! A cell `(n, t)` can only win the peak search if its energy exceeds the
//! energy of the noiseless peak cell `(n̆, t̆)`. With `X = 2|r|²` noncentral
//! chi-square with two degrees of freedom, `D = X_{n,t} − X_{n̆,t̆}` is a
//! difference of two such variables; `Pr{D ≥ 0}` is approximated by matching
//! three cumulants to a scaled central chi-square and then taking the
//! Wilson–Hilferty normal approximation of that chi-square.

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{clean_fields, electrical_angles, source_steering, Cell, ProtocolConfig, Symbols};

/// Gaussian tail probability `Q(x) = Pr{Z > x}`.
pub fn q_function(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    q_function(-x)
}

/// Wraps a normalized angle difference into `[-1, 1)`, the distance on the
/// periodic electrical-angle axis.
pub fn wrap_angle(x: f64) -> f64 {
    (x + 1.0).rem_euclid(2.0) - 1.0
}

/// Noncentrality `δ² = |√(2ρ) g̃_nᴴ Υ_{0,t} a s|²` of every cell, antenna-by-
/// snapshot.
pub fn noncentrality_map(
    g: ArrayView2<Complex64>,
    proto: &ProtocolConfig,
    psi: (f64, f64),
    s: Complex64,
    rho: f64,
    nx: usize,
    ny: usize,
) -> Result<Array2<f64>> {
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::InvalidArgument(format!("SNR must be finite and >= 0 (got {rho})")));
    }
    let sv = source_steering(psi.0, psi.1, nx, ny);
    let clean = clean_fields(g, &sv, &Symbols::Constant(s), nx, ny, proto)?;
    Ok(clean.mapv(|z| 2.0 * rho * z.norm_sqr()))
}

/// Noncentrality of a single cell.
#[allow(clippy::too_many_arguments)]
pub fn noncentrality(
    g: ArrayView2<Complex64>,
    proto: &ProtocolConfig,
    psi: (f64, f64),
    s: Complex64,
    rho: f64,
    nx: usize,
    ny: usize,
    cell: Cell,
) -> Result<f64> {
    let map = noncentrality_map(g, proto, psi, s, rho, nx, ny)?;
    Ok(map[[cell.antenna - 1, cell.snapshot - 1]])
}

fn argmax_cell(values: &Array2<f64>) -> Cell {
    let mut best = Cell { antenna: 1, snapshot: 1 };
    let mut best_val = f64::NEG_INFINITY;
    for t in 0..values.ncols() {
        for n in 0..values.nrows() {
            if values[[n, t]] > best_val {
                best_val = values[[n, t]];
                best = Cell { antenna: n + 1, snapshot: t + 1 };
            }
        }
    }
    best
}

/// Cell holding the largest noiseless energy, with the peak-search tie rule.
pub fn peak_index_noiseless(
    g: ArrayView2<Complex64>,
    proto: &ProtocolConfig,
    psi: (f64, f64),
    s: Complex64,
    nx: usize,
    ny: usize,
) -> Result<Cell> {
    let map = noncentrality_map(g, proto, psi, s, 1.0, nx, ny)?;
    if map.iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate("noiseless field is identically zero".into()));
    }
    Ok(argmax_cell(&map))
}

/// Cumulant-type moments of `D`: `μ_i = (−1)^i (2 + i δ_peak) + 2 + i δ_cell`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentTriple {
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
}

impl MomentTriple {
    /// Degrees of freedom of the matched chi-square, `μ2³/μ3²`.
    pub fn h(&self) -> f64 {
        self.mu2.powi(3) / (self.mu3 * self.mu3)
    }

    /// Threshold `h − μ1 √(h/μ2)`.
    pub fn b(&self) -> f64 {
        let h = self.h();
        h - self.mu1 * (h / self.mu2).sqrt()
    }
}

pub fn moments(delta_cell: f64, delta_peak: f64) -> MomentTriple {
    let mu = |i: i32| {
        let fi = i as f64;
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        sign * (2.0 + fi * delta_peak) + 2.0 + fi * delta_cell
    };
    MomentTriple {
        mu1: mu(1),
        mu2: mu(2),
        mu3: mu(3),
    }
}

/// Final normal-approximation step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilsonHilferty {
    /// `(χ²_h/h)^{1/3}` standardized by its mean `1 − 2/(9h)` and standard
    /// deviation `√(2/(9h))`, with the negative-skew cumulants handled by
    /// approximating `−D` instead of `D`.
    #[default]
    Standardized,
    /// `Q((9h/2)(b/h)^{1/3} − 9h/2 + 1)` applied to the moments as given.
    /// This divides by the variance instead of the standard deviation and
    /// keeps the positive-skew orientation even though `μ3 ≤ 0`; for a nearly
    /// identically distributed pair (true probability 1/2) it tends to
    /// `Q(1 + μ2/2)`.
    Literal,
}

/// Upper bound on the probability that `(n, t)` wins the peak search.
/// `same_cell` marks the noiseless peak itself, whose bound is 1.
pub fn detection_prob_bound(mt: &MomentTriple, same_cell: bool, form: WilsonHilferty) -> f64 {
    if same_cell {
        return 1.0;
    }
    let scale = mt.mu2.powf(1.5);
    if mt.mu3.abs() <= 1e-14 * scale {
        // identically distributed pair: D is symmetric about zero
        return 0.5;
    }
    let h = mt.h();
    let p = match form {
        WilsonHilferty::Literal => {
            let ratio = mt.b() / h;
            q_function(4.5 * h * ratio.cbrt() - 4.5 * h + 1.0)
        }
        WilsonHilferty::Standardized => {
            let var = 2.0 / (9.0 * h);
            // y/h = 1 + eps with y the threshold of the matched chi-square
            let c1 = if mt.mu3 > 0.0 { -mt.mu1 } else { mt.mu1 };
            let eps = c1 / (h * mt.mu2).sqrt();
            // (1 + eps)^{1/3} − 1 without cancellation
            let a = (1.0 + eps).cbrt();
            let centered = eps / (a * a + a + 1.0) + var;
            let z = centered / var.sqrt();
            if mt.mu3 > 0.0 {
                // Pr{D ≥ 0} ≈ Pr{χ²_h ≥ y}
                q_function(z)
            } else {
                // Pr{D ≥ 0} = Pr{−D ≤ 0} ≈ Pr{χ²_h ≤ y}
                normal_cdf(z)
            }
        }
    };
    p.clamp(0.0, 1.0)
}

/// Everything needed to evaluate the bound for one realized source.
#[derive(Debug, Clone)]
pub struct BoundInputs<'a> {
    pub g: ArrayView2<'a, Complex64>,
    pub proto: ProtocolConfig,
    pub nx: usize,
    pub ny: usize,
    /// True normalized electrical angles.
    pub psi: (f64, f64),
    pub rho: f64,
    pub s: Complex64,
}

/// Per-axis MSE upper bounds: squared angle error of every cell weighted by
/// its detection-probability bound.
pub fn mse_bound(inp: &BoundInputs, form: WilsonHilferty) -> Result<(f64, f64)> {
    if !(inp.rho >= 0.0) || !inp.rho.is_finite() {
        return Err(Error::InvalidArgument(format!("SNR must be finite and >= 0 (got {})", inp.rho)));
    }
    let sv = source_steering(inp.psi.0, inp.psi.1, inp.nx, inp.ny);
    let clean = clean_fields(inp.g, &sv, &Symbols::Constant(inp.s), inp.nx, inp.ny, &inp.proto)?;
    mse_bound_from_fields(clean.view(), inp.rho, inp.psi, inp.nx, inp.ny, &inp.proto, form)
}

/// Same as [`mse_bound`] starting from the noiseless fields `G Υ_{0,t} a s`
/// (antenna-by-snapshot), so callers sweeping ρ can reuse them.
pub fn mse_bound_from_fields(
    clean: ArrayView2<Complex64>,
    rho: f64,
    psi: (f64, f64),
    nx: usize,
    ny: usize,
    proto: &ProtocolConfig,
    form: WilsonHilferty,
) -> Result<(f64, f64)> {
    let shape = clean.mapv(|z| z.norm_sqr());
    if shape.iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate("noiseless field is identically zero".into()));
    }
    // the peak is located on the noiseless field, independent of ρ > 0
    let peak = argmax_cell(&shape);
    let d_peak = 2.0 * rho * shape[[peak.antenna - 1, peak.snapshot - 1]];
    let (mut bx, mut by) = (0.0, 0.0);
    for t in 1..=proto.snapshots() {
        for n in 1..=shape.nrows() {
            let cell = Cell { antenna: n, snapshot: t };
            let (px, py) = electrical_angles(cell, nx, ny, proto)?;
            let mt = moments(2.0 * rho * shape[[n - 1, t - 1]], d_peak);
            let p = detection_prob_bound(&mt, cell == peak, form);
            bx += wrap_angle(psi.0 - px).powi(2) * p;
            by += wrap_angle(psi.1 - py).powi(2) * p;
        }
    }
    Ok((bx, by))
}

/// Distance from `psi` to the nearest point of a `size`-point lattice on the
/// periodic axis `[-1, 1)`.
pub fn quantization_error(psi: f64, size: usize) -> f64 {
    let step = 2.0 / size as f64;
    let k = (wrap_angle(psi) / step).round();
    wrap_angle(psi - k * step)
}

/// Uniform quantization variance `Δ²/12` of a lattice with `size` points.
pub fn uniform_quantization_floor(size: usize) -> f64 {
    let step = 2.0 / size as f64;
    step * step / 12.0
}
