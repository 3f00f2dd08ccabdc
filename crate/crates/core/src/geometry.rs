//! Physical layout of the metasurface stack and the static matrices derived
//! from it: grid index maps, Rayleigh-Sommerfeld propagation coefficients,
//! planar-array steering vectors and the 2D DFT target.
//!
//! Indices in this module are 1-based on the domain side (`linear_to_grid`,
//! the distance helpers) and 0-based once they land in an `ndarray` matrix.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default carrier wavelength (60 GHz).
pub const DEFAULT_WAVELENGTH: f64 = 5e-3;

/// Complete physical description of the stack, the input layer and the
/// receiver array. Lengths are in meters, the rotation in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimGeometry {
    pub wavelength: f64,
    /// Input (zeroth) layer grid.
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    /// Intermediate layer grid.
    pub mx: usize,
    pub my: usize,
    pub sx: f64,
    pub sy: f64,
    /// Number of programmable layers, not counting the input layer.
    pub layers: usize,
    pub thickness: f64,
    /// Receiver grid.
    pub rx: usize,
    pub ry: usize,
    pub ux: f64,
    pub uy: f64,
    /// In-plane receiver rotation about the array center.
    pub rotation: f64,
}

impl SimGeometry {
    /// Square stack with square input/receiver arrays, everything expressed
    /// in wavelengths: `(T_SIM, L, M, s_x)` plus the `n_side x n_side` input
    /// grid at `d = lambda/2`. The receiver is isomorphic to the input layer.
    pub fn square(
        wavelength: f64,
        n_side: usize,
        thickness_lambda: f64,
        layers: usize,
        m_side: usize,
        spacing_lambda: f64,
    ) -> Self {
        let d = wavelength / 2.0;
        let s = spacing_lambda * wavelength;
        Self {
            wavelength,
            nx: n_side,
            ny: n_side,
            dx: d,
            dy: d,
            mx: m_side,
            my: m_side,
            sx: s,
            sy: s,
            layers,
            thickness: thickness_lambda * wavelength,
            rx: n_side,
            ry: n_side,
            ux: d,
            uy: d,
            rotation: 0.0,
        }
    }

    /// Best (2,2) configuration of the ablation study: (9λ, 7, 121, λ/2).
    pub fn reference_2x2() -> Self {
        Self::square(DEFAULT_WAVELENGTH, 2, 9.0, 7, 11, 0.5)
    }

    /// Best (4,4) configuration of the ablation study: (12λ, 13, 225, 4λ/9).
    pub fn reference_4x4() -> Self {
        Self::square(DEFAULT_WAVELENGTH, 4, 12.0, 13, 15, 4.0 / 9.0)
    }

    pub fn n(&self) -> usize {
        self.nx * self.ny
    }

    pub fn m(&self) -> usize {
        self.mx * self.my
    }

    pub fn r(&self) -> usize {
        self.rx * self.ry
    }

    pub fn layer_gap(&self) -> f64 {
        self.thickness / self.layers as f64
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    /// True when the receiver repeats the input layer layout exactly.
    pub fn receiver_isomorphic(&self) -> bool {
        self.rx == self.nx
            && self.ry == self.ny
            && self.ux == self.dx
            && self.uy == self.dy
            && self.rotation == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("nx", self.nx),
            ("ny", self.ny),
            ("mx", self.mx),
            ("my", self.my),
            ("layers", self.layers),
            ("rx", self.rx),
            ("ry", self.ry),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        let lengths = [
            ("wavelength", self.wavelength),
            ("dx", self.dx),
            ("dy", self.dy),
            ("sx", self.sx),
            ("sy", self.sy),
            ("thickness", self.thickness),
            ("ux", self.ux),
            ("uy", self.uy),
        ];
        for (name, v) in lengths {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and > 0 (got {v})"
                )));
            }
        }
        if !self.rotation.is_finite() {
            return Err(Error::InvalidArgument("rotation must be finite".into()));
        }
        Ok(())
    }
}

/// Maps a 1-based linear index onto 1-based `(ix, iy)` grid coordinates,
/// x running fastest.
pub fn linear_to_grid(idx: usize, width: usize, height: usize) -> Result<(usize, usize)> {
    if width == 0 || idx == 0 || idx > width * height {
        return Err(Error::InvalidArgument(format!(
            "index {idx} outside a {width}x{height} grid"
        )));
    }
    let iy = idx.div_ceil(width);
    let ix = idx - (iy - 1) * width;
    Ok((ix, iy))
}

/// Inverse of [`linear_to_grid`].
pub fn grid_to_linear(ix: usize, iy: usize, width: usize) -> usize {
    (iy - 1) * width + ix
}

/// Distance between atom `m` on one intermediate layer and atom `m2` on the
/// next one.
pub fn intra_sim_distance(m: usize, m2: usize, geom: &SimGeometry) -> Result<f64> {
    let (ax, ay) = linear_to_grid(m, geom.mx, geom.my)?;
    let (bx, by) = linear_to_grid(m2, geom.mx, geom.my)?;
    let ddx = (ax as f64 - bx as f64) * geom.sx;
    let ddy = (ay as f64 - by as f64) * geom.sy;
    let gap = geom.layer_gap();
    Ok((ddx * ddx + ddy * ddy + gap * gap).sqrt())
}

/// Center-aligned in-plane offset of element `(ix, iy)` on a `w x h` grid.
fn centered(ix: usize, iy: usize, w: usize, h: usize, px: f64, py: f64) -> (f64, f64) {
    (
        (ix as f64 - (1.0 + w as f64) / 2.0) * px,
        (iy as f64 - (1.0 + h as f64) / 2.0) * py,
    )
}

/// Distance between input element `n` and first-layer atom `m`, both grids
/// centered on the stack axis.
pub fn input_to_first_distance(m: usize, n: usize, geom: &SimGeometry) -> Result<f64> {
    let (mx, my) = linear_to_grid(m, geom.mx, geom.my)?;
    let (nx, ny) = linear_to_grid(n, geom.nx, geom.ny)?;
    let (amx, amy) = centered(mx, my, geom.mx, geom.my, geom.sx, geom.sy);
    let (anx, any) = centered(nx, ny, geom.nx, geom.ny, geom.dx, geom.dy);
    let ex = amx - anx;
    let ey = amy - any;
    let gap = geom.layer_gap();
    Ok((ex * ex + ey * ey + gap * gap).sqrt())
}

/// Distance between last-layer atom `m` and receiver element `r`. Receiver
/// positions are the centered `u`-spaced grid rotated in-plane by the
/// configured angle about the array center.
pub fn last_to_receiver_distance(r: usize, m: usize, geom: &SimGeometry) -> Result<f64> {
    let (mx, my) = linear_to_grid(m, geom.mx, geom.my)?;
    let (rx, ry) = linear_to_grid(r, geom.rx, geom.ry)?;
    let (amx, amy) = centered(mx, my, geom.mx, geom.my, geom.sx, geom.sy);
    let (px, py) = centered(rx, ry, geom.rx, geom.ry, geom.ux, geom.uy);
    let (sin, cos) = geom.rotation.sin_cos();
    let qx = cos * px - sin * py;
    let qy = sin * px + cos * py;
    let ex = amx - qx;
    let ey = amy - qy;
    let gap = geom.layer_gap();
    Ok((ex * ex + ey * ey + gap * gap).sqrt())
}

/// Rayleigh-Sommerfeld transmission coefficient between two cells
/// `distance` apart, the emitting cell having area `emit_area`.
pub fn rs_coefficient(distance: f64, emit_area: f64, geom: &SimGeometry) -> Result<Complex64> {
    if !(distance > 0.0) || !distance.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "propagation distance must be > 0 (got {distance})"
        )));
    }
    if !(emit_area > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "emitting area must be > 0 (got {emit_area})"
        )));
    }
    let kd = geom.wavenumber() * distance;
    let amp = emit_area * geom.layer_gap() / (2.0 * PI * distance.powi(3));
    Ok(amp * Complex64::new(1.0, -kd) * Complex64::from_polar(1.0, kd))
}

/// Attenuation matrices of the stack: `w0` (M x N) from the input layer,
/// `inner[l-1]` (M x M) from layer `l` to `l+1`, and `wl` (R x M) from the
/// last layer to the receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationSet {
    pub w0: Array2<Complex64>,
    pub inner: Vec<Array2<Complex64>>,
    pub wl: Array2<Complex64>,
}

impl PropagationSet {
    pub fn layers(&self) -> usize {
        self.inner.len() + 1
    }

    pub fn n(&self) -> usize {
        self.w0.ncols()
    }

    pub fn m(&self) -> usize {
        self.w0.nrows()
    }

    pub fn r(&self) -> usize {
        self.wl.nrows()
    }
}

/// Builds every propagation matrix of the stack.
///
/// The emitting cell area is `dx*dy` for the input layer and `sx*sy` between
/// intermediate layers. The receiver matrix uses the input cell area too, so
/// an isomorphic receiver gives exactly `W_L = W_0^T`; the area only sets a
/// global scale that the fitted scale factor absorbs.
pub fn build_propagation_matrices(geom: &SimGeometry) -> Result<PropagationSet> {
    geom.validate()?;
    let (n, m, r) = (geom.n(), geom.m(), geom.r());
    let input_area = geom.dx * geom.dy;
    let atom_area = geom.sx * geom.sy;

    let mut w0 = Array2::zeros((m, n));
    for mi in 0..m {
        for ni in 0..n {
            let d = input_to_first_distance(mi + 1, ni + 1, geom)?;
            w0[[mi, ni]] = rs_coefficient(d, input_area, geom)?;
        }
    }

    // Every inter-layer gap is identical, so one matrix serves all of them.
    let inner = if geom.layers > 1 {
        let mut w = Array2::zeros((m, m));
        for a in 0..m {
            for b in 0..m {
                let d = intra_sim_distance(a + 1, b + 1, geom)?;
                w[[a, b]] = rs_coefficient(d, atom_area, geom)?;
            }
        }
        vec![w; geom.layers - 1]
    } else {
        Vec::new()
    };

    let wl = if geom.receiver_isomorphic() {
        w0.t().to_owned()
    } else {
        let mut wl = Array2::zeros((r, m));
        for ri in 0..r {
            for mi in 0..m {
                let d = last_to_receiver_distance(ri + 1, mi + 1, geom)?;
                wl[[ri, mi]] = rs_coefficient(d, input_area, geom)?;
            }
        }
        wl
    };

    Ok(PropagationSet { w0, inner, wl })
}

/// Planar-array response to a plane wave, `a = a_y ⊗ a_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector {
    pub entries: Array1<Complex64>,
    /// Per-element phase progressions in radians.
    pub psi_x: f64,
    pub psi_y: f64,
}

pub fn steering_vector(psi_x: f64, psi_y: f64, nx: usize, ny: usize) -> SteeringVector {
    let entries = Array1::from_shape_fn(nx * ny, |i| {
        let ix = (i % nx) as f64;
        let iy = (i / nx) as f64;
        Complex64::from_polar(1.0, psi_x * ix + psi_y * iy)
    });
    SteeringVector {
        entries,
        psi_x,
        psi_y,
    }
}

/// The 2D DFT matrix the stack is trained to reproduce.
#[derive(Debug, Clone, PartialEq)]
pub struct DftTarget {
    pub matrix: Array2<Complex64>,
    pub nx: usize,
    pub ny: usize,
}

impl DftTarget {
    pub fn n(&self) -> usize {
        self.nx * self.ny
    }
}

pub fn dft_matrix(nx: usize, ny: usize) -> DftTarget {
    let n = nx * ny;
    // Reduce the exponent modulo the axis length so large grids keep full
    // precision in the phase argument.
    let matrix = Array2::from_shape_fn((n, n), |(a, b)| {
        let (ax, ay) = (a % nx, a / nx);
        let (bx, by) = (b % nx, b / nx);
        let px = ((ax * bx) % nx) as f64 / nx as f64;
        let py = ((ay * by) % ny) as f64 / ny as f64;
        Complex64::from_polar(1.0, -2.0 * PI * px) * Complex64::from_polar(1.0, -2.0 * PI * py)
    });
    DftTarget { matrix, nx, ny }
}

/// Outcome of the rank argument: a perfect fit needs at least as many
/// meta-atoms per layer as grid points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feasibility {
    pub meta_atoms: usize,
    pub grid_points: usize,
    pub feasible: bool,
}

pub fn check_feasibility(geom: &SimGeometry) -> Feasibility {
    let (m, n) = (geom.m(), geom.n());
    Feasibility {
        meta_atoms: m,
        grid_points: n,
        feasible: m >= n,
    }
}
