//! Monte Carlo MSE evaluation, the digital DFT baseline, geometry sweeps and
//! receiver-arrangement studies.
//!
//! Every random quantity is drawn from a ChaCha stream derived from
//! `(seed, work item)`, so results do not depend on scheduling order or the
//! number of worker threads.

use std::f64::consts::{PI, TAU};

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{mse_bound_from_fields, quantization_error, wrap_angle, WilsonHilferty};
use crate::error::{Error, Result};
use crate::estimator::{
    clean_fields, electrical_angles, energy_from_fields, peak_index, physical_angles, source_steering, zeroth_layer_phase,
    Cell, DoaEstimate, EnergyMap, ProtocolConfig, Symbols,
};
use crate::geometry::{build_propagation_matrices, dft_matrix, SimGeometry};
use crate::trainer::{train, TrainConfig, TrainReport};
use crate::wave::{cscg, SimResponse};

/// RNG for one work item.
pub fn item_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes a base seed with work-item coordinates into an independent seed.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// How source directions are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "points")]
pub enum SourceModel {
    /// Azimuth ~ U[0, 2π), elevation ~ U[0, π/2].
    UniformAngles,
    /// Uniform over the upper hemisphere: cos(elevation) ~ U[0, 1].
    UniformSolidAngle,
    /// Normalized electrical angle pairs, used in order and cycled.
    Fixed(Vec<[f64; 2]>),
}

impl Default for SourceModel {
    fn default() -> Self {
        SourceModel::UniformAngles
    }
}

/// Distribution of the transmitted symbol, held constant over a trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymbolModel {
    /// `CN(0, 1)`: Rayleigh-faded amplitude.
    #[default]
    Gaussian,
    /// Uniform phase, unit amplitude.
    UnitModulus,
}

impl SymbolModel {
    /// Maps a `CN(0, 1)` draw onto this model.
    pub fn shape(self, draw: Complex64) -> Complex64 {
        match self {
            SymbolModel::Gaussian => draw,
            SymbolModel::UnitModulus if draw.norm() > 0.0 => draw / draw.norm(),
            SymbolModel::UnitModulus => Complex64::new(1.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceTruth {
    /// Normalized electrical angles, wrapped into `[-1, 1)`.
    pub psi_x: f64,
    pub psi_y: f64,
    pub azimuth: Option<f64>,
    pub elevation: Option<f64>,
    pub symbol: Complex64,
}

// Leaves in-range values bit-exact.
fn wrap_if_outside(x: f64) -> f64 {
    if (-1.0..1.0).contains(&x) {
        x
    } else {
        wrap_angle(x)
    }
}

/// Draws source `index` (used by the fixed-list mode) and its symbol.
pub fn sample_source<R: Rng + ?Sized>(model: &SourceModel, geom: &SimGeometry, index: usize, rng: &mut R) -> Result<SourceTruth> {
    let (psi_x, psi_y, azimuth, elevation) = match model {
        SourceModel::UniformAngles | SourceModel::UniformSolidAngle => {
            let az = rng.random::<f64>() * TAU;
            let el = if matches!(model, SourceModel::UniformAngles) {
                rng.random::<f64>() * PI / 2.0
            } else {
                rng.random::<f64>().acos()
            };
            let (x, y) = crate::estimator::direction_to_electrical(az, el, geom);
            (x, y, Some(az), Some(el))
        }
        SourceModel::Fixed(points) => {
            if points.is_empty() {
                return Err(Error::InvalidArgument("fixed source list is empty".into()));
            }
            let [x, y] = points[index % points.len()];
            let (az, el) = match physical_angles(x, y, geom, false) {
                Ok((a, e)) => (Some(a), Some(e)),
                Err(_) => (None, None),
            };
            (x, y, az, el)
        }
    };
    Ok(SourceTruth {
        psi_x: wrap_if_outside(psi_x),
        psi_y: wrap_if_outside(psi_y),
        azimuth,
        elevation,
        symbol: cscg(rng),
    })
}

/// Expected per-axis squared distance from the source angle to the nearest
/// lattice point, by midpoint integration over the source distribution.
pub fn source_quantization_floor(model: &SourceModel, geom: &SimGeometry, proto: &ProtocolConfig, resolution: usize) -> (f64, f64) {
    let (lx, ly) = (geom.nx * proto.tx, geom.ny * proto.ty);
    let err = |x: f64, y: f64| (quantization_error(x, lx).powi(2), quantization_error(y, ly).powi(2));
    match model {
        SourceModel::Fixed(points) => {
            let n = points.len().max(1) as f64;
            points.iter().fold((0.0, 0.0), |acc, [x, y]| {
                let (ex, ey) = err(*x, *y);
                (acc.0 + ex / n, acc.1 + ey / n)
            })
        }
        _ => {
            let solid = matches!(model, SourceModel::UniformSolidAngle);
            let mut acc = (0.0, 0.0);
            for i in 0..resolution {
                let u = (i as f64 + 0.5) / resolution as f64;
                let el = if solid { u.acos() } else { u * PI / 2.0 };
                for j in 0..resolution {
                    let az = (j as f64 + 0.5) / resolution as f64 * TAU;
                    let (x, y) = crate::estimator::direction_to_electrical(az, el, geom);
                    let (ex, ey) = err(x, y);
                    acc.0 += ex;
                    acc.1 += ey;
                }
            }
            let n = (resolution * resolution) as f64;
            (acc.0 / n, acc.1 / n)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    pub trials: usize,
    /// Effective SNRs in dB; `inf` runs the noiseless protocol.
    pub snr_db: Vec<f64>,
    pub protocol: ProtocolConfig,
    pub seed: u64,
    pub source: SourceModel,
    pub symbol: SymbolModel,
    pub bound_form: WilsonHilferty,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            trials: 1000,
            snr_db: vec![0.0, 10.0, 20.0, 30.0],
            protocol: ProtocolConfig { tx: 4, ty: 4 },
            seed: 0,
            source: SourceModel::UniformAngles,
            symbol: SymbolModel::Gaussian,
            bound_form: WilsonHilferty::Standardized,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials: must be at least 1".into()));
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
            return Err(Error::InvalidArgument("snr_db: need at least one value, each finite or +inf".into()));
        }
        self.protocol.validate()
    }
}

/// Minimum trial count below which aggregates are flagged as unreliable.
pub const MIN_RELIABLE_TRIALS: usize = 30;

/// Aggregates for one effective SNR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McPoint {
    pub snr_db: f64,
    pub trials: usize,
    pub mse_x: f64,
    pub mse_y: f64,
    /// Standard errors of the MSE estimates.
    pub se_x: f64,
    pub se_y: f64,
    /// Bound averaged over the realized sources; `None` in the noiseless case.
    pub bound_x: Option<f64>,
    pub bound_y: Option<f64>,
    pub bound_se_x: Option<f64>,
    pub bound_se_y: Option<f64>,
    /// Estimates whose electrical angles have no physical direction.
    pub unrealizable: usize,
    pub low_trials: bool,
}

impl McPoint {
    /// Per-axis average of the two MSEs.
    pub fn mse(&self) -> f64 {
        0.5 * (self.mse_x + self.mse_y)
    }

    pub fn se(&self) -> f64 {
        0.5 * (self.se_x * self.se_x + self.se_y * self.se_y).sqrt()
    }

    pub fn bound(&self) -> Option<f64> {
        Some(0.5 * (self.bound_x? + self.bound_y?))
    }

    pub fn bound_se(&self) -> Option<f64> {
        Some(0.5 * (self.bound_se_x?.powi(2) + self.bound_se_y?.powi(2)).sqrt())
    }
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Converts an effective SNR (dB) into the physical SNR multiplying `G`:
/// `ρ = γ |β|²`, so that `√ρ G ≈ √γ F`.
pub fn physical_snr(effective_db: f64, beta: Complex64) -> f64 {
    10f64.powf(effective_db / 10.0) * beta.norm_sqr()
}

struct TrialOutcome {
    err: Vec<(f64, f64)>,
    bound: Vec<Option<(f64, f64)>>,
    unrealizable: Vec<bool>,
}

fn estimate_errors(map: &EnergyMap, truth: &SourceTruth, geom: &SimGeometry, proto: &ProtocolConfig) -> Result<((f64, f64), bool)> {
    let cell = peak_index(map);
    let (px, py) = electrical_angles(cell, geom.nx, geom.ny, proto)?;
    let unrealizable = physical_angles(px, py, geom, false).is_err();
    Ok((
        (wrap_angle(truth.psi_x - px).powi(2), wrap_angle(truth.psi_y - py).powi(2)),
        unrealizable,
    ))
}

fn aggregate(cfg: &McConfig, outcomes: &[TrialOutcome]) -> Vec<McPoint> {
    cfg.snr_db
        .iter()
        .enumerate()
        .map(|(k, &snr)| {
            let ex: Vec<f64> = outcomes.iter().map(|o| o.err[k].0).collect();
            let ey: Vec<f64> = outcomes.iter().map(|o| o.err[k].1).collect();
            let (mse_x, se_x) = mean_se(&ex);
            let (mse_y, se_y) = mean_se(&ey);
            let bounds: Option<Vec<(f64, f64)>> = outcomes.iter().map(|o| o.bound[k]).collect();
            let (bx, by) = match bounds {
                Some(b) => {
                    let bx: Vec<f64> = b.iter().map(|v| v.0).collect();
                    let by: Vec<f64> = b.iter().map(|v| v.1).collect();
                    (Some(mean_se(&bx)), Some(mean_se(&by)))
                }
                None => (None, None),
            };
            McPoint {
                snr_db: snr,
                trials: outcomes.len(),
                mse_x,
                mse_y,
                se_x,
                se_y,
                bound_x: bx.map(|v| v.0),
                bound_y: by.map(|v| v.0),
                bound_se_x: bx.map(|v| v.1),
                bound_se_y: by.map(|v| v.1),
                unrealizable: outcomes.iter().filter(|o| o.unrealizable[k]).count(),
                low_trials: outcomes.len() < MIN_RELIABLE_TRIALS,
            }
        })
        .collect()
}

/// Stream of the source draw of a trial; shared by every SNR point and by
/// the digital baseline, so all curves see the same sources.
fn source_stream(trial: usize) -> u64 {
    trial as u64
}

fn noise_stream(snr_index: usize, trial: usize) -> u64 {
    ((snr_index as u64 + 1) << 32) | trial as u64
}

/// Empirical MSE of the SIM-based estimator and the averaged bound, per
/// effective SNR.
pub fn run_monte_carlo(response: &SimResponse, geom: &SimGeometry, cfg: &McConfig) -> Result<Vec<McPoint>> {
    cfg.validate()?;
    let proto = cfg.protocol;
    if response.g.dim() != (geom.n(), geom.n()) {
        return Err(crate::error::dim_err("run_monte_carlo response", geom.n(), format!("{:?}", response.g.dim())));
    }
    let outcomes = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| -> Result<TrialOutcome> {
            let mut rng = item_rng(cfg.seed, source_stream(trial));
            let mut truth = sample_source(&cfg.source, geom, trial, &mut rng)?;
            truth.symbol = cfg.symbol.shape(truth.symbol);
            let sv = source_steering(truth.psi_x, truth.psi_y, geom.nx, geom.ny);
            let clean = clean_fields(response.g.view(), &sv, &Symbols::Constant(truth.symbol), geom.nx, geom.ny, &proto)?;
            let mut out = TrialOutcome {
                err: vec![],
                bound: vec![],
                unrealizable: vec![],
            };
            for (k, &snr) in cfg.snr_db.iter().enumerate() {
                let (map, bound) = if snr == f64::INFINITY {
                    (energy_from_fields(clean.view(), 1.0, None)?, None)
                } else {
                    let rho = physical_snr(snr, response.beta);
                    let mut nrng = item_rng(cfg.seed, noise_stream(k, trial));
                    let noise = crate::estimator::draw_noise(clean.nrows(), clean.ncols(), &mut nrng);
                    let map = energy_from_fields(clean.view(), rho, Some(noise.view()))?;
                    let b = mse_bound_from_fields(clean.view(), rho, (truth.psi_x, truth.psi_y), geom.nx, geom.ny, &proto, cfg.bound_form)?;
                    (map, Some(b))
                };
                let (e, unreal) = estimate_errors(&map, &truth, geom, &proto)?;
                out.err.push(e);
                out.bound.push(bound);
                out.unrealizable.push(unreal);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(cfg, &outcomes))
}

/// Applies the 2D DFT `F` to every column of `x` (an `N_x N_y`-by-`T`
/// matrix) with two passes of 1D transforms.
pub fn apply_dft2(x: ArrayView2<Complex64>, nx: usize, ny: usize) -> Array2<Complex64> {
    let twiddle = |n: usize| -> Vec<Complex64> { (0..n).map(|k| Complex64::from_polar(1.0, -TAU * k as f64 / n as f64)).collect() };
    let (wx, wy) = (twiddle(nx), twiddle(ny));
    let mut out = Array2::zeros(x.dim());
    let mut tmp = vec![Complex64::new(0.0, 0.0); nx * ny];
    for (col_in, mut col_out) in x.columns().into_iter().zip(out.columns_mut()) {
        for iy in 0..ny {
            for kx in 0..nx {
                let mut acc = Complex64::new(0.0, 0.0);
                for ix in 0..nx {
                    acc += wx[(kx * ix) % nx] * col_in[iy * nx + ix];
                }
                tmp[iy * nx + kx] = acc;
            }
        }
        for ky in 0..ny {
            for kx in 0..nx {
                let mut acc = Complex64::new(0.0, 0.0);
                for iy in 0..ny {
                    acc += wy[(ky * iy) % ny] * tmp[iy * nx + kx];
                }
                col_out[ky * nx + kx] = acc;
            }
        }
    }
    out
}

/// Phase-shifted aperture samples `Υ_{0,t} a s` of every snapshot,
/// element-by-snapshot.
pub fn aperture_samples(truth: &SourceTruth, nx: usize, ny: usize, proto: &ProtocolConfig) -> Result<Array2<Complex64>> {
    let sv = source_steering(truth.psi_x, truth.psi_y, nx, ny);
    let n = nx * ny;
    let mut out = Array2::zeros((n, proto.snapshots()));
    for t in 0..proto.snapshots() {
        for i in 0..n {
            let ph = zeroth_layer_phase(i + 1, t + 1, nx, ny, proto)?;
            out[[i, t]] = Complex64::from_polar(1.0, ph) * sv.entries[i] * truth.symbol;
        }
    }
    Ok(out)
}

/// Conventional digital estimator: samples `√γ Υ_{0,t} a s + u_t` at the
/// array elements, applies the exact 2D DFT and runs the same peak search.
/// Element noise is `CN(0, 1/N)` so that after the transform every bin
/// carries unit-variance noise, the same as the wave-domain receiver.
pub fn digital_baseline(
    truth: &SourceTruth,
    geom: &SimGeometry,
    proto: &ProtocolConfig,
    gamma: f64,
    element_noise: Option<ArrayView2<Complex64>>,
) -> Result<(DoaEstimate, EnergyMap)> {
    let (nx, ny) = (geom.nx, geom.ny);
    let mut y = aperture_samples(truth, nx, ny, proto)?.mapv(|z| z * gamma.sqrt());
    if let Some(u) = element_noise {
        if u.dim() != y.dim() {
            return Err(crate::error::dim_err("element noise", format!("{:?}", y.dim()), format!("{:?}", u.dim())));
        }
        y += &u;
    }
    let spectrum = apply_dft2(y.view(), nx, ny);
    let map = EnergyMap::new(spectrum.mapv(|z| z.norm_sqr()))?;
    let est = crate::estimator::estimate(&map, geom, proto)?;
    Ok((est, map))
}

/// `CN(0, 1/N)` element noise for the digital path.
pub fn draw_element_noise<R: Rng + ?Sized>(n: usize, snapshots: usize, rng: &mut R) -> Array2<Complex64> {
    let scale = 1.0 / (n as f64).sqrt();
    crate::estimator::draw_noise(n, snapshots, rng).mapv(|z| z * scale)
}

/// Empirical MSE of the digital baseline with the same sources as
/// [`run_monte_carlo`] under the same config.
pub fn run_digital_monte_carlo(geom: &SimGeometry, cfg: &McConfig) -> Result<Vec<McPoint>> {
    cfg.validate()?;
    let proto = cfg.protocol;
    let outcomes = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| -> Result<TrialOutcome> {
            let mut rng = item_rng(cfg.seed, source_stream(trial));
            let mut truth = sample_source(&cfg.source, geom, trial, &mut rng)?;
            truth.symbol = cfg.symbol.shape(truth.symbol);
            let mut out = TrialOutcome {
                err: vec![],
                bound: vec![],
                unrealizable: vec![],
            };
            for (k, &snr) in cfg.snr_db.iter().enumerate() {
                let (est, _) = if snr == f64::INFINITY {
                    digital_baseline(&truth, geom, &proto, 1.0, None)?
                } else {
                    let mut nrng = item_rng(cfg.seed, noise_stream(k, trial));
                    let u = draw_element_noise(geom.n(), proto.snapshots(), &mut nrng);
                    digital_baseline(&truth, geom, &proto, 10f64.powf(snr / 10.0), Some(u.view()))?
                };
                out.err.push((
                    wrap_angle(truth.psi_x - est.psi_x).powi(2),
                    wrap_angle(truth.psi_y - est.psi_y).powi(2),
                ));
                out.bound.push(None);
                out.unrealizable.push(est.elevation.is_none());
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(cfg, &outcomes))
}

/// Peak-index agreement between the wave-domain and digital paths on shared
/// noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub trials: usize,
    pub agree: usize,
}

impl AgreementReport {
    pub fn rate(&self) -> f64 {
        self.agree as f64 / self.trials as f64
    }
}

/// Runs both estimators on the same sources and the same noise realization.
/// The digital path sees element noise `u`; the wave-domain receiver sees
/// `e^{−j∠β} F u`, the same realization mapped through the transform and
/// expressed in the frame of `√ρ G ≈ e^{−j∠β} √γ F`. With `G = F` and
/// `β = 1` the two energy maps coincide up to rounding.
pub fn shared_noise_agreement(
    response: &SimResponse,
    geom: &SimGeometry,
    proto: &ProtocolConfig,
    snr_db: f64,
    trials: usize,
    source: &SourceModel,
    seed: u64,
) -> Result<AgreementReport> {
    let gamma = 10f64.powf(snr_db / 10.0);
    let rho = physical_snr(snr_db, response.beta);
    let rot = Complex64::from_polar(1.0, -response.beta.arg());
    let agree = (0..trials)
        .into_par_iter()
        .map(|trial| -> Result<bool> {
            let mut rng = item_rng(seed, source_stream(trial));
            let truth = sample_source(source, geom, trial, &mut rng)?;
            let mut nrng = item_rng(seed, noise_stream(0, trial));
            let u = draw_element_noise(geom.n(), proto.snapshots(), &mut nrng);
            let (digital, _) = digital_baseline(&truth, geom, proto, gamma, Some(u.view()))?;
            let sv = source_steering(truth.psi_x, truth.psi_y, geom.nx, geom.ny);
            let clean = clean_fields(response.g.view(), &sv, &Symbols::Constant(truth.symbol), geom.nx, geom.ny, proto)?;
            let rx_noise = apply_dft2(u.view(), geom.nx, geom.ny).mapv(|z| z * rot);
            let map = energy_from_fields(clean.view(), rho, Some(rx_noise.view()))?;
            Ok(peak_index(&map) == digital.cell)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|a| *a)
        .count();
    Ok(AgreementReport { trials, agree })
}

/// Grid of geometries to train, all lengths in wavelengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Side of the square input/receiver array (2 for a (2,2) DFT).
    pub n_side: usize,
    pub thickness_lambda: Vec<f64>,
    pub layers: Vec<usize>,
    /// Meta-atoms per layer; must be perfect squares.
    pub atoms: Vec<usize>,
    pub spacing_lambda: Vec<f64>,
    pub runs: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_wavelength")]
    pub wavelength: f64,
}

fn default_wavelength() -> f64 {
    crate::geometry::DEFAULT_WAVELENGTH
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    /// Fewer meta-atoms per layer than antennas: trained, but an exact fit
    /// is impossible.
    Infeasible,
    /// Rejected before training.
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub thickness_lambda: f64,
    pub layers: usize,
    pub atoms: usize,
    pub spacing_lambda: f64,
    pub status: CellStatus,
    pub runs: usize,
    pub mean_db: f64,
    pub min_db: f64,
    pub max_db: f64,
    pub note: String,
}

fn perfect_square(m: usize) -> Option<usize> {
    let r = (m as f64).sqrt().round() as usize;
    (r * r == m).then_some(r)
}

/// Summary of repeated trainings of one geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub runs: usize,
    pub mean_db: f64,
    pub min_db: f64,
    pub max_db: f64,
    pub best: Option<TrainReport>,
}

/// Trains `runs` independent initializations of one geometry; run `k` uses
/// seed `derive_seed(train.seed, cell, k)`.
pub fn train_runs(geom: &SimGeometry, train_cfg: &TrainConfig, runs: usize, cell: u64) -> Result<RunSummary> {
    let props = build_propagation_matrices(geom)?;
    let target = dft_matrix(geom.nx, geom.ny).matrix;
    let reports = (0..runs)
        .into_par_iter()
        .map(|k| {
            let cfg = TrainConfig {
                seed: derive_seed(train_cfg.seed, cell, k as u64),
                restarts: 1,
                ..train_cfg.clone()
            };
            train(&props, target.view(), &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let dbs: Vec<f64> = reports.iter().map(|r| r.loss.db).collect();
    let best = reports.into_iter().min_by(|a, b| a.loss.value.total_cmp(&b.loss.value));
    Ok(RunSummary {
        runs,
        mean_db: dbs.iter().sum::<f64>() / dbs.len().max(1) as f64,
        min_db: dbs.iter().cloned().fold(f64::INFINITY, f64::min),
        max_db: dbs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        best,
    })
}

/// Trains every cell of the grid and reports the mean normalized loss (dB)
/// over runs. Invalid cells are reported with status `Invalid`.
pub fn ablation_sweep(spec: &SweepSpec) -> Result<Vec<SweepCell>> {
    if spec.runs == 0 {
        return Err(Error::InvalidArgument("runs: must be at least 1".into()));
    }
    spec.train.validate()?;
    let mut cells = Vec::new();
    for &t in &spec.thickness_lambda {
        for &l in &spec.layers {
            for &m in &spec.atoms {
                for &s in &spec.spacing_lambda {
                    cells.push((t, l, m, s));
                }
            }
        }
    }
    let mut out = Vec::with_capacity(cells.len());
    for (idx, &(t, l, m, s)) in cells.iter().enumerate() {
        let mut cell = SweepCell {
            thickness_lambda: t,
            layers: l,
            atoms: m,
            spacing_lambda: s,
            status: CellStatus::Ok,
            runs: 0,
            mean_db: f64::NAN,
            min_db: f64::NAN,
            max_db: f64::NAN,
            note: String::new(),
        };
        let side = match perfect_square(m) {
            Some(side) if side > 0 => side,
            _ => {
                cell.status = CellStatus::Invalid;
                cell.note = format!("{m} meta-atoms do not form a square layer");
                out.push(cell);
                continue;
            }
        };
        let geom = SimGeometry::square(spec.wavelength, spec.n_side, t, l, side, s);
        if let Err(e) = geom.validate() {
            cell.status = CellStatus::Invalid;
            cell.note = e.to_string();
            out.push(cell);
            continue;
        }
        if m < spec.n_side * spec.n_side {
            cell.status = CellStatus::Infeasible;
            cell.note = "fewer meta-atoms than antennas".into();
        }
        match train_runs(&geom, &spec.train, spec.runs, idx as u64) {
            Ok(sum) => {
                cell.runs = sum.runs;
                cell.mean_db = sum.mean_db;
                cell.min_db = sum.min_db;
                cell.max_db = sum.max_db;
            }
            Err(e) => {
                cell.status = CellStatus::Invalid;
                cell.note = e.to_string();
            }
        }
        out.push(cell);
    }
    Ok(out)
}

/// Receiver-arrangement study: base stack with varied receiver spacing,
/// rotation and layer count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReceiverStudySpec {
    pub n_side: usize,
    pub thickness_lambda: f64,
    pub layers: Vec<usize>,
    pub atoms_side: usize,
    pub spacing_lambda: f64,
    /// Receiver spacing, in wavelengths, used on both axes.
    pub receiver_spacing_lambda: Vec<f64>,
    /// Receiver rotation in radians.
    #[serde(default = "zero_rotation")]
    pub rotation: Vec<f64>,
    pub runs: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_wavelength")]
    pub wavelength: f64,
}

fn zero_rotation() -> Vec<f64> {
    vec![0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceiverPoint {
    pub layers: usize,
    pub receiver_spacing_lambda: f64,
    pub rotation: f64,
    pub runs: usize,
    pub mean_db: f64,
    pub min_db: f64,
    pub max_db: f64,
}

impl ReceiverStudySpec {
    /// Geometry of one study point.
    pub fn geometry(&self, layers: usize, spacing: f64, rotation: f64) -> SimGeometry {
        let mut g = SimGeometry::square(self.wavelength, self.n_side, self.thickness_lambda, layers, self.atoms_side, self.spacing_lambda);
        g.ux = spacing * self.wavelength;
        g.uy = spacing * self.wavelength;
        g.rotation = rotation;
        g
    }
}

/// Trains every `(layers, spacing, rotation)` point. Runs use the same seeds
/// as [`train_runs`] with cell index 0, so a point whose geometry equals the
/// standard stack reproduces the standard training exactly.
pub fn receiver_study(spec: &ReceiverStudySpec) -> Result<Vec<ReceiverPoint>> {
    if spec.runs == 0 {
        return Err(Error::InvalidArgument("runs: must be at least 1".into()));
    }
    let mut out = Vec::new();
    for &l in &spec.layers {
        for &u in &spec.receiver_spacing_lambda {
            for &w in &spec.rotation {
                let geom = spec.geometry(l, u, w);
                geom.validate()?;
                let sum = train_runs(&geom, &spec.train, spec.runs, 0)?;
                out.push(ReceiverPoint {
                    layers: l,
                    receiver_spacing_lambda: u,
                    rotation: w,
                    runs: sum.runs,
                    mean_db: sum.mean_db,
                    min_db: sum.min_db,
                    max_db: sum.max_db,
                });
            }
        }
    }
    Ok(out)
}

/// Cell at the lattice point nearest to the given angles.
pub fn nearest_cell(psi_x: f64, psi_y: f64, nx: usize, ny: usize, proto: &ProtocolConfig) -> Result<Cell> {
    let lattice = |psi: f64, n: usize, t: usize| {
        let size = n * t;
        let k = ((wrap_angle(psi) * size as f64 / 2.0).round() as i64).rem_euclid(size as i64) as usize;
        (k / t + 1, k % t + 1)
    };
    let (ix, tx) = lattice(psi_x, nx, proto.tx);
    let (iy, ty) = lattice(psi_y, ny, proto.ty);
    Ok(Cell {
        antenna: crate::geometry::grid_to_linear(ix, iy, nx),
        snapshot: crate::geometry::grid_to_linear(tx, ty, proto.tx),
    })
}
