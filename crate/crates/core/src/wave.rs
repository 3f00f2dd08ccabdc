//! End-to-end response of the stack, fit loss against the DFT target and
//! noisy snapshot synthesis.

use std::f64::consts::TAU;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::geometry::{PropagationSet, SteeringVector};

/// Reported normalized loss for an exact fit, in place of negative infinity.
pub const PERFECT_FIT_DB: f64 = -400.0;

/// Trainable phase shifts of the programmable layers, one vector of length
/// M per layer, kept reduced to `[0, 2π)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseStack {
    layers: Vec<Vec<f64>>,
}

pub fn wrap_phase(x: f64) -> f64 {
    let r = x.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if r >= TAU {
        0.0
    } else {
        r
    }
}

impl PhaseStack {
    pub fn new(layers: Vec<Vec<f64>>) -> Result<Self> {
        let m = layers.first().map(Vec::len).unwrap_or(0);
        if layers.is_empty() || m == 0 {
            return Err(Error::InvalidArgument("phase stack needs L >= 1 layers of M >= 1 atoms".into()));
        }
        if layers.iter().any(|l| l.len() != m) {
            return Err(Error::InvalidArgument("phase layers differ in length".into()));
        }
        if layers.iter().flatten().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("non-finite phase".into()));
        }
        Ok(Self {
            layers: layers
                .into_iter()
                .map(|l| l.into_iter().map(wrap_phase).collect())
                .collect(),
        })
    }

    pub fn zeros(layers: usize, atoms: usize) -> Self {
        Self {
            layers: vec![vec![0.0; atoms]; layers],
        }
    }

    /// i.i.d. Uniform[0, 2π) phases.
    pub fn random<R: Rng + ?Sized>(layers: usize, atoms: usize, rng: &mut R) -> Self {
        let dist = Uniform::new(0.0, TAU).expect("valid range");
        Self {
            layers: (0..layers)
                .map(|_| (0..atoms).map(|_| wrap_phase(dist.sample(rng))).collect())
                .collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn atoms(&self) -> usize {
        self.layers[0].len()
    }

    /// Phases of layer `l` (0-based).
    pub fn layer(&self, l: usize) -> &[f64] {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    /// Unit-modulus transmission coefficients of layer `l` (0-based).
    pub fn transmission(&self, l: usize) -> Array1<Complex64> {
        self.layers[l].iter().map(|&p| Complex64::from_polar(1.0, p)).collect()
    }

    /// Gradient step `ξ ← ξ − η ∇`, wrapping back into `[0, 2π)`.
    pub fn step(&mut self, grad: &[Array1<f64>], lr: f64) {
        for (layer, g) in self.layers.iter_mut().zip(grad) {
            for (p, d) in layer.iter_mut().zip(g.iter()) {
                *p = wrap_phase(*p - lr * d);
            }
        }
    }

    pub(crate) fn layer_mut(&mut self, l: usize) -> &mut Vec<f64> {
        &mut self.layers[l]
    }
}

/// Per-snapshot phases on the input layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ZerothLayerConfig {
    pub phases: Array1<f64>,
}

impl ZerothLayerConfig {
    pub fn identity(n: usize) -> Self {
        Self {
            phases: Array1::zeros(n),
        }
    }

    pub fn coefficients(&self) -> Array1<Complex64> {
        self.phases.mapv(|p| Complex64::from_polar(1.0, p))
    }
}

/// Response matrix of a configured stack together with its fitted scale.
#[derive(Debug, Clone, PartialEq)]
pub struct SimResponse {
    pub g: Array2<Complex64>,
    pub beta: Complex64,
}

impl SimResponse {
    pub fn fit(props: &PropagationSet, stack: &PhaseStack, target: ArrayView2<Complex64>) -> Result<Self> {
        let g = forward_response(props, stack)?;
        let beta = optimal_scale(g.view(), target)?;
        Ok(Self { g, beta })
    }
}

/// Scales row `i` of `x` by `d[i]`, i.e. `diag(d) · x`.
pub(crate) fn scale_rows(d: ArrayView1<Complex64>, x: &mut Array2<Complex64>) {
    for (mut row, &s) in x.rows_mut().into_iter().zip(d.iter()) {
        row.mapv_inplace(|z| z * s);
    }
}

/// Scales column `j` of `x` by `d[j]`, i.e. `x · diag(d)`.
pub(crate) fn scale_cols(x: &mut Array2<Complex64>, d: ArrayView1<Complex64>) {
    for mut row in x.rows_mut() {
        Zip::from(&mut row).and(&d).for_each(|z, &s| *z *= s);
    }
}

pub(crate) fn check_stack(props: &PropagationSet, stack: &PhaseStack) -> Result<()> {
    if stack.num_layers() != props.layers() {
        return Err(dim_err("phase stack layers", props.layers(), stack.num_layers()));
    }
    if stack.atoms() != props.m() {
        return Err(dim_err("phase stack atoms", props.m(), stack.atoms()));
    }
    Ok(())
}

/// `G = W_L Υ_L W_{L-1} … Υ_1 W_0`, accumulated from the input side.
pub fn forward_response(props: &PropagationSet, stack: &PhaseStack) -> Result<Array2<Complex64>> {
    check_stack(props, stack)?;
    let mut x = props.w0.clone();
    for (l, w) in props.inner.iter().enumerate() {
        scale_rows(stack.transmission(l).view(), &mut x);
        x = w.dot(&x);
    }
    scale_rows(stack.transmission(props.layers() - 1).view(), &mut x);
    Ok(props.wl.dot(&x))
}

/// Least-squares scale `β = ⟨vec G, vec F⟩ / ‖vec G‖²`.
pub fn optimal_scale(g: ArrayView2<Complex64>, f: ArrayView2<Complex64>) -> Result<Complex64> {
    if g.dim() != f.dim() {
        return Err(dim_err("optimal_scale", format!("{:?}", f.dim()), format!("{:?}", g.dim())));
    }
    let energy: f64 = g.iter().map(|z| z.norm_sqr()).sum();
    if !(energy > 0.0) || !energy.is_finite() {
        return Err(Error::Degenerate("response matrix has zero or non-finite energy".into()));
    }
    let inner: Complex64 = Zip::from(&g).and(&f).fold(Complex64::new(0.0, 0.0), |acc, a, b| acc + a.conj() * b);
    Ok(inner / energy)
}

/// Fit loss `‖βG − F‖_F²` and its value normalized by `‖F‖_F²` in dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitLoss {
    pub value: f64,
    pub db: f64,
}

pub fn to_normalized_db(loss: f64, target_energy: f64) -> f64 {
    if loss <= 0.0 {
        PERFECT_FIT_DB
    } else {
        (10.0 * (loss / target_energy).log10()).max(PERFECT_FIT_DB)
    }
}

pub fn fitting_loss(g: ArrayView2<Complex64>, f: ArrayView2<Complex64>, beta: Complex64) -> Result<FitLoss> {
    if g.dim() != f.dim() {
        return Err(dim_err("fitting_loss", format!("{:?}", f.dim()), format!("{:?}", g.dim())));
    }
    let value: f64 = Zip::from(&g).and(&f).fold(0.0, |acc, a, b| acc + (beta * a - b).norm_sqr());
    let energy: f64 = f.iter().map(|z| z.norm_sqr()).sum();
    Ok(FitLoss {
        value,
        db: to_normalized_db(value, energy),
    })
}

/// Noise vector with i.i.d. `CN(0, 1)` entries.
pub fn cscg_vector<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Array1<Complex64> {
    (0..len).map(|_| cscg(rng)).collect()
}

/// One `CN(0, 1)` draw: real and imaginary parts each of variance 1/2.
pub fn cscg<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Noiseless field at the receiver, `G Υ_0 a s`.
pub fn clean_field(
    g: ArrayView2<Complex64>,
    zeroth: &ZerothLayerConfig,
    sv: &SteeringVector,
    s: Complex64,
) -> Result<Array1<Complex64>> {
    let n = g.ncols();
    if zeroth.phases.len() != n || sv.entries.len() != n {
        return Err(dim_err("clean_field", n, format!("{}/{}", zeroth.phases.len(), sv.entries.len())));
    }
    let x: Array1<Complex64> = Zip::from(&zeroth.phases)
        .and(&sv.entries)
        .map_collect(|&p, &a| Complex64::from_polar(1.0, p) * a * s);
    Ok(g.dot(&x))
}

/// Received vector `r = √ρ G Υ_0 a s + u`.
pub fn synthesize_received(
    g: ArrayView2<Complex64>,
    zeroth: &ZerothLayerConfig,
    sv: &SteeringVector,
    s: Complex64,
    rho: f64,
    noise: ArrayView1<Complex64>,
) -> Result<Array1<Complex64>> {
    if !(rho >= 0.0) {
        return Err(Error::InvalidArgument(format!("SNR must be >= 0 (got {rho})")));
    }
    if noise.len() != g.nrows() {
        return Err(dim_err("synthesize_received noise", g.nrows(), noise.len()));
    }
    let mut r = clean_field(g, zeroth, sv, s)?;
    let amp = rho.sqrt();
    Zip::from(&mut r).and(&noise).for_each(|z, &u| *z = amp * *z + u);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_propagation_matrices, dft_matrix, steering_vector, SimGeometry, DEFAULT_WAVELENGTH};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn small() -> (PropagationSet, PhaseStack) {
        let g = SimGeometry::square(DEFAULT_WAVELENGTH, 2, 2.0, 3, 3, 0.5);
        let p = build_propagation_matrices(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = PhaseStack::random(3, 9, &mut rng);
        (p, s)
    }

    /// Brute-force Huygens propagation: push the field of each input element
    /// through every layer with explicit double loops.
    fn huygens(props: &PropagationSet, stack: &PhaseStack) -> Array2<Complex64> {
        let (n, m, r) = (props.n(), props.m(), props.r());
        let mut g = Array2::zeros((r, n));
        for src in 0..n {
            let mut field: Vec<Complex64> = (0..m).map(|i| props.w0[[i, src]]).collect();
            for l in 0..props.layers() {
                let ups = stack.transmission(l);
                let emitted: Vec<Complex64> = field.iter().zip(ups.iter()).map(|(a, b)| a * b).collect();
                if l + 1 < props.layers() {
                    let w = &props.inner[l];
                    field = (0..m)
                        .map(|i| (0..m).fold(Complex64::new(0.0, 0.0), |acc, j| acc + w[[i, j]] * emitted[j]))
                        .collect();
                } else {
                    for out in 0..r {
                        g[[out, src]] = (0..m).fold(Complex64::new(0.0, 0.0), |acc, j| acc + props.wl[[out, j]] * emitted[j]);
                    }
                }
            }
        }
        g
    }

    fn rel_diff(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
        let num: f64 = Zip::from(a).and(b).fold(0.0, |acc, x, y| acc + (x - y).norm_sqr());
        let den: f64 = b.iter().map(|z| z.norm_sqr()).sum();
        (num / den).sqrt()
    }

    #[test]
    fn forward_matches_huygens_sum() {
        let (p, s) = small();
        let g = forward_response(&p, &s).unwrap();
        assert!(rel_diff(&g, &huygens(&p, &s)) < 1e-12);
    }

    #[test]
    fn forward_left_fold_agrees() {
        let (p, s) = small();
        let g = forward_response(&p, &s).unwrap();
        // left fold: start from W_L and multiply towards the input side
        let mut acc = p.wl.clone();
        for l in (0..p.layers()).rev() {
            scale_cols(&mut acc, s.transmission(l).view());
            acc = if l > 0 { acc.dot(&p.inner[l - 1]) } else { acc.dot(&p.w0) };
        }
        assert!(rel_diff(&acc, &g) < 1e-10);
    }

    #[test]
    fn identity_phases_single_layer() {
        let g = SimGeometry::square(DEFAULT_WAVELENGTH, 2, 1.0, 1, 3, 0.5);
        let p = build_propagation_matrices(&g).unwrap();
        let resp = forward_response(&p, &PhaseStack::zeros(1, 9)).unwrap();
        assert!(rel_diff(&resp, &p.wl.dot(&p.w0)) < 1e-15);
    }

    #[test]
    fn global_phase_offset_factors_out() {
        let (p, s) = small();
        let c = 0.37;
        let shifted = PhaseStack::new(s.layers().iter().map(|l| l.iter().map(|x| x + c).collect()).collect()).unwrap();
        let g0 = forward_response(&p, &s).unwrap();
        let g1 = forward_response(&p, &shifted).unwrap();
        let expect = g0.mapv(|z| z * Complex64::from_polar(1.0, 3.0 * c));
        assert!(rel_diff(&g1, &expect) < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (p, _) = small();
        assert!(matches!(forward_response(&p, &PhaseStack::zeros(2, 9)), Err(Error::Dimension { .. })));
        assert!(matches!(forward_response(&p, &PhaseStack::zeros(3, 4)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn scale_examples() {
        let f = dft_matrix(2, 2).matrix;
        let b = optimal_scale(f.view(), f.view()).unwrap();
        assert!((b - 1.0).norm() < 1e-15);
        let g = f.mapv(|z| z * Complex64::new(0.0, 2.0));
        let b = optimal_scale(g.view(), f.view()).unwrap();
        assert!((b - Complex64::new(0.0, -0.5)).norm() < 1e-15);
        assert!(matches!(optimal_scale(Array2::zeros((4, 4)).view(), f.view()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn scale_is_stationary() {
        let (p, s) = small();
        let g = forward_response(&p, &s).unwrap();
        let f = dft_matrix(2, 2).matrix;
        let b = optimal_scale(g.view(), f.view()).unwrap();
        // d/dβ* ‖βG − F‖² = Σ conj(G) (βG − F) must vanish
        let grad: Complex64 = Zip::from(&g).and(&f).fold(Complex64::new(0.0, 0.0), |acc, a, c| acc + a.conj() * (b * a - c));
        let scale: f64 = g.iter().map(|z| z.norm_sqr()).sum::<f64>() * b.norm();
        assert!(grad.norm() < 1e-12 * scale);
        let best = fitting_loss(g.view(), f.view(), b).unwrap().value;
        for d in [Complex64::new(1e-3, 0.0), Complex64::new(0.0, 1e-3), Complex64::new(-0.1, 0.2)] {
            assert!(best <= fitting_loss(g.view(), f.view(), b + d * b).unwrap().value);
        }
    }

    #[test]
    fn loss_examples() {
        let f = dft_matrix(2, 2).matrix;
        let l = fitting_loss(f.view(), f.view(), Complex64::new(1.0, 0.0)).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.db, PERFECT_FIT_DB);
        let l = fitting_loss(Array2::zeros((4, 4)).view(), f.view(), Complex64::new(3.0, 1.0)).unwrap();
        assert_eq!(l.value, 16.0);
        assert_eq!(l.db, 0.0);
    }

    #[test]
    fn no_signal_returns_noise() {
        let f = dft_matrix(2, 2).matrix;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = cscg_vector(4, &mut rng);
        let sv = steering_vector(0.3, 0.1, 2, 2);
        let r = synthesize_received(f.view(), &ZerothLayerConfig::identity(4), &sv, Complex64::new(1.0, 0.0), 0.0, u.view()).unwrap();
        assert_eq!(r, u);
    }

    #[test]
    fn on_grid_source_concentrates() {
        let f = dft_matrix(2, 2).matrix;
        // bin k = (2, 1): ψx = π, ψy = 0
        let sv = steering_vector(PI, 0.0, 2, 2);
        let rho = 9.0;
        let r = synthesize_received(
            f.view(),
            &ZerothLayerConfig::identity(4),
            &sv,
            Complex64::from_polar(1.0, 0.4),
            rho,
            Array1::zeros(4).view(),
        )
        .unwrap();
        for (i, z) in r.iter().enumerate() {
            if i == 1 {
                assert!((z.norm() - 3.0 * 4.0).abs() < 1e-12);
            } else {
                assert!(z.norm() < 1e-12);
            }
        }
    }

    #[test]
    fn off_grid_matches_direct_dft() {
        let (nx, ny) = (3, 2);
        let f = dft_matrix(nx, ny).matrix;
        let (px, py) = (0.77, -1.9);
        let sv = steering_vector(px, py, nx, ny);
        let mut zeroth = ZerothLayerConfig::identity(6);
        zeroth.phases = Array1::from(vec![0.1, 0.5, 1.0, 2.0, 3.0, 4.5]);
        let s = Complex64::new(0.3, -0.8);
        let r = synthesize_received(f.view(), &zeroth, &sv, s, 1.0, Array1::zeros(6).view()).unwrap();
        for kx in 0..nx {
            for ky in 0..ny {
                let mut acc = Complex64::new(0.0, 0.0);
                for ix in 0..nx {
                    for iy in 0..ny {
                        let n = iy * nx + ix;
                        let x = Complex64::from_polar(1.0, zeroth.phases[n] + px * ix as f64 + py * iy as f64) * s;
                        let ph = -2.0 * PI * ((kx * ix) as f64 / nx as f64 + (ky * iy) as f64 / ny as f64);
                        acc += Complex64::from_polar(1.0, ph) * x;
                    }
                }
                assert!((r[ky * nx + kx] - acc).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn noise_has_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let u = cscg_vector(100_000, &mut rng);
        let n = u.len() as f64;
        let var: f64 = u.iter().map(|z| z.norm_sqr()).sum::<f64>() / n;
        let var_re: f64 = u.iter().map(|z| z.re * z.re).sum::<f64>() / n;
        assert!((var - 1.0).abs() < 0.02);
        assert!((var_re - 0.5).abs() < 0.01);
    }

    #[test]
    fn layers_are_passive() {
        let (_, s) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = cscg_vector(9, &mut rng);
        for l in 0..s.num_layers() {
            let t = s.transmission(l);
            let out: f64 = t.iter().zip(v.iter()).map(|(a, b)| (a * b).norm_sqr()).sum();
            let inp: f64 = v.iter().map(|z| z.norm_sqr()).sum();
            assert!((out - inp).abs() < 1e-12 * inp);
        }
    }

    #[test]
    fn phases_wrap_into_range() {
        let s = PhaseStack::new(vec![vec![-0.5, 7.0, TAU, 0.0]]).unwrap();
        for &p in s.layer(0) {
            assert!((0.0..TAU).contains(&p));
        }
        assert!(PhaseStack::new(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(PhaseStack::new(vec![]).is_err());
    }
}
