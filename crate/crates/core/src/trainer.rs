//! Gradient-descent fitting of the layer phases to the DFT target.

use ndarray::{Array1, Array2, ArrayView2, Zip};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::geometry::PropagationSet;
use crate::wave::{check_stack, fitting_loss, optimal_scale, scale_cols, scale_rows, FitLoss, PhaseStack};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub eta0: f64,
    pub zeta: f64,
    pub max_iters: usize,
    pub rel_tolerance: f64,
    pub seed: u64,
    /// Independent random initializations; the best run is kept.
    pub restarts: usize,
    /// Rescale each gradient so its largest component equals `step_scale`;
    /// the steepest phase then moves by exactly `η · step_scale` radians.
    /// When false the raw gradient is used.
    pub normalize_gradient: bool,
    pub step_scale: f64,
}

/// Default `step_scale`: with `η₀ = 0.1` the first update turns the steepest
/// phase by half a cycle.
pub const DEFAULT_STEP_SCALE: f64 = 10.0 * std::f64::consts::PI;

fn normalize_max(grad: &mut [Array1<f64>], scale: f64) {
    let peak = grad.iter().flat_map(|g| g.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 && peak.is_finite() {
        for g in grad.iter_mut() {
            g.mapv_inplace(|x| x * scale / peak);
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta0: 0.1,
            zeta: 0.8,
            max_iters: 200,
            rel_tolerance: 0.0,
            seed: 0,
            restarts: 1,
            normalize_gradient: true,
            step_scale: DEFAULT_STEP_SCALE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::InvalidArgument(format!("{key}: {msg}")));
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return bad("eta0", "must be a positive finite number");
        }
        if !(self.zeta > 0.0 && self.zeta <= 1.0) {
            return bad("zeta", "must lie in (0, 1]");
        }
        if self.max_iters == 0 {
            return bad("max_iters", "must be at least 1");
        }
        if !(self.rel_tolerance >= 0.0) {
            return bad("rel_tolerance", "must be >= 0");
        }
        if !(self.step_scale > 0.0 && self.step_scale.is_finite()) {
            return bad("step_scale", "must be a positive finite number");
        }
        if self.restarts == 0 {
            return bad("restarts", "must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    Converged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Lowest-loss iterate seen during the run.
    pub stack: PhaseStack,
    pub beta: Complex64,
    pub loss: FitLoss,
    /// Iteration at which the returned stack was reached (0 = initial).
    pub best_iteration: usize,
    /// Loss after every iteration, starting with the initial stack.
    pub history: Vec<FitLoss>,
    pub iterations: usize,
    pub stop_reason: StopReason,
    /// Seed of the initialization that produced this report.
    pub seed: u64,
    pub warnings: Vec<String>,
}

/// Field arriving at each programmable layer before its phase shift, one
/// M×N matrix per layer: `Q_1 = W_0`, `Q_{l+1} = W_l Υ_l Q_l`.
pub fn layer_inputs(props: &PropagationSet, stack: &PhaseStack) -> Result<Vec<Array2<Complex64>>> {
    check_stack(props, stack)?;
    let mut out = Vec::with_capacity(props.layers());
    out.push(props.w0.clone());
    for (l, w) in props.inner.iter().enumerate() {
        let mut x = out[l].clone();
        scale_rows(stack.transmission(l).view(), &mut x);
        out.push(w.dot(&x));
    }
    Ok(out)
}

fn response_from_inputs(props: &PropagationSet, stack: &PhaseStack, last_input: &Array2<Complex64>) -> Array2<Complex64> {
    let mut x = last_input.clone();
    scale_rows(stack.transmission(props.layers() - 1).view(), &mut x);
    props.wl.dot(&x)
}

/// Gradient given the per-layer inputs and the residual `E = βG − F`.
fn gradient_from_parts(
    props: &PropagationSet,
    stack: &PhaseStack,
    inputs: &[Array2<Complex64>],
    residual: &Array2<Complex64>,
    beta: Complex64,
) -> Vec<Array1<f64>> {
    let layers = props.layers();
    let mut grads = vec![Array1::zeros(props.m()); layers];
    // suffix operator B_l = W_L Υ_L W_{L-1} … Υ_{l+1} W_l (R×M), starting at B_L = W_L
    let mut suffix = props.wl.clone();
    for l in (0..layers).rev() {
        let h = suffix.t().mapv(|z| z.conj()).dot(residual);
        let ups = stack.transmission(l);
        let q = &inputs[l];
        let bc = beta.conj();
        for m in 0..props.m() {
            let acc = Zip::from(q.row(m))
                .and(h.row(m))
                .fold(Complex64::new(0.0, 0.0), |acc, a, b| acc + a.conj() * b);
            grads[l][m] = 2.0 * (bc * ups[m].conj() * acc).im;
        }
        if l > 0 {
            scale_cols(&mut suffix, ups.view());
            suffix = suffix.dot(&props.inner[l - 1]);
        }
    }
    grads
}

fn check_target(props: &PropagationSet, f: ArrayView2<Complex64>) -> Result<()> {
    if f.dim() != (props.r(), props.n()) {
        return Err(dim_err("DFT target", format!("{:?}", (props.r(), props.n())), format!("{:?}", f.dim())));
    }
    Ok(())
}

/// Analytic gradient of `‖βG − F‖_F²` with respect to every layer phase,
/// holding `β` fixed.
pub fn gradient(
    props: &PropagationSet,
    stack: &PhaseStack,
    f: ArrayView2<Complex64>,
    beta: Complex64,
) -> Result<Vec<Array1<f64>>> {
    check_target(props, f)?;
    let inputs = layer_inputs(props, stack)?;
    let g = response_from_inputs(props, stack, &inputs[props.layers() - 1]);
    let residual = g.mapv(|z| beta * z) - &f;
    Ok(gradient_from_parts(props, stack, &inputs, &residual, beta))
}

fn loss_at(props: &PropagationSet, stack: &PhaseStack, f: ArrayView2<Complex64>, beta: Complex64) -> Result<f64> {
    let g = crate::wave::forward_response(props, stack)?;
    Ok(fitting_loss(g.view(), f, beta)?.value)
}

/// Central finite differences of the fit loss with `β` held fixed.
pub fn finite_diff_gradient(
    props: &PropagationSet,
    stack: &PhaseStack,
    f: ArrayView2<Complex64>,
    beta: Complex64,
    step: f64,
) -> Result<Vec<Array1<f64>>> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be > 0 (got {step})")));
    }
    check_target(props, f)?;
    check_stack(props, stack)?;
    let mut work = stack.clone();
    let mut out = Vec::with_capacity(stack.num_layers());
    for l in 0..stack.num_layers() {
        let mut g = Array1::zeros(stack.atoms());
        for m in 0..stack.atoms() {
            let orig = work.layer(l)[m];
            work.layer_mut(l)[m] = orig + step;
            let up = loss_at(props, &work, f, beta)?;
            work.layer_mut(l)[m] = orig - step;
            let down = loss_at(props, &work, f, beta)?;
            work.layer_mut(l)[m] = orig;
            g[m] = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Agreement between analytic and numerical gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    /// `max_i |a_i − f_i| / max_j |a_j|`.
    pub max_rel_error: f64,
    pub cosine_similarity: f64,
    pub components: usize,
}

pub fn compare_gradients(analytic: &[Array1<f64>], numeric: &[Array1<f64>]) -> GradientCheck {
    let a: Vec<f64> = analytic.iter().flat_map(|x| x.iter().copied()).collect();
    let b: Vec<f64> = numeric.iter().flat_map(|x| x.iter().copied()).collect();
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let max_diff = a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    GradientCheck {
        max_rel_error: if scale > 0.0 { max_diff / scale } else { max_diff },
        cosine_similarity: if na > 0.0 && nb > 0.0 { dot / (na * nb) } else { 1.0 },
        components: a.len(),
    }
}

/// Runs the analytic/numerical comparison at the optimal scale of `stack`.
pub fn check_gradient(
    props: &PropagationSet,
    stack: &PhaseStack,
    f: ArrayView2<Complex64>,
    step: f64,
) -> Result<GradientCheck> {
    let g = crate::wave::forward_response(props, stack)?;
    let beta = optimal_scale(g.view(), f)?;
    let a = gradient(props, stack, f, beta)?;
    let n = finite_diff_gradient(props, stack, f, beta, step)?;
    Ok(compare_gradients(&a, &n))
}

struct Iterate {
    inputs: Vec<Array2<Complex64>>,
    g: Array2<Complex64>,
    beta: Complex64,
    loss: FitLoss,
}

fn evaluate(props: &PropagationSet, stack: &PhaseStack, f: ArrayView2<Complex64>) -> Result<Iterate> {
    let inputs = layer_inputs(props, stack)?;
    let g = response_from_inputs(props, stack, &inputs[props.layers() - 1]);
    let beta = optimal_scale(g.view(), f)?;
    let loss = fitting_loss(g.view(), f, beta)?;
    Ok(Iterate { inputs, g, beta, loss })
}

/// Trains from a given initial stack with a single run.
pub fn train_from(
    props: &PropagationSet,
    f: ArrayView2<Complex64>,
    initial: PhaseStack,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    check_target(props, f)?;
    let mut warnings = Vec::new();
    if props.m() < props.n() {
        warnings.push(format!(
            "{} meta-atoms per layer is fewer than the {} antennas; an exact DFT fit is out of reach",
            props.m(),
            props.n()
        ));
    }
    let mut stack = initial;
    let mut it = evaluate(props, &stack, f)?;
    let mut history = vec![it.loss];
    let mut best = (stack.clone(), it.beta, it.loss, 0usize);
    let mut eta = config.eta0;
    let mut stop_reason = StopReason::MaxIterations;
    let mut iterations = 0;

    for k in 1..=config.max_iters {
        let residual = it.g.mapv(|z| it.beta * z) - &f;
        let mut grad = gradient_from_parts(props, &stack, &it.inputs, &residual, it.beta);
        if config.normalize_gradient {
            normalize_max(&mut grad, config.step_scale);
        }
        stack.step(&grad, eta);
        eta *= config.zeta;
        let prev = it.loss.value;
        it = match evaluate(props, &stack, f) {
            Ok(next) if next.loss.value.is_finite() => next,
            Ok(next) => {
                history.push(next.loss);
                return Err(Error::Diverged {
                    iteration: k,
                    loss: next.loss.value,
                    history: history.iter().map(|l| l.value).collect(),
                });
            }
            Err(Error::Degenerate(_)) => {
                return Err(Error::Diverged {
                    iteration: k,
                    loss: f64::NAN,
                    history: history.iter().map(|l| l.value).collect(),
                })
            }
            Err(e) => return Err(e),
        };
        history.push(it.loss);
        iterations = k;
        if it.loss.value < best.2.value {
            best = (stack.clone(), it.beta, it.loss, k);
        }
        if config.rel_tolerance > 0.0 && prev > 0.0 && (prev - it.loss.value) / prev < config.rel_tolerance {
            stop_reason = StopReason::Converged;
            break;
        }
    }

    Ok(TrainReport {
        stack: best.0,
        beta: best.1,
        loss: best.2,
        best_iteration: best.3,
        history,
        iterations,
        stop_reason,
        seed: config.seed,
        warnings,
    })
}

/// Gradient check on one random small instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheckCase {
    pub nx: usize,
    pub ny: usize,
    pub atoms: usize,
    pub layers: usize,
    pub check: GradientCheck,
}

/// Checks the analytic gradient on `instances` random stacks with
/// `N ∈ {2, 4}`, `M ∈ {4, 9}` and `L ≤ 3`. Smaller sizes are skipped: with a
/// single antenna or meta-atom the phases only rotate `G` globally, the
/// optimal scale absorbs it and the gradient is identically zero.
pub fn gradient_check_suite(instances: usize, seed: u64, step: f64) -> Result<Vec<GradientCheckCase>> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..instances)
        .map(|_| {
            let (nx, ny) = [(1, 2), (2, 1), (2, 2)][rng.random_range(0..3)];
            let side = rng.random_range(2..=3);
            let layers = rng.random_range(1..=3);
            let mut geom = crate::geometry::SimGeometry::square(
                crate::geometry::DEFAULT_WAVELENGTH,
                2,
                rng.random_range(1.0..6.0),
                layers,
                side,
                rng.random_range(0.3..1.0),
            );
            (geom.nx, geom.ny, geom.rx, geom.ry) = (nx, ny, nx, ny);
            let props = crate::geometry::build_propagation_matrices(&geom)?;
            let stack = PhaseStack::random(layers, side * side, &mut rng);
            let f = crate::geometry::dft_matrix(nx, ny).matrix;
            Ok(GradientCheckCase {
                nx,
                ny,
                atoms: side * side,
                layers,
                check: check_gradient(&props, &stack, f.view(), step)?,
            })
        })
        .collect()
}

/// Seed used by restart `k` of a run seeded with `seed`.
pub fn restart_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_add(k as u64)
}

/// Trains from `config.restarts` random initializations and keeps the one
/// reaching the lowest loss.
pub fn train(props: &PropagationSet, f: ArrayView2<Complex64>, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let mut best: Option<TrainReport> = None;
    for k in 0..config.restarts {
        let seed = restart_seed(config.seed, k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = PhaseStack::random(props.layers(), props.m(), &mut rng);
        let mut report = train_from(props, f, init, config)?;
        report.seed = seed;
        if best.as_ref().is_none_or(|b| report.loss.value < b.loss.value) {
            best = Some(report);
        }
    }
    Ok(best.expect("restarts >= 1"))
}
