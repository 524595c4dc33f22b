//! Euler–Maruyama integration of the flow `X_t(x)` driven by one Brownian
//! path shared by all initial points, with log-Jacobian propagation and the
//! three accumulators of the exponential formula
//!
//! `ln M_t = ln u(x) + ∫ ∇ln u·σ db - ½ ∫ ∇ln u·a∇ln u dτ + ∫ (𝔏♯u/u) dτ`,
//! where `M_t = u(X_t) |DX_t|`.

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::{ln_derivatives, norm_sq, ScalarField};
use crate::model::{DiffusionModel, FlowDirection};

pub const DEFAULT_BLOWUP_RADIUS: f64 = 1e6;

/// Point counts below this are stepped on the calling thread.
const PARALLEL_MIN_POINTS: usize = 64;

/// Seekable source of Brownian increments.
///
/// Step `j` of a driver with offset `k` reads the ChaCha8 stream of `seed` at
/// block position `k + j`, so increments are reproducible from
/// `(seed, offset_steps, j)` and `shifted(k)` realises the shift `θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrownianDriver {
    seed: u64,
    dim: usize,
    dt: f64,
    offset_steps: u64,
}

impl BrownianDriver {
    pub fn new(seed: u64, dim: usize, dt: f64) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("driver dimension must be positive"));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid(format!("time step must be positive, got {dt}")));
        }
        Ok(Self { seed, dim, dt, offset_steps: 0 })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn offset_steps(&self) -> u64 {
        self.offset_steps
    }

    /// The driver of the shifted path `θ_{k dt} b`.
    pub fn shifted(&self, steps: u64) -> Self {
        Self { offset_steps: self.offset_steps + steps, ..self.clone() }
    }

    fn words_per_step(&self) -> u128 {
        4 * self.dim.div_ceil(2) as u128
    }

    /// Sequential reader starting at step `step`.
    pub fn stream(&self, step: u64) -> IncrementStream {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos((self.offset_steps + step) as u128 * self.words_per_step());
        IncrementStream { rng, scale: self.dt.sqrt() }
    }

    /// Increment `b((j+1) dt) - b(j dt)` of step `j`.
    pub fn increment(&self, step: u64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.stream(step).next_into(&mut out);
        out
    }
}

/// Consecutive increments of a [`BrownianDriver`].
#[derive(Debug, Clone)]
pub struct IncrementStream {
    rng: ChaCha8Rng,
    scale: f64,
}

impl IncrementStream {
    /// Standard normal draws for one step (Box–Muller on pairs of 53-bit
    /// uniforms), before scaling by `√dt`.
    pub fn next_standard_into(&mut self, out: &mut [f64]) {
        const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;
        for pair in out.chunks_mut(2) {
            let u1 = ((self.rng.next_u64() >> 11) + 1) as f64 * TWO_POW_M53;
            let u2 = (self.rng.next_u64() >> 11) as f64 * TWO_POW_M53;
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
            pair[0] = r * c;
            if pair.len() > 1 {
                pair[1] = r * s;
            }
        }
    }

    pub fn next_into(&mut self, out: &mut [f64]) {
        self.next_standard_into(out);
        out.iter_mut().for_each(|v| *v *= self.scale);
    }
}

/// Step size, horizon and recording options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub horizon: f64,
    #[serde(default = "default_blowup_radius")]
    pub blowup_radius: f64,
    #[serde(default = "default_record_stride")]
    pub record_stride: usize,
    /// Also integrate the full tangent map `J` for cross-checking `logdet`.
    #[serde(default)]
    pub tangent_map: bool,
}

fn default_blowup_radius() -> f64 {
    DEFAULT_BLOWUP_RADIUS
}

fn default_record_stride() -> usize {
    1
}

impl IntegratorConfig {
    pub fn new(dt: f64, horizon: f64) -> Self {
        Self { dt, horizon, blowup_radius: DEFAULT_BLOWUP_RADIUS, record_stride: 1, tangent_map: false }
    }

    pub fn with_record_stride(mut self, stride: usize) -> Self {
        self.record_stride = stride;
        self
    }

    pub fn with_tangent_map(mut self, enabled: bool) -> Self {
        self.tangent_map = enabled;
        self
    }

    /// Number of steps, checking that the horizon is a whole multiple of `dt`.
    pub fn steps(&self) -> Result<u64> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid(format!("time step must be positive, got {}", self.dt)));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(invalid(format!("horizon must be non-negative, got {}", self.horizon)));
        }
        if !(self.blowup_radius > 0.0) {
            return Err(invalid("blow-up radius must be positive"));
        }
        if self.record_stride == 0 {
            return Err(invalid("record stride must be at least 1"));
        }
        let n = (self.horizon / self.dt).round();
        if (n * self.dt - self.horizon).abs() > 1e-9 * self.horizon.max(self.dt) {
            return Err(invalid(format!("horizon {} is not a whole number of steps of {}", self.horizon, self.dt)));
        }
        Ok(n as u64)
    }
}

/// Ensemble of flowed points with log-Jacobians and accumulators.
///
/// Points are stored flat: point `i` occupies `points[i*d..(i+1)*d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub dim: usize,
    pub step: u64,
    pub t: f64,
    pub initial_points: Vec<f64>,
    pub points: Vec<f64>,
    pub logdet: Vec<f64>,
    pub acc_sto: Vec<f64>,
    pub acc_energy: Vec<f64>,
    pub acc_potential: Vec<f64>,
    /// Row-major `d×d` tangent map per point, when enabled.
    pub tangent: Option<Vec<f64>>,
}

impl FlowState {
    pub fn new(initial_points: &[Vec<f64>]) -> Result<Self> {
        let dim = initial_points.first().map(Vec::len).ok_or_else(|| invalid("no initial points"))?;
        if dim == 0 || initial_points.iter().any(|p| p.len() != dim) {
            return Err(invalid("initial points must share a positive dimension"));
        }
        Ok(Self::from_flat(dim, initial_points.concat()))
    }

    pub fn from_flat(dim: usize, flat: Vec<f64>) -> Self {
        let n = flat.len() / dim;
        Self {
            dim,
            step: 0,
            t: 0.0,
            initial_points: flat.clone(),
            points: flat,
            logdet: vec![0.0; n],
            acc_sto: vec![0.0; n],
            acc_energy: vec![0.0; n],
            acc_potential: vec![0.0; n],
            tangent: None,
        }
    }

    pub fn with_tangent_map(mut self) -> Self {
        let d = self.dim;
        let mut eye = vec![0.0; d * d];
        (0..d).for_each(|i| eye[i * d + i] = 1.0);
        self.tangent = Some(eye.repeat(self.len()));
        self
    }

    pub fn len(&self) -> usize {
        self.logdet.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logdet.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn initial_point(&self, i: usize) -> &[f64] {
        &self.initial_points[i * self.dim..(i + 1) * self.dim]
    }

    /// `ln M_t` rebuilt from the accumulators, given `ln u(x_i)`.
    pub fn ln_m_formula(&self, i: usize, ln_u0: f64) -> f64 {
        ln_u0 + self.acc_sto[i] - 0.5 * self.acc_energy[i] + self.acc_potential[i]
    }

    /// Determinant of the tangent map of point `i`, when tracked.
    pub fn tangent_det(&self, i: usize) -> Option<f64> {
        let d = self.dim;
        self.tangent.as_ref().map(|t| DMatrix::from_row_slice(d, d, &t[i * d * d..(i + 1) * d * d]).determinant())
    }
}

/// Per-point quantities needed for the accumulators of `u`.
struct LnTerms {
    /// `tr(a H ln u)`
    trace: f64,
}

fn ln_terms_into(model: &DiffusionModel, u: &dyn ScalarField, x: &[f64], grad_ln: &mut [f64]) -> Result<LnTerms> {
    let a = model.a().matrix();
    match (u.grad_ln_into(x, grad_ln), u.ln_hessian_trace(x, a)) {
        (Ok(()), Ok(trace)) => Ok(LnTerms { trace }),
        (Err(e @ Error::NonPositivePotential { .. }), _) | (_, Err(e @ Error::NonPositivePotential { .. })) => Err(e),
        _ => {
            let (g, h) = ln_derivatives(u, x, model.fd_fallback())?;
            grad_ln.copy_from_slice(g.as_slice());
            Ok(LnTerms { trace: (a * h).trace() })
        }
    }
}

struct StepContext<'a> {
    model: &'a DiffusionModel,
    u: Option<&'a dyn ScalarField>,
    sign: f64,
    dt: f64,
    /// `σ Δb`, shared by every point.
    noise: &'a [f64],
}

struct Scratch {
    drift: Vec<f64>,
    work: Vec<f64>,
    grad_ln: Vec<f64>,
}

impl Scratch {
    fn new(d: usize) -> Self {
        Self { drift: vec![0.0; d], work: vec![0.0; d], grad_ln: vec![0.0; d] }
    }
}

type PointSlot<'s> = (&'s mut [f64], &'s mut f64, &'s mut f64, &'s mut f64, &'s mut f64);

impl StepContext<'_> {
    fn advance_point(&self, s: &mut Scratch, slot: PointSlot<'_>, tangent: Option<&mut [f64]>) -> Result<()> {
        let (x, logdet, sto, energy, potential) = slot;
        let model = self.model;
        model.drift_into(x, &mut s.drift, &mut s.work)?;
        let div = model.divergence_drift(x)?;

        if let Some(u) = self.u {
            let LnTerms { trace } = ln_terms_into(model, u, x, &mut s.grad_ln)?;
            let a = model.a().matrix();
            let mut e = 0.0;
            let mut m_dot = 0.0;
            let mut noise_dot = 0.0;
            for i in 0..x.len() {
                let mut ag = 0.0;
                for j in 0..x.len() {
                    ag += a[(i, j)] * s.grad_ln[j];
                }
                e += s.grad_ln[i] * ag;
                m_dot += s.drift[i] * s.grad_ln[i];
                noise_dot += s.grad_ln[i] * self.noise[i];
            }
            // 𝔏♯u/u of the flow actually simulated: the sharp flow has drift -m.
            let relative = 0.5 * (trace + e) + self.sign * (m_dot + div);
            *sto += noise_dot;
            *energy += e * self.dt;
            *potential += relative * self.dt;
        }

        if let Some(j) = tangent {
            let d = x.len();
            let jac = model.drift_jacobian(x)? * (self.sign * self.dt);
            let current = DMatrix::from_row_slice(d, d, j);
            let next = jac.exp() * current;
            for r in 0..d {
                for c in 0..d {
                    j[r * d + c] = next[(r, c)];
                }
            }
        }

        for ((xi, n), m) in x.iter_mut().zip(self.noise).zip(&s.drift) {
            *xi += n + self.sign * m * self.dt;
        }
        *logdet += self.sign * div * self.dt;
        Ok(())
    }
}

/// Advances `state` by one step using the increment `db` (`Δb`, not `σΔb`).
pub fn step_with_increment(
    model: &DiffusionModel,
    state: &mut FlowState,
    db: &[f64],
    dt: f64,
    u: Option<&dyn ScalarField>,
    direction: FlowDirection,
    blowup_radius: f64,
) -> Result<()> {
    let d = state.dim;
    if d != model.dim() || db.len() != d {
        return Err(invalid(format!("dimension mismatch: model {}, state {d}, increment {}", model.dim(), db.len())));
    }
    let sigma = model.sigma().matrix();
    let noise: Vec<f64> = (0..d).map(|i| (0..d).map(|j| sigma[(i, j)] * db[j]).sum()).collect();
    let ctx = StepContext { model, u, sign: direction.sign(), dt, noise: &noise };

    let n = state.len();
    let slots = (
        state.points.par_chunks_mut(d),
        state.logdet.par_iter_mut(),
        state.acc_sto.par_iter_mut(),
        state.acc_energy.par_iter_mut(),
        state.acc_potential.par_iter_mut(),
    );
    let result: Result<()> = match state.tangent.as_mut() {
        Some(tangent) if n >= PARALLEL_MIN_POINTS => slots
            .into_par_iter()
            .zip(tangent.par_chunks_mut(d * d))
            .try_for_each_init(|| Scratch::new(d), |s, (slot, j)| ctx.advance_point(s, slot, Some(j))),
        Some(tangent) => {
            let mut s = Scratch::new(d);
            let mut tangent = tangent.chunks_mut(d * d);
            (state.points.chunks_mut(d))
                .zip(state.logdet.iter_mut())
                .zip(state.acc_sto.iter_mut())
                .zip(state.acc_energy.iter_mut())
                .zip(state.acc_potential.iter_mut())
                .try_for_each(|((((x, l), a), e), p)| ctx.advance_point(&mut s, (x, l, a, e, p), tangent.next()))
        }
        None if n >= PARALLEL_MIN_POINTS => {
            slots.into_par_iter().try_for_each_init(|| Scratch::new(d), |s, slot| ctx.advance_point(s, slot, None))
        }
        None => {
            let mut s = Scratch::new(d);
            (state.points.chunks_mut(d))
                .zip(state.logdet.iter_mut())
                .zip(state.acc_sto.iter_mut())
                .zip(state.acc_energy.iter_mut())
                .zip(state.acc_potential.iter_mut())
                .try_for_each(|((((x, l), a), e), p)| ctx.advance_point(&mut s, (x, l, a, e, p), None))
        }
    };
    result?;

    state.step += 1;
    state.t = state.step as f64 * dt;
    let r2 = blowup_radius * blowup_radius;
    if let Some(i) = (0..n).find(|&i| !(norm_sq(state.point(i)) <= r2)) {
        return Err(Error::BlowUp { time: state.t, point: i, radius: blowup_radius });
    }
    Ok(())
}

/// One Euler–Maruyama step `X ← X + σΔb ± m(X) dt` with the increment the
/// driver assigns to `state.step`.
pub fn step(
    model: &DiffusionModel,
    state: &mut FlowState,
    driver: &BrownianDriver,
    u: Option<&dyn ScalarField>,
    direction: FlowDirection,
) -> Result<()> {
    let db = driver.increment(state.step);
    step_with_increment(model, state, &db, driver.dt(), u, direction, DEFAULT_BLOWUP_RADIUS)
}

/// Snapshot of a [`FlowState`] at a recorded time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: f64,
    pub step: u64,
    pub points: Vec<f64>,
    pub logdet: Vec<f64>,
    pub acc_sto: Vec<f64>,
    pub acc_energy: Vec<f64>,
    pub acc_potential: Vec<f64>,
    pub tangent_det: Option<Vec<f64>>,
}

impl Frame {
    fn of(state: &FlowState) -> Self {
        Self {
            t: state.t,
            step: state.step,
            points: state.points.clone(),
            logdet: state.logdet.clone(),
            acc_sto: state.acc_sto.clone(),
            acc_energy: state.acc_energy.clone(),
            acc_potential: state.acc_potential.clone(),
            tangent_det: state.tangent.as_ref().map(|_| (0..state.len()).map(|i| state.tangent_det(i).unwrap_or(f64::NAN)).collect()),
        }
    }

    pub fn point(&self, dim: usize, i: usize) -> &[f64] {
        &self.points[i * dim..(i + 1) * dim]
    }
}

/// Recorded trajectory of an ensemble, with what is needed to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub dim: usize,
    pub seed: u64,
    pub offset_steps: u64,
    pub dt: f64,
    pub direction: FlowDirection,
    pub has_accumulators: bool,
    pub initial_points: Vec<f64>,
    pub frames: Vec<Frame>,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.initial_points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.initial_points.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.t).collect()
    }

    pub fn last(&self) -> &Frame {
        self.frames.last().expect("a record always holds the initial frame")
    }

    pub fn initial_point(&self, i: usize) -> &[f64] {
        &self.initial_points[i * self.dim..(i + 1) * self.dim]
    }
}

/// Runs `config.horizon / config.dt` steps from `state`, recording every
/// `record_stride` steps and always the final state.
pub fn simulate_from(
    model: &DiffusionModel,
    mut state: FlowState,
    config: &IntegratorConfig,
    driver: &BrownianDriver,
    u: Option<&dyn ScalarField>,
    direction: FlowDirection,
) -> Result<(TrajectoryRecord, FlowState)> {
    let steps = config.steps()?;
    if (driver.dt() - config.dt).abs() > 0.0 {
        return Err(invalid("driver and integrator disagree on dt"));
    }
    if config.tangent_map && state.tangent.is_none() {
        state = state.with_tangent_map();
    }
    let mut frames = vec![Frame::of(&state)];
    let mut stream = driver.stream(state.step);
    let mut db = vec![0.0; state.dim];
    for k in 1..=steps {
        stream.next_into(&mut db);
        step_with_increment(model, &mut state, &db, config.dt, u, direction, config.blowup_radius)?;
        if k % config.record_stride as u64 == 0 || k == steps {
            frames.push(Frame::of(&state));
        }
    }
    let record = TrajectoryRecord {
        dim: state.dim,
        seed: driver.seed(),
        offset_steps: driver.offset_steps(),
        dt: config.dt,
        direction,
        has_accumulators: u.is_some(),
        initial_points: state.initial_points.clone(),
        frames,
    };
    Ok((record, state))
}

pub fn simulate(
    model: &DiffusionModel,
    initial_points: &[Vec<f64>],
    config: &IntegratorConfig,
    driver: &BrownianDriver,
    u: Option<&dyn ScalarField>,
    direction: FlowDirection,
) -> Result<TrajectoryRecord> {
    Ok(simulate_from(model, FlowState::new(initial_points)?, config, driver, u, direction)?.0)
}

/// Final position of `x` after `steps` steps of the driver.
fn flow_point(
    model: &DiffusionModel,
    x: &[f64],
    steps: u64,
    driver: &BrownianDriver,
    direction: FlowDirection,
) -> Result<Vec<f64>> {
    let mut state = FlowState::from_flat(x.len(), x.to_vec());
    let mut stream = driver.stream(0);
    let mut db = vec![0.0; x.len()];
    for _ in 0..steps {
        stream.next_into(&mut db);
        step_with_increment(model, &mut state, &db, driver.dt(), None, direction, DEFAULT_BLOWUP_RADIUS)?;
    }
    Ok(state.points)
}

/// `|X_{t+τ}(x, b) - X_t(X_τ(x, b), θ_τ b)|` for the Euler flow.
pub fn cocycle_residual(
    model: &DiffusionModel,
    x: &[f64],
    t: f64,
    tau: f64,
    dt: f64,
    seed: u64,
    direction: FlowDirection,
) -> Result<f64> {
    let n_t = IntegratorConfig::new(dt, t).steps()?;
    let n_tau = IntegratorConfig::new(dt, tau).steps()?;
    let driver = BrownianDriver::new(seed, model.dim(), dt)?;
    let whole = flow_point(model, x, n_t + n_tau, &driver, direction)?;
    let first = flow_point(model, x, n_tau, &driver, direction)?;
    let composed = flow_point(model, &first, n_t, &driver.shifted(n_tau), direction)?;
    Ok(whole.iter().zip(&composed).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}
