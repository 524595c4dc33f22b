//! Lyapunov-rate estimators: trailing-window slopes of `ln M_t` and `ln V_t`,
//! the random clock, invariant-measure integrals, and the lower/upper bounds
//! `Leb(A)·(-½ ∫ energy + ∫ potential) <= rate <= -λ_c/2`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::ScalarField;
use crate::flow::{step_with_increment, BrownianDriver, FlowState, IntegratorConfig, TrajectoryRecord};
use crate::model::{DiffusionModel, FlowDirection};
use crate::operators::{relative_terms, OperatorKind};
use crate::quad::integrate_rd;
use crate::stats::{batch_means, ls_slope};
use crate::volume::{volume_series, QuadratureGrid, VolumeSeries};

/// Fewest recorded times a rate window may hold.
pub const MIN_WINDOW_POINTS: usize = 10;

/// How `ln M_t = ln(u(X_t)|DX_t|)` is obtained from a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateSource {
    /// `ln u(X_t) + logdet`
    Direct,
    /// `ln u(x) + acc_sto - ½ acc_energy + acc_potential`
    ExponentialFormula,
}

/// `ln M_t` of point `i` at every recorded time.
pub fn ln_m_series(record: &TrajectoryRecord, u: &dyn ScalarField, i: usize, source: RateSource) -> Result<Vec<f64>> {
    if i >= record.len() {
        return Err(invalid(format!("point {i} out of range for a record of {} points", record.len())));
    }
    match source {
        RateSource::Direct => Ok(record.frames.iter().map(|f| u.ln_value(f.point(record.dim, i)) + f.logdet[i]).collect()),
        RateSource::ExponentialFormula => {
            if !record.has_accumulators {
                return Err(invalid("record carries no accumulators"));
            }
            let ln_u0 = u.ln_value(record.initial_point(i));
            Ok(record
                .frames
                .iter()
                .map(|f| ln_u0 + f.acc_sto[i] - 0.5 * f.acc_energy[i] + f.acc_potential[i])
                .collect())
        }
    }
}

/// Indices of the trailing `fraction` of the time span.
fn window(times: &[f64], fraction: f64) -> Result<(usize, f64, f64)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("window fraction must lie in (0, 1], got {fraction}")));
    }
    let (t0, t1) = match (times.first(), times.last()) {
        (Some(a), Some(b)) => (*a, *b),
        _ => return Err(Error::WindowTooShort { available: 0, required: MIN_WINDOW_POINTS }),
    };
    let start_time = t1 - fraction * (t1 - t0);
    let start = times.iter().position(|&t| t >= start_time - 1e-12 * t1.abs().max(1.0)).unwrap_or(times.len());
    let available = times.len() - start;
    if available < MIN_WINDOW_POINTS {
        return Err(Error::WindowTooShort { available, required: MIN_WINDOW_POINTS });
    }
    Ok((start, times[start], t1))
}

/// Least-squares slope of `series` against `times` over the trailing window.
pub fn window_slope(times: &[f64], series: &[f64], fraction: f64) -> Result<f64> {
    let (start, _, _) = window(times, fraction)?;
    Ok(ls_slope(&times[start..], &series[start..]))
}

/// Per-point rate estimates `(1/t) ln M_t`, as trailing-window slopes.
pub fn pointwise_rate(record: &TrajectoryRecord, u: &dyn ScalarField, window_fraction: f64, source: RateSource) -> Result<Vec<f64>> {
    let times = record.times();
    window(&times, window_fraction)?;
    (0..record.len())
        .map(|i| window_slope(&times, &ln_m_series(record, u, i, source)?, window_fraction))
        .collect()
}

/// Trailing-window slope of `ln V_t`.
pub fn volume_rate(series: &VolumeSeries, window_fraction: f64) -> Result<f64> {
    window_slope(&series.times, &series.ln_values, window_fraction)
}

/// Random-clock rate `𝔱(t)/t = acc_energy(t)/t`, averaged over the record's points.
pub fn clock_rate(record: &TrajectoryRecord) -> Result<f64> {
    if !record.has_accumulators {
        return Err(invalid("record carries no accumulators"));
    }
    let last = record.last();
    if last.t <= 0.0 {
        return Err(invalid("clock rate needs a positive horizon"));
    }
    Ok(last.acc_energy.iter().sum::<f64>() / (last.acc_energy.len() as f64 * last.t))
}

/// Estimator of `∫ f ψ⁻²/Z dx`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method")]
pub enum IntegralMethod {
    /// Time average along one forward path started at `start` (origin when empty).
    Ergodic {
        horizon: f64,
        dt: f64,
        seed: u64,
        #[serde(default = "default_burn_in")]
        burn_in_fraction: f64,
        #[serde(default)]
        start: Vec<f64>,
    },
    /// Tensor Gauss–Legendre on a cube grown until the weighted integrand on
    /// its faces is below `boundary_tol` of the total.
    Quadrature {
        #[serde(default = "default_boundary_tol")]
        boundary_tol: f64,
        #[serde(default = "default_max_radius")]
        max_radius: f64,
    },
}

fn default_burn_in() -> f64 {
    0.1
}

fn default_boundary_tol() -> f64 {
    1e-12
}

fn default_max_radius() -> f64 {
    30.0
}

impl IntegralMethod {
    pub fn quadrature() -> Self {
        IntegralMethod::Quadrature { boundary_tol: default_boundary_tol(), max_radius: default_max_radius() }
    }

    pub fn ergodic(horizon: f64, dt: f64, seed: u64) -> Self {
        IntegralMethod::Ergodic { horizon, dt, seed, burn_in_fraction: default_burn_in(), start: Vec::new() }
    }
}

/// Estimate with its standard error (or quadrature error estimate).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntegralEstimate {
    pub value: f64,
    pub std_error: f64,
    /// Half-width of the truncation cube (quadrature mode).
    pub radius: Option<f64>,
}

const ERGODIC_BATCHES: usize = 20;

pub fn invariant_integral(model: &DiffusionModel, f: &(dyn Fn(&[f64]) -> f64 + Sync), method: &IntegralMethod) -> Result<IntegralEstimate> {
    match method {
        IntegralMethod::Quadrature { boundary_tol, max_radius } => {
            let weighted = |x: &[f64]| {
                let w = model.ln_invariant_density(x).exp();
                if w == 0.0 {
                    0.0
                } else {
                    f(x) * w
                }
            };
            let r = integrate_rd(&weighted, model.dim(), *boundary_tol, *max_radius)?;
            Ok(IntegralEstimate { value: r.value, std_error: r.error, radius: Some(r.radius) })
        }
        IntegralMethod::Ergodic { horizon, dt, seed, burn_in_fraction, start } => {
            let config = IntegratorConfig::new(*dt, *horizon);
            let steps = config.steps()?;
            if !(0.0..1.0).contains(burn_in_fraction) {
                return Err(invalid("burn-in fraction must lie in [0, 1)"));
            }
            let x0 = if start.is_empty() { vec![0.0; model.dim()] } else { start.clone() };
            let mut state = FlowState::new(&[x0])?;
            let driver = BrownianDriver::new(*seed, model.dim(), *dt)?;
            let mut stream = driver.stream(0);
            let mut db = vec![0.0; model.dim()];
            let burn = (burn_in_fraction * steps as f64).round() as u64;
            let mut samples = Vec::with_capacity((steps - burn) as usize);
            for k in 1..=steps {
                stream.next_into(&mut db);
                step_with_increment(model, &mut state, &db, *dt, None, FlowDirection::Forward, config.blowup_radius)?;
                if k > burn {
                    samples.push(f(state.point(0)));
                }
            }
            if samples.is_empty() {
                return Err(invalid("no samples after burn-in"));
            }
            let (value, std_error) = batch_means(&samples, ERGODIC_BATCHES);
            Ok(IntegralEstimate { value, std_error, radius: None })
        }
    }
}

/// Energy integrand `∇u·a∇u / u²`.
pub fn energy_integrand(model: &DiffusionModel, u: &dyn ScalarField, x: &[f64]) -> Result<f64> {
    let g = crate::field::ln_derivatives(u, x, model.fd_fallback())?.0;
    Ok(g.dot(&(model.a().matrix() * &g)))
}

/// Potential integrand `𝔏♯u / u`.
pub fn potential_integrand(model: &DiffusionModel, u: &dyn ScalarField, x: &[f64]) -> Result<f64> {
    Ok(relative_terms(model, u, x)?.combine(OperatorKind::SharpAdjoint))
}

fn fallible_integral(model: &DiffusionModel, f: &(dyn Fn(&[f64]) -> Result<f64> + Sync), method: &IntegralMethod) -> Result<IntegralEstimate> {
    let failure = std::sync::Mutex::new(None);
    let g = |x: &[f64]| match f(x) {
        Ok(v) => v,
        Err(e) => {
            failure.lock().expect("poisoned").get_or_insert(e);
            f64::NAN
        }
    };
    let est = invariant_integral(model, &g, method);
    if let Some(e) = failure.into_inner().expect("poisoned") {
        return Err(e);
    }
    let est = est?;
    if !est.value.is_finite() {
        return Err(Error::IntegrabilityProbeFailed("integral is not finite".into()));
    }
    Ok(est)
}

/// Lower and upper Lyapunov bounds for a region of measure `measure`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bounds {
    pub energy_integral: IntegralEstimate,
    pub potential_integral: IntegralEstimate,
    pub region_measure: f64,
    /// `Leb(A)·(-½ energy + potential)`
    pub lower_bound: f64,
    pub lower_bound_se: f64,
    /// `-½ energy + potential`, the bound without the measure prefactor.
    pub lower_bound_unit: f64,
    /// `-λ_c / 2`
    pub upper_bound: f64,
}

pub fn bounds(model: &DiffusionModel, u: &dyn ScalarField, region_measure: f64, method: &IntegralMethod) -> Result<Bounds> {
    if !(region_measure > 0.0) {
        return Err(invalid("region measure must be positive"));
    }
    let energy = fallible_integral(model, &|x| energy_integrand(model, u, x), method)?;
    let potential = fallible_integral(model, &|x| potential_integrand(model, u, x), method)?;
    let unit = -0.5 * energy.value + potential.value;
    let unit_se = ((0.5 * energy.std_error).powi(2) + potential.std_error.powi(2)).sqrt();
    Ok(Bounds {
        energy_integral: energy,
        potential_integral: potential,
        region_measure,
        lower_bound: region_measure * unit,
        lower_bound_se: region_measure * unit_se,
        lower_bound_unit: unit,
        upper_bound: -0.5 * model.lambda_c(),
    })
}

/// Everything [`lyapunov_report`] measures on one path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovReport {
    pub per_point_rates: Vec<f64>,
    pub per_point_rates_direct: Vec<f64>,
    pub volume_rate: f64,
    pub clock_rate: f64,
    pub bounds: Bounds,
    pub window: (f64, f64),
    pub volume: VolumeSeries,
    pub record: TrajectoryRecord,
}

impl LyapunovReport {
    pub fn mean_point_rate(&self) -> f64 {
        self.per_point_rates.iter().sum::<f64>() / self.per_point_rates.len() as f64
    }
}

/// Flows the grid nodes once (forward), then estimates every rate and bound.
pub fn lyapunov_report(
    model: &DiffusionModel,
    u: &dyn ScalarField,
    grid: &QuadratureGrid,
    region_measure: f64,
    config: &IntegratorConfig,
    seed: u64,
    window_fraction: f64,
    method: &IntegralMethod,
) -> Result<LyapunovReport> {
    let driver = BrownianDriver::new(seed, model.dim(), config.dt)?;
    let nodes: Vec<Vec<f64>> = (0..grid.len()).map(|i| grid.node(i).to_vec()).collect();
    let record = crate::flow::simulate(model, &nodes, config, &driver, Some(u), FlowDirection::Forward)?;
    let times = record.times();
    let (_, w0, w1) = window(&times, window_fraction)?;
    let per_point_rates = pointwise_rate(&record, u, window_fraction, RateSource::ExponentialFormula)?;
    let per_point_rates_direct = pointwise_rate(&record, u, window_fraction, RateSource::Direct)?;
    let volume = volume_series(model, u, grid, config, &driver, FlowDirection::Forward)?;
    Ok(LyapunovReport {
        per_point_rates,
        per_point_rates_direct,
        volume_rate: volume_rate(&volume, window_fraction)?,
        clock_rate: clock_rate(&record)?,
        bounds: bounds(model, u, region_measure, method)?,
        window: (w0, w1),
        volume,
        record,
    })
}

/// Both sides of the conjectured equality
/// `lim (1/t) ln ∫_{X_t(A)} ψ² = Leb(A)·(-2 ∫ ∇ψ·a∇ψ/ψ⁴ dx)`; reported, never judged.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConjectureReport {
    pub lhs: f64,
    pub rhs: f64,
    pub rhs_se: f64,
    /// Right-hand side without the `Leb(A)` factor.
    pub rhs_unit: f64,
    pub region_measure: f64,
}

pub fn conjecture_probe(
    model: &DiffusionModel,
    grid: &QuadratureGrid,
    region_measure: f64,
    config: &IntegratorConfig,
    seed: u64,
    window_fraction: f64,
    method: &IntegralMethod,
) -> Result<ConjectureReport> {
    let psi = model.psi().clone();
    let psi_sq = crate::field::Power::new(psi.clone(), 2.0);
    let driver = BrownianDriver::new(seed, model.dim(), config.dt)?;
    let series = volume_series(model, &psi_sq, grid, config, &driver, FlowDirection::Forward)?;
    let lhs = volume_rate(&series, window_fraction)?;
    // ∇ψ·a∇ψ/ψ⁴ integrated against dx equals ∇lnψ·a∇lnψ against ψ⁻² dx.
    let energy = fallible_integral(model, &|x| energy_integrand(model, &*psi, x), method)?;
    let z = model.normalization();
    let rhs_unit = -2.0 * z * energy.value;
    Ok(ConjectureReport {
        lhs,
        rhs: region_measure * rhs_unit,
        rhs_se: region_measure * 2.0 * z * energy.std_error,
        rhs_unit,
        region_measure,
    })
}
