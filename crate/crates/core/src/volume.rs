//! u-volume of the flowed image of a box union, `∫_{X_t(A)} u = ∫_A u(X_t)|DX_t|`,
//! and the supermartingale and decay probes built on it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::ScalarField;
use crate::flow::{step_with_increment, BrownianDriver, FlowState, IntegratorConfig};
use crate::model::{DiffusionModel, FlowDirection};
use crate::sampling::halton;
use crate::stats::{log_sum_exp, Running};

/// Axis-aligned box `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AaBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl AaBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(invalid("box corners must have the same positive dimension"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite()) {
            return Err(invalid(format!("box {lower:?}..{upper:?} is empty or unbounded")));
        }
        Ok(Self { lower, upper })
    }

    pub fn unit(dim: usize) -> Self {
        Self { lower: vec![0.0; dim], upper: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn volume(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).product()
    }

    /// True when the interiors intersect.
    pub fn overlaps(&self, other: &AaBox) -> bool {
        (0..self.dim()).all(|k| self.lower[k] < other.upper[k] && other.lower[k] < self.upper[k])
    }
}

/// Finite union of pairwise disjoint boxes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompactRegion {
    boxes: Vec<AaBox>,
    measure: f64,
}

impl CompactRegion {
    pub fn new(boxes: Vec<AaBox>) -> Result<Self> {
        let dim = boxes.first().ok_or_else(|| invalid("region needs at least one box"))?.dim();
        if boxes.iter().any(|b| b.dim() != dim) {
            return Err(invalid("boxes of a region must share one dimension"));
        }
        for (i, a) in boxes.iter().enumerate() {
            if let Some(j) = boxes[i + 1..].iter().position(|b| a.overlaps(b)) {
                return Err(invalid(format!("boxes {i} and {} overlap", i + 1 + j)));
            }
        }
        let measure = boxes.iter().map(AaBox::volume).sum();
        Ok(Self { boxes, measure })
    }

    pub fn boxes(&self) -> &[AaBox] {
        &self.boxes
    }

    pub fn dim(&self) -> usize {
        self.boxes[0].dim()
    }

    /// Lebesgue measure of the union.
    pub fn measure(&self) -> f64 {
        self.measure
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum GridRule {
    /// `n` midpoints per axis in every box.
    Midpoint { per_axis: usize },
    /// `count` Halton points in total, split over boxes by volume.
    LowDiscrepancy { count: usize },
}

/// Nodes and weights discretising `∫_A · dx`; nodes double as flow initial points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadratureGrid {
    pub dim: usize,
    pub rule: GridRule,
    /// Flat node coordinates, `dim` per node.
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    /// Index of the box holding each node.
    pub box_index: Vec<usize>,
}

impl QuadratureGrid {
    pub fn new(region: &CompactRegion, rule: GridRule) -> Result<Self> {
        let dim = region.dim();
        let mut grid = Self { dim, rule, nodes: Vec::new(), weights: Vec::new(), box_index: Vec::new() };
        match rule {
            GridRule::Midpoint { per_axis } => {
                if per_axis == 0 {
                    return Err(invalid("midpoint grid needs at least one node per axis"));
                }
                for (b, bx) in region.boxes().iter().enumerate() {
                    let total = per_axis.pow(dim as u32);
                    let w = bx.volume() / total as f64;
                    for flat in 0..total {
                        let mut rem = flat;
                        for k in 0..dim {
                            let i = rem % per_axis;
                            rem /= per_axis;
                            let h = (bx.upper[k] - bx.lower[k]) / per_axis as f64;
                            grid.nodes.push(bx.lower[k] + (i as f64 + 0.5) * h);
                        }
                        grid.weights.push(w);
                        grid.box_index.push(b);
                    }
                }
            }
            GridRule::LowDiscrepancy { count } => {
                if count < region.boxes().len() {
                    return Err(invalid("low-discrepancy grid needs at least one node per box"));
                }
                for (b, bx) in region.boxes().iter().enumerate() {
                    let share = ((count as f64 * bx.volume() / region.measure()).round() as usize).max(1);
                    let w = bx.volume() / share as f64;
                    for index in 1..=share as u64 {
                        for (k, u) in halton(index, dim).into_iter().enumerate() {
                            grid.nodes.push(bx.lower[k] + u * (bx.upper[k] - bx.lower[k]));
                        }
                        grid.weights.push(w);
                        grid.box_index.push(b);
                    }
                }
            }
        }
        Ok(grid)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn initial_state(&self) -> FlowState {
        FlowState::from_flat(self.dim, self.nodes.clone())
    }
}

fn check_grid(state: &FlowState, grid: &QuadratureGrid) -> Result<()> {
    if state.len() != grid.len() || state.dim != grid.dim || state.initial_points != grid.nodes {
        return Err(Error::GridMismatch { nodes: grid.len(), points: state.len() });
    }
    Ok(())
}

/// `ln Σ_i w_i u(p_i) e^{logdet_i}` over the nodes selected by `keep`.
fn ln_volume_of(points: &[f64], logdet: &[f64], u: &dyn ScalarField, grid: &QuadratureGrid, keep: impl Fn(usize) -> bool) -> f64 {
    let terms: Vec<f64> = (0..grid.len())
        .filter(|&i| keep(i))
        .map(|i| grid.weights[i].ln() + u.ln_value(&points[i * grid.dim..(i + 1) * grid.dim]) + logdet[i])
        .collect();
    log_sum_exp(&terms)
}

/// `ln ∫_{X_t(A)} u`, evaluated in the log domain.
pub fn ln_u_volume(state: &FlowState, u: &dyn ScalarField, grid: &QuadratureGrid) -> Result<f64> {
    check_grid(state, grid)?;
    Ok(ln_volume_of(&state.points, &state.logdet, u, grid, |_| true))
}

/// `∫_{X_t(A)} u = Σ_i w_i u(X_t(x_i)) |DX_t(x_i)|`.
pub fn u_volume(state: &FlowState, u: &dyn ScalarField, grid: &QuadratureGrid) -> Result<f64> {
    Ok(ln_u_volume(state, u, grid)?.exp())
}

/// u-volume restricted to the nodes of box `b`.
pub fn u_volume_of_box(state: &FlowState, u: &dyn ScalarField, grid: &QuadratureGrid, b: usize) -> Result<f64> {
    check_grid(state, grid)?;
    Ok(ln_volume_of(&state.points, &state.logdet, u, grid, |i| grid.box_index[i] == b).exp())
}

/// `V_t` at recorded times.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VolumeSeries {
    pub times: Vec<f64>,
    pub ln_values: Vec<f64>,
}

impl VolumeSeries {
    pub fn values(&self) -> Vec<f64> {
        self.ln_values.iter().map(|v| v.exp()).collect()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Flows the grid nodes along one Brownian path and records `ln V_t` every
/// `record_stride` steps (and at the horizon).
pub fn volume_series(
    model: &DiffusionModel,
    u: &dyn ScalarField,
    grid: &QuadratureGrid,
    config: &IntegratorConfig,
    driver: &BrownianDriver,
    direction: FlowDirection,
) -> Result<VolumeSeries> {
    let steps = config.steps()?;
    let mut state = grid.initial_state();
    let mut series = VolumeSeries { times: vec![0.0], ln_values: vec![ln_u_volume(&state, u, grid)?] };
    let mut stream = driver.stream(0);
    let mut db = vec![0.0; grid.dim];
    for k in 1..=steps {
        stream.next_into(&mut db);
        step_with_increment(model, &mut state, &db, config.dt, None, direction, config.blowup_radius)?;
        if k % config.record_stride as u64 == 0 || k == steps {
            series.times.push(state.t);
            series.ln_values.push(ln_u_volume(&state, u, grid)?);
        }
    }
    Ok(series)
}

/// Independent Brownian paths; path `p` uses seed `base_seed + p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ensemble {
    pub paths: usize,
    pub base_seed: u64,
}

impl Ensemble {
    pub fn seed(&self, path: usize) -> u64 {
        self.base_seed.wrapping_add(path as u64)
    }
}

/// Ensemble statistics of `V_t` at checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub paths: usize,
    /// Paths stopped by the blow-up guard; excluded from the statistics.
    pub blown_up: usize,
    /// `max_{s<t} (mean_t - mean_s - slack·SE_{s,t})`; non-positive means pass.
    pub worst_violation: f64,
    pub slack: f64,
    pub passed: bool,
    pub notes: Vec<String>,
}

impl ProbeReport {
    /// Largest `|mean_t - mean_0| - slack·SE` over checkpoints; non-positive
    /// means the mean curve is constant within the slack.
    pub fn constancy_violation(&self) -> f64 {
        let (m0, s0) = (self.mean[0], self.std_error[0]);
        self.mean
            .iter()
            .zip(&self.std_error)
            .map(|(m, s)| (m - m0).abs() - self.slack * (s * s + s0 * s0).sqrt())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_constant(&self) -> bool {
        self.constancy_violation() <= 0.0
    }
}

pub const SUPERMARTINGALE_SLACK: f64 = 2.0;

/// Estimates `E[V_t]` over independent paths and checks that it does not
/// increase beyond two combined standard errors between any two checkpoints.
pub fn supermartingale_probe(
    model: &DiffusionModel,
    u: &dyn ScalarField,
    grid: &QuadratureGrid,
    ensemble: &Ensemble,
    config: &IntegratorConfig,
    direction: FlowDirection,
) -> Result<ProbeReport> {
    if ensemble.paths == 0 {
        return Err(invalid("ensemble needs at least one path"));
    }
    let runs: Vec<Result<VolumeSeries>> = (0..ensemble.paths)
        .into_par_iter()
        .map(|p| {
            let driver = BrownianDriver::new(ensemble.seed(p), model.dim(), config.dt)?;
            volume_series(model, u, grid, config, &driver, direction)
        })
        .collect();

    let mut stats: Vec<Running> = Vec::new();
    let mut times = Vec::new();
    let mut blown_up = 0;
    for run in runs {
        match run {
            Ok(series) => {
                if stats.is_empty() {
                    stats = vec![Running::new(); series.len()];
                    times = series.times.clone();
                }
                for (acc, v) in stats.iter_mut().zip(series.values()) {
                    acc.push(v);
                }
            }
            Err(Error::BlowUp { .. }) => blown_up += 1,
            Err(e) => return Err(e),
        }
    }
    if stats.is_empty() {
        return Err(invalid("every path of the ensemble blew up"));
    }
    let mean: Vec<f64> = stats.iter().map(Running::mean).collect();
    let std_error: Vec<f64> = stats.iter().map(Running::std_error).collect();

    let mut worst = f64::NEG_INFINITY;
    for t in 1..mean.len() {
        for s in 0..t {
            let se = (std_error[s].powi(2) + std_error[t].powi(2)).sqrt();
            worst = worst.max(mean[t] - mean[s] - SUPERMARTINGALE_SLACK * se);
        }
    }
    if mean.len() == 1 {
        worst = 0.0;
    }
    let mut notes = vec!["superharmonicity of u is assumed on all of R^d; certify it separately on a declared ball".to_string()];
    if blown_up > 0 {
        notes.push(format!("{blown_up} paths tripped the blow-up guard and were excluded"));
    }
    Ok(ProbeReport {
        times,
        mean,
        std_error,
        paths: ensemble.paths,
        blown_up,
        worst_violation: worst,
        slack: SUPERMARTINGALE_SLACK,
        passed: worst <= 0.0 && blown_up == 0,
        notes,
    })
}

/// Single-path decay check `V_T <= ε V_0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayReport {
    pub series: VolumeSeries,
    pub epsilon: f64,
    /// `ln(V_T / V_0)`
    pub ln_ratio: f64,
    pub passed: bool,
}

pub fn decay_probe(
    model: &DiffusionModel,
    u: &dyn ScalarField,
    grid: &QuadratureGrid,
    config: &IntegratorConfig,
    seed: u64,
    epsilon: f64,
    direction: FlowDirection,
) -> Result<DecayReport> {
    if !(epsilon > 0.0) {
        return Err(invalid("decay threshold must be positive"));
    }
    let driver = BrownianDriver::new(seed, model.dim(), config.dt)?;
    let series = volume_series(model, u, grid, config, &driver, direction)?;
    let ln_ratio = series.ln_values[series.len() - 1] - series.ln_values[0];
    Ok(DecayReport { series, epsilon, ln_ratio, passed: ln_ratio <= epsilon.ln() })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use nalgebra::DMatrix;

    use super::*;
    use crate::field::GaussianExp;

    fn ou(d: usize) -> DiffusionModel {
        DiffusionModel::new(DMatrix::identity(d, d), Arc::new(GaussianExp::ou_potential(d)), d as f64).unwrap()
    }

    fn unit_grid(n: usize) -> QuadratureGrid {
        QuadratureGrid::new(&CompactRegion::new(vec![AaBox::unit(2)]).unwrap(), GridRule::Midpoint { per_axis: n }).unwrap()
    }

    #[test]
    fn region_rejects_overlaps_and_sums_measure() {
        let a = AaBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let b = AaBox::new(vec![1.0, 0.0], vec![3.0, 0.5]).unwrap();
        let c = AaBox::new(vec![0.5, 0.5], vec![2.0, 2.0]).unwrap();
        assert_eq!(CompactRegion::new(vec![a.clone(), b.clone()]).unwrap().measure(), 2.0);
        assert!(CompactRegion::new(vec![a, c]).is_err());
        assert!(AaBox::new(vec![0.0, 1.0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn weights_sum_to_measure() {
        let region = CompactRegion::new(vec![
            AaBox::new(vec![0.0, 0.0], vec![1.0, 2.0]).unwrap(),
            AaBox::new(vec![-3.0, 0.0], vec![-2.5, 0.5]).unwrap(),
        ])
        .unwrap();
        for rule in [GridRule::Midpoint { per_axis: 7 }, GridRule::LowDiscrepancy { count: 301 }] {
            let g = QuadratureGrid::new(&region, rule).unwrap();
            let s: f64 = g.weights.iter().sum();
            assert!((s / region.measure() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn volume_at_time_zero_is_quadrature() {
        let g = unit_grid(4);
        let one = GaussianExp::constant(1.0);
        assert!((u_volume(&g.initial_state(), &one, &g).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn grid_mismatch_is_reported() {
        let g = unit_grid(4);
        let other = unit_grid(3).initial_state();
        assert!(matches!(u_volume(&other, &GaussianExp::constant(1.0), &g), Err(Error::GridMismatch { nodes: 16, points: 9 })));
    }

    #[test]
    fn constant_field_volume_is_lebesgue_image() {
        let m = ou(2);
        let g = unit_grid(4);
        let drv = BrownianDriver::new(1, 2, 0.01).unwrap();
        let s = volume_series(&m, &GaussianExp::constant(1.0), &g, &IntegratorConfig::new(0.01, 1.0).with_record_stride(50), &drv, FlowDirection::Forward).unwrap();
        assert_eq!(s.times.len(), 3);
        assert!((s.ln_values[2] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_horizon_fails_decay() {
        let m = ou(2);
        let g = unit_grid(4);
        let r = decay_probe(&m, &GaussianExp::ou_potential(2), &g, &IntegratorConfig::new(0.01, 0.0), 1, 1e-3, FlowDirection::Forward).unwrap();
        assert!(!r.passed);
        assert_eq!(r.ln_ratio, 0.0);
    }

    #[test]
    fn sharp_flow_volume_grows() {
        let m = ou(2);
        let g = unit_grid(4);
        let r = decay_probe(&m, &GaussianExp::ou_potential(2), &g, &IntegratorConfig::new(0.01, 2.0), 3, 1e-3, FlowDirection::Sharp).unwrap();
        assert!(!r.passed);
        assert!(r.ln_ratio > 0.0);
    }

    #[test]
    fn small_ensemble_probe_runs_and_is_deterministic() {
        let m = ou(2);
        let g = unit_grid(4);
        let cfg = IntegratorConfig::new(0.01, 1.0).with_record_stride(10);
        let e = Ensemble { paths: 20, base_seed: 5 };
        let a = supermartingale_probe(&m, &GaussianExp::ou_potential(2), &g, &e, &cfg, FlowDirection::Forward).unwrap();
        let b = supermartingale_probe(&m, &GaussianExp::ou_potential(2), &g, &e, &cfg, FlowDirection::Forward).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.times.len(), 11);
        assert_eq!(a.std_error[0], 0.0);
        assert!(a.passed);
    }
}
