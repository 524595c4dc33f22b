//! Exact Ornstein–Uhlenbeck reference: `σ = I`, `m(x) = -x`,
//! `ψ(x) = π^{d/4} e^{|x|²/2}`, `λ_c = d`.
//!
//! The transition `X_{t+Δ} = e^{-Δ} X_t + η` with `η ~ N(0, (1 - e^{-2Δ})/2 · I)`
//! is sampled exactly, with the same `η` for every point.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::field::GaussianExp;
use crate::flow::{step_with_increment, BrownianDriver, FlowState, IntegratorConfig, DEFAULT_BLOWUP_RADIUS};
use crate::model::{DiffusionModel, FlowDirection};
use crate::stats::ls_slope;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OuModel {
    dim: usize,
}

impl OuModel {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(invalid(format!("dimension must be at least 2, got {dim}")));
        }
        Ok(Self { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `ψ(x) = π^{d/4} e^{|x|²/2}`, normalised so that `∫ψ⁻² = 1`.
    pub fn psi(&self) -> GaussianExp {
        GaussianExp::ou_potential(self.dim)
    }

    pub fn model(&self) -> DiffusionModel {
        let d = self.dim;
        DiffusionModel::new(DMatrix::identity(d, d), Arc::new(self.psi()), d as f64).expect("OU coefficients are valid")
    }
}

/// Standard deviation of the exact transition noise over `delta`.
pub fn transition_scale(delta: f64) -> f64 {
    (0.5 * (-(-2.0 * delta).exp_m1())).sqrt()
}

/// `X ← e^{-Δ} X + η` for every point (flat, `eta.len()` per point).
pub fn exact_flow_step(points: &mut [f64], delta: f64, eta: &[f64]) {
    let c = (-delta).exp();
    for p in points.chunks_mut(eta.len()) {
        for (x, e) in p.iter_mut().zip(eta) {
            *x = c * *x + e;
        }
    }
}

/// Exact one-step map driven by a Brownian increment `db` over `dt`: the
/// transition noise is `db` rescaled to the exact variance.
pub fn exact_flow_step_coupled(points: &mut [f64], dt: f64, db: &[f64]) {
    let k = transition_scale(dt) / dt.sqrt();
    let eta: Vec<f64> = db.iter().map(|b| k * b).collect();
    exact_flow_step(points, dt, &eta);
}

/// `ln |DX_t| = -d t`.
pub fn exact_logdet(dim: usize, t: f64) -> f64 {
    -(dim as f64) * t
}

/// Closed-form quantities of the OU example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OuQuantities {
    /// `∫ |∇ln ψ|² dΠ = d/2`
    pub energy_integral: f64,
    /// `∫ 𝔏♯ψ/ψ dΠ = -3d/4`
    pub potential_integral: f64,
    /// Rate of `ln M_t` for `u = ψ`: `-d`.
    pub per_point_rate_u_psi: f64,
    /// `-λ_c/2 = -d/2`
    pub upper_bound: f64,
    /// Lower bound at `Leb(A) = 1`: `-d`.
    pub lower_bound_unit_measure: f64,
    /// `∫ |x|² dΠ = d/2`
    pub second_moment: f64,
}

pub fn analytic_quantities(dim: usize) -> OuQuantities {
    let d = dim as f64;
    OuQuantities {
        energy_integral: d / 2.0,
        potential_integral: -0.75 * d,
        per_point_rate_u_psi: -d,
        upper_bound: -d / 2.0,
        lower_bound_unit_measure: -d,
        second_moment: d / 2.0,
    }
}

/// Strong error of the Euler flow against the exact flow at one step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleRow {
    pub dt: f64,
    /// Mean over paths of `max_{t, i} |X^{Euler}_t(x_i) - X^{exact}_t(x_i)|`.
    pub max_strong_error: f64,
    /// `max_{t, i} |logdet_t - (-d t)|`
    pub logdet_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleComparison {
    pub rows: Vec<OracleRow>,
    /// Least-squares slope of `ln error` against `ln dt`.
    pub observed_order: f64,
}

/// Runs Euler and the exact flow on identical increments for every step size.
///
/// Increments are drawn at the finest step size and summed for coarser ones,
/// so all step sizes see the same Brownian path. Every `dt` must be an
/// integer multiple of the finest one.
pub fn oracle_compare(ou: &OuModel, dts: &[f64], horizon: f64, initial_points: &[Vec<f64>], seed: u64, paths: usize) -> Result<OracleComparison> {
    let fine = dts.iter().copied().fold(f64::INFINITY, f64::min);
    if dts.is_empty() || !(fine > 0.0) || paths == 0 {
        return Err(invalid("oracle comparison needs positive step sizes and at least one path"));
    }
    let fine_steps = IntegratorConfig::new(fine, horizon).steps()?;
    let model = ou.model();
    let d = ou.dim();
    let mut rows = Vec::with_capacity(dts.len());
    for &dt in dts {
        let ratio = (dt / fine).round();
        if (ratio * fine - dt).abs() > 1e-9 * dt {
            return Err(invalid(format!("step {dt} is not a multiple of the finest step {fine}")));
        }
        let m = ratio as u64;
        let mut err_sum = 0.0;
        let mut logdet_err: f64 = 0.0;
        for p in 0..paths {
            let driver = BrownianDriver::new(seed.wrapping_add(p as u64), d, fine)?;
            let mut stream = driver.stream(0);
            let mut euler = FlowState::new(initial_points)?;
            let mut exact = euler.points.clone();
            let mut fine_db = vec![0.0; d];
            let mut db = vec![0.0; d];
            let mut worst: f64 = 0.0;
            for _ in 0..fine_steps / m {
                db.iter_mut().for_each(|v| *v = 0.0);
                for _ in 0..m {
                    stream.next_into(&mut fine_db);
                    db.iter_mut().zip(&fine_db).for_each(|(a, b)| *a += b);
                }
                step_with_increment(&model, &mut euler, &db, dt, None, FlowDirection::Forward, DEFAULT_BLOWUP_RADIUS)?;
                exact_flow_step_coupled(&mut exact, dt, &db);
                for (a, b) in euler.points.chunks(d).zip(exact.chunks(d)) {
                    let e = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                    worst = worst.max(e);
                }
                let want = exact_logdet(d, euler.t);
                logdet_err = euler.logdet.iter().fold(logdet_err, |acc, l| acc.max((l - want).abs()));
            }
            err_sum += worst;
        }
        rows.push(OracleRow { dt, max_strong_error: err_sum / paths as f64, logdet_error: logdet_err });
    }
    let observed_order = if rows.len() >= 2 {
        let xs: Vec<f64> = rows.iter().map(|r| r.dt.ln()).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.max_strong_error.ln()).collect();
        ls_slope(&xs, &ys)
    } else {
        f64::NAN
    };
    Ok(OracleComparison { rows, observed_order })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ScalarField;

    #[test]
    fn drift_is_minus_x() {
        let m = OuModel::new(3).unwrap().model();
        let x = [0.25, -1.5, 3.0];
        let v = m.drift(&x).unwrap();
        assert_eq!(v.as_slice(), &[-0.25, 1.5, -3.0]);
    }

    #[test]
    fn exact_step_contracts_differences() {
        let mut pts = vec![1.0, 2.0, -0.5, 0.5];
        exact_flow_step(&mut pts, 0.3, &[0.7, -0.2]);
        let c = (-0.3f64).exp();
        assert!(((pts[0] - pts[2]) - c * 1.5).abs() < 1e-15);
        assert!(((pts[1] - pts[3]) - c * 1.5).abs() < 1e-15);
        let mut same = vec![1.0, 2.0];
        exact_flow_step(&mut same, 0.0, &[0.0, 0.0]);
        assert_eq!(same, vec![1.0, 2.0]);
    }

    #[test]
    fn long_step_is_stationary() {
        assert!((transition_scale(50.0).powi(2) - 0.5).abs() < 1e-15);
        assert_eq!(transition_scale(0.0), 0.0);
    }

    #[test]
    fn logdet_examples() {
        assert_eq!(exact_logdet(2, 1.0), -2.0);
        assert_eq!(exact_logdet(2, 0.0), 0.0);
        assert_eq!(exact_logdet(3, 10.0), -30.0);
    }

    #[test]
    fn analytic_table() {
        let q = analytic_quantities(2);
        assert_eq!(
            [q.energy_integral, q.potential_integral, q.per_point_rate_u_psi, q.upper_bound, q.lower_bound_unit_measure, q.second_moment],
            [1.0, -1.5, -2.0, -1.0, -2.0, 1.0]
        );
        let q = analytic_quantities(3);
        assert_eq!(
            [q.energy_integral, q.potential_integral, q.per_point_rate_u_psi, q.upper_bound, q.lower_bound_unit_measure, q.second_moment],
            [1.5, -2.25, -3.0, -1.5, -3.0, 1.5]
        );
        for d in 2..8 {
            let q = analytic_quantities(d);
            assert_eq!(-0.5 * q.energy_integral + q.potential_integral, -(d as f64));
        }
    }

    #[test]
    fn psi_normalisation() {
        let psi = OuModel::new(2).unwrap().psi();
        assert!((psi.value(&[0.0, 0.0]) - std::f64::consts::PI.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn euler_converges_to_exact_flow() {
        let ou = OuModel::new(2).unwrap();
        let cmp = oracle_compare(&ou, &[4e-3, 2e-3, 1e-3], 1.0, &[vec![1.0, 0.0]], 3, 2).unwrap();
        assert!(cmp.observed_order > 0.8, "{cmp:?}");
        assert!(cmp.rows.iter().all(|r| r.logdet_error < 1e-12));
        assert!(oracle_compare(&ou, &[3e-3, 2e-3], 1.0, &[vec![1.0, 0.0]], 3, 1).is_err());
    }
}
