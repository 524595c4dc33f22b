//! Radial integral tests deciding recurrence or transience of a diffusion
//! `L = ½∇·a∇ + a∇Q·∇` from `E₁ = ((ax,x)/|x|²) e^{2Q}` and
//! `E₂ = (|x|²/(a⁻¹x,x)) e^{2Q}`:
//!
//! * recurrent when `∫_1^∞ r^{1-d} / Ê₁(r) dr = ∞`, with `Ê₁(r) = ∫_{S^{d-1}} E₁(rθ) dθ`;
//! * transient when `∫_1^∞ r^{1-d} / E₂(rθ) dr < ∞` on a set of directions of
//!   positive measure.
//!
//! All integrals are computed in `s = ln r` and in the log domain, so that
//! Gaussian potentials never overflow.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Result};
use crate::field::{norm, ScalarField};
use crate::model::{DiffusionModel, FlowDirection};
use crate::quad::ln_integrate;
use crate::sampling::halton;
use crate::stats::{log_add_exp, log_sum_exp, ls_slope};

/// Quadrature on the unit sphere `S^{d-1}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SphereQuadrature {
    pub dim: usize,
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

/// `ln |S^{d-1}| = ln(2π^{d/2} / Γ(d/2))`.
pub fn ln_sphere_area(dim: usize) -> f64 {
    let h = 0.5 * dim as f64;
    (2.0f64).ln() + h * PI.ln() - ln_gamma(h)
}

impl SphereQuadrature {
    /// Uniform angles for `d = 2`; Halton points pushed through the normal
    /// quantile and normalised, with equal weights, for `d >= 3`.
    pub fn new(dim: usize, count: usize) -> Result<Self> {
        if dim < 2 || count == 0 {
            return Err(invalid("sphere quadrature needs d >= 2 and at least one node"));
        }
        let area = ln_sphere_area(dim).exp();
        let nodes: Vec<Vec<f64>> = if dim == 2 {
            (0..count)
                .map(|k| {
                    let (s, c) = (2.0 * PI * k as f64 / count as f64).sin_cos();
                    vec![c, s]
                })
                .collect()
        } else {
            let normal = Normal::standard();
            (1..=count as u64)
                .map(|i| {
                    let g: Vec<f64> = halton(i, dim).into_iter().map(|u| normal.inverse_cdf(u)).collect();
                    let n = norm(&g);
                    g.into_iter().map(|c| c / n).collect()
                })
                .collect()
        };
        Ok(Self { dim, weights: vec![area / count as f64; count], nodes })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// `Q = ∓ ln ψ` of the forward (`-`) or sharp (`+`) flow generator.
///
/// `Q` is a log-potential and may be negative; only `value`, `gradient` and
/// `hessian` are meaningful.
#[derive(Debug, Clone)]
pub struct LogPotential {
    psi: Arc<dyn ScalarField>,
    sign: f64,
}

impl ScalarField for LogPotential {
    fn value(&self, x: &[f64]) -> f64 {
        self.sign * self.psi.ln_value(x)
    }
    fn ln_value(&self, _x: &[f64]) -> f64 {
        f64::NAN
    }
    fn gradient(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(self.psi.grad_ln(x)? * self.sign)
    }
    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.psi.hess_ln(x)? * self.sign)
    }
    fn mode(&self) -> crate::field::DerivativeMode {
        self.psi.mode()
    }
}

/// The generator of the forward flow is `½∇·a∇ + a∇Q·∇` with `Q = -ln ψ`;
/// the sharp flow reverses the drift, `Q = +ln ψ`.
pub fn q_of_flow(model: &DiffusionModel, flow: FlowDirection) -> LogPotential {
    LogPotential { psi: model.psi().clone(), sign: -flow.sign() }
}

/// `(Mθ, θ)` for a unit vector `θ`.
fn quadratic(m: &DMatrix<f64>, theta: &[f64]) -> f64 {
    let v = DVector::from_column_slice(theta);
    v.dot(&(m * &v))
}

/// `Q(rθ)`, writing `rθ` into `buf`.
fn q_on_ray(q: &dyn ScalarField, theta: &[f64], r: f64, buf: &mut [f64]) -> f64 {
    buf.iter_mut().zip(theta).for_each(|(b, t)| *b = r * t);
    q.value(buf)
}

/// Sphere quadrature of `E₁(rθ) = (aθ,θ) e^{2Q(rθ)}` in the log domain, with
/// the angular factor `ln(w_k (aθ_k,θ_k))` precomputed.
struct E1Hat<'a> {
    q: &'a dyn ScalarField,
    sphere: &'a SphereQuadrature,
    ln_factor: Vec<f64>,
    buf: RefCell<(Vec<f64>, Vec<f64>)>,
}

impl<'a> E1Hat<'a> {
    fn new(model: &DiffusionModel, q: &'a dyn ScalarField, sphere: &'a SphereQuadrature) -> Self {
        let a = model.a().matrix();
        let ln_factor = sphere.nodes.iter().zip(&sphere.weights).map(|(th, w)| w.ln() + quadratic(a, th).ln()).collect();
        Self { q, sphere, ln_factor, buf: RefCell::new((vec![0.0; model.dim()], vec![0.0; sphere.len()])) }
    }

    fn ln_value(&self, r: f64) -> f64 {
        let mut guard = self.buf.borrow_mut();
        let (x, terms) = &mut *guard;
        for (k, th) in self.sphere.nodes.iter().enumerate() {
            terms[k] = self.ln_factor[k] + 2.0 * q_on_ray(self.q, th, r, x);
        }
        log_sum_exp(terms)
    }
}

/// `ln Ê₁(r)` by sphere quadrature.
pub fn ln_e1_hat(model: &DiffusionModel, q: &dyn ScalarField, sphere: &SphereQuadrature, r: f64) -> f64 {
    E1Hat::new(model, q, sphere).ln_value(r)
}

pub fn e1_hat(model: &DiffusionModel, q: &dyn ScalarField, sphere: &SphereQuadrature, r: f64) -> f64 {
    ln_e1_hat(model, q, sphere, r).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Recurrent,
    Transient,
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Recurrent => "Recurrent",
            Verdict::Transient => "Transient",
            Verdict::Inconclusive => "Inconclusive",
        })
    }
}

/// Radii and decision thresholds of the integral tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// Increasing radii, the first at least 1.
    pub r_values: Vec<f64>,
    #[serde(default = "default_threshold")]
    pub divergence_threshold: f64,
    /// Smallest fitted slope of `ln(ΔI / Δln R)` against `ln R` still read
    /// as non-decaying.
    #[serde(default = "default_slope_tolerance")]
    pub slope_tolerance: f64,
    #[serde(default = "default_tail_tolerance")]
    pub tail_tolerance: f64,
    #[serde(default = "default_weight_fraction")]
    pub weight_fraction: f64,
    #[serde(default = "default_sphere_nodes")]
    pub sphere_nodes: usize,
}

fn default_threshold() -> f64 {
    1e6
}

fn default_slope_tolerance() -> f64 {
    -0.05
}

fn default_tail_tolerance() -> f64 {
    1e-10
}

fn default_weight_fraction() -> f64 {
    0.1
}

fn default_sphere_nodes() -> usize {
    64
}

impl Default for Schedule {
    /// `R = 2^k`, `k = 0..=40`.
    fn default() -> Self {
        Self {
            r_values: (0..=40).map(|k| 2f64.powi(k)).collect(),
            divergence_threshold: default_threshold(),
            slope_tolerance: default_slope_tolerance(),
            tail_tolerance: default_tail_tolerance(),
            weight_fraction: default_weight_fraction(),
            sphere_nodes: default_sphere_nodes(),
        }
    }
}

impl Schedule {
    fn check(&self) -> Result<()> {
        if self.r_values.len() < 2 || self.r_values[0] < 1.0 || self.r_values.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("schedule radii must be increasing, at least two, starting at R >= 1"));
        }
        Ok(())
    }
}

/// Raw numbers behind a [`Classification`].
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct Evidence {
    pub r_values: Vec<f64>,
    /// `ln I(R)` of the recurrence integral at each radius (`-inf` at `R = 1`).
    pub ln_recurrence_integral: Vec<f64>,
    /// Fitted slope of `ln(ΔI/Δln R)` against `ln R` over the last half.
    pub recurrence_slope: f64,
    /// First radius where `I(R)` exceeded the divergence threshold.
    pub threshold_radius: Option<f64>,
    /// `ln Σ_k w_k J_k(R)` at each radius, when the transience test ran.
    pub ln_transience_integral: Vec<f64>,
    /// Sphere weight fraction of directions whose tail increment converged.
    pub converged_weight_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Classification {
    pub verdict: Verdict,
    pub flow: FlowDirection,
    pub evidence: Evidence,
}

const RADIAL_RTOL: f64 = 1e-10;
const RADIAL_MAX_PANELS: usize = 4000;

/// Cumulative `ln ∫_{R_0}^{R_k} exp(ln_g(s)) ds` over the schedule and the
/// per-interval log-increments.
fn cumulative(ln_g: &dyn Fn(f64) -> f64, r_values: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut total = vec![f64::NEG_INFINITY];
    let mut increments = vec![f64::NEG_INFINITY];
    for w in r_values.windows(2) {
        let inc = ln_integrate(ln_g, w[0].ln(), w[1].ln(), RADIAL_RTOL, RADIAL_MAX_PANELS)?;
        increments.push(inc);
        total.push(log_add_exp(*total.last().expect("non-empty"), inc));
    }
    Ok((total, increments))
}

/// Fills the recurrence part of the evidence and reports whether it fired.
fn recurrence_evidence(model: &DiffusionModel, flow: FlowDirection, schedule: &Schedule, evidence: &mut Evidence) -> Result<bool> {
    schedule.check()?;
    let d = model.dim() as f64;
    let q = q_of_flow(model, flow);
    let sphere = SphereQuadrature::new(model.dim(), schedule.sphere_nodes)?;
    // r^{1-d}/Ê₁(r) dr = exp((2-d)s - ln Ê₁(e^s)) ds
    let e1 = E1Hat::new(model, &q, &sphere);
    let ln_g = |s: f64| (2.0 - d) * s - e1.ln_value(s.exp());
    let (total, increments) = cumulative(&ln_g, &schedule.r_values)?;

    let r = &schedule.r_values;
    let k0 = (r.len() / 2).max(1);
    let xs: Vec<f64> = r[k0..].iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = (k0..r.len()).map(|k| increments[k] - (r[k] / r[k - 1]).ln().ln()).collect();
    let slope = if xs.len() >= 2 && ys.iter().all(|y| y.is_finite()) {
        ls_slope(&xs, &ys)
    } else if ys.iter().all(|y| *y == f64::NEG_INFINITY) {
        f64::NEG_INFINITY
    } else {
        // Underflow to -inf only happens for integrands decaying faster than any power.
        f64::NEG_INFINITY
    };
    let ln_threshold = schedule.divergence_threshold.ln();
    evidence.threshold_radius = total.iter().position(|t| *t > ln_threshold).map(|k| r[k]);
    evidence.r_values = r.clone();
    evidence.ln_recurrence_integral = total;
    evidence.recurrence_slope = slope;
    Ok(evidence.threshold_radius.is_some() || slope >= schedule.slope_tolerance)
}

/// Fills the transience part of the evidence and reports whether it fired.
fn transience_evidence(model: &DiffusionModel, flow: FlowDirection, schedule: &Schedule, evidence: &mut Evidence) -> Result<bool> {
    schedule.check()?;
    let d = model.dim() as f64;
    let q = q_of_flow(model, flow);
    let sphere = SphereQuadrature::new(model.dim(), schedule.sphere_nodes)?;
    let a_inv = model.a().inverse();
    let r = &schedule.r_values;
    let r_last = *r.last().expect("checked");

    let per_node: Vec<Result<(Vec<f64>, f64)>> = sphere
        .nodes
        .par_iter()
        .map(|th| {
            // E₂(rθ) = e^{2Q(rθ)} / (a⁻¹θ,θ)
            let ln_angular = quadratic(&a_inv, th).ln();
            let x = RefCell::new(vec![0.0; th.len()]);
            let ln_g = |s: f64| (2.0 - d) * s + ln_angular - 2.0 * q_on_ray(&q, th, s.exp(), &mut x.borrow_mut());
            let (total, _) = cumulative(&ln_g, r)?;
            let tail = ln_integrate(&ln_g, (0.5 * r_last).max(r[0]).ln(), r_last.ln(), RADIAL_RTOL, RADIAL_MAX_PANELS)?;
            Ok((total, tail))
        })
        .collect();

    let mut curves = Vec::with_capacity(per_node.len());
    let mut converged_weight = 0.0;
    for ((res, w), _) in per_node.into_iter().zip(&sphere.weights).zip(&sphere.nodes) {
        let (total, tail) = res?;
        let ln_j = *total.last().expect("non-empty");
        // Log-values near 1e24 carry absolute rounding far above ln(tolerance).
        let rounding = 64.0 * f64::EPSILON * ln_j.abs();
        if ln_j > f64::NEG_INFINITY && tail < schedule.tail_tolerance.ln() + ln_j - rounding {
            converged_weight += w;
        }
        curves.push(total.into_iter().map(|v| v + w.ln()).collect::<Vec<f64>>());
    }
    evidence.r_values = r.clone();
    evidence.ln_transience_integral = (0..r.len()).map(|k| log_sum_exp(&curves.iter().map(|c| c[k]).collect::<Vec<_>>())).collect();
    let fraction = converged_weight / sphere.weights.iter().sum::<f64>();
    evidence.converged_weight_fraction = Some(fraction);
    Ok(fraction >= schedule.weight_fraction)
}

/// Recurrence test; when it does not fire, defers to [`transience_test`].
pub fn recurrence_test(model: &DiffusionModel, flow: FlowDirection, schedule: &Schedule) -> Result<Classification> {
    let mut evidence = Evidence::default();
    let verdict = if recurrence_evidence(model, flow, schedule, &mut evidence)? {
        Verdict::Recurrent
    } else if transience_evidence(model, flow, schedule, &mut evidence)? {
        Verdict::Transient
    } else {
        Verdict::Inconclusive
    };
    Ok(Classification { verdict, flow, evidence })
}

/// Transience test alone: `Transient` or `Inconclusive`.
pub fn transience_test(model: &DiffusionModel, flow: FlowDirection, schedule: &Schedule) -> Result<Classification> {
    let mut evidence = Evidence::default();
    let verdict = if transience_evidence(model, flow, schedule, &mut evidence)? { Verdict::Transient } else { Verdict::Inconclusive };
    Ok(Classification { verdict, flow, evidence })
}

/// Full classification: recurrence first, then transience.
pub fn classify(model: &DiffusionModel, flow: FlowDirection, schedule: &Schedule) -> Result<Classification> {
    recurrence_test(model, flow, schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GaussianExp;

    fn ou(d: usize) -> DiffusionModel {
        DiffusionModel::new(DMatrix::identity(d, d), Arc::new(GaussianExp::ou_potential(d)), d as f64).unwrap()
    }

    fn brownian(d: usize) -> DiffusionModel {
        DiffusionModel::new(DMatrix::identity(d, d), Arc::new(GaussianExp::constant(1.0)), 1.0).unwrap()
    }

    #[test]
    fn sphere_weights_sum_to_area() {
        for d in 2..=5 {
            let s = SphereQuadrature::new(d, 50).unwrap();
            let total: f64 = s.weights.iter().sum();
            let area = 2.0 * PI.powf(d as f64 / 2.0) / statrs::function::gamma::gamma(d as f64 / 2.0);
            assert!((total / area - 1.0).abs() < 1e-8);
            assert!(s.nodes.iter().all(|n| (norm(n) - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn circle_rule_is_exact_for_trig_polynomials() {
        let s = SphereQuadrature::new(2, 16).unwrap();
        for k in 1..16 {
            let v: f64 = s.nodes.iter().zip(&s.weights).map(|(n, w)| w * (k as f64 * n[1].atan2(n[0])).cos()).sum();
            assert!(v.abs() < 1e-12, "k = {k}: {v}");
        }
    }

    #[test]
    fn q_examples() {
        let m = ou(2);
        let x = [1.0, 2.0];
        let c = 0.5 * PI.ln();
        assert!((q_of_flow(&m, FlowDirection::Forward).value(&x) + 2.5 + c).abs() < 1e-14);
        assert!((q_of_flow(&m, FlowDirection::Sharp).value(&x) - 2.5 - c).abs() < 1e-14);
    }

    #[test]
    fn e1_hat_examples() {
        let m = ou(2);
        let s = SphereQuadrature::new(2, 32).unwrap();
        let fwd = q_of_flow(&m, FlowDirection::Forward);
        assert!((e1_hat(&m, &fwd, &s, 1.0) - 2.0 * (-1.0f64).exp()).abs() < 1e-14);
        let sharp = q_of_flow(&m, FlowDirection::Sharp);
        assert!((e1_hat(&m, &sharp, &s, 1.0) / (2.0 * PI * PI * 1f64.exp()) - 1.0).abs() < 1e-14);
        let b = brownian(3);
        let s3 = SphereQuadrature::new(3, 40).unwrap();
        let flat = q_of_flow(&b, FlowDirection::Forward);
        assert!((e1_hat(&b, &flat, &s3, 7.0) - 4.0 * PI).abs() < 1e-12);
        assert!(ln_e1_hat(&m, &sharp, &s, 50.0).is_finite());
        assert!(ln_e1_hat(&m, &fwd, &s, 50.0).is_finite());
    }

    #[test]
    fn classical_and_ou_cases() {
        let sched = Schedule::default();
        assert_eq!(classify(&ou(2), FlowDirection::Forward, &sched).unwrap().verdict, Verdict::Recurrent);
        assert_eq!(classify(&ou(2), FlowDirection::Sharp, &sched).unwrap().verdict, Verdict::Transient);
        assert_eq!(classify(&brownian(2), FlowDirection::Forward, &sched).unwrap().verdict, Verdict::Recurrent);
        assert_eq!(classify(&brownian(3), FlowDirection::Forward, &sched).unwrap().verdict, Verdict::Transient);
        assert_ne!(transience_test(&ou(2), FlowDirection::Forward, &sched).unwrap().verdict, Verdict::Transient);
    }

    #[test]
    fn forward_ou_crosses_threshold_early() {
        let c = classify(&ou(2), FlowDirection::Forward, &Schedule::default()).unwrap();
        let r = c.evidence.threshold_radius.unwrap();
        assert!(r <= 8.0, "{r}");
    }
}
