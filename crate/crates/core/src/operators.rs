//! The four second-order operators of a reversible diffusion with constant
//! `a`, plus sampled certificates for superharmonic candidates.
//!
//! With `L0 f = ½ tr(a Hf)`:
//!
//! | kind               | value                          |
//! |--------------------|--------------------------------|
//! | `Generator`        | `L0 f + m·∇f`                  |
//! | `GeneratorAdjoint` | `L0 f - m·∇f - (∇·m) f`        |
//! | `SharpGenerator`   | `L0 f - m·∇f`                  |
//! | `SharpAdjoint`     | `L0 f + m·∇f + (∇·m) f`        |

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{check_positive, gradient_or_fd, hessian_or_fd, ln_derivatives, DerivativeMode, ScalarField};
use crate::model::DiffusionModel;
use crate::sampling::SampleSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorKind {
    Generator,
    GeneratorAdjoint,
    SharpGenerator,
    SharpAdjoint,
}

/// The three pieces an operator value is assembled from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorTerms {
    /// `½ tr(a Hf)`
    pub diffusion: f64,
    /// `m·∇f`
    pub transport: f64,
    /// `(∇·m) f`
    pub zeroth: f64,
}

impl OperatorTerms {
    pub fn combine(&self, kind: OperatorKind) -> f64 {
        let Self { diffusion, transport, zeroth } = *self;
        match kind {
            OperatorKind::Generator => diffusion + transport,
            OperatorKind::GeneratorAdjoint => diffusion - transport - zeroth,
            OperatorKind::SharpGenerator => diffusion - transport,
            OperatorKind::SharpAdjoint => diffusion + transport + zeroth,
        }
    }

    /// Sum of absolute values, the scale of the rounding error of `combine`.
    pub fn magnitude(&self) -> f64 {
        self.diffusion.abs() + self.transport.abs() + self.zeroth.abs()
    }
}

fn terms_from(model: &DiffusionModel, x: &[f64], value: f64, grad: &DVector<f64>, hess: &DMatrix<f64>) -> Result<OperatorTerms> {
    let m = model.drift(x)?;
    let div = model.divergence_drift(x)?;
    Ok(OperatorTerms {
        diffusion: 0.5 * (model.a().matrix() * hess).trace(),
        transport: m.dot(grad),
        zeroth: div * value,
    })
}

/// Operator terms of `f` at `x`.
pub fn terms(model: &DiffusionModel, f: &dyn ScalarField, x: &[f64]) -> Result<OperatorTerms> {
    let fb = model.fd_fallback();
    let grad = gradient_or_fd(f, x, fb)?;
    let hess = hessian_or_fd(f, x, fb)?;
    terms_from(model, x, f.value(x), &grad, &hess)
}

/// Operator terms of `f` divided by `f(x)`, computed from log-derivatives.
pub fn relative_terms(model: &DiffusionModel, f: &dyn ScalarField, x: &[f64]) -> Result<OperatorTerms> {
    let (gl, hl) = ln_derivatives(f, x, model.fd_fallback())?;
    let hess_over_f = hl + &gl * gl.transpose();
    terms_from(model, x, 1.0, &gl, &hess_over_f)
}

/// Value of the selected operator applied to `f` at `x`.
pub fn apply(model: &DiffusionModel, kind: OperatorKind, f: &dyn ScalarField, x: &[f64]) -> Result<f64> {
    Ok(terms(model, f, x)?.combine(kind))
}

/// `(Op f)(x) / f(x)`; finite wherever the log-derivatives are, even when
/// `f(x)` itself overflows.
pub fn apply_relative(model: &DiffusionModel, kind: OperatorKind, f: &dyn ScalarField, x: &[f64]) -> Result<f64> {
    Ok(relative_terms(model, f, x)?.combine(kind))
}

/// Both sides of `𝔏♯(g²) = 2g 𝔏♯g - g² ∇·m + ∇g·a∇g` at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SquareIdentity {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    /// Sum of the magnitudes of every term on both sides.
    pub scale: f64,
}

impl SquareIdentity {
    /// Residual relative to the term scale (floored at one).
    pub fn relative_residual(&self) -> f64 {
        self.residual.abs() / self.scale.max(1.0)
    }
}

pub fn square_identity(model: &DiffusionModel, g: &dyn ScalarField, x: &[f64]) -> Result<SquareIdentity> {
    let fb = model.fd_fallback();
    let v = g.value(x);
    let grad = gradient_or_fd(g, x, fb)?;
    let hess = hessian_or_fd(g, x, fb)?;
    let div = model.divergence_drift(x)?;

    let grad_sq = &grad * (2.0 * v);
    let hess_sq = &grad * grad.transpose() * 2.0 + &hess * (2.0 * v);
    let lhs_terms = terms_from(model, x, v * v, &grad_sq, &hess_sq)?;
    let g_terms = terms_from(model, x, v, &grad, &hess)?;

    let sharp_g = g_terms.combine(OperatorKind::SharpAdjoint);
    let energy = grad.dot(&(model.a().matrix() * &grad));
    let lhs = lhs_terms.combine(OperatorKind::SharpAdjoint);
    let rhs = 2.0 * v * sharp_g - v * v * div + energy;
    let scale = lhs_terms.magnitude() + 2.0 * (v * g_terms.magnitude()).abs() + (v * v * div).abs() + energy.abs();
    Ok(SquareIdentity { lhs, rhs, residual: lhs - rhs, scale })
}

/// `𝔏♯(g²)(x) - [2g 𝔏♯g - g² ∇·m + ∇g·a∇g](x)`.
pub fn square_identity_residual(model: &DiffusionModel, g: &dyn ScalarField, x: &[f64]) -> Result<f64> {
    Ok(square_identity(model, g, x)?.residual)
}

/// `√z` of a positive field.
#[derive(Debug, Clone)]
pub struct SqrtField<F> {
    pub z: F,
}

/// Square root of a positive field, with derivatives
/// `∇u = ∇z / (2√z)` and `Hu = Hz / (2√z) - ∇z∇zᵀ / (4 z^{3/2})`.
pub fn sqrt_lift<F: ScalarField>(z: F) -> SqrtField<F> {
    SqrtField { z }
}

impl<F: ScalarField> SqrtField<F> {
    /// Value with the positivity check applied.
    pub fn checked_value(&self, x: &[f64]) -> Result<f64> {
        Ok(check_positive(self.z.value(x))?.sqrt())
    }
}

impl<F: ScalarField> ScalarField for SqrtField<F> {
    fn value(&self, x: &[f64]) -> f64 {
        self.z.value(x).sqrt()
    }
    fn ln_value(&self, x: &[f64]) -> f64 {
        0.5 * self.z.ln_value(x)
    }
    fn gradient(&self, x: &[f64]) -> Result<DVector<f64>> {
        let z = check_positive(self.z.value(x))?;
        Ok(self.z.gradient(x)? / (2.0 * z.sqrt()))
    }
    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let z = check_positive(self.z.value(x))?;
        let g = self.z.gradient(x)?;
        let h = self.z.hessian(x)?;
        Ok(h / (2.0 * z.sqrt()) - (&g * g.transpose()) / (4.0 * z.powf(1.5)))
    }
    fn grad_ln(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(self.z.grad_ln(x)? * 0.5)
    }
    fn hess_ln(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.z.hess_ln(x)? * 0.5)
    }
    fn grad_ln_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.z.grad_ln_into(x, out)?;
        out.iter_mut().for_each(|o| *o *= 0.5);
        Ok(())
    }
    fn ln_hessian_trace(&self, x: &[f64], a: &DMatrix<f64>) -> Result<f64> {
        Ok(0.5 * self.z.ln_hessian_trace(x, a)?)
    }
    fn mode(&self) -> DerivativeMode {
        self.z.mode()
    }
    fn positive_everywhere(&self) -> bool {
        self.z.positive_everywhere()
    }
}

/// What a [`Certificate`] asserts about a candidate `u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CertificateKind {
    /// `𝔏♯u <= 0`
    SuperharmonicS,
    /// `𝔏♯u + (λ_c/2) u <= 0`
    StrictW,
}

impl fmt::Display for CertificateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CertificateKind::SuperharmonicS => "superharmonic-s",
            CertificateKind::StrictW => "strict-w",
        })
    }
}

/// Worst sampled margin of a superharmonicity condition.
///
/// Margins are reported net of a rounding allowance of
/// `64 ε` times the magnitude of the summed terms, so that exact zeros such
/// as `𝔏♯ψ² = 0` do not fail on the last bit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    pub kind: CertificateKind,
    pub sample_count: usize,
    pub worst_margin: f64,
    pub worst_point: Vec<f64>,
    pub passed: bool,
    pub inner_radius: f64,
    pub radius: f64,
    pub rounding_allowance: f64,
    pub derivative_mode: String,
    pub caveats: Vec<String>,
}

const ROUNDING_ULPS: f64 = 64.0;

fn margin(model: &DiffusionModel, u: &dyn ScalarField, kind: CertificateKind, x: &[f64]) -> Result<(f64, f64)> {
    let t = terms(model, u, x)?;
    let mut raw = t.combine(OperatorKind::SharpAdjoint);
    let mut scale = t.magnitude();
    if kind == CertificateKind::StrictW {
        let extra = 0.5 * model.lambda_c() * check_positive(u.value(x))?;
        raw += extra;
        scale += extra.abs();
    }
    let slack = ROUNDING_ULPS * f64::EPSILON * scale;
    Ok((raw - slack, slack))
}

pub fn certify(model: &DiffusionModel, u: &dyn ScalarField, kind: CertificateKind, spec: &SampleSpec) -> Certificate {
    let points = spec.points(model.dim());
    let margins: Vec<Result<(f64, f64)>> = points.par_iter().map(|x| margin(model, u, kind, x)).collect();

    let mut worst = (f64::NEG_INFINITY, 0.0);
    let mut worst_idx = 0;
    let mut failure = None;
    for (i, m) in margins.iter().enumerate() {
        match m {
            Ok(m) if m.0 > worst.0 => {
                worst = *m;
                worst_idx = i;
            }
            Ok(_) => {}
            Err(e) => {
                if failure.is_none() {
                    failure = Some((i, e.clone()));
                }
            }
        }
    }

    let mut caveats = vec![format!(
        "sampled probe on {} <= |x| <= {} ({} Halton points, origin when inside, {} uniform points); not a proof",
        spec.inner_radius, spec.radius, spec.count, spec.uniform_extra
    )];
    if kind == CertificateKind::SuperharmonicS {
        caveats.push("compact support of the operator value and C^{2,1} regularity are not verified".into());
    }
    if let Some((i, e)) = &failure {
        worst = (f64::INFINITY, 0.0);
        worst_idx = *i;
        caveats.push(format!("evaluation failed: {e}"));
    }

    Certificate {
        kind,
        sample_count: points.len(),
        worst_margin: worst.0,
        worst_point: points[worst_idx].clone(),
        passed: worst.0 <= 0.0,
        inner_radius: spec.inner_radius,
        radius: spec.radius,
        rounding_allowance: worst.1,
        derivative_mode: u.mode().to_string(),
        caveats,
    }
}

/// Sampled supremum of `𝔏♯u / u`, an upper bound for the principal eigenvalue
/// whenever the sample set reaches the true supremum.
pub fn rayleigh_upper_bound(model: &DiffusionModel, u: &dyn ScalarField, spec: &SampleSpec) -> Result<f64> {
    let points = spec.points(model.dim());
    let values: Vec<Result<f64>> = points
        .par_iter()
        .map(|x| {
            check_positive(u.value(x)).or_else(|e| if u.ln_value(x).is_finite() { Ok(1.0) } else { Err(e) })?;
            apply_relative(model, OperatorKind::SharpAdjoint, u, x)
        })
        .collect();
    let mut sup = f64::NEG_INFINITY;
    for v in values {
        sup = sup.max(v?);
    }
    if sup == f64::NEG_INFINITY {
        return Err(Error::InvalidInput("empty sample set".into()));
    }
    Ok(sup)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;
    use std::sync::Arc;

    use super::*;
    use crate::field::{GaussianExp, Power, ShiftedQuadratic};

    fn ou(d: usize) -> DiffusionModel {
        DiffusionModel::new(DMatrix::identity(d, d), Arc::new(GaussianExp::ou_potential(d)), d as f64).unwrap()
    }

    #[test]
    fn constant_function_is_killed_by_generators() {
        let m = ou(2);
        let one = GaussianExp::constant(1.0);
        let x = [0.4, -1.2];
        assert_eq!(apply(&m, OperatorKind::Generator, &one, &x).unwrap(), 0.0);
        assert_eq!(apply(&m, OperatorKind::SharpGenerator, &one, &x).unwrap(), 0.0);
        assert_eq!(apply(&m, OperatorKind::SharpAdjoint, &one, &x).unwrap(), -2.0);
    }

    #[test]
    fn sharp_adjoint_of_psi_at_unit_point() {
        // -(ψ/2)(|x|² + d) at x = (1, 0), d = 2, ψ = π^{1/2} e^{1/2}
        let m = ou(2);
        let psi = GaussianExp::ou_potential(2);
        let v = apply(&m, OperatorKind::SharpAdjoint, &psi, &[1.0, 0.0]).unwrap();
        let want = -1.5 * 0.5f64.exp() * PI.sqrt();
        assert!((v - want).abs() < 1e-13, "{v} vs {want}");
    }

    #[test]
    fn square_identity_for_quadratic_by_hand() {
        // g = 1 + |x|², x = (1, 1), OU d = 2.
        // g = 3, ∇g = (2, 2), Hg = 2I, m = -x, ∇·m = -2.
        // 𝔏♯g = ½·4 + (-x)·(2,2) + (-2)(3) = 2 - 4 - 6 = -8
        // g² = 9, ∇g² = (12, 12), Hg² = 2∇g∇gᵀ + 2g·2I = [[20, 8], [8, 20]]
        // 𝔏♯g² = ½·40 - 24 - 18 = -22
        // rhs = 2·3·(-8) - 9·(-2) + 8 = -48 + 18 + 8 = -22
        let m = ou(2);
        let id = square_identity(&m, &ShiftedQuadratic::new(1.0), &[1.0, 1.0]).unwrap();
        assert_eq!(id.lhs, -22.0);
        assert_eq!(id.rhs, -22.0);
        assert!(id.residual.abs() <= 1e-9);
    }

    #[test]
    fn square_identity_for_constants_is_exact() {
        let m = ou(3);
        let c = GaussianExp::constant(2.5);
        assert_eq!(square_identity_residual(&m, &c, &[0.3, 1.0, -2.0]).unwrap(), 0.0);
    }

    #[test]
    fn sqrt_lift_of_constant() {
        let u = sqrt_lift(GaussianExp::constant(4.0));
        let x = [0.7, 0.1];
        assert!((u.value(&x) - 2.0).abs() < 1e-15);
        assert!(u.gradient(&x).unwrap().norm() == 0.0);
        assert!(u.hessian(&x).unwrap().norm() == 0.0);
    }

    #[test]
    fn sqrt_lift_by_hand() {
        // z = e^{2|x|²} -> u = e^{|x|²}, ∇u = 2x u
        let u = sqrt_lift(GaussianExp::new(0.0, 2.0));
        let x = [0.5, 0.5];
        let uv = 0.5f64.exp();
        assert!((u.value(&x) - uv).abs() < 1e-14);
        let g = u.gradient(&x).unwrap();
        assert!((g[0] - uv).abs() < 1e-14 && (g[1] - uv).abs() < 1e-14);
    }

    #[test]
    fn sqrt_lift_rejects_non_positive() {
        #[derive(Debug)]
        struct Zero;
        impl ScalarField for Zero {
            fn value(&self, _x: &[f64]) -> f64 {
                0.0
            }
            fn gradient(&self, x: &[f64]) -> Result<DVector<f64>> {
                Ok(DVector::zeros(x.len()))
            }
        }
        let u = sqrt_lift(Zero);
        assert!(matches!(u.gradient(&[0.0, 0.0]), Err(Error::NonPositivePotential { .. })));
        assert!(matches!(u.checked_value(&[0.0, 0.0]), Err(Error::NonPositivePotential { .. })));
    }

    #[test]
    fn certificates_on_ou() {
        let m = ou(2);
        let psi = GaussianExp::ou_potential(2);
        let spec = SampleSpec::ball(2000, 5.0, 1);
        let w = certify(&m, &psi, CertificateKind::StrictW, &spec);
        assert!(w.passed);
        assert_eq!(w.worst_point, vec![0.0, 0.0]);

        let s = certify(&m, &Power::new(psi, 2.0), CertificateKind::SuperharmonicS, &spec);
        assert!(s.passed);
        assert!(s.worst_margin.abs() <= s.rounding_allowance * 2.0 + 1e-300);

        // e^{2|x|²}: 𝔏♯u = (d + 4|x|²) u > 0, so the strict bound fails.
        let bad = certify(&m, &GaussianExp::new(0.0, 2.0), CertificateKind::StrictW, &SampleSpec::ball(200, 3.0, 1));
        assert!(!bad.passed);
        assert!(bad.worst_margin > 0.0);
    }

    #[test]
    fn rayleigh_bound_examples() {
        let m = ou(2);
        let psi = GaussianExp::ou_potential(2);
        let at_origin = rayleigh_upper_bound(&m, &psi, &SampleSpec::ball(500, 3.0, 2)).unwrap();
        assert!((at_origin + 1.0).abs() < 1e-14);

        let one = GaussianExp::constant(1.0);
        assert_eq!(rayleigh_upper_bound(&m, &one, &SampleSpec::ball(50, 3.0, 2)).unwrap(), -2.0);

        let spec = SampleSpec { count: 500, radius: 3.0, inner_radius: 1.0, seed: 2, uniform_extra: 100 };
        assert!(rayleigh_upper_bound(&m, &psi, &spec).unwrap() <= -1.5);
    }
}
