//! Positive scalar fields with gradient and Hessian access.
//!
//! A [`ScalarField`] is evaluated at points given as `&[f64]`. Besides the
//! plain derivatives every field exposes derivatives of `ln f`, which is what
//! the operators and flows actually consume: for potentials like
//! `exp(|x|^2 / 2)` the log-derivatives stay finite long after the value
//! itself overflows.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default relative step of the central-difference fallback: `h = 1e-4 * max(1, |x|)`.
pub const DEFAULT_FD_REL_STEP: f64 = 1e-4;

/// Step rule for central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FdStep {
    /// `h = rel * max(1, |x|)`
    Relative(f64),
    /// Fixed `h`.
    Absolute(f64),
}

impl FdStep {
    pub fn at(&self, x: &[f64]) -> f64 {
        match *self {
            FdStep::Relative(rel) => rel * norm(x).max(1.0),
            FdStep::Absolute(h) => h,
        }
    }
}

impl fmt::Display for FdStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FdStep::Relative(r) => write!(f, "relative({r:e})"),
            FdStep::Absolute(h) => write!(f, "absolute({h:e})"),
        }
    }
}

/// How a field produces its derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DerivativeMode {
    Analytic,
    FiniteDifference(FdStep),
}

impl fmt::Display for DerivativeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DerivativeMode::Analytic => write!(f, "analytic"),
            DerivativeMode::FiniteDifference(step) => write!(f, "finite-difference {step}"),
        }
    }
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub(crate) fn check_positive(value: f64) -> Result<f64> {
    if value > 0.0 {
        Ok(value)
    } else {
        Err(Error::NonPositivePotential { value })
    }
}

/// A smooth scalar field on R^d.
///
/// Only `value` is mandatory. Fields without analytic derivatives return
/// [`Error::MissingGradient`] / [`Error::MissingHessian`]; callers that allow
/// it fall back to central differences (see [`hessian_or_fd`]).
pub trait ScalarField: Send + Sync + fmt::Debug {
    fn value(&self, x: &[f64]) -> f64;

    fn ln_value(&self, x: &[f64]) -> f64 {
        self.value(x).ln()
    }

    fn gradient(&self, _x: &[f64]) -> Result<DVector<f64>> {
        Err(Error::MissingGradient)
    }

    fn hessian(&self, _x: &[f64]) -> Result<DMatrix<f64>> {
        Err(Error::MissingHessian)
    }

    /// `∇ ln f = ∇f / f`.
    fn grad_ln(&self, x: &[f64]) -> Result<DVector<f64>> {
        let v = check_positive(self.value(x))?;
        Ok(self.gradient(x)? / v)
    }

    /// `H ln f = Hf / f - ∇f ∇fᵀ / f²`.
    fn hess_ln(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let v = check_positive(self.value(x))?;
        let g = self.gradient(x)?;
        let h = self.hessian(x)?;
        Ok(h / v - (&g * g.transpose()) / (v * v))
    }

    /// Allocation-free variant of [`ScalarField::grad_ln`] for hot loops.
    fn grad_ln_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let g = self.grad_ln(x)?;
        out.copy_from_slice(g.as_slice());
        Ok(())
    }

    /// `tr(a · H ln f)`.
    fn ln_hessian_trace(&self, x: &[f64], a: &DMatrix<f64>) -> Result<f64> {
        Ok((a * self.hess_ln(x)?).trace())
    }

    fn mode(&self) -> DerivativeMode {
        DerivativeMode::Analytic
    }

    /// True when the field is known to be positive at every point, which
    /// lets hot loops skip the positivity check.
    fn positive_everywhere(&self) -> bool {
        false
    }
}

macro_rules! forward_field {
    ($ty:ty) => {
        impl<F: ScalarField + ?Sized> ScalarField for $ty {
            fn value(&self, x: &[f64]) -> f64 {
                (**self).value(x)
            }
            fn ln_value(&self, x: &[f64]) -> f64 {
                (**self).ln_value(x)
            }
            fn gradient(&self, x: &[f64]) -> Result<DVector<f64>> {
                (**self).gradient(x)
            }
            fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
                (**self).hessian(x)
            }
            fn grad_ln(&self, x: &[f64]) -> Result<DVector<f64>> {
                (**self).grad_ln(x)
            }
            fn hess_ln(&self, x: &[f64]) -> Result<DMatrix<f64>> {
                (**self).hess_ln(x)
            }
            fn grad_ln_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
                (**self).grad_ln_into(x, out)
            }
            fn ln_hessian_trace(&self, x: &[f64], a: &DMatrix<f64>) -> Result<f64> {
                (**self).ln_hessian_trace(x, a)
            }
            fn mode(&self) -> DerivativeMode {
                (**self).mode()
            }
            fn positive_everywhere(&self) -> bool {
                (**self).positive_everywhere()
            }
        }
    };
}

forward_field!(Arc<F>);
forward_field!(Box<F>);
forward_field!(&F);

/// `f(x) = exp(ln_scale + rate * |x|^2)`.
///
/// Covers the Ornstein–Uhlenbeck potential (`rate = 1/2`), its powers and
/// constants (`rate = 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianExp {
    pub ln_scale: f64,
    pub rate: f64,
}

impl GaussianExp {
    pub fn new(ln_scale: f64, rate: f64) -> Self {
        Self { ln_scale, rate }
    }

    /// Normalized OU potential `π^{d/4} exp(|x|²/2)`, so that `∫ψ⁻² = 1`.
    pub fn ou_potential(dim: usize) -> Self {
        Self::new(dim as f64 / 4.0 * std::f64::consts::PI.ln(), 0.5)
    }

    pub fn constant(c: f64) -> Self {
        assert!(c > 0.0, "constant field must be positive");
        Self::new(c.ln(), 0.0)
    }
}

impl ScalarField for GaussianExp {
    fn value(&self, x: &[f64]) -> f64 {
        self.ln_value(x).exp()
    }

    fn ln_value(&self, x: &[f64]) -> f64 {
        self.ln_scale + self.rate * norm_sq(x)
    }

    fn gradient(&self, x: &[f64]) -> Result<DVector<f64>> {
        let v = self.value(x);
        Ok(DVector::from_iterator(x.len(), x.iter().map(|xi| 2.0 * self.rate * xi * v)))
    }

    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let d = x.len();
        let v = self.value(x);
        let k = self.rate;
        Ok(DMatrix::from_fn(d, d, |i, j| {
            let diag = if i == j { 2.0 * k } else { 0.0 };
            (diag + 4.0 * k * k * x[i] * x[j]) * v
        }))
    }

    fn grad_ln(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(DVector::from_iterator(x.len(), x.iter().map(|xi| 2.0 * self.rate * xi)))
    }

    fn hess_ln(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        Ok(DMatrix::identity(x.len(), x.len()) * (2.0 * self.rate))
    }

    fn grad_ln_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = 2.0 * self.rate * xi;
        }
        Ok(())
    }

    fn ln_hessian_trace(&self, _x: &[f64], a: &DMatrix<f64>) -> Result<f64> {
        Ok(2.0 * self.rate * a.trace())
    }

    fn positive_everywhere(&self) -> bool {
        true
    }
}

/// `f(x) = offset + |x|^2` with `offset > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftedQuadratic {
    pub offset: f64,
}

impl ShiftedQuadratic {
    pub fn new(offset: f64) -> Self {
        assert!(offset > 0.0, "offset must be positive");
        Self { offset }
    }
}

impl ScalarField for ShiftedQuadratic {
    fn value(&self, x: &[f64]) -> f64 {
        self.offset + norm_sq(x)
    }

    fn gradient(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(DVector::from_iterator(x.len(), x.iter().map(|xi| 2.0 * xi)))
    }

    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        Ok(DMatrix::identity(x.len(), x.len()) * 2.0)
    }

    fn positive_everywhere(&self) -> bool {
        true
    }
}

/// `c · f` for a constant `c > 0`.
#[derive(Debug, Clone)]
pub struct Scaled<F> {
    pub inner: F,
    pub factor: f64,
}

impl<F: ScalarField> Scaled<F> {
    pub fn new(inner: F, factor: f64) -> Self {
        assert!(factor > 0.0, "scale factor must be positive");
        Self { inner, factor }
    }
}

impl<F: ScalarField> ScalarField for Scaled<F> {
    fn value(&self, x: &[f64]) -> f64 {
        self.factor * self.inner.value(x)
    }
    fn ln_value(&self, x: &[f64]) -> f64 {
        self.factor.ln() + self.inner.ln_value(x)
    }
    fn gradient(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(self.inner.gradient(x)? * self.factor)
    }
    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.inner.hessian(x)? * self.factor)
    }
    fn grad_ln(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.inner.grad_ln(x)
    }
    fn hess_ln(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.inner.hess_ln(x)
    }
    fn grad_ln_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.inner.grad_ln_into(x, out)
    }
    fn ln_hessian_trace(&self, x: &[f64], a: &DMatrix<f64>) -> Result<f64> {
        self.inner.ln_hessian_trace(x, a)
    }
    fn mode(&self) -> DerivativeMode {
        self.inner.mode()
    }
    fn positive_everywhere(&self) -> bool {
        self.inner.positive_everywhere()
    }
}

/// `f^p` of a positive field, computed through `ln f`.
#[derive(Debug, Clone)]
pub struct Power<F> {
    pub inner: F,
    pub exponent: f64,
}

impl<F: ScalarField> Power<F> {
    pub fn new(inner: F, exponent: f64) -> Self {
        Self { inner, exponent }
    }
}

impl<F: ScalarField> ScalarField for Power<F> {
    fn value(&self, x: &[f64]) -> f64 {
        self.ln_value(x).exp()
    }
    fn ln_value(&self, x: &[f64]) -> f64 {
        self.exponent * self.inner.ln_value(x)
    }
    fn gradient(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(self.grad_ln(x)? * self.value(x))
    }
    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let g = self.grad_ln(x)?;
        Ok((self.hess_ln(x)? + &g * g.transpose()) * self.value(x))
    }
    fn grad_ln(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(self.inner.grad_ln(x)? * self.exponent)
    }
    fn hess_ln(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.inner.hess_ln(x)? * self.exponent)
    }
    fn grad_ln_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.inner.grad_ln_into(x, out)?;
        out.iter_mut().for_each(|o| *o *= self.exponent);
        Ok(())
    }
    fn ln_hessian_trace(&self, x: &[f64], a: &DMatrix<f64>) -> Result<f64> {
        Ok(self.exponent * self.inner.ln_hessian_trace(x, a)?)
    }
    fn mode(&self) -> DerivativeMode {
        self.inner.mode()
    }
    fn positive_everywhere(&self) -> bool {
        self.inner.positive_everywhere()
    }
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> DVector<f64> {
    let mut y = x.to_vec();
    DVector::from_fn(x.len(), |i, _| {
        y[i] = x[i] + h;
        let fp = f(&y);
        y[i] = x[i] - h;
        let fm = f(&y);
        y[i] = x[i];
        (fp - fm) / (2.0 * h)
    })
}

/// Central-difference Hessian of `f` at `x` with step `h`.
pub fn fd_hessian(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> DMatrix<f64> {
    let d = x.len();
    let mut y = x.to_vec();
    let f0 = f(x);
    let mut hess = DMatrix::zeros(d, d);
    for i in 0..d {
        y[i] = x[i] + h;
        let fp = f(&y);
        y[i] = x[i] - h;
        let fm = f(&y);
        y[i] = x[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h * h);
        for j in 0..i {
            let mut corner = |si: f64, sj: f64| {
                y[i] = x[i] + si * h;
                y[j] = x[j] + sj * h;
                let v = f(&y);
                y[i] = x[i];
                y[j] = x[j];
                v
            };
            let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0))
                / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

/// Replaces the derivatives of `inner` by central differences of its value.
#[derive(Debug, Clone)]
pub struct FiniteDifference<F> {
    pub inner: F,
    pub step: FdStep,
}

impl<F: ScalarField> FiniteDifference<F> {
    pub fn new(inner: F) -> Self {
        Self::with_step(inner, FdStep::Relative(DEFAULT_FD_REL_STEP))
    }

    pub fn with_step(inner: F, step: FdStep) -> Self {
        Self { inner, step }
    }
}

impl<F: ScalarField> ScalarField for FiniteDifference<F> {
    fn value(&self, x: &[f64]) -> f64 {
        self.inner.value(x)
    }
    fn ln_value(&self, x: &[f64]) -> f64 {
        self.inner.ln_value(x)
    }
    fn gradient(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(fd_gradient(&|y| self.inner.value(y), x, self.step.at(x)))
    }
    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        Ok(fd_hessian(&|y| self.inner.value(y), x, self.step.at(x)))
    }
    fn mode(&self) -> DerivativeMode {
        DerivativeMode::FiniteDifference(self.step)
    }
    fn positive_everywhere(&self) -> bool {
        self.inner.positive_everywhere()
    }
}

/// Hessian of `field`, falling back to central differences when the field
/// has none and `fallback` is set.
pub fn hessian_or_fd(field: &dyn ScalarField, x: &[f64], fallback: bool) -> Result<DMatrix<f64>> {
    match field.hessian(x) {
        Err(Error::MissingHessian) if fallback => {
            let h = FdStep::Relative(DEFAULT_FD_REL_STEP).at(x);
            Ok(fd_hessian(&|y| field.value(y), x, h))
        }
        other => other,
    }
}

/// Gradient of `field` with the same fallback rule as [`hessian_or_fd`].
pub fn gradient_or_fd(field: &dyn ScalarField, x: &[f64], fallback: bool) -> Result<DVector<f64>> {
    match field.gradient(x) {
        Err(Error::MissingGradient) if fallback => {
            let h = FdStep::Relative(DEFAULT_FD_REL_STEP).at(x);
            Ok(fd_gradient(&|y| field.value(y), x, h))
        }
        other => other,
    }
}

/// First and second log-derivatives, with central-difference fallback.
pub fn ln_derivatives(
    field: &dyn ScalarField,
    x: &[f64],
    fallback: bool,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    match (field.grad_ln(x), field.hess_ln(x)) {
        (Ok(g), Ok(h)) => Ok((g, h)),
        (Err(e @ Error::NonPositivePotential { .. }), _)
        | (_, Err(e @ Error::NonPositivePotential { .. })) => Err(e),
        (Err(e), _) | (_, Err(e)) if !fallback => Err(e),
        _ => {
            let v = check_positive(field.value(x))?;
            let g = gradient_or_fd(field, x, true)?;
            let h = hessian_or_fd(field, x, true)?;
            Ok((&g / v, h / v - (&g * g.transpose()) / (v * v)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exposes only the value of a field.
    #[derive(Debug)]
    struct ValueOnly(GaussianExp);

    impl ScalarField for ValueOnly {
        fn value(&self, x: &[f64]) -> f64 {
            self.0.value(x)
        }
    }

    #[test]
    fn gaussian_exp_log_derivatives_match_plain_ones() {
        let psi = GaussianExp::ou_potential(2);
        let x = [0.7, -1.3];
        let v = psi.value(&x);
        let g = psi.gradient(&x).unwrap();
        let h = psi.hessian(&x).unwrap();
        let gl = psi.grad_ln(&x).unwrap();
        let hl = psi.hess_ln(&x).unwrap();
        assert!((&g / v - &gl).norm() < 1e-14);
        let hl_generic = h / v - (&g * g.transpose()) / (v * v);
        assert!((hl_generic - hl).norm() < 1e-13);
    }

    #[test]
    fn ou_potential_value_at_origin_is_normalization() {
        let psi = GaussianExp::ou_potential(2);
        assert!((psi.value(&[0.0, 0.0]) - std::f64::consts::PI.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn missing_hessian_is_reported_unless_fallback() {
        let f = ValueOnly(GaussianExp::ou_potential(2));
        let x = [0.2, 0.1];
        assert_eq!(hessian_or_fd(&f, &x, false).unwrap_err(), Error::MissingHessian);
        let h = hessian_or_fd(&f, &x, true).unwrap();
        let exact = GaussianExp::ou_potential(2).hessian(&x).unwrap();
        assert!((h - exact).norm() < 1e-6);
    }

    #[test]
    fn power_of_gaussian_is_gaussian() {
        let psi = GaussianExp::ou_potential(3);
        let sq = Power::new(psi, 2.0);
        let direct = GaussianExp::new(2.0 * psi.ln_scale, 1.0);
        let x = [0.3, -0.2, 1.1];
        assert!((sq.value(&x) / direct.value(&x) - 1.0).abs() < 1e-14);
        let g1 = sq.gradient(&x).unwrap();
        let g2 = direct.gradient(&x).unwrap();
        assert!((g1 - &g2).norm() < 1e-12 * g2.norm());
        let h1 = sq.hessian(&x).unwrap();
        let h2 = direct.hessian(&x).unwrap();
        assert!((h1 - &h2).norm() < 1e-12 * h2.norm());
    }

    #[test]
    fn relative_step_scales_with_norm() {
        let s = FdStep::Relative(1e-4);
        assert_eq!(s.at(&[0.1, 0.1]), 1e-4);
        assert!((s.at(&[3.0, 4.0]) - 5e-4).abs() < 1e-18);
    }
}
