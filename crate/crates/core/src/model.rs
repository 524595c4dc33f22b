//! Diffusion coefficients, the reversible drift `m = -a ∇ln ψ` and the
//! sampled checks of the standing assumptions.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::{
    check_positive, gradient_or_fd, hessian_or_fd, norm, DerivativeMode, ScalarField,
};
use crate::sampling::uniform_in_annulus;

/// Symmetric positive-definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    m: DMatrix<f64>,
}

impl SpdMatrix {
    /// Accepts `m` if it is square, symmetric within `1e-12` relative to its
    /// largest entry, and has a Cholesky factorization.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(invalid(format!("matrix must be square and non-empty, got {}x{}", m.nrows(), m.ncols())));
        }
        let scale = m.amax();
        let asym = (&m - m.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(invalid(format!("matrix is not symmetric (max asymmetry {asym:e})")));
        }
        if m.clone().cholesky().is_none() {
            return Err(invalid("matrix is not positive definite"));
        }
        Ok(Self { m })
    }

    pub fn identity(dim: usize) -> Self {
        Self { m: DMatrix::identity(dim, dim) }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    /// Smallest and largest eigenvalue.
    pub fn eigen_range(&self) -> (f64, f64) {
        let ev = self.m.clone().symmetric_eigenvalues();
        (ev.min(), ev.max())
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.m.clone().cholesky().expect("checked at construction").inverse()
    }

    /// `(M x, x)`
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let v = DVector::from_column_slice(x);
        v.dot(&(&self.m * &v))
    }
}

/// Which of the two flows is integrated: drift `m` or the reversed drift `-m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowDirection {
    Forward,
    Sharp,
}

impl FlowDirection {
    pub fn sign(self) -> f64 {
        match self {
            FlowDirection::Forward => 1.0,
            FlowDirection::Sharp => -1.0,
        }
    }
}

impl fmt::Display for FlowDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlowDirection::Forward => "forward",
            FlowDirection::Sharp => "sharp",
        })
    }
}

/// A reversible diffusion `dX = σ db + m(X) dt` with `m = -a ∇ln ψ`, `a = σσᵀ`.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    dim: usize,
    sigma: SpdMatrix,
    a: SpdMatrix,
    psi: Arc<dyn ScalarField>,
    lambda_c: f64,
    normalization: f64,
    fd_fallback: bool,
}

impl DiffusionModel {
    pub fn new(sigma: DMatrix<f64>, psi: Arc<dyn ScalarField>, lambda_c: f64) -> Result<Self> {
        let sigma = SpdMatrix::new(sigma)?;
        let dim = sigma.dim();
        if dim < 2 {
            return Err(invalid(format!("dimension must be at least 2, got {dim}")));
        }
        if !(lambda_c > 0.0) {
            return Err(invalid(format!("lambda_c must be positive, got {lambda_c}")));
        }
        let a = SpdMatrix::new(sigma.matrix() * sigma.matrix().transpose())?;
        Ok(Self { dim, sigma, a, psi, lambda_c, normalization: 1.0, fd_fallback: true })
    }

    /// Sets `Z = ∫ψ⁻²`; integrals against the invariant measure use `ψ⁻²/Z`.
    pub fn with_normalization(mut self, z: f64) -> Result<Self> {
        if !(z > 0.0 && z.is_finite()) {
            return Err(invalid(format!("normalization must be positive and finite, got {z}")));
        }
        self.normalization = z;
        Ok(self)
    }

    pub fn with_fd_fallback(mut self, enabled: bool) -> Self {
        self.fd_fallback = enabled;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma(&self) -> &SpdMatrix {
        &self.sigma
    }

    pub fn a(&self) -> &SpdMatrix {
        &self.a
    }

    pub fn psi(&self) -> &Arc<dyn ScalarField> {
        &self.psi
    }

    pub fn lambda_c(&self) -> f64 {
        self.lambda_c
    }

    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    pub fn fd_fallback(&self) -> bool {
        self.fd_fallback
    }

    pub fn derivative_mode(&self) -> DerivativeMode {
        self.psi.mode()
    }

    fn check_psi(&self, x: &[f64]) -> Result<()> {
        if !self.psi.positive_everywhere() {
            check_positive(self.psi.value(x))?;
        }
        Ok(())
    }

    fn grad_ln_psi(&self, x: &[f64]) -> Result<DVector<f64>> {
        match self.psi.grad_ln(x) {
            Err(Error::MissingGradient) if self.fd_fallback => {
                let v = check_positive(self.psi.value(x))?;
                Ok(gradient_or_fd(&*self.psi, x, true)? / v)
            }
            other => other,
        }
    }

    /// `H ln ψ`, with central-difference fallback.
    pub fn hess_ln_psi(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        match self.psi.hess_ln(x) {
            Err(Error::MissingHessian | Error::MissingGradient) if self.fd_fallback => {
                let v = check_positive(self.psi.value(x))?;
                let g = gradient_or_fd(&*self.psi, x, true)?;
                let h = hessian_or_fd(&*self.psi, x, true)?;
                Ok(h / v - (&g * g.transpose()) / (v * v))
            }
            other => other,
        }
    }

    /// `m(x) = -a ∇ψ(x) / ψ(x)`.
    pub fn drift(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.check_psi(x)?;
        Ok(-(self.a.matrix() * self.grad_ln_psi(x)?))
    }

    /// Writes `m(x)` into `out`; `scratch` must have length `dim`.
    pub fn drift_into(&self, x: &[f64], out: &mut [f64], scratch: &mut [f64]) -> Result<()> {
        self.check_psi(x)?;
        match self.psi.grad_ln_into(x, scratch) {
            Ok(()) => {}
            Err(Error::MissingGradient) if self.fd_fallback => {
                scratch.copy_from_slice(self.grad_ln_psi(x)?.as_slice());
            }
            Err(e) => return Err(e),
        }
        let a = self.a.matrix();
        for (i, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for (j, g) in scratch.iter().enumerate() {
                s += a[(i, j)] * g;
            }
            *o = -s;
        }
        Ok(())
    }

    /// `∇·m(x) = -tr(a · H ln ψ(x))`.
    pub fn divergence_drift(&self, x: &[f64]) -> Result<f64> {
        self.check_psi(x)?;
        match self.psi.ln_hessian_trace(x, self.a.matrix()) {
            Ok(t) => Ok(-t),
            Err(Error::MissingHessian | Error::MissingGradient) if self.fd_fallback => {
                Ok(-(self.a.matrix() * self.hess_ln_psi(x)?).trace())
            }
            Err(e) => Err(e),
        }
    }

    /// Jacobian of the drift, `Dm = -a · H ln ψ`.
    pub fn drift_jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_psi(x)?;
        Ok(-(self.a.matrix() * self.hess_ln_psi(x)?))
    }

    /// `ln(ψ⁻²(x) / Z)`, the log-density of the invariant probability.
    pub fn ln_invariant_density(&self, x: &[f64]) -> f64 {
        -2.0 * self.psi.ln_value(x) - self.normalization.ln()
    }

    /// Sampled checks of the standing assumptions on a declared ball.
    pub fn validate(&self, spec: &ValidationSpec) -> ValidationReport {
        validate(self, spec)
    }
}

/// Parameters of [`DiffusionModel::validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSpec {
    pub sample_count: usize,
    #[serde(default = "default_domain_radius")]
    pub domain_radius: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_domain_radius() -> f64 {
    10.0
}

impl ValidationSpec {
    pub fn new(sample_count: usize, seed: u64) -> Self {
        Self { sample_count, domain_radius: default_domain_radius(), seed }
    }
}

/// One check of a [`ValidationReport`]: verdict plus the numbers behind it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationCheck {
    pub name: String,
    pub passed: bool,
    pub evidence: Vec<(String, f64)>,
    pub note: String,
}

impl ValidationCheck {
    pub fn evidence(&self, key: &str) -> Option<f64> {
        self.evidence.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub sample_count: usize,
    pub domain_radius: f64,
    pub seed: u64,
    pub derivative_mode: String,
    pub checks: Vec<ValidationCheck>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&ValidationCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn ball_volume(dim: usize, radius: f64) -> f64 {
    let d = dim as f64;
    std::f64::consts::PI.powf(d / 2.0) / statrs::function::gamma::gamma(d / 2.0 + 1.0) * radius.powf(d)
}

struct SampleEval {
    r: f64,
    inv_density: f64,
    divergence: Result<f64>,
    lipschitz: Result<f64>,
}

fn validate(model: &DiffusionModel, spec: &ValidationSpec) -> ValidationReport {
    let d = model.dim();
    let radius = spec.domain_radius;
    let n = spec.sample_count.max(1);

    // Draw sequentially so the point set does not depend on the worker count.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draws: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .map(|_| {
            let x = uniform_in_annulus(&mut rng, d, 0.0, radius);
            let dir = uniform_in_annulus(&mut rng, d, 1.0, 1.0);
            (x, dir)
        })
        .collect();

    let evals: Vec<SampleEval> = draws
        .par_iter()
        .map(|(x, dir)| {
            let r = norm(x);
            let inv_density = (-2.0 * model.psi.ln_value(x)).exp();
            let divergence = model.divergence_drift(x);
            let step = 1e-3 * r.max(1.0);
            let y: Vec<f64> = x.iter().zip(dir).map(|(xi, di)| xi + step * di).collect();
            let lipschitz = model.drift(x).and_then(|mx| Ok((model.drift(&y)? - mx).norm() / step));
            SampleEval { r, inv_density, divergence, lipschitz }
        })
        .collect();

    let mut checks = Vec::new();

    let (smin, smax) = model.sigma.eigen_range();
    let (amin, amax) = model.a.eigen_range();
    checks.push(ValidationCheck {
        name: "sigma_spd".into(),
        passed: smin > 0.0,
        evidence: vec![
            ("sigma_min_eigenvalue".into(), smin),
            ("sigma_max_eigenvalue".into(), smax),
            ("a_min_eigenvalue".into(), amin),
            ("a_max_eigenvalue".into(), amax),
        ],
        note: "Cholesky factorization of sigma and a = sigma sigma^T succeeded".into(),
    });

    // Invariant mass by uniform Monte Carlo on the ball and on the half-radius ball.
    let vol = ball_volume(d, radius);
    let mass = |cut: f64| -> (f64, f64) {
        let r: crate::stats::Running =
            evals.iter().map(|e| if e.r <= cut { e.inv_density * vol } else { 0.0 }).collect();
        (r.mean(), r.std_error())
    };
    let (m_full, se_full) = mass(radius);
    let (m_half, se_half) = mass(0.5 * radius);
    let z = model.normalization;
    let stabilized = (m_full - m_half).abs() <= 3.0 * (se_full.powi(2) + se_half.powi(2)).sqrt();
    let matches_z = (m_full - z).abs() <= 3.0 * se_full;
    checks.push(ValidationCheck {
        name: "invariant_mass".into(),
        passed: m_full.is_finite() && m_full > 0.0 && stabilized && matches_z,
        evidence: vec![
            ("mass_estimate".into(), m_full),
            ("mass_std_error".into(), se_full),
            ("mass_estimate_half_radius".into(), m_half),
            ("mass_std_error_half_radius".into(), se_half),
            ("normalization".into(), z),
        ],
        note: "heuristic: Monte Carlo estimate of the integral of psi^-2 over the ball, required to agree \
               with the half-radius estimate and with the stored normalization within 3 standard errors; \
               finiteness over all of R^d is not decidable numerically"
            .into(),
    });

    let mut div_margin = f64::NEG_INFINITY;
    let mut div_error = None;
    for e in &evals {
        match &e.divergence {
            Ok(v) => div_margin = div_margin.max(v + model.lambda_c),
            Err(err) => div_error = Some(err.to_string()),
        }
    }
    checks.push(ValidationCheck {
        name: "divergence_bound".into(),
        passed: div_error.is_none() && div_margin <= 0.0,
        evidence: vec![("max_divergence_plus_lambda_c".into(), div_margin), ("lambda_c".into(), model.lambda_c)],
        note: div_error.unwrap_or_else(|| "max over samples of div m + lambda_c must be <= 0".into()),
    });

    let mut lip = 0.0f64;
    let mut lip_error = None;
    for e in &evals {
        match &e.lipschitz {
            Ok(v) => lip = lip.max(*v),
            Err(err) => lip_error = Some(err.to_string()),
        }
    }
    checks.push(ValidationCheck {
        name: "drift_local_lipschitz".into(),
        passed: lip_error.is_none() && lip.is_finite(),
        evidence: vec![("max_difference_quotient".into(), lip)],
        note: lip_error.unwrap_or_else(|| {
            "local probe by sampled difference quotients; global uniform Lipschitz continuity of the \
             drift derivative is not certified"
                .into()
        }),
    });

    ValidationReport {
        sample_count: n,
        domain_radius: radius,
        seed: spec.seed,
        derivative_mode: match model.derivative_mode() {
            DerivativeMode::Analytic => "analytic".into(),
            mode @ DerivativeMode::FiniteDifference(_) => mode.to_string(),
        },
        checks,
    }
}
