//! TOML model definitions and scalar-field specifications.
//!
//! ```toml
//! dim = 2
//! sigma = [1.0, 0.0, 0.0, 1.0]   # row-major
//! lambda_c = 2.0
//! potential = "expression"       # or "ou"
//! expression = "exp((x1^2 + x2^2) / 2)"
//! normalization = 3.141592653589793   # optional
//! fd_step = 1e-4                      # optional, relative
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::expr::Expression;
use crate::field::{FdStep, FiniteDifference, GaussianExp, Power, ScalarField, DEFAULT_FD_REL_STEP};
use crate::model::DiffusionModel;
use crate::quad::integrate_rd;

/// Tolerance of the face test when `Z = ∫ψ⁻²` is estimated.
pub const NORMALIZATION_BOUNDARY_TOL: f64 = 1e-12;
/// Largest half-width of the cube used to estimate `Z`.
pub const NORMALIZATION_MAX_RADIUS: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PotentialKind {
    /// `ψ(x) = π^{d/4} e^{|x|²/2}`
    Ou,
    /// `ψ` given by [`ModelFile::expression`], derivatives by central differences.
    Expression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub dim: usize,
    /// Row-major `d × d` entries of `σ`.
    pub sigma: Vec<f64>,
    pub lambda_c: f64,
    pub potential: PotentialKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression: Option<String>,
    /// `Z = ∫ψ⁻²`; estimated by cubature when absent for expression potentials.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<f64>,
    /// Relative central-difference step for expression potentials.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fd_step: Option<f64>,
}

pub(crate) fn toml_error(text: &str, err: toml::de::Error) -> Error {
    let offset = err.span().map(|s| s.start).unwrap_or(text.len());
    Error::Parse { offset, message: err.message().to_string() }
}

impl ModelFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| toml_error(text, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model file serializes")
    }

    pub fn ou(dim: usize) -> Self {
        let mut sigma = vec![0.0; dim * dim];
        for i in 0..dim {
            sigma[i * dim + i] = 1.0;
        }
        Self { dim, sigma, lambda_c: dim as f64, potential: PotentialKind::Ou, expression: None, normalization: None, fd_step: None }
    }

    pub fn psi(&self) -> Result<Arc<dyn ScalarField>> {
        match self.potential {
            PotentialKind::Ou => {
                if self.expression.is_some() {
                    return Err(invalid("`expression` is only allowed with potential = \"expression\""));
                }
                Ok(Arc::new(GaussianExp::ou_potential(self.dim)))
            }
            PotentialKind::Expression => {
                let src = self.expression.as_deref().ok_or_else(|| invalid("potential = \"expression\" requires `expression`"))?;
                let step = self.fd_step.unwrap_or(DEFAULT_FD_REL_STEP);
                if !(step > 0.0 && step.is_finite()) {
                    return Err(invalid(format!("fd_step must be positive, got {step}")));
                }
                let expr = Expression::parse(src, self.dim)?;
                Ok(Arc::new(FiniteDifference::with_step(expr, FdStep::Relative(step))))
            }
        }
    }

    pub fn build(&self) -> Result<DiffusionModel> {
        if self.sigma.len() != self.dim * self.dim {
            return Err(invalid(format!("sigma needs {} entries for dim = {}, got {}", self.dim * self.dim, self.dim, self.sigma.len())));
        }
        let sigma = DMatrix::from_row_slice(self.dim, self.dim, &self.sigma);
        let psi = self.psi()?;
        let z = match (self.normalization, self.potential) {
            (Some(z), _) => z,
            (None, PotentialKind::Ou) => 1.0,
            (None, PotentialKind::Expression) => {
                let f = |x: &[f64]| (-2.0 * psi.ln_value(x)).exp();
                integrate_rd(&f, self.dim, NORMALIZATION_BOUNDARY_TOL, NORMALIZATION_MAX_RADIUS)?.value
            }
        };
        DiffusionModel::new(sigma, psi, self.lambda_c)?.with_normalization(z)
    }
}

/// A test function `u` named on the command line or in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FieldSpec {
    /// The model potential `ψ`.
    Psi,
    /// `ψ²`
    PsiSquared,
    /// The constant 1.
    One,
    /// `expr:<source>`, derivatives by central differences.
    Expression(String),
}

impl FieldSpec {
    pub fn build(&self, model: &DiffusionModel) -> Result<Arc<dyn ScalarField>> {
        Ok(match self {
            FieldSpec::Psi => model.psi().clone(),
            FieldSpec::PsiSquared => Arc::new(Power::new(model.psi().clone(), 2.0)),
            FieldSpec::One => Arc::new(GaussianExp::constant(1.0)),
            FieldSpec::Expression(src) => Arc::new(FiniteDifference::new(Expression::parse(src, model.dim())?)),
        })
    }
}

impl FromStr for FieldSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "psi" => Ok(FieldSpec::Psi),
            "psi2" => Ok(FieldSpec::PsiSquared),
            "one" => Ok(FieldSpec::One),
            other => match other.strip_prefix("expr:") {
                Some(src) => Ok(FieldSpec::Expression(src.trim().to_string())),
                None => Err(invalid(format!("unknown field `{other}`; expected psi, psi2, one or expr:<source>"))),
            },
        }
    }
}

impl TryFrom<String> for FieldSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FieldSpec> for String {
    fn from(f: FieldSpec) -> String {
        f.to_string()
    }
}

impl fmt::Display for FieldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldSpec::Psi => write!(f, "psi"),
            FieldSpec::PsiSquared => write!(f, "psi2"),
            FieldSpec::One => write!(f, "one"),
            FieldSpec::Expression(src) => write!(f, "expr:{src}"),
        }
    }
}
