//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stoflow_core::classify::Schedule;
use stoflow_core::flow::IntegratorConfig;
use stoflow_core::lyapunov::IntegralMethod;
use stoflow_core::modelfile::{FieldSpec, ModelFile};
use stoflow_core::operators::CertificateKind;
use stoflow_core::volume::{AaBox, CompactRegion, GridRule};
use stoflow_core::{FlowDirection, Result};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Model file, relative to the directory of the config file.
    pub model: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub validate: ValidateSection,
    #[serde(default)]
    pub certify: CertifySection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub volume: VolumeSection,
    #[serde(default)]
    pub lyapunov: LyapunovSection,
    #[serde(default)]
    pub classify: ClassifySection,
    #[serde(default)]
    pub oracle_compare: OracleSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateSection {
    pub sample_count: usize,
    pub domain_radius: f64,
}

impl Default for ValidateSection {
    fn default() -> Self {
        Self { sample_count: 1000, domain_radius: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifySection {
    pub u: FieldSpec,
    pub kind: CertificateKind,
    pub count: usize,
    pub radius: f64,
    pub inner_radius: f64,
}

impl Default for CertifySection {
    fn default() -> Self {
        Self { u: FieldSpec::Psi, kind: CertificateKind::StrictW, count: 10_000, radius: 3.0, inner_radius: 0.0 }
    }
}

fn default_integrator() -> IntegratorConfig {
    IntegratorConfig::new(1e-3, 1.0).with_record_stride(100)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    /// Initial points; the origin when empty.
    pub points: Vec<Vec<f64>>,
    pub flow: FlowDirection,
    /// Field whose log-accumulators are integrated along the flow.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u: Option<FieldSpec>,
    pub integrator: IntegratorConfig,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { points: Vec::new(), flow: FlowDirection::Forward, u: Some(FieldSpec::Psi), integrator: default_integrator() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VolumeMode {
    Series,
    Supermartingale,
    Decay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolumeSection {
    pub mode: VolumeMode,
    pub u: FieldSpec,
    pub flow: FlowDirection,
    /// Boxes of the region; the unit cube when empty.
    pub region: Vec<AaBox>,
    pub grid: GridRule,
    pub integrator: IntegratorConfig,
    pub paths: usize,
    pub epsilon: f64,
}

impl Default for VolumeSection {
    fn default() -> Self {
        Self {
            mode: VolumeMode::Series,
            u: FieldSpec::Psi,
            flow: FlowDirection::Forward,
            region: Vec::new(),
            grid: GridRule::Midpoint { per_axis: 8 },
            integrator: default_integrator(),
            paths: 1000,
            epsilon: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LyapunovSection {
    pub u: FieldSpec,
    pub region: Vec<AaBox>,
    pub grid: GridRule,
    pub integrator: IntegratorConfig,
    pub window_fraction: f64,
    pub integral: IntegralMethod,
    /// Also report both sides of the `ψ²`-volume conjecture.
    pub conjecture: bool,
}

impl Default for LyapunovSection {
    fn default() -> Self {
        Self {
            u: FieldSpec::Psi,
            region: Vec::new(),
            grid: GridRule::Midpoint { per_axis: 8 },
            integrator: IntegratorConfig::new(1e-3, 50.0).with_record_stride(10),
            window_fraction: 0.5,
            integral: IntegralMethod::quadrature(),
            conjecture: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifySection {
    pub flow: FlowDirection,
    pub schedule: Schedule,
}

impl Default for ClassifySection {
    fn default() -> Self {
        Self { flow: FlowDirection::Forward, schedule: Schedule::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub dts: Vec<f64>,
    pub horizon: f64,
    /// Initial points; `e_1` when empty.
    pub points: Vec<Vec<f64>>,
    pub paths: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self { dts: vec![4e-3, 2e-3, 1e-3], horizon: 5.0, points: Vec::new(), paths: 4 }
    }
}

/// A config with its model file loaded and relative paths resolved.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub model_file: ModelFile,
    pub model_path: PathBuf,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> std::result::Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {}", e.message().trim())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> std::result::Result<Loaded, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let model_path = base.join(&config.model);
        if !model_path.is_file() {
            return Err(CliError::Config(format!("model file {} does not exist", model_path.display())));
        }
        let model_file = ModelFile::load(&model_path).map_err(|e| CliError::Config(format!("{}: {e}", model_path.display())))?;
        Ok(Loaded { config, model_file, model_path })
    }
}

impl Loaded {
    /// First 12 hex digits of SHA-256 over the canonical config (seed and
    /// output directory removed) and the canonical model file.
    pub fn hash12(&self) -> String {
        let mut canonical = self.config.clone();
        canonical.seed = 0;
        canonical.output_dir = None;
        canonical.model = PathBuf::new();
        let mut h = Sha256::new();
        h.update(canonical.to_toml().as_bytes());
        h.update([0u8]);
        h.update(self.model_file.to_toml().as_bytes());
        hex::encode(h.finalize())[..12].to_string()
    }
}

/// The listed boxes, or the unit cube of dimension `dim` when there are none.
pub fn region(boxes: &[AaBox], dim: usize) -> Result<CompactRegion> {
    if boxes.is_empty() {
        return CompactRegion::new(vec![AaBox::unit(dim)]);
    }
    let checked = boxes.iter().map(|b| AaBox::new(b.lower.clone(), b.upper.clone())).collect::<Result<Vec<_>>>()?;
    CompactRegion::new(checked)
}
