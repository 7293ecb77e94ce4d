//! Model, cluster, workload and calibration configuration.
//!
//! A configuration bundle is a single JSON object with the sections
//! `model`, `cluster`, `workload` and (optionally) `calibration`. Unknown
//! keys are rejected. All sizes are bytes, all times are seconds, and all
//! parameter volumes are element counts.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

impl ConfigError {
    fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field,
            reason: reason.into(),
        }
    }
}

/// MoE architecture constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHyperparams {
    pub hidden_dim: u64,
    pub num_layers: u64,
    pub top_k: u64,
    pub num_routed_experts: u64,
    pub num_shared_experts: u64,
    /// Attention parameters, elements.
    pub psi_attn: f64,
    /// MoE (expert) parameters, elements.
    pub psi_moe: f64,
    /// Parameters activated per token, elements.
    pub psi_active: f64,
    pub bytes_per_element: u64,
}

/// Cluster shape and the two link classes of the bandwidth hierarchy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub n_node: u64,
    /// Devices per node.
    pub n_proc: u64,
    /// Seconds per message.
    pub intra_alpha: f64,
    /// Bytes per second.
    pub intra_beta: f64,
    pub inter_alpha: f64,
    pub inter_beta: f64,
    /// Bytes of device memory.
    pub mem_per_device: f64,
    /// Element-operations per second per device.
    pub compute_rate: f64,
}

impl ClusterConfig {
    pub fn total_devices(&self) -> u64 {
        self.n_node * self.n_proc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub batch_size: u64,
    pub seq_len: u64,
    pub input_len: u64,
    pub output_len: u64,
    /// Tokens per second.
    pub arrival_rate: f64,
}

/// A link class override in the calibration section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkOverride {
    pub alpha: f64,
    pub beta: f64,
}

/// Proportionality constants that turn the analytic relations into seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationCoefficients {
    /// Seconds per element-operation.
    pub compute_coeff: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intra: Option<LinkOverride>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inter: Option<LinkOverride>,
    /// Compose all-reduce as RS(size/d) + AG(size/d), exactly as printed.
    #[serde(default = "default_true")]
    pub ar_literal: bool,
    /// Multiply the compute term by the hidden dimension as printed.
    #[serde(default)]
    pub tau_literal: bool,
}

fn default_true() -> bool {
    true
}

impl CalibrationCoefficients {
    /// Defaults: `c_tau = 1 / compute_rate`, links taken from the cluster.
    pub fn defaults_for(cluster: &ClusterConfig) -> Self {
        Self {
            compute_coeff: 1.0 / cluster.compute_rate,
            intra: None,
            inter: None,
            ar_literal: true,
            tau_literal: false,
        }
    }
}

/// Calibration section as written in the file; every field is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCalibration {
    compute_coeff: Option<f64>,
    intra: Option<LinkOverride>,
    inter: Option<LinkOverride>,
    ar_literal: Option<bool>,
    tau_literal: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBundle {
    model: ModelHyperparams,
    cluster: ClusterConfig,
    workload: WorkloadSpec,
    #[serde(default)]
    calibration: RawCalibration,
}

/// A validated configuration bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigBundle {
    pub model: ModelHyperparams,
    pub cluster: ClusterConfig,
    pub workload: WorkloadSpec,
    pub calibration: CalibrationCoefficients,
}

/// Non-fatal findings about a bundle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfigWarning {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for ConfigWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ConfigBundle, ConfigError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ConfigBundle, ConfigError> {
    let raw: RawBundle = serde_json::from_str(text)?;
    let defaults = CalibrationCoefficients::defaults_for(&raw.cluster);
    let calibration = CalibrationCoefficients {
        compute_coeff: raw.calibration.compute_coeff.unwrap_or(defaults.compute_coeff),
        intra: raw.calibration.intra,
        inter: raw.calibration.inter,
        ar_literal: raw.calibration.ar_literal.unwrap_or(defaults.ar_literal),
        tau_literal: raw.calibration.tau_literal.unwrap_or(defaults.tau_literal),
    };
    let bundle = ConfigBundle {
        model: raw.model,
        cluster: raw.cluster,
        workload: raw.workload,
        calibration,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn is_power_of_two(v: u64) -> bool {
    v != 0 && v & (v - 1) == 0
}

fn positive_count(field: &'static str, v: u64) -> Result<(), ConfigError> {
    if v == 0 {
        return Err(ConfigError::invalid(field, "must be strictly positive"));
    }
    Ok(())
}

fn positive_real(field: &'static str, v: f64) -> Result<(), ConfigError> {
    if !(v.is_finite() && v > 0.0) {
        return Err(ConfigError::invalid(field, format!("must be finite and > 0, got {v}")));
    }
    Ok(())
}

fn nonnegative_real(field: &'static str, v: f64) -> Result<(), ConfigError> {
    if !(v.is_finite() && v >= 0.0) {
        return Err(ConfigError::invalid(field, format!("must be finite and >= 0, got {v}")));
    }
    Ok(())
}

impl ModelHyperparams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        positive_count("model.hidden_dim", self.hidden_dim)?;
        positive_count("model.num_layers", self.num_layers)?;
        positive_count("model.top_k", self.top_k)?;
        positive_count("model.num_routed_experts", self.num_routed_experts)?;
        positive_count("model.num_shared_experts", self.num_shared_experts)?;
        positive_count("model.bytes_per_element", self.bytes_per_element)?;
        positive_real("model.psi_attn", self.psi_attn)?;
        positive_real("model.psi_moe", self.psi_moe)?;
        positive_real("model.psi_active", self.psi_active)?;
        if self.top_k > self.num_routed_experts {
            return Err(ConfigError::invalid(
                "model.top_k",
                format!(
                    "top_k {} exceeds num_routed_experts {}",
                    self.top_k, self.num_routed_experts
                ),
            ));
        }
        if self.psi_active > self.psi_attn + self.psi_moe {
            return Err(ConfigError::invalid(
                "model.psi_active",
                "activated parameters exceed psi_attn + psi_moe",
            ));
        }
        Ok(())
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, v) in [("cluster.n_node", self.n_node), ("cluster.n_proc", self.n_proc)] {
            positive_count(field, v)?;
            if !is_power_of_two(v) {
                return Err(ConfigError::invalid(
                    field,
                    format!("degree must be a power of two, got {v}"),
                ));
            }
        }
        nonnegative_real("cluster.intra_alpha", self.intra_alpha)?;
        nonnegative_real("cluster.inter_alpha", self.inter_alpha)?;
        positive_real("cluster.intra_beta", self.intra_beta)?;
        positive_real("cluster.inter_beta", self.inter_beta)?;
        positive_real("cluster.mem_per_device", self.mem_per_device)?;
        positive_real("cluster.compute_rate", self.compute_rate)?;
        Ok(())
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        positive_count("workload.batch_size", self.batch_size)?;
        positive_count("workload.seq_len", self.seq_len)?;
        positive_count("workload.input_len", self.input_len)?;
        positive_count("workload.output_len", self.output_len)?;
        nonnegative_real("workload.arrival_rate", self.arrival_rate)?;
        Ok(())
    }
}

impl CalibrationCoefficients {
    pub fn validate(&self) -> Result<(), ConfigError> {
        positive_real("calibration.compute_coeff", self.compute_coeff)?;
        if let Some(l) = self.intra {
            nonnegative_real("calibration.intra.alpha", l.alpha)?;
            positive_real("calibration.intra.beta", l.beta)?;
        }
        if let Some(l) = self.inter {
            nonnegative_real("calibration.inter.alpha", l.alpha)?;
            positive_real("calibration.inter.beta", l.beta)?;
        }
        Ok(())
    }
}

impl ConfigBundle {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.cluster.validate()?;
        self.workload.validate()?;
        self.calibration.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bundle serializes")
    }
}

/// Non-fatal checks; never mutates the bundle.
pub fn validate_bundle(bundle: &ConfigBundle) -> Vec<ConfigWarning> {
    let mut warnings = Vec::new();
    let c = &bundle.cluster;
    if c.intra_beta < c.inter_beta {
        warnings.push(ConfigWarning {
            field: "cluster.intra_beta",
            message: format!(
                "inverted bandwidth hierarchy: intra_beta {} < inter_beta {}",
                c.intra_beta, c.inter_beta
            ),
        });
    }
    warnings
}
