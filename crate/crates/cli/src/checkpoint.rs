//! Binary checkpoints: one JSON header line, then little-endian `f32`
//! parameters, then optionally the Adam moments in the same encoding.

use crate::error::{CliError, Result};
use photoreg_core::encoding::EncodingSchedule;
use photoreg_core::field::{FieldConfig, RadianceField, SceneBounds};
use photoreg_core::regressor::{PoseRegressor, RegressorConfig};
use photoreg_core::train::{LossTrace, TrainedField};
use photoreg_diff::{AdamState, ParamSet, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const MAGIC: &str = "photoreg-checkpoint";
pub const VERSION: u32 = 1;

/// What the parameters belong to, with everything needed to rebuild it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "component", rename_all = "lowercase")]
pub enum Architecture {
    Field {
        config: FieldConfig,
        bounds: SceneBounds,
        position: EncodingSchedule,
        direction: EncodingSchedule,
    },
    Regressor { config: RegressorConfig },
}

impl Architecture {
    pub fn component(&self) -> &'static str {
        match self {
            Architecture::Field { .. } => "field",
            Architecture::Regressor { .. } => "regressor",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerMeta {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    lr: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    magic: String,
    version: u32,
    #[serde(flatten)]
    architecture: Architecture,
    layout: Vec<(String, Vec<usize>)>,
    param_count: usize,
    optimizer: Option<OptimizerMeta>,
    epoch: usize,
    seed: u64,
    trace: LossTrace,
    /// The architecture already owns the `config` key.
    #[serde(rename = "run_config")]
    config: serde_json::Value,
    /// SHA-256 of everything after the header line.
    payload_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub params: ParamSet,
    pub optimizer: Option<AdamState>,
    /// Epochs completed.
    pub epoch: usize,
    pub seed: u64,
    pub trace: LossTrace,
    /// Resolved config of the run that wrote it.
    pub config: serde_json::Value,
}

/// Rounds every value to the nearest `f32`, the precision checkpoints store.
pub fn quantize(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}

fn push_f32(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn read_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

impl Checkpoint {
    pub fn field(trained: &TrainedField, optimizer: Option<&AdamState>, epoch: usize, seed: u64, trace: &LossTrace) -> Self {
        Self {
            architecture: Architecture::Field {
                config: trained.field.config.clone(),
                bounds: trained.field.bounds,
                position: trained.position,
                direction: trained.direction,
            },
            params: trained.field.params.clone(),
            optimizer: optimizer.cloned(),
            epoch,
            seed,
            trace: trace.clone(),
            config: serde_json::Value::Null,
        }
    }

    pub fn regressor(regressor: &PoseRegressor, trace: &LossTrace, seed: u64) -> Self {
        Self {
            architecture: Architecture::Regressor {
                config: regressor.config.clone(),
            },
            params: regressor.params.clone(),
            optimizer: None,
            epoch: trace.len(),
            seed,
            trace: trace.clone(),
            config: serde_json::Value::Null,
        }
    }

    pub fn with_config(mut self, config: &impl Serialize) -> Self {
        self.config = serde_json::to_value(config).expect("serializable");
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.params.len();
        let mut payload = Vec::with_capacity(n * 4 * if self.optimizer.is_some() { 3 } else { 1 });
        push_f32(&mut payload, self.params.values());
        if let Some(adam) = &self.optimizer {
            assert_eq!(adam.len(), n, "optimizer state does not match the parameters");
            push_f32(&mut payload, &adam.m);
            push_f32(&mut payload, &adam.v);
        }
        let header = Header {
            magic: MAGIC.into(),
            version: VERSION,
            architecture: self.architecture.clone(),
            layout: self.params.layout(),
            param_count: n,
            optimizer: self.optimizer.as_ref().map(|a| OptimizerMeta {
                step: a.step,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                lr: a.lr,
            }),
            epoch: self.epoch,
            seed: self.seed,
            trace: self.trace.clone(),
            config: self.config.clone(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let mut out = serde_json::to_vec(&header).expect("serializable");
        out.push(b'\n');
        out.extend(payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| CliError::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason,
        };
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| corrupt("no header line".into()))?;
        let (head, payload) = (&bytes[..split], &bytes[split + 1..]);
        // check the magic and version before the rest of the schema
        let probe: serde_json::Value = serde_json::from_slice(head).map_err(|e| corrupt(format!("header: {e}")))?;
        if probe.get("magic").and_then(|m| m.as_str()) != Some(MAGIC) {
            return Err(corrupt("not a checkpoint file".into()));
        }
        let version = probe.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != VERSION {
            return Err(CliError::CheckpointVersion {
                path: path.to_path_buf(),
                found: version,
                expected: VERSION,
            });
        }
        let header: Header = serde_json::from_value(probe).map_err(|e| corrupt(format!("header: {e}")))?;
        let n = header.param_count;
        let expected = n * 4 * if header.optimizer.is_some() { 3 } else { 1 };
        if payload.len() != expected {
            return Err(corrupt(format!("payload is {} bytes, header promises {expected}", payload.len())));
        }
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(corrupt("payload checksum mismatch".into()));
        }
        let mut params = ParamSet::new();
        let values = read_f32(&payload[..n * 4]);
        let mut at = 0;
        for (name, shape) in header.layout {
            let len: usize = shape.iter().product();
            let data = values
                .get(at..at + len)
                .ok_or_else(|| corrupt("layout exceeds the parameter count".into()))?
                .to_vec();
            params.push(name, Tensor::new(shape, data));
            at += len;
        }
        if at != n {
            return Err(corrupt(format!("layout covers {at} of {n} parameters")));
        }
        let optimizer = header.optimizer.map(|o| AdamState {
            m: read_f32(&payload[n * 4..n * 8]),
            v: read_f32(&payload[n * 8..]),
            step: o.step,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            lr: o.lr,
        });
        Ok(Self {
            architecture: header.architecture,
            params,
            optimizer,
            epoch: header.epoch,
            seed: header.seed,
            trace: header.trace,
            config: header.config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(CliError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::MissingCheckpoint(path.to_path_buf()),
            _ => CliError::Io {
                path: path.to_path_buf(),
                source: e,
            },
        })?;
        Self::from_bytes(&bytes, path)
    }

    /// The stored field with its encoding schedules.
    pub fn into_field(self, path: &Path) -> Result<TrainedField> {
        match self.architecture {
            Architecture::Field {
                config,
                bounds,
                position,
                direction,
            } => {
                let mut field = RadianceField::zeros(config, bounds)?;
                if field.params.layout() != self.params.layout() {
                    return Err(CliError::CorruptCheckpoint {
                        path: path.to_path_buf(),
                        reason: "parameter layout does not match the field architecture".into(),
                    });
                }
                field.params = self.params;
                Ok(TrainedField {
                    field,
                    position,
                    direction,
                })
            }
            other => Err(CliError::WrongComponent {
                path: path.to_path_buf(),
                found: other.component(),
                expected: "field",
            }),
        }
    }

    pub fn into_regressor(self, path: &Path) -> Result<PoseRegressor> {
        match self.architecture {
            Architecture::Regressor { config } => {
                let mut r = PoseRegressor::constant(config, &photoreg_core::se3::Pose::identity())?;
                if r.params.layout() != self.params.layout() {
                    return Err(CliError::CorruptCheckpoint {
                        path: path.to_path_buf(),
                        reason: "parameter layout does not match the regressor architecture".into(),
                    });
                }
                r.params = self.params;
                Ok(r)
            }
            other => Err(CliError::WrongComponent {
                path: path.to_path_buf(),
                found: other.component(),
                expected: "regressor",
            }),
        }
    }
}
