//! Model checkpoints as JSON documents with hexadecimal-float tensors.
//!
//! ```json
//! {
//!   "format": "textcnn-checkpoint",
//!   "version": 1,
//!   "embedding_dim": 16,
//!   "hyperparameters": { ... TrainConfig ... },
//!   "conv_layers": [
//!     { "kernel_size": 3, "n_filters": 8,
//!       "kernels": { "shape": [3, 16, 8], "data": ["0x1.8p-3", ...] },
//!       "biases":  { "shape": [8], "data": [...] } }
//!   ],
//!   "output": { "weights": { "shape": [8], "data": [...] }, "bias": "0x0p+0" }
//! }
//! ```
//!
//! Tensors are row-major. Hex floats make the round trip bit-exact.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hexfloat::{self, HexFloatError};
use crate::model::{ConvLayerParams, ModelError, ModelParams, OutputLayerParams};
use crate::train::TrainConfig;

pub const CHECKPOINT_FORMAT: &str = "textcnn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a checkpoint (format tag {0:?})")]
    WrongFormat(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("tensor {name}: shape {shape:?} does not match {len} values")]
    Shape {
        name: String,
        shape: Vec<usize>,
        len: usize,
    },
    #[error(transparent)]
    HexFloat(#[from] HexFloatError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tensor {
    shape: Vec<usize>,
    data: Vec<String>,
}

impl Tensor {
    fn encode(shape: &[usize], values: &[f64]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: values.iter().map(|&v| hexfloat::format(v)).collect(),
        }
    }

    fn decode(&self, name: &str) -> Result<Vec<f64>, CheckpointError> {
        let expected: usize = self.shape.iter().product();
        if expected != self.data.len() {
            return Err(CheckpointError::Shape {
                name: name.to_string(),
                shape: self.shape.clone(),
                len: self.data.len(),
            });
        }
        Ok(self
            .data
            .iter()
            .map(|s| hexfloat::parse(s))
            .collect::<Result<_, _>>()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ConvDoc {
    kernel_size: usize,
    n_filters: usize,
    kernels: Tensor,
    biases: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OutputDoc {
    weights: Tensor,
    bias: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    version: u32,
    embedding_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hyperparameters: Option<TrainConfig>,
    conv_layers: Vec<ConvDoc>,
    output: OutputDoc,
}

/// A trained model together with the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let p = &self.params;
        let doc = CheckpointDoc {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            embedding_dim: p.embedding_dim,
            hyperparameters: self.config.clone(),
            conv_layers: p
                .conv_layers
                .iter()
                .map(|l| {
                    let (k, d, f) = l.kernels.dim();
                    ConvDoc {
                        kernel_size: l.kernel_size,
                        n_filters: l.n_filters,
                        kernels: Tensor::encode(
                            &[k, d, f],
                            l.kernels.as_slice().expect("standard layout"),
                        ),
                        biases: Tensor::encode(&[f], l.biases.as_slice().expect("standard layout")),
                    }
                })
                .collect(),
            output: OutputDoc {
                weights: Tensor::encode(
                    &[p.output.weights.len()],
                    p.output.weights.as_slice().expect("standard layout"),
                ),
                bias: hexfloat::format(p.output.bias),
            },
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let format = value.get("format").and_then(|v| v.as_str()).unwrap_or("");
        if format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::WrongFormat(format.to_string()));
        }
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let doc: CheckpointDoc = serde_json::from_value(value)?;
        let mut conv_layers = Vec::with_capacity(doc.conv_layers.len());
        for (l, c) in doc.conv_layers.iter().enumerate() {
            let kernels = c.kernels.decode(&format!("conv[{l}].kernels"))?;
            let shape = match c.kernels.shape.as_slice() {
                &[k, d, f] => (k, d, f),
                other => {
                    return Err(CheckpointError::Shape {
                        name: format!("conv[{l}].kernels"),
                        shape: other.to_vec(),
                        len: kernels.len(),
                    })
                }
            };
            conv_layers.push(ConvLayerParams {
                kernel_size: c.kernel_size,
                n_filters: c.n_filters,
                kernels: Array3::from_shape_vec(shape, kernels).expect("checked length"),
                biases: Array1::from(c.biases.decode(&format!("conv[{l}].biases"))?),
            });
        }
        let params = ModelParams {
            conv_layers,
            output: OutputLayerParams {
                weights: Array1::from(doc.output.weights.decode("output.weights")?),
                bias: hexfloat::parse(&doc.output.bias)?,
            },
            embedding_dim: doc.embedding_dim,
        };
        params.validate()?;
        Ok(Checkpoint {
            params,
            config: doc.hyperparameters,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
