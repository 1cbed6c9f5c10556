//! Versioned JSON checkpoint: spec, flat parameter blocks, seed provenance
//! and the feature standardization used in training.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Standardization;
use crate::error::{BnnError, Result};
use crate::layers::{DenseDeterministic, DenseVariational, Layer};
use crate::model::{LayerSpec, Model, ModelSpec};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "bnn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub layer: usize,
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Seed used to initialize the model.
    pub init_seed: u64,
    /// Seed of the training stream.
    pub train_seed: u64,
    pub split_seed: u64,
    pub split_fraction: f64,
    pub target: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub spec: ModelSpec,
    pub provenance: Provenance,
    pub standardization: Standardization,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn new(model: &Model, provenance: Provenance, standardization: Standardization) -> Self {
        let params = model
            .param_blocks()
            .into_iter()
            .map(|b| ParamRecord {
                layer: b.layer,
                name: b.name.to_string(),
                shape: b.tensor.shape().to_vec(),
                data: b.tensor.data().to_vec(),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            spec: model.spec().clone(),
            provenance,
            standardization,
            params,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(BnnError::Data(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Rebuilds the model, checking every block against the spec.
    pub fn model(&self) -> Result<Model> {
        self.spec.validate()?;
        let mut blocks = self.params.iter();
        let mut next = |layer: usize, name: &str, shape: &[usize]| -> Result<Tensor> {
            let rec = blocks.next().ok_or_else(|| BnnError::Build {
                layer,
                reason: format!("missing parameter block {name}"),
            })?;
            if rec.layer != layer || rec.name != name || rec.shape != shape {
                return Err(BnnError::Build {
                    layer,
                    reason: format!(
                        "expected block {name}{shape:?}, found layer {} {}{:?}",
                        rec.layer, rec.name, rec.shape
                    ),
                });
            }
            Tensor::new(rec.shape.clone(), rec.data.clone())
        };
        let mut inputs = self.spec.input_width;
        let mut layers = Vec::new();
        for (i, ls) in self.spec.layers.iter().enumerate() {
            let units = ls.units();
            let act = self.spec.activation_of(i);
            let layer = match ls {
                LayerSpec::Dense { .. } => Layer::Dense(DenseDeterministic::new(
                    next(i, "weights", &[units, inputs])?,
                    next(i, "bias", &[units])?,
                    act,
                )?),
                LayerSpec::DenseVariational {
                    posterior,
                    prior_sigma,
                    ..
                } => Layer::Variational(DenseVariational {
                    family: *posterior,
                    weight_mu: next(i, "weight_mu", &[units, inputs])?,
                    weight_rho: next(i, "weight_rho", &[units, inputs])?,
                    bias_mu: next(i, "bias_mu", &[units])?,
                    bias_rho: next(i, "bias_rho", &[units])?,
                    prior_sigma: *prior_sigma,
                    activation: act,
                }),
            };
            layers.push(layer);
            inputs = units;
        }
        if blocks.next().is_some() {
            return Err(BnnError::Data("checkpoint has extra parameter blocks".into()));
        }
        Model::from_parts(self.spec.clone(), layers, self.provenance.init_seed)
    }
}
