//! Checkpoint = JSON manifest + little-endian `f32` blob.
//!
//! The blob lives next to the manifest as `<manifest file name>.bin`. It
//! holds the model parameters in declaration order, followed by the Adam
//! first and second moments when optimizer state is saved. Every tensor is
//! located by a byte offset recorded in the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::ModelParams;
use crate::optim::Adam;
use crate::tensor::{Shape, Tensor};
use crate::trainer::TrainConfig;
use crate::vgg::LossNetSource;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub first_moment: Vec<TensorEntry>,
    pub second_moment: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossNetEntry {
    pub source: LossNetSource,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub step: usize,
    pub width: usize,
    pub config: TrainConfig,
    pub loss_network: LossNetEntry,
    pub blob: String,
    pub blob_bytes: usize,
    pub params: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub config: TrainConfig,
    pub step: usize,
    pub optimizer: Option<Adam<f32>>,
    pub loss_network: LossNetEntry,
}

pub fn blob_path(manifest_path: &Path) -> PathBuf {
    let mut name = manifest_path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".bin");
    manifest_path.with_file_name(name)
}

fn push_tensor(blob: &mut Vec<u8>, entries: &mut Vec<TensorEntry>, name: String, t: &Tensor<f32>) {
    entries.push(TensorEntry {
        name,
        shape: t.shape().dims(),
        offset: blob.len(),
    });
    blob.extend_from_slice(&t.to_le_bytes());
}

fn find_moment<'a>(list: &'a [TensorEntry], name: &str) -> Result<&'a TensorEntry> {
    list.iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::MissingParam(format!("optimizer moment for {name}")))
}

impl Checkpoint {
    pub fn save(&self, manifest_path: impl AsRef<Path>) -> Result<()> {
        let manifest_path = manifest_path.as_ref();
        let blob_file = blob_path(manifest_path);
        let mut blob = Vec::new();
        let mut params = Vec::new();
        for (name, t) in self.params.iter() {
            push_tensor(&mut blob, &mut params, name.to_string(), t);
        }
        let optimizer = self.optimizer.as_ref().map(|adam| {
            let mut first_moment = Vec::new();
            let mut second_moment = Vec::new();
            for (i, (name, t)) in self.params.iter().enumerate() {
                if let (Some(m), Some(v)) = (adam.m.get(i), adam.v.get(i)) {
                    let m = Tensor::new(t.shape(), m.clone()).expect("moment matches parameter");
                    let v = Tensor::new(t.shape(), v.clone()).expect("moment matches parameter");
                    push_tensor(&mut blob, &mut first_moment, name.to_string(), &m);
                    push_tensor(&mut blob, &mut second_moment, name.to_string(), &v);
                }
            }
            OptimizerEntry {
                t: adam.t,
                lr: adam.lr,
                beta1: adam.beta1,
                beta2: adam.beta2,
                eps: adam.eps,
                first_moment,
                second_moment,
            }
        });
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            step: self.step,
            width: self.params.width(),
            config: self.config.clone(),
            loss_network: self.loss_network.clone(),
            blob: blob_file.file_name().expect("blob file name").to_string_lossy().into_owned(),
            blob_bytes: blob.len(),
            params,
            optimizer,
        };
        fs::write(&blob_file, &blob).map_err(|e| Error::io(&blob_file, e))?;
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: manifest.version,
            });
        }
        let blob_file = manifest_path.with_file_name(&manifest.blob);
        let blob = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
        let needed = manifest.blob_bytes;
        if blob.len() < needed {
            return Err(Error::TruncatedBlob {
                path: blob_file,
                needed,
                len: blob.len(),
            });
        }

        let read = |e: &TensorEntry| -> Result<Tensor<f32>> {
            let shape = Shape::from(e.shape);
            shape.validate()?;
            let end = e.offset + shape.numel() * 4;
            if end > blob.len() {
                return Err(Error::TruncatedBlob {
                    path: blob_file.clone(),
                    needed: end,
                    len: blob.len(),
                });
            }
            Tensor::from_le_bytes(shape, &blob[e.offset..end])
        };

        let declared = ModelParams::<f32>::declared(manifest.width);
        for (name, shape) in &declared {
            if let Some(e) = manifest.params.iter().find(|e| &e.name == name) {
                if Shape::from(e.shape) != *shape {
                    return Err(Error::LayerShape {
                        layer: name.clone(),
                        expected: *shape,
                        found: Shape::from(e.shape),
                    });
                }
            }
        }
        let named = manifest
            .params
            .iter()
            .map(|e| Ok((e.name.clone(), read(e)?)))
            .collect::<Result<Vec<_>>>()?;
        let params = ModelParams::from_named(manifest.width, named)?;

        let optimizer = match &manifest.optimizer {
            None => None,
            Some(o) => {
                let mut adam = Adam::new(o.lr);
                adam.beta1 = o.beta1;
                adam.beta2 = o.beta2;
                adam.eps = o.eps;
                adam.t = o.t;
                if !o.first_moment.is_empty() {
                    for (name, t) in params.iter() {
                        let m = read(find_moment(&o.first_moment, name)?)?;
                        let v = read(find_moment(&o.second_moment, name)?)?;
                        if m.shape() != t.shape() || v.shape() != t.shape() {
                            return Err(Error::LayerShape {
                                layer: format!("optimizer moment for {name}"),
                                expected: t.shape(),
                                found: m.shape(),
                            });
                        }
                        adam.m.push(m.into_data());
                        adam.v.push(v.into_data());
                    }
                }
                Some(adam)
            }
        };

        Ok(Checkpoint {
            params,
            config: manifest.config,
            step: manifest.step,
            optimizer,
            loss_network: manifest.loss_network,
        })
    }
}
