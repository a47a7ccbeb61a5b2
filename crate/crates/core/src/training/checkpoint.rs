//! Checkpoint directory: `manifest.json` plus little-endian tensor blobs.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, TrainConfig};
use crate::data::DomainSpec;
use crate::error::{Error, Result};
use crate::networks::{CycleModel, Generator, DX_PREFIX, DZ_PREFIX};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

/// Trained networks together with everything needed to rebuild them.
#[derive(Debug)]
pub struct Checkpoint {
    pub train_config: TrainConfig,
    /// The configuration actually trained (mode overrides applied).
    pub model_config: ModelConfig,
    pub domains: Vec<DomainSpec>,
    pub model: CycleModel,
    pub epoch: usize,
    /// Intensities are divided by this before entering the networks.
    pub intensity_scale: f64,
    /// Sampling RNG state after the last epoch.
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn domain_count(&self) -> usize {
        self.model_config.generator.domain_count
    }

    pub fn generator(&self) -> &Generator {
        &self.model.g
    }

    pub fn dtype(&self) -> DType {
        self.model.dtype
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Parameter,
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    /// Byte offset into the weights file.
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub domains: Vec<DomainSpec>,
    pub epoch: usize,
    pub intensity_scale: f64,
    pub dtype: String,
    pub byte_order: String,
    pub weights_file: String,
    pub tensors: Vec<TensorEntry>,
    pub rng: ChaCha8Rng,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("float32"),
        DType::F64 => Ok("float64"),
        other => Err(Error::Config(format!("unsupported checkpoint dtype {other:?}"))),
    }
}

fn push_le(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F64 => flat.to_vec1::<f64>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        other => return Err(Error::Config(format!("unsupported checkpoint dtype {other:?}"))),
    }
    Ok(())
}

fn from_le(bytes: &[u8], shape: &[usize], dtype: DType) -> Result<Tensor> {
    let dev = Device::Cpu;
    Ok(match dtype {
        DType::F32 => {
            let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &dev)?
        }
        DType::F64 => {
            let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &dev)?
        }
        other => return Err(Error::Config(format!("unsupported checkpoint dtype {other:?}"))),
    })
}

fn buffers(model: &CycleModel) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (prefix, d) in [(DX_PREFIX, &model.dx), (DZ_PREFIX, &model.dz)] {
        for (name, t) in d.buffers() {
            out.push((format!("{prefix}{name}"), t));
        }
    }
    out
}

pub fn save_checkpoint(ck: &Checkpoint, dir: &Path, config_hash: Option<String>) -> Result<CheckpointManifest> {
    let dtype = dtype_name(ck.dtype())?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut add = |name: &str, kind: TensorKind, t: &Tensor, blob: &mut Vec<u8>| -> Result<()> {
        let offset = blob.len();
        push_le(t, blob)?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            kind,
            shape: t.dims().to_vec(),
            offset,
            bytes: blob.len() - offset,
        });
        Ok(())
    };
    for (name, var) in ck.model.params.iter() {
        add(name, TensorKind::Parameter, var.as_tensor(), &mut blob)?;
    }
    for (name, t) in buffers(&ck.model) {
        add(&name, TensorKind::Buffer, &t, &mut blob)?;
    }
    let wpath = dir.join(WEIGHTS_FILE);
    fs::write(&wpath, &blob).map_err(|e| Error::io(&wpath, e))?;
    let manifest = CheckpointManifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        train_config: ck.train_config.clone(),
        model_config: ck.model_config.clone(),
        domains: ck.domains.clone(),
        epoch: ck.epoch,
        intensity_scale: ck.intensity_scale,
        dtype: dtype.into(),
        byte_order: "little".into(),
        weights_file: WEIGHTS_FILE.into(),
        tensors,
        rng: ck.rng.clone(),
        config_hash,
    };
    let mpath = dir.join(CHECKPOINT_MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(CHECKPOINT_MANIFEST_FILE);
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: CheckpointManifest = serde_json::from_slice(&text)
        .map_err(|e| Error::ingestion(&mpath, format!("malformed checkpoint manifest: {e}")))?;
    if m.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::ingestion(&mpath, format!("unsupported schema version {}", m.schema_version)));
    }
    let dtype = match m.dtype.as_str() {
        "float32" => DType::F32,
        "float64" => DType::F64,
        other => return Err(Error::ingestion(&mpath, format!("unsupported dtype {other}"))),
    };
    if m.byte_order != "little" {
        return Err(Error::ingestion(&mpath, format!("unsupported byte order {}", m.byte_order)));
    }
    let wpath = dir.join(&m.weights_file);
    let blob = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let mut model = CycleModel::new(
        &m.model_config.generator,
        &m.model_config.discriminator,
        m.train_config.seed,
        m.train_config.init_std,
        dtype,
    )?;
    let mut loaded = 0usize;
    for e in &m.tensors {
        let end = e.offset + e.bytes;
        if end > blob.len() {
            return Err(Error::ingestion(
                &wpath,
                format!("tensor {} needs bytes {}..{end}, file has {}", e.name, e.offset, blob.len()),
            ));
        }
        let t = from_le(&blob[e.offset..end], &e.shape, dtype)?;
        match e.kind {
            TensorKind::Parameter => {
                let var = model
                    .params
                    .get(&e.name)
                    .ok_or_else(|| Error::ingestion(&mpath, format!("unknown parameter {}", e.name)))?;
                if var.dims() != t.dims() {
                    return Err(Error::ingestion(
                        &mpath,
                        format!("parameter {}: shape {:?} != model {:?}", e.name, t.dims(), var.dims()),
                    ));
                }
                var.set(&t)?;
                loaded += 1;
            }
            TensorKind::Buffer => {
                if let Some(rest) = e.name.strip_prefix(DX_PREFIX) {
                    model.dx.set_buffer(rest, t)?;
                } else if let Some(rest) = e.name.strip_prefix(DZ_PREFIX) {
                    model.dz.set_buffer(rest, t)?;
                } else {
                    return Err(Error::ingestion(&mpath, format!("unknown buffer {}", e.name)));
                }
            }
        }
    }
    if loaded != model.params.len() {
        return Err(Error::ingestion(
            &mpath,
            format!("checkpoint lists {loaded} parameters, model has {}", model.params.len()),
        ));
    }
    Ok(Checkpoint {
        train_config: m.train_config,
        model_config: m.model_config,
        domains: m.domains,
        model,
        epoch: m.epoch,
        intensity_scale: m.intensity_scale,
        rng: m.rng,
    })
}
