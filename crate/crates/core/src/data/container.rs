//! Portable volume container: a directory holding `manifest.json` and a
//! raw little-endian float32 payload in C (row-major) order.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{nifti, Volume};
use crate::error::{Error, Result};

pub const CONTAINER_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "voxels.raw";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeManifest {
    pub schema_version: u32,
    /// `[slices, rows, columns]`.
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
    pub order: String,
    pub byte_order: String,
    pub intensity_units: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan_duration_min: Option<f64>,
    pub payload: String,
}

pub fn save_volume(volume: &Volume, dir: &Path) -> Result<()> {
    volume.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (s, h, w) = volume.dim();
    let manifest = VolumeManifest {
        schema_version: CONTAINER_SCHEMA_VERSION,
        dims: [s, h, w],
        spacing: volume.spacing,
        dtype: "float32".into(),
        order: "C".into(),
        byte_order: "little".into(),
        intensity_units: volume.intensity_units.clone(),
        scan_duration_min: volume.scan_duration_min,
        payload: PAYLOAD_FILE.into(),
    };
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    let mut bytes = Vec::with_capacity(s * h * w * 4);
    for v in volume.voxels.as_standard_layout().iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let ppath = dir.join(PAYLOAD_FILE);
    fs::write(&ppath, bytes).map_err(|e| Error::io(&ppath, e))?;
    Ok(())
}

fn load_container(dir: &Path) -> Result<Volume> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: VolumeManifest = serde_json::from_slice(&text)
        .map_err(|e| Error::ingestion(&mpath, format!("malformed manifest: {e}")))?;
    if m.schema_version != CONTAINER_SCHEMA_VERSION {
        return Err(Error::ingestion(
            &mpath,
            format!("unsupported schema version {}", m.schema_version),
        ));
    }
    if m.dtype != "float32" || m.byte_order != "little" || m.order != "C" {
        return Err(Error::ingestion(
            &mpath,
            format!(
                "unsupported layout dtype={} byte_order={} order={}",
                m.dtype, m.byte_order, m.order
            ),
        ));
    }
    let ppath = dir.join(&m.payload);
    let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let [s, h, w] = m.dims;
    let expected = s * h * w * 4;
    if bytes.len() != expected {
        return Err(Error::ingestion(
            &ppath,
            format!(
                "payload size mismatch: expected {expected} bytes for {:?} float32, found {}",
                m.dims,
                bytes.len()
            ),
        ));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let voxels = Array3::from_shape_vec((s, h, w), values)
        .map_err(|e| Error::ingestion(&ppath, e.to_string()))?;
    let volume = Volume {
        voxels,
        spacing: m.spacing,
        intensity_units: m.intensity_units,
        scan_duration_min: m.scan_duration_min,
    };
    volume
        .validate()
        .map_err(|e| Error::ingestion(&ppath, e.to_string()))?;
    Ok(volume)
}

/// Loads a container directory or an uncompressed NIfTI-1 `.nii` file.
pub fn load_volume(path: &Path) -> Result<Volume> {
    if path.is_dir() {
        load_container(path)
    } else if path.is_file() {
        nifti::load_nifti(path)
    } else {
        Err(Error::ingestion(path, "no such container directory or file"))
    }
}
