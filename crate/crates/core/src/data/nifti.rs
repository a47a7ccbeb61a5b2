//! Minimal NIfTI-1 single-file (`.nii`, uncompressed) reader.

use std::fs;
use std::path::Path;

use ndarray::Array3;

use super::Volume;
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDatatype {
    Int16,
    Float32,
    Float64,
    Uint16,
}

impl NiftiDatatype {
    fn from_code(code: i16) -> Option<Self> {
        match code {
            4 => Some(Self::Int16),
            16 => Some(Self::Float32),
            64 => Some(Self::Float64),
            512 => Some(Self::Uint16),
            _ => None,
        }
    }

    fn bytes(self) -> usize {
        match self {
            Self::Int16 | Self::Uint16 => 2,
            Self::Float32 => 4,
            Self::Float64 => 8,
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    little: bool,
}

impl Reader<'_> {
    fn take<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.bytes[at..at + N]);
        b
    }
    fn i16(&self, at: usize) -> i16 {
        let b = self.take::<2>(at);
        if self.little { i16::from_le_bytes(b) } else { i16::from_be_bytes(b) }
    }
    fn u16(&self, at: usize) -> u16 {
        let b = self.take::<2>(at);
        if self.little { u16::from_le_bytes(b) } else { u16::from_be_bytes(b) }
    }
    fn f32(&self, at: usize) -> f32 {
        let b = self.take::<4>(at);
        if self.little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }
    }
    fn f64(&self, at: usize) -> f64 {
        let b = self.take::<8>(at);
        if self.little { f64::from_le_bytes(b) } else { f64::from_be_bytes(b) }
    }
}

/// Reads a 3-D (or 4-D with a singleton 4th axis) NIfTI-1 volume.
/// The file's `(i, j, k)` axes become `(column, row, slice)`.
pub fn load_nifti(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_SIZE {
        return Err(Error::ingestion(path, format!("file has {} bytes, shorter than a NIfTI-1 header", bytes.len())));
    }
    let size_le = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let size_be = i32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let little = match (size_le, size_be) {
        (348, _) => true,
        (_, 348) => false,
        _ => return Err(Error::ingestion(path, "sizeof_hdr is not 348; not a NIfTI-1 file")),
    };
    if &bytes[344..347] != b"n+1" {
        return Err(Error::ingestion(path, "magic is not \"n+1\" (only single-file NIfTI-1 is supported)"));
    }
    let r = Reader { bytes: &bytes, little };
    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::ingestion(path, format!("invalid dim[0] = {ndim}")));
    }
    let dim = |i: usize| -> i16 { if i as i16 <= ndim { r.i16(40 + 2 * i) } else { 1 } };
    if (4..=7).any(|i| dim(i) > 1) {
        return Err(Error::ingestion(path, "only 3-D volumes are supported"));
    }
    let (nx, ny, nz) = (dim(1), dim(2), dim(3));
    if nx < 1 || ny < 1 || nz < 1 {
        return Err(Error::ingestion(path, format!("non-positive dimensions ({nx}, {ny}, {nz})")));
    }
    let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
    let code = r.i16(70);
    let dtype = NiftiDatatype::from_code(code).ok_or_else(|| {
        Error::ingestion(path, format!("unsupported NIfTI datatype code {code} (supported: uint16, int16, float32, float64)"))
    })?;
    let offset = r.f32(108);
    if !(offset >= HEADER_SIZE as f32) {
        return Err(Error::ingestion(path, format!("invalid vox_offset {offset}")));
    }
    let offset = offset as usize;
    let count = nx * ny * nz;
    let need = offset + count * dtype.bytes();
    if bytes.len() < need {
        return Err(Error::ingestion(path, format!("truncated payload: expected {need} bytes, found {}", bytes.len())));
    }
    let slope = r.f32(112);
    let inter = r.f32(116);
    let scale = |v: f64| -> f32 {
        if slope != 0.0 && slope.is_finite() {
            (v * slope as f64 + inter as f64) as f32
        } else {
            v as f32
        }
    };
    let values: Vec<f32> = (0..count)
        .map(|i| {
            let at = offset + i * dtype.bytes();
            let raw = match dtype {
                NiftiDatatype::Int16 => r.i16(at) as f64,
                NiftiDatatype::Uint16 => r.u16(at) as f64,
                NiftiDatatype::Float32 => r.f32(at) as f64,
                NiftiDatatype::Float64 => r.f64(at),
            };
            scale(raw)
        })
        .collect();
    let voxels = Array3::from_shape_vec((nz, ny, nx), values)
        .map_err(|e| Error::ingestion(path, e.to_string()))?;
    let pix = |i: usize| r.f32(76 + 4 * i).abs() as f64;
    let volume = Volume {
        voxels,
        spacing: [pix(3), pix(2), pix(1)],
        intensity_units: "unknown".into(),
        scan_duration_min: None,
    };
    volume.validate().map_err(|e| Error::ingestion(path, e.to_string()))?;
    Ok(volume)
}
