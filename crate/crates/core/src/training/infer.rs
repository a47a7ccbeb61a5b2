use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};

use super::Checkpoint;
use crate::conditioning::MappingLabel;
use crate::data::{FitMode, SliceFit, Volume};
use crate::error::{Error, Result};

/// Slices processed per generator call during inference.
const INFER_CHUNK: usize = 16;

/// Stacks equally shaped slices into a `(B, 1, H, W)` tensor divided by `scale`.
pub fn slices_to_tensor(slices: &[&Array2<f32>], scale: f64, dtype: DType) -> Result<Tensor> {
    let Some(first) = slices.first() else {
        return Err(Error::Validation("no slices given".into()));
    };
    let (h, w) = first.dim();
    let inv = (1.0 / scale) as f32;
    let mut data = Vec::with_capacity(slices.len() * h * w);
    for s in slices {
        if s.dim() != (h, w) {
            return Err(Error::Dimension(format!("slice shape {:?} != {:?}", s.dim(), (h, w))));
        }
        data.extend(s.iter().map(|v| v * inv));
    }
    Ok(Tensor::from_vec(data, (slices.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// `G(z; c)` on normalised `(B, 1, H, W)` inputs.
pub fn correct_slices(ck: &Checkpoint, z: &Tensor, label: &MappingLabel) -> Result<Tensor> {
    label.check_len(ck.domain_count())?;
    let labels = label.to_batch(1, ck.dtype())?;
    ck.generator().forward(z, &labels)
}

/// Corrects a volume slice by slice with a fixed label. Slices are padded to
/// the generator's divisor and cropped back; output is clamped at zero.
pub fn infer(ck: &Checkpoint, volume: &Volume, label: &MappingLabel) -> Result<Volume> {
    label.check_len(ck.domain_count())?;
    volume.validate()?;
    let (s, h, w) = volume.dim();
    let fit = SliceFit::plan(h, w, ck.model_config.generator.divisor(), FitMode::Pad)?;
    let fitted = fit.apply(&volume.voxels);
    let (fh, fw) = fit.fitted;
    let scale = ck.intensity_scale;
    let mut out = Array3::<f32>::zeros((s, fh, fw));
    let slices: Vec<Array2<f32>> = (0..s).map(|k| fitted.index_axis(ndarray::Axis(0), k).to_owned()).collect();
    for start in (0..s).step_by(INFER_CHUNK) {
        let end = (start + INFER_CHUNK).min(s);
        let refs: Vec<&Array2<f32>> = slices[start..end].iter().collect();
        let z = slices_to_tensor(&refs, scale, ck.dtype())?;
        let g = correct_slices(ck, &z, label)?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        for (i, chunk) in g.chunks(fh * fw).enumerate() {
            let mut plane = out.index_axis_mut(ndarray::Axis(0), start + i);
            for (o, v) in plane.iter_mut().zip(chunk) {
                *o = (v * scale as f32).max(0.0);
            }
        }
    }
    Ok(volume.with_voxels(fit.invert(&out)))
}
