//! Heatmap and prediction export as 8-bit PGM files.

use std::path::{Path, PathBuf};

use crate::data::netpbm::Raster;
use crate::data::{self, SegSample};
use crate::error::{Error, Result};
use crate::model::predict;
use crate::tensor::Scalar;
use crate::train::LoadedModel;

/// Min-max scales to `0..=255`; a constant input maps to all zeros.
pub fn minmax_u8<T: Scalar>(values: &[T]) -> Vec<u8> {
    let v: Vec<f64> = values.iter().map(|x| x.as_f64()).collect();
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0; v.len()];
    }
    v.iter().map(|x| ((x - lo) / span * 255.0).round() as u8).collect()
}

/// Writes `layer{l}_class{n}.pgm` (layers from 1) at feature resolution and
/// `pred.pgm` with raw category indices. Returns the written paths.
pub fn export_heatmaps<T: Scalar>(model: &LoadedModel<T>, image: &SegSample, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (x, _) = data::collate::<T>(&[image])?;
    let (probs, heatmaps) = model.infer(x)?;
    let mut written = Vec::new();
    for (l, h) in heatmaps.iter().enumerate() {
        let s = h.shape();
        let (n, hh, ww) = (s[1], s[2], s[3]);
        for c in 0..n {
            let plane = &h.data()[c * hh * ww..(c + 1) * hh * ww];
            let path = dir.join(format!("layer{}_class{c}.pgm", l + 1));
            Raster {
                width: ww,
                height: hh,
                channels: 1,
                data: minmax_u8(plane),
            }
            .write(&path)?;
            written.push(path);
        }
    }
    let path = dir.join("pred.pgm");
    Raster {
        width: image.width,
        height: image.height,
        channels: 1,
        data: predict(&probs),
    }
    .write(&path)?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_maps_to_zero() {
        assert_eq!(minmax_u8(&[0.3f64; 4]), vec![0; 4]);
        assert_eq!(minmax_u8(&[1.0f64, 2.0, 3.0]), vec![0, 128, 255]);
    }
}
