//! Segmentation samples, the on-disk dataset layout and batching.
//!
//! A dataset directory holds `index.txt` with one
//! `images/NNNNN.ppm<TAB>masks/NNNNN.pgm` line per sample, paths relative to
//! the directory. Masks store the category index as the pixel value.

pub mod netpbm;
pub mod synth;

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};
use netpbm::Raster;

pub const MANIFEST: &str = "index.txt";

/// 8-bit RGB image (interleaved, row-major) and its label map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegSample {
    pub width: usize,
    pub height: usize,
    pub image: Vec<u8>,
    pub label: Vec<u8>,
}

impl SegSample {
    pub fn validate(&self, categories: usize) -> Result<()> {
        let plane = self.width * self.height;
        if self.image.len() != plane * 3 || self.label.len() != plane {
            return Err(Error::invalid(
                "sample",
                format!(
                    "{}×{} sample with {} image and {} label bytes",
                    self.width,
                    self.height,
                    self.image.len(),
                    self.label.len()
                ),
            ));
        }
        if let Some(&l) = self.label.iter().find(|&&l| l as usize >= categories) {
            return Err(Error::LabelOutOfRange {
                label: l as usize,
                categories,
            });
        }
        Ok(())
    }
}

pub fn save_dataset(samples: &[SegSample], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let (img, mask) = (format!("images/{i:05}.ppm"), format!("masks/{i:05}.pgm"));
        Raster {
            width: s.width,
            height: s.height,
            channels: 3,
            data: s.image.clone(),
        }
        .write(dir.join(&img))?;
        Raster {
            width: s.width,
            height: s.height,
            channels: 1,
            data: s.label.clone(),
        }
        .write(dir.join(&mask))?;
        writeln!(manifest, "{img}\t{mask}").expect("write to String");
    }
    let p = dir.join(MANIFEST);
    std::fs::write(&p, manifest).map_err(|e| Error::io(&p, e))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<SegSample>> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut samples = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let entry = line.trim_end_matches('\n');
        if !entry.is_empty() {
            let (img, mask) = entry.split_once('\t').ok_or_else(|| Error::Malformed {
                path: path.clone(),
                offset,
                msg: "expected 'image<TAB>mask'".into(),
            })?;
            let img_path = dir.join(img);
            let image = Raster::read(&img_path)?;
            let label = Raster::read(dir.join(mask))?;
            if image.channels != 3 || label.channels != 1 {
                return Err(Error::Malformed {
                    path: img_path,
                    offset: 0,
                    msg: "expected a PPM image and a PGM mask".into(),
                });
            }
            if (image.width, image.height) != (label.width, label.height) {
                return Err(Error::Malformed {
                    path: dir.join(mask),
                    offset: 0,
                    msg: format!(
                        "mask is {}×{}, image is {}×{}",
                        label.width, label.height, image.width, image.height
                    ),
                });
            }
            samples.push(SegSample {
                width: image.width,
                height: image.height,
                image: image.data,
                label: label.data,
            });
        }
        offset += line.len();
    }
    Ok(samples)
}

/// Sample indices grouped into batches for one epoch. With `shuffle`, the
/// order is a permutation drawn from `seed + epoch`; the last batch may be
/// short.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batches", "batch size must be ≥ 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        SplitMix64::new(seed.wrapping_add(epoch)).shuffle(&mut order);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Images as `[B, 3, H, W]` in [0, 1] and labels flattened `[B, H, W]`.
pub fn collate<T: Scalar>(samples: &[&SegSample]) -> Result<(Tensor<T>, Vec<u8>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("collate", "empty batch"))?;
    let (w, h) = (first.width, first.height);
    let plane = w * h;
    let mut data = Vec::with_capacity(samples.len() * 3 * plane);
    let mut labels = Vec::with_capacity(samples.len() * plane);
    for s in samples {
        if (s.width, s.height) != (w, h) {
            return Err(Error::invalid(
                "collate",
                format!("mixed sizes {w}×{h} and {}×{}", s.width, s.height),
            ));
        }
        for c in 0..3 {
            data.extend((0..plane).map(|p| T::from_f64_lossy(s.image[p * 3 + c] as f64 / 255.0)));
        }
        labels.extend_from_slice(&s.label);
    }
    Ok((Tensor::new([samples.len(), 3, h, w], data)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batching_keeps_partial_tail() {
        let b = batches(10, 8, 0, 0, false).unwrap();
        assert_eq!(b, vec![(0..8).collect::<Vec<_>>(), vec![8, 9]]);
        let s1 = batches(10, 3, 5, 1, true).unwrap();
        assert_eq!(s1, batches(10, 3, 5, 1, true).unwrap());
        assert_eq!(s1, batches(10, 3, 6, 0, true).unwrap());
        assert_ne!(s1, batches(10, 3, 5, 2, true).unwrap());
        assert!(batches(3, 0, 0, 0, false).is_err());
    }

    #[test]
    fn collate_is_channel_major() {
        let s = SegSample {
            width: 2,
            height: 1,
            image: vec![255, 0, 51, 0, 255, 102],
            label: vec![1, 0],
        };
        let (x, y) = collate::<f64>(&[&s]).unwrap();
        assert_eq!(x.shape(), &[1, 3, 1, 2]);
        assert_eq!(x.data(), &[1.0, 0.0, 0.0, 1.0, 0.2, 0.4]);
        assert_eq!(y, vec![1, 0]);
    }
}
