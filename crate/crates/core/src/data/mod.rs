//! Image records, byte/float conversion, ×4 area downsampling, PNG ingestion
//! and synthetic datasets.

mod etl;
mod synth;

pub use etl::{center_crop_offsets, ingest, read_png, write_png, CropMode, Ingested, SkippedFile};
pub use synth::{synth_gaussian, synth_textures, GaussianSamples, TextureKind};

use std::hash::Hasher;

use serde::{Deserialize, Serialize};

use crate::denoiser::UPSCALE;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{kernels, Tensor};

/// Byte `[0, 255]` to `[-1, 1]`.
pub fn normalize(byte: u8) -> f64 {
    byte as f64 / 127.5 - 1.0
}

/// `[-1, 1]` back to a byte, rounding half away from zero and clamping.
pub fn denormalize(value: f64) -> u8 {
    ((value + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// 4×4 block average of a `(C, H, W)` or `(N, C, H, W)` tensor.
pub fn downsample_x4(pixels: &Tensor) -> Result<Tensor> {
    match *pixels.shape() {
        [c, h, w] => {
            let lifted = pixels.clone().reshape(&[1, c, h, w])?;
            kernels::downsample_average(&lifted, UPSCALE)?.reshape(&[c, h / UPSCALE, w / UPSCALE])
        }
        [_, _, _, _] => kernels::downsample_average(pixels, UPSCALE),
        _ => Err(shape_err!("expected a CHW or NCHW image, got {:?}", pixels.shape())),
    }
}

/// Nearest-neighbour ×4 upsample of a `(C, h, w)` or `(N, C, h, w)` tensor.
pub fn upsample_x4(lowres: &Tensor) -> Result<Tensor> {
    match *lowres.shape() {
        [c, h, w] => {
            let lifted = lowres.clone().reshape(&[1, c, h, w])?;
            kernels::upsample_nearest(&lifted, UPSCALE)?.reshape(&[c, h * UPSCALE, w * UPSCALE])
        }
        [_, _, _, _] => kernels::upsample_nearest(lowres, UPSCALE),
        _ => Err(shape_err!("expected a CHW or NCHW image, got {:?}", lowres.shape())),
    }
}

/// FNV-1a over the little-endian bytes of a tensor's values.
pub fn tensor_checksum(t: &Tensor) -> u64 {
    let mut h = fnv::FnvHasher::default();
    for v in t.data() {
        h.write(&v.to_le_bytes());
    }
    h.finish()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    /// `(3, S, S)` in `[-1, 1]`.
    pub pixels: Tensor,
    /// `(3, S/4, S/4)`, the block average of `pixels`.
    pub lowres: Tensor,
    pub source_path: Option<String>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, pixels: Tensor, source_path: Option<String>) -> Result<Self> {
        let &[3, h, w] = pixels.shape() else {
            return Err(shape_err!("image record needs (3, S, S) pixels, got {:?}", pixels.shape()));
        };
        if h != w || h % UPSCALE != 0 {
            return Err(shape_err!("image extent must be square and divisible by {UPSCALE}, got {h}x{w}"));
        }
        let lowres = downsample_x4(&pixels)?;
        let record = Self { id: id.into(), pixels, lowres, source_path };
        record.validate()?;
        Ok(record)
    }

    pub fn size(&self) -> usize {
        self.pixels.shape()[1]
    }

    /// Checks the value range and recomputes the low-resolution image.
    pub fn validate(&self) -> Result<()> {
        if self.pixels.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::InsufficientData(format!("record {} has values outside [-1, 1]", self.id)));
        }
        if downsample_x4(&self.pixels)? != self.lowres {
            return Err(Error::InsufficientData(format!(
                "record {} low-resolution image does not match its pixels",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub source_path: Option<String>,
    pub size: usize,
    /// [`tensor_checksum`] of the normalized pixels, as 16 hex digits.
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub size: usize,
    pub seed: u64,
    pub records: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn describe(split: Split, size: usize, seed: u64, records: &[ImageRecord]) -> Self {
        let mut entries: Vec<ManifestEntry> = records
            .iter()
            .map(|r| ManifestEntry {
                id: r.id.clone(),
                source_path: r.source_path.clone(),
                size: r.size(),
                checksum: format!("{:016x}", tensor_checksum(&r.pixels)),
            })
            .collect();
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        Self { split, size, seed, records: entries }
    }

    pub fn checksum(&self) -> u64 {
        let mut h = fnv::FnvHasher::default();
        h.write(serde_json::to_string(self).expect("manifest serializes").as_bytes());
        h.finish()
    }
}

/// An in-memory set of records sharing one image size.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
}

impl Dataset {
    pub fn new(records: Vec<ImageRecord>) -> Result<Self> {
        if let Some(first) = records.first() {
            if let Some(r) = records.iter().find(|r| r.size() != first.size()) {
                return Err(shape_err!(
                    "record {} has size {}, expected {}",
                    r.id,
                    r.size(),
                    first.size()
                ));
            }
        }
        Ok(Self { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_size(&self) -> Option<usize> {
        self.records.first().map(ImageRecord::size)
    }

    /// Stacks the selected records into `(B, 3, S, S)` targets and `(B, 3, S/4, S/4)` conditions.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        if indices.is_empty() {
            return Err(Error::InsufficientData("empty batch".into()));
        }
        let lift = |t: &Tensor| {
            let s = t.shape();
            t.clone().reshape(&[1, s[0], s[1], s[2]])
        };
        let mut hi = Vec::with_capacity(indices.len());
        let mut lo = Vec::with_capacity(indices.len());
        for &i in indices {
            let r = self.records.get(i).ok_or_else(|| {
                Error::InsufficientData(format!("record index {i} out of range for {} records", self.len()))
            })?;
            hi.push(lift(&r.pixels)?);
            lo.push(lift(&r.lowres)?);
        }
        Ok((Tensor::stack_batch(&hi)?, Tensor::stack_batch(&lo)?))
    }

    pub fn all(&self) -> Result<(Tensor, Tensor)> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_mapping() {
        assert_eq!(normalize(255), 1.0);
        assert_eq!(normalize(0), -1.0);
        assert!((normalize(128) - 0.00392156862745098).abs() < 1e-15);
        assert_eq!(denormalize(normalize(128)), 128);
        assert_eq!(denormalize(1.7), 255);
        assert_eq!(denormalize(-3.0), 0);
    }

    #[test]
    fn byte_round_trip_is_exhaustive_identity() {
        for b in 0..=255u8 {
            assert_eq!(denormalize(normalize(b)), b);
        }
    }

    #[test]
    fn downsample_extents_and_constants() {
        assert_eq!(downsample_x4(&Tensor::zeros(&[3, 512, 512])).unwrap().shape(), &[3, 128, 128]);
        assert_eq!(downsample_x4(&Tensor::zeros(&[3, 32, 32])).unwrap().shape(), &[3, 8, 8]);
        let c = downsample_x4(&Tensor::full(&[3, 16, 16], 0.37)).unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
        assert!(matches!(downsample_x4(&Tensor::zeros(&[3, 10, 12])), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn upsample_then_downsample_is_identity() {
        let lo = Tensor::new(&[1, 2, 2], vec![0.1, -0.5, 0.75, 1.0]).unwrap();
        let back = downsample_x4(&upsample_x4(&lo).unwrap()).unwrap();
        assert_eq!(back.shape(), lo.shape());
        assert!(back.data().iter().zip(lo.data()).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn record_rejects_tampered_lowres() {
        let mut r = ImageRecord::new("a", Tensor::full(&[3, 8, 8], 0.5), None).unwrap();
        r.validate().unwrap();
        r.lowres.data_mut()[0] = 0.0;
        assert!(r.validate().is_err());
    }
}
