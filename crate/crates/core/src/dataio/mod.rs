//! Frames, label maps, datasets and their on-disk formats.

mod manifest;
mod model_io;
pub mod netpbm;
pub mod synth;

use std::collections::BTreeMap;

pub use manifest::{load_manifest, write_manifest, Dataset, DatasetManifest, ManifestVideo};
pub use model_io::{decode_model, encode_model, load_model, save_model, MODEL_FORMAT_VERSION};
pub use synth::{generate_dataset, generate_synthetic, GenConfig, LabelMode, SyntheticClip};

pub use crate::label::{LabelMap, IGNORE_LABEL};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Planar `[3,H,W]` tensor with values in `[0,255]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.width * self.height;
        Tensor::from_fn([3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            self.data[p * 3 + c] as f32
        })
    }

    /// Inverse of [`RgbImage::to_tensor`]; values are rounded and clamped.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let plane = h * w;
        let src = t.data();
        let mut data = Vec::with_capacity(plane * 3);
        for p in 0..plane {
            for ch in 0..3 {
                data.push(src[ch * plane + p].round().clamp(0.0, 255.0) as u8);
            }
        }
        RgbImage::new(w, h, data)
    }
}

/// An ordered sequence of frames with dense or sparse labels.
#[derive(Clone, Debug)]
pub struct VideoClip {
    pub id: String,
    /// `[3,H,W]` tensors with values in `[0,255]`.
    pub frames: Vec<Tensor<f32>>,
    pub labels: BTreeMap<usize, LabelMap>,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Checks frame shapes agree and every label sits on an existing frame.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let Some(first) = self.frames.first() else {
            return Ok(());
        };
        let (_, h, w) = first.dims3()?;
        for (i, f) in self.frames.iter().enumerate() {
            if f.shape() != first.shape() {
                return Err(Error::Shape(format!(
                    "clip {}: frame {i} has shape {:?}, expected {:?}",
                    self.id,
                    f.shape(),
                    first.shape()
                )));
            }
        }
        for (&i, label) in &self.labels {
            if i >= self.frames.len() {
                return Err(Error::InvalidArgument(format!(
                    "clip {}: label index {i} out of range for {} frames",
                    self.id,
                    self.frames.len()
                )));
            }
            if (label.height(), label.width()) != (h, w) {
                return Err(Error::Shape(format!(
                    "clip {}: label {i} is {}x{}, frames are {h}x{w}",
                    self.id,
                    label.height(),
                    label.width()
                )));
            }
            label.validate(num_classes)?;
        }
        Ok(())
    }
}
