use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Per-pixel class ids, row-major `H x W`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Checks every value is a class below `num_classes` or [`IGNORE_LABEL`].
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&v| v != IGNORE_LABEL && v as usize >= num_classes)
        {
            Some(v) => Err(Error::InvalidArgument(format!(
                "label {v} out of range for {num_classes} classes"
            ))),
            None => Ok(()),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        LabelMap {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Top-left `height x width` window.
    pub fn crop(&self, height: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for row in self.data.chunks(self.width).take(height) {
            data.extend_from_slice(&row[..width]);
        }
        LabelMap {
            height,
            width,
            data,
        }
    }
}
