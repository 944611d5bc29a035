//! Dense per-pixel class maps.

use crate::error::{Error, Result};

/// `height x width` class indices in `0..num_classes`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: usize, data: Vec<u8>) -> Result<Self> {
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::invalid(format!("{num_classes} classes")));
        }
        if data.len() != height * width {
            return Err(Error::shape("label_map", format!("{} labels for {height}x{width}", data.len())));
        }
        if let Some(&bad) = data.iter().find(|&&c| usize::from(c) >= num_classes) {
            return Err(Error::invalid(format!("class index {bad} >= {num_classes}")));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> usize {
        usize::from(self.data[y * self.width + x])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &c in &self.data {
            counts[usize::from(c)] += 1;
        }
        counts
    }

    /// Targets as `usize` for the cross-entropy operator.
    pub fn targets(&self) -> impl Iterator<Item = usize> + '_ {
        self.data.iter().map(|&c| usize::from(c))
    }
}
