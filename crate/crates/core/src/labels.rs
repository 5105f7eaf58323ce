//! Integer label volumes.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// One class id per voxel, stored as a `(1, H, W, D)` grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelVolume {
    shape: Shape,
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(h: usize, w: usize, d: usize, data: Vec<u8>) -> Result<Self> {
        let shape = Shape::new(1, h, w, d)?;
        if data.len() != shape.numel() {
            return Err(Error::Size {
                expected: shape.numel(),
                got: data.len(),
            });
        }
        Ok(LabelVolume { shape, data })
    }

    pub fn zeros(h: usize, w: usize, d: usize) -> Result<Self> {
        Self::new(h, w, d, vec![0; h * w * d])
    }

    /// Per-voxel argmax over channels; ties go to the lowest class id.
    pub fn argmax(logits: &Tensor) -> Result<Self> {
        let s = logits.shape();
        if s.c > u8::MAX as usize + 1 {
            return Err(Error::shape(format!("{} classes do not fit u8 labels", s.c)));
        }
        let n = s.spatial();
        let v = logits.data();
        let data = (0..n)
            .map(|p| {
                let mut best = 0;
                for c in 1..s.c {
                    if v[c * n + p] > v[best * n + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        Self::new(s.h, s.w, s.d, data)
    }

    /// `(1, H, W, D)`.
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.shape.h, self.shape.w, self.shape.d]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.data[self.shape.index(0, i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, class: u8) {
        let idx = self.shape.index(0, i, j, k);
        self.data[idx] = class;
    }

    pub fn mask(&self, class: usize) -> Vec<bool> {
        self.data.iter().map(|&l| l as usize == class).collect()
    }

    /// Voxel count per class. Errors on ids `≥ n_classes`.
    pub fn histogram(&self, n_classes: usize) -> Result<Vec<usize>> {
        let mut counts = vec![0; n_classes];
        for &l in &self.data {
            let Some(slot) = counts.get_mut(l as usize) else {
                return Err(Error::Contract(format!("label {l} is not below n_classes = {n_classes}")));
            };
            *slot += 1;
        }
        Ok(counts)
    }

    pub fn one_hot(&self, n_classes: usize) -> Result<Tensor> {
        self.histogram(n_classes)?;
        let n = self.data.len();
        let mut out = vec![0.0; n_classes * n];
        for (p, &l) in self.data.iter().enumerate() {
            out[l as usize * n + p] = 1.0;
        }
        Tensor::from_data(self.shape.with_channels(n_classes), out)
    }
}
