use crate::error::{dim_err, Result};

/// Dense `f32` tensor laid out as `(N, C, D, H, W)`; 2D feature maps use `D = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 5],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return dim_err(format!("tensor shape {shape:?} does not hold {} values", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn spatial_len(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    /// Values per batch element.
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.spatial_len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn sample(&self, n: usize) -> &[f32] {
        let l = self.sample_len();
        &self.data[n * l..(n + 1) * l]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f32] {
        let l = self.sample_len();
        &mut self.data[n * l..(n + 1) * l]
    }

    /// Plane of channel `c` in batch element `n`.
    pub fn channel(&self, n: usize, c: usize) -> &[f32] {
        let p = self.spatial_len();
        let start = (n * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    /// Stacks equally shaped single- or multi-sample tensors along the batch axis.
    pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return dim_err("cannot stack zero tensors");
        };
        let inner = &first.shape[1..];
        if parts.iter().any(|t| &t.shape[1..] != inner) {
            return dim_err("stacked tensors differ in shape");
        }
        let n: usize = parts.iter().map(|t| t.shape[0]).sum();
        let mut data = Vec::with_capacity(n * first.sample_len());
        for t in parts {
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape;
        shape[0] = n;
        Ok(Tensor { shape, data })
    }
}
