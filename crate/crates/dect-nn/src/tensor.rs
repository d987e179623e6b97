//! Dense NCHW tensor with optional gradient storage.

use ndarray::{Array3, ArrayView2, ArrayViewMut2};
use rand_chacha::ChaCha8Rng;

/// Contiguous f64 tensor in (batch, channel, height, width) layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "shape/data mismatch");
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    /// Parameter tensor: gradient storage allocated, requires_grad set.
    pub fn param(shape: [usize; 4], data: Vec<f64>) -> Self {
        let mut t = Tensor::from_vec(shape, data);
        t.grad = Some(vec![0.0; t.data.len()]);
        t.requires_grad = true;
        t
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.plane_len()
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let s = self.sample_len();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let s = self.sample_len();
        &mut self.data[n * s..(n + 1) * s]
    }

    /// View one sample as a (C, H*W) matrix.
    pub fn sample_matrix(&self, n: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.shape[1], self.plane_len()), self.sample(n))
            .expect("contiguous sample")
    }

    pub fn sample_matrix_mut(&mut self, n: usize) -> ArrayViewMut2<'_, f64> {
        let shape = (self.shape[1], self.plane_len());
        ArrayViewMut2::from_shape(shape, self.sample_mut(n)).expect("contiguous sample")
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks per-sample channel volumes into a batch tensor.
    pub fn from_stacks(stacks: &[Array3<f64>]) -> Self {
        assert!(!stacks.is_empty());
        let (c, h, w) = stacks[0].dim();
        let mut data = Vec::with_capacity(stacks.len() * c * h * w);
        for s in stacks {
            assert_eq!(s.dim(), (c, h, w), "inconsistent stack shapes");
            data.extend(s.iter().copied());
        }
        Tensor::from_vec([stacks.len(), c, h, w], data)
    }

    /// Extracts one sample as a channel volume.
    pub fn to_stack(&self, n: usize) -> Array3<f64> {
        Array3::from_shape_vec(
            (self.shape[1], self.shape[2], self.shape[3]),
            self.sample(n).to_vec(),
        )
        .expect("contiguous sample")
    }
}

/// Standard normal draw (Box-Muller); deterministic given the rng state.
pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    loop {
        let u1: f64 = rng.gen_range(0.0..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn sample_views_are_consistent() {
        let t = Tensor::from_vec([2, 3, 2, 2], (0..24).map(|v| v as f64).collect());
        assert_eq!(t.sample(1)[0], 12.0);
        assert_eq!(t.sample_matrix(1)[[2, 3]], 23.0);
    }

    #[test]
    fn stack_round_trip() {
        let a = Array3::from_shape_fn((2, 3, 4), |(c, i, j)| (c * 12 + i * 4 + j) as f64);
        let b = a.mapv(|v| v + 100.0);
        let t = Tensor::from_stacks(&[a.clone(), b.clone()]);
        assert_eq!(t.to_stack(0), a);
        assert_eq!(t.to_stack(1), b);
    }
}
