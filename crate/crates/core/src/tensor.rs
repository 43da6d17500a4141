use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array with an optional gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

fn volume(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!("extents must be positive, got {shape:?}")));
        }
        if volume(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {} values, data has {}",
                volume(&shape),
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    /// Panics on a zero extent; use [`Tensor::new`] for untrusted shapes.
    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        assert!(!shape.is_empty() && !shape.contains(&0), "bad shape {shape:?}");
        let n = volume(&shape);
        Self {
            shape,
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Leading extent (batch size for activations).
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Values per entry along the leading axis.
    pub fn sample_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let s = self.sample_len();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let s = self.sample_len();
        &mut self.data[i * s..(i + 1) * s]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) || volume(&shape) != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Stack equally shaped samples along a new leading axis.
    pub fn stack(samples: &[&[T]], sample_shape: &[usize]) -> Result<Self> {
        let per = volume(sample_shape);
        let mut data = Vec::with_capacity(per * samples.len());
        for s in samples {
            if s.len() != per {
                return Err(Error::shape(format!(
                    "sample of {} values does not fit {sample_shape:?}",
                    s.len()
                )));
            }
            data.extend_from_slice(s);
        }
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(sample_shape);
        Self::new(shape, data)
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient of {} values for tensor {:?}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let conv = |v: &[T]| -> Vec<U> { v.iter().map(|&x| U::lit(x.as_f64())).collect() };
        Tensor {
            shape: self.shape.clone(),
            data: conv(&self.data),
            grad: self.grad.as_deref().map(conv),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64()).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
