use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labeled images `[n, c, h, w]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape(format!(
                "images must be [n, c, h, w], got {:?}",
                images.shape()
            )));
        }
        if images.batch() != labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `[c, h, w]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        self.images.sample(i)
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [f32] {
        self.images.sample_mut(i)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("empty subset"));
        }
        let samples: Vec<&[f32]> = indices.iter().map(|&i| self.image(i)).collect();
        let images = Tensor::stack(&samples, &self.image_shape())?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(images, labels, self.class_count)
    }

    /// Indices of the first `per_class` images of every class.
    pub fn first_per_class(&self, per_class: usize) -> Result<Vec<usize>> {
        let mut picked = Vec::new();
        for c in 0..self.class_count {
            let of_class: Vec<usize> = (0..self.len())
                .filter(|&i| self.labels[i] == c)
                .take(per_class)
                .collect();
            if of_class.len() < per_class {
                return Err(Error::invalid(format!(
                    "class {c} has {} images, {per_class} requested",
                    of_class.len()
                )));
            }
            picked.extend(of_class);
        }
        Ok(picked)
    }

    pub fn concat(&self, other: &Dataset) -> Result<Self> {
        if self.image_shape() != other.image_shape() || self.class_count != other.class_count {
            return Err(Error::shape("datasets disagree on image shape or class count"));
        }
        let mut data = self.images.data().to_vec();
        data.extend_from_slice(other.images.data());
        let mut shape = self.images.shape().to_vec();
        shape[0] += other.len();
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Self::new(Tensor::new(shape, data)?, labels, self.class_count)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}
