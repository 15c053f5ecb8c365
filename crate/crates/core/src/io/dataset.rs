use crate::error::{dim_err, Result};
use crate::tensor::DenseTensor;

/// Labelled samples of one shape, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    samples: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(sample_shape: Vec<usize>, samples: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 {
            return dim_err("dataset sample shape must be positive");
        }
        if samples.len() != per * labels.len() {
            return dim_err(format!(
                "{} labels need {} sample values, got {}",
                labels.len(),
                per * labels.len(),
                samples.len()
            ));
        }
        Ok(Self {
            sample_shape,
            samples,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.samples[i * n..(i + 1) * n]
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn tensor(&self, i: usize) -> DenseTensor {
        DenseTensor::new(self.sample_shape.clone(), self.sample(i).to_vec())
            .expect("validated on construction")
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// The first `n` samples (all of them if `n` exceeds the length).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Self {
            sample_shape: self.sample_shape.clone(),
            samples: self.samples[..n * self.sample_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Same samples under another shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Dataset> {
        if shape.iter().product::<usize>() != self.sample_len() {
            return dim_err(format!(
                "cannot view samples {:?} as {shape:?}",
                self.sample_shape
            ));
        }
        self.sample_shape = shape;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accessors_and_take() {
        let d = Dataset::new(vec![2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], vec![1, 0, 2]).unwrap();
        assert_eq!(d.sample(1), &[2.0, 3.0]);
        assert_eq!(d.num_classes(), 3);
        let t = d.take(2);
        assert_eq!(t.len(), 2);
        assert_eq!(t.labels(), &[1, 0]);
        assert!(Dataset::new(vec![2], vec![0.0; 3], vec![0]).is_err());
        assert!(d.reshaped(vec![1, 3]).is_err());
    }
}
