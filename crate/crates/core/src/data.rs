//! In-memory labelled datasets.

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Samples stacked along axis 0 with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, classes: usize) -> Result<Self> {
        if x.rank() < 2 || x.dim(0) != y.len() {
            return Err(Error::Dimension {
                op: "dataset",
                left: x.shape().to_vec(),
                right: vec![y.len()],
            });
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
            return Err(Error::arg(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self { x, y, classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Stacks the samples at `indices` into a batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.x.data()[i * n..(i + 1) * n]);
            labels.push(self.y[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        (Tensor::from_vec(shape, data).expect("sized batch"), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (x, y) = self.gather(indices);
        Dataset {
            x,
            y,
            classes: self.classes,
        }
    }

    /// Contiguous batches of at most `batch` samples, in order.
    pub fn batches(&self, batch: usize) -> impl Iterator<Item = (Tensor, Vec<usize>)> + '_ {
        let n = self.len();
        let b = batch.max(1);
        (0..n.div_ceil(b)).map(move |k| {
            let idx: Vec<usize> = (k * b..((k + 1) * b).min(n)).collect();
            self.gather(&idx)
        })
    }
}

/// Points around `classes` Gaussian clusters evenly spaced on a circle of radius 2.
pub fn synthetic_2d(seed: u64, n: usize, classes: usize) -> Result<Dataset> {
    if classes == 0 {
        return Err(Error::arg("need at least one class"));
    }
    let mut rng = Rng::new(seed);
    let mut data = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.below(classes);
        let a = std::f64::consts::TAU * c as f64 / classes as f64;
        data.push(2.0 * a.cos() + 0.5 * rng.standard_normal());
        data.push(2.0 * a.sin() + 0.5 * rng.standard_normal());
        y.push(c);
    }
    Dataset::new(Tensor::from_vec(vec![n, 2], data)?, y, classes)
}

/// Seeded Gaussian-blob images of shape `[3, size, size]`. Each class has one
/// blob per channel (random centre, width and signed amplitude); samples are
/// the class pattern with random contrast plus pixel noise.
pub fn synthetic_image(
    seed: u64,
    n: usize,
    classes: usize,
    size: usize,
    noise: f64,
) -> Result<Dataset> {
    if classes == 0 || size == 0 {
        return Err(Error::arg(
            "need at least one class and a positive image size",
        ));
    }
    let mut rng = Rng::new(seed);
    let px = size * size;
    let mut protos = vec![0.0; classes * 3 * px];
    let s = size as f64;
    for c in 0..classes {
        for ch in 0..3 {
            let cx = s * (0.2 + 0.6 * rng.uniform());
            let cy = s * (0.2 + 0.6 * rng.uniform());
            let width = s * (0.15 + 0.2 * rng.uniform());
            let amp = rng.standard_normal();
            for i in 0..size {
                for j in 0..size {
                    let d2 = (i as f64 + 0.5 - cy).powi(2) + (j as f64 + 0.5 - cx).powi(2);
                    protos[(c * 3 + ch) * px + i * size + j] =
                        amp * (-d2 / (2.0 * width * width)).exp();
                }
            }
        }
    }
    let mut data = Vec::with_capacity(n * 3 * px);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.below(classes);
        let contrast = 0.7 + 0.6 * rng.uniform();
        for k in 0..3 * px {
            data.push(contrast * protos[c * 3 * px + k] + noise * rng.standard_normal());
        }
        y.push(c);
    }
    Dataset::new(Tensor::from_vec(vec![n, 3, size, size], data)?, y, classes)
}

/// Per-channel mean and standard deviation of `[N, C, ...]` data.
pub fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, c) = (x.dim(0), x.dim(1));
    let inner = x.len() / (n * c).max(1);
    let mut mean = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for (k, &v) in x.data().iter().enumerate() {
        let ch = (k / inner) % c;
        mean[ch] += v;
        sq[ch] += v * v;
    }
    let count = (n * inner).max(1) as f64;
    let std = mean
        .iter_mut()
        .zip(&sq)
        .map(|(m, &s)| {
            *m /= count;
            (s / count - *m * *m).max(0.0).sqrt()
        })
        .collect();
    (mean, std)
}

/// Shifts and scales each channel by the given statistics; zero-variance
/// channels are only centred.
pub fn normalize_channels(x: &mut Tensor, mean: &[f64], std: &[f64]) {
    let (n, c) = (x.dim(0), x.dim(1));
    let inner = x.len() / (n * c).max(1);
    for (k, v) in x.data_mut().iter_mut().enumerate() {
        let ch = (k / inner) % c;
        let s = if std[ch] > 0.0 { std[ch] } else { 1.0 };
        *v = (*v - mean[ch]) / s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gather_and_batches() {
        let x = Tensor::from_vec(vec![5, 2], (0..10).map(f64::from).collect()).unwrap();
        let d = Dataset::new(x, vec![0, 1, 0, 1, 2], 3).unwrap();
        let (b, y) = d.gather(&[4, 1]);
        assert_eq!(b.data(), &[8.0, 9.0, 2.0, 3.0]);
        assert_eq!(y, vec![2, 1]);
        let sizes: Vec<usize> = d.batches(2).map(|(b, _)| b.dim(0)).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
    }

    #[test]
    fn label_range_is_checked() {
        let x = Tensor::zeros(&[2, 1]);
        assert!(Dataset::new(x, vec![0, 3], 3).is_err());
    }

    #[test]
    fn synthetic_sets_are_deterministic() {
        assert_eq!(
            synthetic_2d(7, 1000, 4).unwrap(),
            synthetic_2d(7, 1000, 4).unwrap()
        );
        let a = synthetic_image(3, 50, 10, 8, 0.5).unwrap();
        assert_eq!(a.x.shape(), &[50, 3, 8, 8]);
        assert_eq!(a, synthetic_image(3, 50, 10, 8, 0.5).unwrap());
        assert_ne!(a, synthetic_image(4, 50, 10, 8, 0.5).unwrap());
    }

    #[test]
    fn normalized_channels_have_zero_mean_unit_std() {
        let mut d = synthetic_image(1, 200, 5, 8, 0.5).unwrap();
        let (m, s) = channel_stats(&d.x);
        normalize_channels(&mut d.x, &m, &s);
        let (m2, s2) = channel_stats(&d.x);
        for c in 0..3 {
            assert!(m2[c].abs() < 1e-12);
            assert!((s2[c] - 1.0).abs() < 1e-12);
        }
    }
}
