//! Dense channel-major feature tensors.

use serde::{Deserialize, Serialize};

use crate::error::{CrnError, Result};

/// Shape of a single-sample feature tensor, channel-major (C, H, W).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Shape { channels, ..self }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A `C x H x W` tensor of reals stored contiguously, channel planes first.
///
/// Used for layouts, images, network activations and their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl FeatureTensor {
    pub fn zeros(shape: Shape) -> Self {
        FeatureTensor {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        FeatureTensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(CrnError::Dimension(format!(
                "buffer of {} values does not fit shape {}",
                data.len(),
                shape
            )));
        }
        Ok(FeatureTensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        FeatureTensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let w = self.shape.width;
        let h = self.shape.height;
        self.data[(c * h + y) * w + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    /// Copies channels `[start, start + count)` into a new tensor.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Self> {
        if start + count > self.shape.channels {
            return Err(CrnError::Dimension(format!(
                "channel range {}..{} out of {} channels",
                start,
                start + count,
                self.shape.channels
            )));
        }
        let p = self.shape.plane();
        let shape = Shape::new(count, self.shape.height, self.shape.width);
        Ok(FeatureTensor {
            shape,
            data: self.data[start * p..(start + count) * p].to_vec(),
        })
    }

    /// Stacks tensors of equal spatial size along the channel axis.
    pub fn concat_channels(parts: &[&FeatureTensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| CrnError::Argument("cannot concatenate zero tensors".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut channels = 0;
        let mut data = Vec::new();
        for part in parts {
            if part.height() != h || part.width() != w {
                return Err(CrnError::Dimension(format!(
                    "cannot concatenate {} with spatial size {}x{}",
                    part.shape, h, w
                )));
            }
            channels += part.channels();
            data.extend_from_slice(&part.data);
        }
        Ok(FeatureTensor {
            shape: Shape::new(channels, h, w),
            data,
        })
    }

    pub fn ensure_shape(&self, expected: Shape, what: &str) -> Result<()> {
        if self.shape != expected {
            return Err(CrnError::Dimension(format!(
                "{what}: expected shape {expected}, got {}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &FeatureTensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        FeatureTensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sum of absolute elementwise differences.
    pub fn l1_distance(&self, other: &FeatureTensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(CrnError::Dimension(format!(
                "L1 distance between {} and {}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum())
    }

    pub fn max_abs_diff(&self, other: &FeatureTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_slice_recovers_parts() {
        let a = FeatureTensor::from_fn(Shape::new(2, 3, 4), |c, y, x| (c * 100 + y * 10 + x) as f64);
        let b = FeatureTensor::filled(Shape::new(1, 3, 4), -1.0);
        let cat = FeatureTensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), Shape::new(3, 3, 4));
        assert_eq!(cat.slice_channels(0, 2).unwrap(), a);
        assert_eq!(cat.slice_channels(2, 1).unwrap(), b);
        assert_eq!(cat.get(1, 2, 3), 123.0);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = FeatureTensor::zeros(Shape::new(1, 2, 2));
        let b = FeatureTensor::zeros(Shape::new(1, 2, 3));
        assert!(matches!(
            FeatureTensor::concat_channels(&[&a, &b]),
            Err(CrnError::Dimension(_))
        ));
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(FeatureTensor::from_vec(Shape::new(1, 2, 2), vec![0.0; 3]).is_err());
    }
}
