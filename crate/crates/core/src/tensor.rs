//! Dense channel-major feature maps.

use crate::error::{Error, Result};

/// A `channels x frames` real-valued map stored channel-major: element
/// `(c, i)` lives at `c * frames + i`. All values are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    channels: usize,
    frames: usize,
    data: Vec<f32>,
}

impl Tensor2D {
    pub fn new(channels: usize, frames: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::shape("tensor must have at least one channel"));
        }
        if data.len() != channels * frames {
            return Err(Error::shape(format!(
                "data length {} does not match {channels}x{frames}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value {} at ({}, {})",
                data[pos],
                pos / frames.max(1),
                pos % frames.max(1)
            )));
        }
        Ok(Self {
            channels,
            frames,
            data,
        })
    }

    pub fn zeros(channels: usize, frames: usize) -> Self {
        assert!(channels > 0, "tensor must have at least one channel");
        Self {
            channels,
            frames,
            data: vec![0.0; channels * frames],
        }
    }

    /// `frames` copies of one column.
    pub fn repeat_column(column: &[f32], frames: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(column.len() * frames);
        for &v in column {
            data.extend(std::iter::repeat_n(v, frames));
        }
        Self::new(column.len(), frames, data)
    }

    /// Builds a tensor from frame-major columns (each inner vec is one frame).
    pub fn from_columns(channels: usize, columns: &[Vec<f32>]) -> Result<Self> {
        let frames = columns.len();
        let mut data = vec![0.0; channels * frames];
        for (i, col) in columns.iter().enumerate() {
            if col.len() != channels {
                return Err(Error::shape(format!(
                    "column {i} has {} values, expected {channels}",
                    col.len()
                )));
            }
            for (c, &v) in col.iter().enumerate() {
                data[c * frames + i] = v;
            }
        }
        Self::new(channels, frames, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize) -> f32 {
        self.data[c * self.frames + i]
    }

    pub fn row(&self, c: usize) -> &[f32] {
        &self.data[c * self.frames..(c + 1) * self.frames]
    }

    pub fn column(&self, i: usize) -> Vec<f32> {
        assert!(i < self.frames, "column {i} out of range");
        (0..self.channels).map(|c| self.get(c, i)).collect()
    }

    pub fn columns(&self) -> Vec<Vec<f32>> {
        (0..self.frames).map(|i| self.column(i)).collect()
    }

    /// Frames `[start, end)`.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.frames {
            return Err(Error::shape(format!(
                "frame range {start}..{end} out of bounds for {} frames",
                self.frames
            )));
        }
        let width = end - start;
        let mut data = Vec::with_capacity(self.channels * width);
        for c in 0..self.channels {
            data.extend_from_slice(&self.row(c)[start..end]);
        }
        Ok(Self {
            channels: self.channels,
            frames: width,
            data,
        })
    }

    /// `[self ∥ other]` along the time axis.
    pub fn concat_frames(&self, other: &Self) -> Result<Self> {
        if self.channels != other.channels {
            return Err(Error::shape(format!(
                "cannot concatenate {} channels with {}",
                self.channels, other.channels
            )));
        }
        let frames = self.frames + other.frames;
        let mut data = Vec::with_capacity(self.channels * frames);
        for c in 0..self.channels {
            data.extend_from_slice(self.row(c));
            data.extend_from_slice(other.row(c));
        }
        Ok(Self {
            channels: self.channels,
            frames,
            data,
        })
    }

    /// Prepends `frames` zero columns.
    pub fn left_pad(&self, frames: usize) -> Self {
        Self::zeros(self.channels, frames)
            .concat_frames(self)
            .expect("same channel count")
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            channels: self.channels,
            frames: self.frames,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f32> {
        if self.channels != other.channels || self.frames != other.frames {
            return Err(Error::shape(format!(
                "cannot compare {}x{} with {}x{}",
                self.channels, self.frames, other.channels, other.frames
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_channel_major() {
        let t = Tensor2D::new(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(t.get(1, 0), 4.0);
        assert_eq!(t.column(2), vec![3.0, 6.0]);
        assert_eq!(Tensor2D::from_columns(2, &t.columns()).unwrap(), t);
    }

    #[test]
    fn rejects_bad_length_and_nan() {
        assert!(matches!(
            Tensor2D::new(2, 2, vec![0.0; 3]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            Tensor2D::new(1, 2, vec![0.0, f32::NAN]),
            Err(Error::InvalidInput(_))
        ));
        assert!(Tensor2D::new(0, 0, vec![]).is_err());
    }

    #[test]
    fn empty_frames_allowed() {
        let t = Tensor2D::new(3, 0, vec![]).unwrap();
        let u = Tensor2D::new(3, 1, vec![1., 2., 3.]).unwrap();
        assert_eq!(t.concat_frames(&u).unwrap(), u);
    }

    #[test]
    fn slice_and_concat() {
        let t = Tensor2D::new(2, 4, (0..8).map(|v| v as f32).collect()).unwrap();
        let a = t.slice_frames(0, 1).unwrap();
        let b = t.slice_frames(1, 4).unwrap();
        assert_eq!(a.concat_frames(&b).unwrap(), t);
        assert!(t.slice_frames(3, 5).is_err());
        assert_eq!(t.left_pad(2).frames(), 6);
        assert_eq!(t.left_pad(2).row(1), &[0., 0., 4., 5., 6., 7.]);
    }
}
