use serde::{Deserialize, Serialize};

use crate::error::{Result, UdvdError};
use crate::scalar::Scalar;

/// Dense `channels × height × width` array in row-major order.
///
/// One frame of a video, or one activation map inside the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneTensor<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> PlaneTensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(UdvdError::shape(format!(
                "plane must be at least 1x1, got {height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(UdvdError::shape(format!(
                "buffer of {} values does not fill {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for r in 0..height {
                for x in 0..width {
                    data.push(f(c, r, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    fn offset(&self, c: usize, r: usize, x: usize) -> usize {
        debug_assert!(c < self.channels && r < self.height && x < self.width);
        (c * self.height + r) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, r: usize, x: usize) -> T {
        self.data[self.offset(c, r, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, r: usize, x: usize, value: T) {
        let i = self.offset(c, r, x);
        self.data[i] = value;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Copy of channels `start..start + count`.
    pub fn channel_range(&self, start: usize, count: usize) -> Self {
        let n = self.plane_len();
        Self {
            channels: count,
            height: self.height,
            width: self.width,
            data: self.data[start * n..(start + count) * n].to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> PlaneTensor<U> {
        PlaneTensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.as_f64().abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Spatial crop `rows × cols` starting at `(top, left)`, all channels.
    pub fn crop(&self, top: usize, left: usize, rows: usize, cols: usize) -> Result<Self> {
        if top + rows > self.height || left + cols > self.width || rows == 0 || cols == 0 {
            return Err(UdvdError::shape(format!(
                "crop {rows}x{cols} at ({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(self.channels, rows, cols, |c, r, x| {
            self.get(c, top + r, left + x)
        }))
    }

    /// Stack planes along the channel axis; spatial dims must agree.
    pub fn concat(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| UdvdError::shape("concat of zero tensors"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut channels = 0;
        for p in parts {
            if (p.height, p.width) != (h, w) {
                return Err(UdvdError::shape(format!(
                    "concat spatial mismatch: {}x{} vs {h}x{w}",
                    p.height, p.width
                )));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            channels,
            height: h,
            width: w,
            data,
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.channels, self.height, self.width, |c, r, x| {
            self.get(c, r, self.width - 1 - x)
        })
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.channels, self.height, self.width, |c, r, x| {
            self.get(c, self.height - 1 - r, x)
        })
    }
}
