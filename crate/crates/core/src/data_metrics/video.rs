use crate::error::{Result, UdvdError};
use crate::tensor::PlaneTensor;

/// `T × C × H × W` video in the `[0, 255]` intensity convention
/// (16-bit sources keep their raw code values).
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    frames: Vec<PlaneTensor<f32>>,
}

impl VideoTensor {
    pub fn new(frames: Vec<PlaneTensor<f32>>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| UdvdError::shape("video needs at least one frame"))?;
        let shape = first.shape();
        if shape.0 != 1 && shape.0 != 3 {
            return Err(UdvdError::shape(format!(
                "video frames need 1 or 3 channels, got {}",
                shape.0
            )));
        }
        for (t, f) in frames.iter().enumerate() {
            if f.shape() != shape {
                return Err(UdvdError::shape(format!(
                    "frame {t} has shape {:?}, expected {shape:?}",
                    f.shape()
                )));
            }
            if !f.is_finite() {
                return Err(UdvdError::invalid(format!("frame {t} holds non-finite values")));
            }
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.frames[0].channels()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn frame(&self, t: usize) -> &PlaneTensor<f32> {
        &self.frames[t]
    }

    pub fn frames(&self) -> &[PlaneTensor<f32>] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<PlaneTensor<f32>> {
        self.frames
    }

    /// `k` frames centred on `center`, replicating the first/last frame
    /// past either end of the sequence.
    pub fn window(&self, center: usize, k: usize) -> Vec<PlaneTensor<f32>> {
        let half = (k / 2) as isize;
        let last = self.frames.len() as isize - 1;
        (-half..=half)
            .map(|d| {
                let t = (center as isize + d).clamp(0, last) as usize;
                self.frames[t].clone()
            })
            .collect()
    }

    /// Frames `start..end` as a new video.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames.len() {
            return Err(UdvdError::invalid(format!(
                "frame range {start}..{end} outside 0..{}",
                self.frames.len()
            )));
        }
        Self::new(self.frames[start..end].to_vec())
    }

    pub fn map_frames(&self, f: impl Fn(&PlaneTensor<f32>) -> PlaneTensor<f32>) -> Result<Self> {
        Self::new(self.frames.iter().map(f).collect())
    }

    /// Clamp into `[0, 255]`, for display export only.
    pub fn clipped(&self) -> Self {
        Self {
            frames: self
                .frames
                .iter()
                .map(|f| f.map(|v| v.clamp(0.0, 255.0)))
                .collect(),
        }
    }
}
