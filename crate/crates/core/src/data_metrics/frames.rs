//! Numbered frame directories (`frame_00000.png`, ...) and the flat binary
//! container.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ExtendedColorType, ImageFormat};

use super::array_file::{read_array, write_array, ArrayHeader};
use super::video::VideoTensor;
use crate::error::{Result, UdvdError};
use crate::tensor::PlaneTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameFormat {
    /// 8-bit PNG, grayscale or RGB.
    Png8,
    /// 8-bit binary PGM, grayscale only.
    Pgm8,
    /// 16-bit binary PGM, grayscale only.
    Pgm16,
    /// Single `video.bin` + `video.json` holding the raw `f32` values.
    Bin,
}

impl FrameFormat {
    fn extension(self) -> &'static str {
        match self {
            FrameFormat::Png8 => "png",
            FrameFormat::Pgm8 | FrameFormat::Pgm16 => "pgm",
            FrameFormat::Bin => "bin",
        }
    }
}

const BIN_NAME: &str = "video.bin";

fn frames_err(dir: &Path, reason: impl Into<String>) -> UdvdError {
    UdvdError::Frames {
        dir: dir.to_path_buf(),
        reason: reason.into(),
    }
}

/// Trailing run of digits in a file stem.
fn frame_index(path: &Path) -> Option<usize> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

fn load_bin(path: &Path) -> Result<VideoTensor> {
    let (header, data) = read_array(path)?;
    let [t, c, h, w] = header.shape[..] else {
        return Err(UdvdError::Format(format!(
            "{}: expected a 4-d T x C x H x W array, got shape {:?}",
            path.display(),
            header.shape
        )));
    };
    let plane = c * h * w;
    let frames = (0..t)
        .map(|i| PlaneTensor::from_vec(c, h, w, data[i * plane..(i + 1) * plane].to_vec()))
        .collect::<Result<Vec<_>>>()?;
    VideoTensor::new(frames)
}

fn decode(path: &Path) -> Result<PlaneTensor<f32>> {
    let img = image::open(path).map_err(|e| UdvdError::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<f32>) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw().into_iter().map(f32::from).collect()),
        DynamicImage::ImageLuma16(b) => (1, b.into_raw().into_iter().map(f32::from).collect()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw().into_iter().map(f32::from).collect()),
        other => (3, other.to_rgb8().into_raw().into_iter().map(f32::from).collect()),
    };
    // interleaved HWC to planar CHW
    let planar = PlaneTensor::from_fn(channels, h, w, |c, r, x| data[(r * w + x) * channels + c]);
    Ok(planar)
}

/// Load a frame directory, a directory holding `video.bin`, or a `.bin` file.
pub fn load_frames(path: &Path) -> Result<VideoTensor> {
    if path.is_file() {
        return load_bin(path);
    }
    if !path.is_dir() {
        return Err(frames_err(path, "no such directory"));
    }
    if path.join(BIN_NAME).is_file() {
        return load_bin(&path.join(BIN_NAME));
    }
    let mut entries: Vec<(usize, PathBuf)> = Vec::new();
    let listing = fs::read_dir(path).map_err(|e| UdvdError::io(path, e))?;
    for entry in listing {
        let p = entry.map_err(|e| UdvdError::io(path, e))?.path();
        let ext = p
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("png" | "pgm")) {
            continue;
        }
        if let Some(i) = frame_index(&p) {
            entries.push((i, p));
        }
    }
    if entries.is_empty() {
        return Err(frames_err(path, "no numbered .png or .pgm frames"));
    }
    entries.sort();
    for pair in entries.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(frames_err(path, format!("duplicate frame index {}", pair[0].0)));
        }
        if pair[1].0 != pair[0].0 + 1 {
            return Err(frames_err(
                path,
                format!("missing frame index {} (gap before {})", pair[0].0 + 1, pair[1].1.display()),
            ));
        }
    }
    let mut frames = Vec::with_capacity(entries.len());
    for (_, p) in &entries {
        let f = decode(p)?;
        if let Some(first) = frames.first() {
            let first: &PlaneTensor<f32> = first;
            if first.shape() != f.shape() {
                return Err(frames_err(
                    path,
                    format!(
                        "{} has shape {:?}, earlier frames have {:?}",
                        p.display(),
                        f.shape(),
                        first.shape()
                    ),
                ));
            }
        }
        frames.push(f);
    }
    VideoTensor::new(frames)
}

fn quantize(v: f32, max: f32) -> f32 {
    v.round().clamp(0.0, max)
}

/// Write `video` into directory `dir`, creating it if needed. Integer formats
/// round and clamp to their code range.
pub fn save_frames(video: &VideoTensor, dir: &Path, format: FrameFormat) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| UdvdError::io(dir, e))?;
    if format == FrameFormat::Bin {
        let header = ArrayHeader::new(
            vec![video.len(), video.channels(), video.height(), video.width()],
            &["t", "c", "h", "w"],
        );
        let data: Vec<f32> = video.frames().iter().flat_map(|f| f.data().iter().copied()).collect();
        return write_array(&dir.join(BIN_NAME), &header, &data);
    }
    let (c, h, w) = video.frame(0).shape();
    if c == 3 && format != FrameFormat::Png8 {
        return Err(UdvdError::invalid("PGM frames are grayscale only"));
    }
    for (t, frame) in video.frames().iter().enumerate() {
        let path = dir.join(format!("frame_{t:05}.{}", format.extension()));
        let interleaved = |max: f32| -> Vec<f32> {
            (0..h * w * c)
                .map(|i| quantize(frame.get(i % c, i / c / w, i / c % w), max))
                .collect()
        };
        let written = match format {
            FrameFormat::Png8 => {
                let bytes: Vec<u8> = interleaved(255.0).into_iter().map(|v| v as u8).collect();
                let color = if c == 1 { ExtendedColorType::L8 } else { ExtendedColorType::Rgb8 };
                image::save_buffer_with_format(&path, &bytes, w as u32, h as u32, color, ImageFormat::Png)
            }
            FrameFormat::Pgm8 | FrameFormat::Pgm16 => {
                let max = if format == FrameFormat::Pgm8 { 255.0 } else { 65535.0 };
                let mut bytes = format!("P5\n{w} {h}\n{}\n", max as u32).into_bytes();
                for v in interleaved(max) {
                    if max > 255.0 {
                        bytes.extend_from_slice(&(v as u16).to_be_bytes());
                    } else {
                        bytes.push(v as u8);
                    }
                }
                fs::write(&path, bytes).map_err(|e| UdvdError::io(&path, e))?;
                Ok(())
            }
            FrameFormat::Bin => unreachable!(),
        };
        written.map_err(|e| UdvdError::Image { path, source: e })?;
    }
    Ok(())
}
