use super::video::VideoTensor;
use crate::error::{Result, UdvdError};
use crate::tensor::PlaneTensor;

/// Value returned by [`psnr`] when the inputs are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
    }
}

fn squared_error(a: &PlaneTensor<f32>, b: &PlaneTensor<f32>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// PSNR in dB over all pixels, channels and frames.
pub fn psnr(a: &VideoTensor, b: &VideoTensor, peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.frame(0).shape() != b.frame(0).shape() {
        return Err(UdvdError::shape(format!(
            "psnr of videos {}x{:?} and {}x{:?}",
            a.len(),
            a.frame(0).shape(),
            b.len(),
            b.frame(0).shape()
        )));
    }
    let total: f64 = a.frames().iter().zip(b.frames()).map(|(x, y)| squared_error(x, y)).sum();
    let count = (a.len() * a.frame(0).data().len()) as f64;
    Ok(psnr_from_mse(total / count, peak))
}

pub fn psnr_planes(a: &PlaneTensor<f32>, b: &PlaneTensor<f32>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(UdvdError::shape(format!(
            "psnr of frames {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(psnr_from_mse(squared_error(a, b) / a.data().len() as f64, peak))
}

/// Inclusive-prefix sums with a zero first row and column.
struct Integral {
    cols: usize,
    data: Vec<f64>,
}

impl Integral {
    fn new(rows: usize, cols: usize, value: impl Fn(usize, usize) -> f64) -> Self {
        let stride = cols + 1;
        let mut data = vec![0.0; (rows + 1) * stride];
        for r in 0..rows {
            let mut run = 0.0;
            for c in 0..cols {
                run += value(r, c);
                data[(r + 1) * stride + c + 1] = data[r * stride + c + 1] + run;
            }
        }
        Self { cols, data }
    }

    fn window(&self, r: usize, c: usize, n: usize) -> f64 {
        let s = self.cols + 1;
        self.data[(r + n) * s + c + n] - self.data[r * s + c + n] - self.data[(r + n) * s + c]
            + self.data[r * s + c]
    }
}

fn ssim_plane(a: &[f32], b: &[f32], rows: usize, cols: usize) -> f64 {
    let at = |r: usize, c: usize| a[r * cols + c] as f64;
    let bt = |r: usize, c: usize| b[r * cols + c] as f64;
    let sa = Integral::new(rows, cols, at);
    let sb = Integral::new(rows, cols, bt);
    let saa = Integral::new(rows, cols, |r, c| at(r, c) * at(r, c));
    let sbb = Integral::new(rows, cols, |r, c| bt(r, c) * bt(r, c));
    let sab = Integral::new(rows, cols, |r, c| at(r, c) * bt(r, c));
    let n = SSIM_WINDOW;
    let area = (n * n) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=rows - n {
        for c in 0..=cols - n {
            let ma = sa.window(r, c, n) / area;
            let mb = sb.window(r, c, n) / area;
            let va = saa.window(r, c, n) / area - ma * ma;
            let vb = sbb.window(r, c, n) / area - mb * mb;
            let cov = sab.window(r, c, n) / area - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    total / count as f64
}

/// Mean SSIM over all 8×8 windows (stride 1), averaged over channels.
pub fn ssim(a: &PlaneTensor<f32>, b: &PlaneTensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(UdvdError::shape(format!(
            "ssim of frames {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ch, rows, cols) = a.shape();
    if rows < SSIM_WINDOW || cols < SSIM_WINDOW {
        return Err(UdvdError::shape(format!(
            "ssim needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {rows}x{cols}"
        )));
    }
    let sum: f64 = (0..ch)
        .map(|c| ssim_plane(a.channel(c), b.channel(c), rows, cols))
        .sum();
    Ok(sum / ch as f64)
}

/// Mean per-frame SSIM.
pub fn ssim_video(a: &VideoTensor, b: &VideoTensor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(UdvdError::shape(format!(
            "ssim of videos with {} and {} frames",
            a.len(),
            b.len()
        )));
    }
    let mut sum = 0.0;
    for (x, y) in a.frames().iter().zip(b.frames()) {
        sum += ssim(x, y)?;
    }
    Ok(sum / a.len() as f64)
}
