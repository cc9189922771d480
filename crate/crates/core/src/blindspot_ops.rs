//! Restricted field-of-view primitives.
//!
//! Every layer here only looks upward: output row `r` never reads an input
//! row below `r`. Stacking them keeps that property, and a single
//! [`causal_offset`] at the end of a stack pushes the field of view strictly
//! above the output row. Rotating the input by quarter turns before such a
//! stack and derotating afterwards turns "above" into left, below or right.
//!
//! Forward functions come paired with the gradient helpers used by the tape
//! in [`crate::autodiff`].

use serde::{Deserialize, Serialize};

use crate::error::{Result, UdvdError};
use crate::scalar::Scalar;
use crate::tensor::PlaneTensor;

/// Bias-free convolution weights, `out × in × kh × kw`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvKernel<T> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        data: Vec<T>,
    ) -> Result<Self> {
        if data.len() != out_channels * in_channels * kh * kw {
            return Err(UdvdError::shape(format!(
                "kernel buffer of {} values does not fill {out_channels}x{in_channels}x{kh}x{kw}",
                data.len()
            )));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kh,
            kw,
            data,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kh: usize, kw: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            kh,
            kw,
            data: vec![T::zero(); out_channels * in_channels * kh * kw],
        }
    }

    /// Length of one flattened filter, `in × kh × kw`.
    #[inline]
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize, dy: usize, dx: usize) -> T {
        self.data[((o * self.in_channels + i) * self.kh + dy) * self.kw + dx]
    }

    #[inline]
    pub fn set(&mut self, o: usize, i: usize, dy: usize, dx: usize, v: T) {
        let idx = ((o * self.in_channels + i) * self.kh + dy) * self.kw + dx;
        self.data[idx] = v;
    }
}

/// Which input rows may influence which output rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReceptiveFieldSpec {
    /// Output row `r` may read input rows `<= r - lag`.
    lag: usize,
}

impl ReceptiveFieldSpec {
    /// Any stack of shift convolutions, offset pools and upsamples.
    pub const CAUSAL_STACK: Self = Self { lag: 0 };
    /// A causal stack followed by [`causal_offset`].
    pub const STRICT: Self = Self { lag: 1 };

    pub fn rows_reachable(&self, out_row: usize, in_row: usize) -> bool {
        in_row + self.lag <= out_row
    }
}

fn check_kernel_dims<T: Scalar>(input: &PlaneTensor<T>, kernel: &ConvKernel<T>) -> Result<()> {
    if kernel.kh % 2 == 0 || kernel.kw % 2 == 0 {
        return Err(UdvdError::shape(format!(
            "kernel dims must be odd, got {}x{}",
            kernel.kh, kernel.kw
        )));
    }
    // Rows carry the causal shift and must fit the plane; horizontally the
    // zero padding admits any kernel that still touches a data column.
    if kernel.kh > input.height() || kernel.kw > 2 * input.width() + 1 {
        return Err(UdvdError::shape(format!(
            "kernel {}x{} exceeds input extent {}x{}",
            kernel.kh,
            kernel.kw,
            input.height(),
            input.width()
        )));
    }
    if kernel.in_channels != input.channels() {
        return Err(UdvdError::shape(format!(
            "kernel expects {} input channels, input has {}",
            kernel.in_channels,
            input.channels()
        )));
    }
    Ok(())
}

/// Unfold the causal neighbourhoods of `input` into a `(C·kh·kw) × (H·W)`
/// matrix. Row offset `2·⌊kh/2⌋` realises the top padding plus bottom crop.
pub(crate) fn im2col<T: Scalar>(input: &PlaneTensor<T>, kh: usize, kw: usize) -> Vec<T> {
    let (channels, h, w) = input.shape();
    let n = h * w;
    let shift = 2 * (kh / 2) as isize;
    let half_w = (kw / 2) as isize;
    let mut col = vec![T::zero(); channels * kh * kw * n];
    for c in 0..channels {
        let plane = input.channel(c);
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (c * kh + dy) * kw + dx;
                let dst = &mut col[row * n..(row + 1) * n];
                let ox = dx as isize - half_w;
                // valid output columns: 0 <= x + ox < w
                let x0 = (-ox).max(0) as usize;
                let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                for r in 0..h {
                    let sr = r as isize + dy as isize - shift;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sr as usize * w..(sr as usize + 1) * w];
                    let d = &mut dst[r * w..(r + 1) * w];
                    for x in x0..x1 {
                        d[x] = src_row[(x as isize + ox) as usize];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add of a column matrix back onto the input plane (adjoint of [`im2col`]).
pub(crate) fn col2im<T: Scalar>(
    col: &[T],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> PlaneTensor<T> {
    let n = h * w;
    let shift = 2 * (kh / 2) as isize;
    let half_w = (kw / 2) as isize;
    let mut out = PlaneTensor::zeros(channels, h, w);
    for c in 0..channels {
        let plane = out.channel_mut(c);
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (c * kh + dy) * kw + dx;
                let src = &col[row * n..(row + 1) * n];
                let ox = dx as isize - half_w;
                let x0 = (-ox).max(0) as usize;
                let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                for r in 0..h {
                    let sr = r as isize + dy as isize - shift;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let s = &src[r * w..(r + 1) * w];
                    let dst_row = &mut plane[sr as usize * w..(sr as usize + 1) * w];
                    for x in x0..x1 {
                        let t = (x as isize + ox) as usize;
                        dst_row[t] = dst_row[t] + s[x];
                    }
                }
            }
        }
    }
    out
}

/// Vertically causal convolution: same-padding convolution followed by a
/// downward shift of `⌊kh/2⌋` rows. Output row `r` depends on input rows
/// `r - 2⌊kh/2⌋ ..= r` only.
pub fn shift_conv2d<T: Scalar>(
    input: &PlaneTensor<T>,
    kernel: &ConvKernel<T>,
) -> Result<PlaneTensor<T>> {
    check_kernel_dims(input, kernel)?;
    Ok(shift_conv2d_unchecked(input, kernel))
}

pub(crate) fn shift_conv2d_unchecked<T: Scalar>(
    input: &PlaneTensor<T>,
    kernel: &ConvKernel<T>,
) -> PlaneTensor<T> {
    let (_, h, w) = input.shape();
    let n = h * w;
    let k = kernel.fan_in();
    let mut out = PlaneTensor::zeros(kernel.out_channels, h, w);
    if kernel.kh == 1 && kernel.kw == 1 {
        T::gemm(
            kernel.out_channels,
            k,
            n,
            T::one(),
            &kernel.data,
            (k as isize, 1),
            input.data(),
            (n as isize, 1),
            T::zero(),
            out.data_mut(),
            (n as isize, 1),
        );
    } else {
        let col = im2col(input, kernel.kh, kernel.kw);
        T::gemm(
            kernel.out_channels,
            k,
            n,
            T::one(),
            &kernel.data,
            (k as isize, 1),
            &col,
            (n as isize, 1),
            T::zero(),
            out.data_mut(),
            (n as isize, 1),
        );
    }
    out
}

/// Gradients of [`shift_conv2d`]: accumulates into `kernel_grad` and returns
/// the input gradient when requested.
pub(crate) fn shift_conv2d_backward<T: Scalar>(
    input: &PlaneTensor<T>,
    kernel: &ConvKernel<T>,
    grad_out: &PlaneTensor<T>,
    kernel_grad: Option<&mut [T]>,
    want_input_grad: bool,
) -> Option<PlaneTensor<T>> {
    let (channels, h, w) = input.shape();
    let n = h * w;
    let k = kernel.fan_in();
    let o = kernel.out_channels;
    let pointwise = kernel.kh == 1 && kernel.kw == 1;
    let col_storage;
    let col: &[T] = if pointwise {
        input.data()
    } else {
        col_storage = im2col(input, kernel.kh, kernel.kw);
        &col_storage
    };
    if let Some(kg) = kernel_grad {
        // dW (o × k) += dY (o × n) · colᵀ (n × k)
        T::gemm(
            o,
            n,
            k,
            T::one(),
            grad_out.data(),
            (n as isize, 1),
            col,
            (1, n as isize),
            T::one(),
            kg,
            (k as isize, 1),
        );
    }
    if !want_input_grad {
        return None;
    }
    // dcol (k × n) = Wᵀ (k × o) · dY (o × n)
    let mut dcol = vec![T::zero(); k * n];
    T::gemm(
        k,
        o,
        n,
        T::one(),
        &kernel.data,
        (1, k as isize),
        grad_out.data(),
        (n as isize, 1),
        T::zero(),
        &mut dcol,
        (n as isize, 1),
    );
    if pointwise {
        return Some(PlaneTensor::from_vec(channels, h, w, dcol).expect("pointwise grad shape"));
    }
    Some(col2im(&dcol, channels, h, w, kernel.kh, kernel.kw))
}

/// Number of outputs that are exactly zero although their receptive window
/// holds nonzero inputs. Such points sit on a ReLU kink.
pub(crate) fn count_exact_zero_outputs<T: Scalar>(
    input: &PlaneTensor<T>,
    kernel: &ConvKernel<T>,
    output: &PlaneTensor<T>,
) -> usize {
    let zeros: Vec<usize> = (0..output.plane_len())
        .filter(|&p| (0..output.channels()).any(|c| output.channel(c)[p] == T::zero()))
        .collect();
    if zeros.is_empty() {
        return 0;
    }
    let (channels, h, w) = input.shape();
    let shift = 2 * (kernel.kh / 2) as isize;
    let half_w = (kernel.kw / 2) as isize;
    let mut count = 0;
    for p in zeros {
        let (r, x) = ((p / w) as isize, (p % w) as isize);
        let mut support = false;
        'scan: for c in 0..channels {
            for dy in 0..kernel.kh as isize {
                for dx in 0..kernel.kw as isize {
                    let (sr, sx) = (r + dy - shift, x + dx - half_w);
                    if sr >= 0
                        && sr < h as isize
                        && sx >= 0
                        && sx < w as isize
                        && input.get(c, sr as usize, sx as usize) != T::zero()
                    {
                        support = true;
                        break 'scan;
                    }
                }
            }
        }
        if support {
            count += (0..output.channels())
                .filter(|&c| output.channel(c)[p] == T::zero())
                .count();
        }
    }
    count
}

/// Marks a pooled value that came from the zero padding row.
pub(crate) const PAD_SOURCE: u32 = u32::MAX;

fn check_even(input_h: usize, input_w: usize) -> Result<()> {
    if input_h % 2 != 0 || input_w % 2 != 0 {
        return Err(UdvdError::shape(format!(
            "offset max-pool needs even dims, got {input_h}x{input_w}"
        )));
    }
    Ok(())
}

/// One-row downward offset followed by 2×2 max pooling.
///
/// Output row `r` pools input rows `2r - 1` and `2r` (row `-1` is zero).
pub fn offset_maxpool<T: Scalar>(input: &PlaneTensor<T>) -> Result<PlaneTensor<T>> {
    check_even(input.height(), input.width())?;
    Ok(offset_maxpool_indexed(input).0)
}

/// Pooled output, source index of every output value, and the number of
/// windows whose nonzero maximum was attained more than once.
pub(crate) fn offset_maxpool_indexed<T: Scalar>(
    input: &PlaneTensor<T>,
) -> (PlaneTensor<T>, Vec<u32>, usize) {
    let (channels, h, w) = input.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = PlaneTensor::zeros(channels, oh, ow);
    let mut source = vec![PAD_SOURCE; channels * oh * ow];
    let mut ties = 0;
    for c in 0..channels {
        let plane = input.channel(c);
        for r in 0..oh {
            for x in 0..ow {
                let mut best = T::zero();
                let mut best_src = PAD_SOURCE;
                let mut hits = 0usize;
                let rows = [2 * r as isize - 1, 2 * r as isize];
                if rows[0] < 0 {
                    // the zero padding row takes part in the window
                    hits = 1;
                }
                let mut first = rows[0] >= 0;
                for &sr in &rows {
                    if sr < 0 {
                        continue;
                    }
                    for sx in [2 * x, 2 * x + 1] {
                        let idx = sr as usize * w + sx;
                        let v = plane[idx];
                        if first || v > best {
                            best = v;
                            best_src = idx as u32;
                            hits = 1;
                            first = false;
                        } else if v == best {
                            hits += 1;
                        }
                    }
                }
                if hits > 1 && best != T::zero() {
                    ties += 1;
                }
                out.channel_mut(c)[r * ow + x] = best;
                source[(c * oh + r) * ow + x] = best_src;
            }
        }
    }
    (out, source, ties)
}

pub(crate) fn offset_maxpool_backward<T: Scalar>(
    input_shape: (usize, usize, usize),
    source: &[u32],
    grad_out: &PlaneTensor<T>,
) -> PlaneTensor<T> {
    let (channels, h, w) = input_shape;
    let mut grad = PlaneTensor::zeros(channels, h, w);
    let n_out = grad_out.plane_len();
    for c in 0..channels {
        let g = grad_out.channel(c);
        let src = &source[c * n_out..(c + 1) * n_out];
        let plane = grad.channel_mut(c);
        for (&s, &gv) in src.iter().zip(g) {
            if s != PAD_SOURCE {
                plane[s as usize] = plane[s as usize] + gv;
            }
        }
    }
    grad
}

/// Nearest-neighbour 2× upsampling.
pub fn nearest_upsample<T: Scalar>(input: &PlaneTensor<T>) -> PlaneTensor<T> {
    let (channels, h, w) = input.shape();
    PlaneTensor::from_fn(channels, 2 * h, 2 * w, |c, r, x| input.get(c, r / 2, x / 2))
}

pub(crate) fn nearest_upsample_backward<T: Scalar>(grad_out: &PlaneTensor<T>) -> PlaneTensor<T> {
    let (channels, h2, w2) = grad_out.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut grad = PlaneTensor::zeros(channels, h, w);
    for c in 0..channels {
        let g = grad_out.channel(c);
        let plane = grad.channel_mut(c);
        for r in 0..h2 {
            for x in 0..w2 {
                let i = (r / 2) * w + x / 2;
                plane[i] = plane[i] + g[r * w2 + x];
            }
        }
    }
    grad
}

/// Rotation by `quarter_turns × 90°`, counter-clockwise with rows counted
/// upward: one turn maps `[[1,2],[3,4]]` to `[[3,1],[4,2]]`.
pub fn rotate90<T: Scalar>(input: &PlaneTensor<T>, quarter_turns: usize) -> PlaneTensor<T> {
    let (channels, h, w) = input.shape();
    match quarter_turns % 4 {
        0 => input.clone(),
        1 => PlaneTensor::from_fn(channels, w, h, |c, r, x| input.get(c, h - 1 - x, r)),
        2 => PlaneTensor::from_fn(channels, h, w, |c, r, x| {
            input.get(c, h - 1 - r, w - 1 - x)
        }),
        _ => PlaneTensor::from_fn(channels, w, h, |c, r, x| input.get(c, x, w - 1 - r)),
    }
}

/// Quarter turns that undo a rotation by `quarter_turns`.
#[inline]
pub fn inverse_turns(quarter_turns: usize) -> usize {
    (4 - quarter_turns % 4) % 4
}

/// One-row downward shift: zero row on top, last row dropped.
pub fn causal_offset<T: Scalar>(input: &PlaneTensor<T>) -> PlaneTensor<T> {
    let (channels, h, w) = input.shape();
    PlaneTensor::from_fn(channels, h, w, |c, r, x| {
        if r == 0 {
            T::zero()
        } else {
            input.get(c, r - 1, x)
        }
    })
}

pub(crate) fn causal_offset_backward<T: Scalar>(grad_out: &PlaneTensor<T>) -> PlaneTensor<T> {
    let (channels, h, w) = grad_out.shape();
    PlaneTensor::from_fn(channels, h, w, |c, r, x| {
        if r + 1 < h {
            grad_out.get(c, r + 1, x)
        } else {
            T::zero()
        }
    })
}

pub fn relu<T: Scalar>(input: &PlaneTensor<T>) -> PlaneTensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub(crate) fn relu_backward<T: Scalar>(
    output: &PlaneTensor<T>,
    grad_out: &PlaneTensor<T>,
) -> PlaneTensor<T> {
    let mut grad = grad_out.clone();
    for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
    grad
}
