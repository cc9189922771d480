//! Local-linear analysis of a trained denoiser.
//!
//! A bias-free ReLU network is piecewise linear and positively homogeneous,
//! so each output pixel satisfies `d(i) = Σ_k ⟨a(k,i), y_k⟩` exactly, where
//! `a(k,i)` is the gradient of `d(i)` with respect to input frame `k`. These
//! gradients are the equivalent filters; their per-frame sums show how much
//! each frame contributes, and their shift between frames tracks motion.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{NodeId, Tape};
use crate::data_metrics::{write_array, ArrayHeader, FlowField};
use crate::error::{Result, UdvdError};
use crate::loss_fusion::{posterior_mean, posterior_mean_grad, PixelPosterior};
use crate::network::{BlindSpotNetwork, OutputLayout};
use crate::scalar::Scalar;
use crate::tensor::PlaneTensor;

/// Gradient of one output value with respect to every input frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalentFilter {
    /// `(row, col)` of the output pixel.
    pub pixel: (usize, usize),
    pub channel: usize,
    /// One `C × H × W` map per input frame.
    pub weights: Vec<PlaneTensor<f64>>,
    /// The output value `d(i)`.
    pub output: f64,
    /// `d(i) − Σ_k ⟨a(k,i), y_k⟩`.
    pub bias: f64,
    /// Whether the window had to be nudged off a non-differentiable point.
    pub perturbed: bool,
}

impl EquivalentFilter {
    pub fn frame_sums(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w.sum()).collect()
    }

    pub fn total_sum(&self) -> f64 {
        self.frame_sums().iter().sum()
    }

    /// `Σ_k ⟨a(k,i), y_k⟩` for an arbitrary window.
    pub fn apply<T: Scalar>(&self, window: &[PlaneTensor<T>]) -> f64 {
        self.weights
            .iter()
            .zip(window)
            .map(|(a, y)| a.data().iter().zip(y.data()).map(|(a, y)| a * y.as_f64()).sum::<f64>())
            .sum()
    }

    /// Frame `k` collapsed over channels into a single `H × W` map.
    pub fn frame_map(&self, k: usize) -> Vec<f64> {
        let w = &self.weights[k];
        let n = w.plane_len();
        (0..n).map(|i| (0..w.channels()).map(|c| w.channel(c)[i]).sum()).collect()
    }

    pub fn height(&self) -> usize {
        self.weights[0].height()
    }

    pub fn width(&self) -> usize {
        self.weights[0].width()
    }
}

/// Which output the filters differentiate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterTarget {
    /// The blind-spot mean `μx`, before the noisy pixel is folded in.
    PreFusion,
    /// The posterior mean at noise level `sigma`.
    PostFusion { sigma: f64 },
}

/// Records the forward pass over one window once and pulls back one output
/// pixel at a time.
pub struct FilterExtractor<'a, T: Scalar> {
    net: &'a BlindSpotNetwork<T>,
    tape: Tape<'a, T>,
    leaves: Vec<NodeId>,
    out: NodeId,
    window: Vec<PlaneTensor<T>>,
    target: FilterTarget,
    perturbed: bool,
}

fn record<'a, T: Scalar>(
    net: &'a BlindSpotNetwork<T>,
    window: &[PlaneTensor<T>],
) -> Result<(Tape<'a, T>, Vec<NodeId>, NodeId)> {
    let mut tape = Tape::new(&net.params, false).with_kink_detection();
    let leaves: Vec<_> = window.iter().map(|f| tape.leaf(f.clone(), true)).collect();
    let out = net.forward_graph(&mut tape, &leaves)?;
    Ok((tape, leaves, out))
}

/// Smallest representable nudge of each sample, at least `1e-9`.
fn nudge<T: Scalar>(window: &[PlaneTensor<T>], seed: u64) -> Vec<PlaneTensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    window
        .iter()
        .map(|f| {
            let mut g = f.clone();
            for v in g.data_mut() {
                let x = v.as_f64();
                let step = (x.abs() * 4.0 * T::epsilon().as_f64()).max(1e-9);
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                *v = T::of(x + sign * step);
            }
            g
        })
        .collect()
}

impl<'a, T: Scalar> FilterExtractor<'a, T> {
    pub fn new(net: &'a BlindSpotNetwork<T>, window: &[PlaneTensor<T>], target: FilterTarget) -> Result<Self> {
        if let FilterTarget::PostFusion { sigma } = target {
            if net.config.output != OutputLayout::Posterior {
                return Err(UdvdError::invalid("post-fusion filters need a covariance output"));
            }
            if !(sigma > 0.0) {
                return Err(UdvdError::invalid(format!("fusion needs sigma > 0, got {sigma}")));
            }
        }
        let (mut tape, mut leaves, mut out) = record(net, window)?;
        let mut window = window.to_vec();
        let mut perturbed = false;
        if tape.kinks() > 0 {
            window = nudge(&window, 0x5eed);
            (tape, leaves, out) = record(net, &window)?;
            perturbed = true;
        }
        Ok(Self {
            net,
            tape,
            leaves,
            out,
            window,
            target,
            perturbed,
        })
    }

    /// The window actually differentiated (differs from the input after a nudge).
    pub fn window(&self) -> &[PlaneTensor<T>] {
        &self.window
    }

    /// Non-differentiable points left in the recorded pass.
    pub fn kinks(&self) -> usize {
        self.tape.kinks()
    }

    pub fn output(&self) -> &PlaneTensor<T> {
        self.tape.value(self.out)
    }

    fn pixel_posterior(&self, r: usize, c: usize, sigma: f64) -> Result<(PixelPosterior, Vec<f64>)> {
        let out = self.output();
        let ch = self.net.config.color.channels();
        let mu = (0..ch).map(|k| out.get(k, r, c).as_f64()).collect();
        let raw = (ch..out.channels()).map(|k| out.get(k, r, c).as_f64()).collect();
        let centre = &self.window[self.window.len() / 2];
        let y = (0..ch).map(|k| centre.get(k, r, c).as_f64()).collect();
        Ok((PixelPosterior::new(mu, raw, sigma)?, y))
    }

    pub fn filter(&self, pixel: (usize, usize), channel: usize) -> Result<EquivalentFilter> {
        let (r, c) = pixel;
        let (oc, h, w) = self.output().shape();
        let colors = self.net.config.color.channels();
        if r >= h || c >= w {
            return Err(UdvdError::invalid(format!("pixel ({r}, {c}) outside {h}x{w}")));
        }
        if channel >= colors {
            return Err(UdvdError::invalid(format!("channel {channel} out of range")));
        }
        let mut seed = PlaneTensor::<T>::zeros(oc, h, w);
        let (output, direct) = match self.target {
            FilterTarget::PreFusion => {
                seed.set(channel, r, c, T::one());
                (self.output().get(channel, r, c).as_f64(), None)
            }
            FilterTarget::PostFusion { sigma } => {
                let (post, y) = self.pixel_posterior(r, c, sigma)?;
                let g = posterior_mean_grad(&y, &post, channel)?;
                for (k, v) in g.d_mu.iter().chain(&g.d_raw_cov).enumerate() {
                    seed.set(k, r, c, T::of(*v));
                }
                (posterior_mean(&y, &post)?[channel], Some(g.d_y))
            }
        };
        let mut grads = self.tape.backward(&[(self.out, &seed)], None);
        let mut weights: Vec<PlaneTensor<f64>> = self
            .leaves
            .iter()
            .zip(&self.window)
            .map(|(&leaf, f)| match grads.take(leaf) {
                Some(g) => g.cast(),
                None => PlaneTensor::zeros(f.channels(), f.height(), f.width()),
            })
            .collect();
        if let Some(dy) = direct {
            let centre = &mut weights[self.window.len() / 2];
            for (k, v) in dy.iter().enumerate() {
                let old = centre.get(k, r, c);
                centre.set(k, r, c, old + v);
            }
        }
        let mut filter = EquivalentFilter {
            pixel,
            channel,
            weights,
            output,
            bias: 0.0,
            perturbed: self.perturbed,
        };
        filter.bias = output - filter.apply(&self.window);
        Ok(filter)
    }

    /// Filters for many pixels, in parallel.
    pub fn filters(&self, pixels: &[(usize, usize)], channel: usize) -> Result<Vec<EquivalentFilter>> {
        pixels.par_iter().map(|&p| self.filter(p, channel)).collect()
    }
}

/// Equivalent filter of the pre-fusion output at `pixel`, channel `channel`.
pub fn equivalent_filters<T: Scalar>(
    net: &BlindSpotNetwork<T>,
    window: &[PlaneTensor<T>],
    pixel: (usize, usize),
    channel: usize,
) -> Result<EquivalentFilter> {
    FilterExtractor::new(net, window, FilterTarget::PreFusion)?.filter(pixel, channel)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// Left edges; bin `j` covers `[edges[j], edges[j] + width)`.
    pub edges: Vec<f64>,
    pub width: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Bins of `width` centred on integer multiples of `width`.
    pub fn new(values: &[f64], width: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(UdvdError::invalid("histogram of an empty sample"));
        }
        if !(width > 0.0) {
            return Err(UdvdError::invalid("histogram bin width must be positive"));
        }
        let bin = |v: f64| ((v / width) + 0.5).floor() as i64;
        let lo = values.iter().map(|&v| bin(v)).min().unwrap();
        let hi = values.iter().map(|&v| bin(v)).max().unwrap();
        let mut counts = vec![0; (hi - lo + 1) as usize];
        for &v in values {
            counts[(bin(v) - lo) as usize] += 1;
        }
        let edges = (lo..=hi).map(|j| (j as f64 - 0.5) * width).collect();
        Ok(Self { edges, width, counts })
    }

    /// Centre of the fullest bin (the lowest such bin on ties).
    pub fn mode(&self) -> f64 {
        let best = self.counts.iter().max().unwrap();
        let j = self.counts.iter().position(|c| c == best).unwrap();
        self.edges[j] + 0.5 * self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameContributions {
    /// Mean over pixels of each frame's filter sum.
    pub per_frame_mean: Vec<f64>,
    /// Total filter sum of every pixel.
    pub totals: Vec<f64>,
    pub histogram: Histogram,
}

impl FrameContributions {
    pub fn mode(&self) -> f64 {
        self.histogram.mode()
    }

    pub fn central_index(&self) -> usize {
        self.per_frame_mean.len() / 2
    }

    /// Mean summed contribution of every frame but the central one.
    pub fn non_central(&self) -> f64 {
        let c = self.central_index();
        self.per_frame_mean
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != c)
            .map(|(_, v)| v)
            .sum()
    }

    pub fn central_dominates(&self) -> bool {
        let c = self.central_index();
        let centre = self.per_frame_mean[c];
        self.per_frame_mean
            .iter()
            .enumerate()
            .all(|(k, &v)| k == c || centre > v)
    }
}

/// Per-frame filter sums over a sample of pixels, with a histogram of the
/// total sums in bins of `bin_width`.
pub fn frame_contributions(filters: &[EquivalentFilter], bin_width: f64) -> Result<FrameContributions> {
    let first = filters
        .first()
        .ok_or_else(|| UdvdError::invalid("no filters given"))?;
    let k = first.weights.len();
    let mut per_frame = vec![0.0; k];
    let mut totals = Vec::with_capacity(filters.len());
    for f in filters {
        if f.weights.len() != k {
            return Err(UdvdError::shape("filters span different frame counts"));
        }
        let sums = f.frame_sums();
        for (acc, s) in per_frame.iter_mut().zip(&sums) {
            *acc += s;
        }
        totals.push(sums.iter().sum());
    }
    for v in per_frame.iter_mut() {
        *v /= filters.len() as f64;
    }
    Ok(FrameContributions {
        per_frame_mean: per_frame,
        histogram: Histogram::new(&totals, bin_width)?,
        totals,
    })
}

/// Fraction of the maximum an entry must reach to count toward the centroid.
pub const CENTROID_FRACTION: f64 = 0.8;

/// Entries of a single-frame `rows × cols` map at or above `0.8 ×` its maximum.
pub fn centroid_support(map: &[f64], cols: usize) -> Vec<(usize, usize, f64)> {
    let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Vec::new();
    }
    let cut = CENTROID_FRACTION * max;
    map.iter()
        .enumerate()
        .filter(|(_, &v)| v >= cut)
        .map(|(i, &v)| (i / cols, i % cols, v))
        .collect()
}

/// Value-weighted centroid `(row, col)` of the entries within 20% of the
/// (signed) maximum. `None` when the map has no positive entry.
pub fn filter_centroid(map: &[f64], cols: usize) -> Option<(f64, f64)> {
    let support = centroid_support(map, cols);
    if support.is_empty() {
        return None;
    }
    let total: f64 = support.iter().map(|s| s.2).sum();
    let r = support.iter().map(|s| s.0 as f64 * s.2).sum::<f64>() / total;
    let c = support.iter().map(|s| s.1 as f64 * s.2).sum::<f64>() / total;
    Some((r, c))
}

/// Number of entries above `fraction` of the map's maximum.
pub fn filter_extent(map: &[f64], fraction: f64) -> usize {
    let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return 0;
    }
    map.iter().filter(|&&v| v > fraction * max).count()
}

/// When a frame's filter is too unreliable to locate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowMask {
    /// Fewest entries that must survive the centroid threshold.
    pub min_support: usize,
    /// Most entries that may survive before the filter counts as diffuse.
    pub max_support: usize,
}

impl Default for FlowMask {
    fn default() -> Self {
        Self {
            min_support: 4,
            max_support: usize::MAX,
        }
    }
}

/// Displacement estimate for one pixel, or `None` when masked.
pub fn pixel_flow(filter: &EquivalentFilter, mask: &FlowMask) -> Option<(f64, f64)> {
    let k = filter.weights.len();
    if k < 2 {
        return None;
    }
    let cols = filter.width();
    let mut centroids = Vec::with_capacity(k);
    for t in 0..k {
        let map = filter.frame_map(t);
        let support = centroid_support(&map, cols).len();
        if support < mask.min_support || support > mask.max_support {
            return None;
        }
        centroids.push(filter_centroid(&map, cols)?);
    }
    // mean of consecutive-frame shifts
    let (first, last) = (centroids[0], centroids[k - 1]);
    let n = (k - 1) as f64;
    Some(((last.1 - first.1) / n, (last.0 - first.0) / n))
}

/// Per-pixel motion of the window's central frame, from the centroid shift
/// of the equivalent filters across frames, on every `grid`-th pixel
/// (unvisited pixels are masked).
pub fn flow_from_filters<T: Scalar>(
    net: &BlindSpotNetwork<T>,
    window: &[PlaneTensor<T>],
    grid: usize,
    margin: usize,
    mask: &FlowMask,
) -> Result<FlowField> {
    if net.frame_count() < 3 {
        return Err(UdvdError::invalid("flow estimation needs at least 3 frames"));
    }
    if grid == 0 {
        return Err(UdvdError::invalid("grid spacing must be positive"));
    }
    let ex = FilterExtractor::new(net, window, FilterTarget::PreFusion)?;
    let (_, h, w) = window[0].shape();
    let pixels: Vec<(usize, usize)> = (margin..h.saturating_sub(margin))
        .step_by(grid)
        .flat_map(|r| (margin..w.saturating_sub(margin)).step_by(grid).map(move |c| (r, c)))
        .collect();
    let flows: Vec<Option<(f64, f64)>> = pixels
        .par_iter()
        .map(|&p| {
            let channel_flows: Vec<_> = (0..window[0].channels())
                .map(|ch| ex.filter(p, ch).map(|f| pixel_flow(&f, mask)))
                .collect::<Result<_>>()?;
            let valid: Vec<(f64, f64)> = channel_flows.into_iter().flatten().collect();
            Ok((!valid.is_empty()).then(|| {
                let n = valid.len() as f64;
                (
                    valid.iter().map(|v| v.0).sum::<f64>() / n,
                    valid.iter().map(|v| v.1).sum::<f64>() / n,
                )
            }))
        })
        .collect::<Result<_>>()?;
    let mut field = FlowField::new(h, w);
    for (&(r, c), f) in pixels.iter().zip(flows) {
        field.set(r, c, f.map(|(dx, dy)| (dx as f32, dy as f32)));
    }
    Ok(field)
}

/// Write all frame maps of `filter` as one `[T, C, H, W]` array.
pub fn export_filter(filter: &EquivalentFilter, path: &Path) -> Result<()> {
    let (c, h, w) = filter.weights[0].shape();
    let header = ArrayHeader::new(vec![filter.weights.len(), c, h, w], &["t", "c", "h", "w"]).with_description(
        format!(
            "equivalent filter of pixel ({}, {}) channel {}; output {}, bias {}",
            filter.pixel.0, filter.pixel.1, filter.channel, filter.output, filter.bias
        ),
    );
    let data: Vec<f32> = filter
        .weights
        .iter()
        .flat_map(|m| m.data().iter().map(|&v| v as f32))
        .collect();
    write_array(path, &header, &data)
}

/// Write a flow field as a `[3, H, W]` array of `dx`, `dy`, validity.
pub fn export_flow(flow: &FlowField, path: &Path) -> Result<()> {
    let header = ArrayHeader::new(vec![3, flow.height, flow.width], &["component", "h", "w"])
        .with_description("dx, dy in pixels per frame; third plane is 1 where valid");
    let mut data = flow.dx.clone();
    data.extend_from_slice(&flow.dy);
    data.extend(flow.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }));
    write_array(path, &header, &data)
}

/// Diverging colormap: white at zero, red for positive and blue for
/// negative values, saturating at `±scale`.
pub fn diverging_rgb(value: f64, scale: f64) -> [u8; 3] {
    let t = if scale > 0.0 { (value / scale).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |t: f64| (255.0 * (1.0 - t.abs())).round() as u8;
    if t >= 0.0 {
        [255, fade(t), fade(t)]
    } else {
        [fade(t), fade(t), 255]
    }
}

/// Render a single-frame map as a PNG heatmap with the given symmetric scale.
pub fn write_heatmap(map: &[f64], rows: usize, cols: usize, scale: f64, path: &Path) -> Result<()> {
    if map.len() != rows * cols {
        return Err(UdvdError::shape("heatmap size mismatch"));
    }
    let bytes: Vec<u8> = map.iter().flat_map(|&v| diverging_rgb(v, scale)).collect();
    image::save_buffer_with_format(
        path,
        &bytes,
        cols as u32,
        rows as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| UdvdError::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// One heatmap per frame, sharing the filter's largest magnitude as scale.
/// Returns the written paths.
pub fn write_filter_heatmaps(filter: &EquivalentFilter, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
    let maps: Vec<Vec<f64>> = (0..filter.weights.len()).map(|k| filter.frame_map(k)).collect();
    let scale = maps
        .iter()
        .flat_map(|m| m.iter())
        .fold(0.0f64, |a, &v| a.max(v.abs()));
    let mut paths = Vec::with_capacity(maps.len());
    for (k, m) in maps.iter().enumerate() {
        let path = dir.join(format!("{stem}_frame{k}.png"));
        write_heatmap(m, filter.height(), filter.width(), scale, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ColorMode, NetworkConfig};

    fn tiny(k: usize, color: ColorMode) -> NetworkConfig {
        NetworkConfig {
            enc_width: 4,
            dec_width: 8,
            d1_out: 4,
            d2_out: 8,
            head_width: 8,
            ..NetworkConfig::desk(k, color)
        }
    }

    fn window(k: usize, c: usize, h: usize, w: usize, seed: u64) -> Vec<PlaneTensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k)
            .map(|_| PlaneTensor::from_fn(c, h, w, |_, _, _| rng.gen_range(0.0..255.0)))
            .collect()
    }

    fn brute_centroid(map: &[f64], cols: usize) -> Option<(f64, f64)> {
        let max = map.iter().cloned().fold(f64::MIN, f64::max);
        if max <= 0.0 {
            return None;
        }
        let (mut r, mut c, mut s) = (0.0, 0.0, 0.0);
        for (i, &v) in map.iter().enumerate() {
            if v >= 0.8 * max {
                r += (i / cols) as f64 * v;
                c += (i % cols) as f64 * v;
                s += v;
            }
        }
        Some((r / s, c / s))
    }

    #[test]
    fn filter_reconstructs_output_without_bias() {
        let net = BlindSpotNetwork::<f64>::new(tiny(5, ColorMode::Grayscale).with_seed(2)).unwrap();
        let win = window(5, 1, 16, 16, 1);
        let ex = FilterExtractor::new(&net, &win, FilterTarget::PreFusion).unwrap();
        for p in [(3, 4), (8, 8), (15, 0)] {
            let f = ex.filter(p, 0).unwrap();
            assert!(f.bias.abs() <= 1e-9 * f.output.abs().max(1.0), "bias {}", f.bias);
            for t in 0..5 {
                assert_eq!(f.weights[t].get(0, p.0, p.1), 0.0);
            }
        }
    }

    #[test]
    fn filter_matches_finite_differences() {
        let net = BlindSpotNetwork::<f64>::new(tiny(3, ColorMode::Rgb).with_seed(3)).unwrap();
        let win = window(3, 3, 12, 12, 2);
        let f = equivalent_filters(&net, &win, (6, 5), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let eval = |w: &[PlaneTensor<f64>]| net.forward(w).unwrap().get(1, 6, 5);
        let mut checked = 0;
        while checked < 20 {
            let (t, c, r, x) = (rng.gen_range(0..3), rng.gen_range(0..3), rng.gen_range(0..12), rng.gen_range(0..12));
            let g = f.weights[t].get(c, r, x);
            let h = 1e-4;
            let mut plus = win.clone();
            plus[t].set(c, r, x, win[t].get(c, r, x) + h);
            let mut minus = win.clone();
            minus[t].set(c, r, x, win[t].get(c, r, x) - h);
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            assert!((fd - g).abs() <= 1e-6 * g.abs().max(1e-3), "fd {fd} vs {g}");
            checked += 1;
        }
    }

    #[test]
    fn post_fusion_filter_adds_the_noisy_pixel() {
        let net = BlindSpotNetwork::<f64>::new(tiny(1, ColorMode::Grayscale).with_seed(4)).unwrap();
        let win = window(1, 1, 8, 8, 3);
        let ex = FilterExtractor::new(&net, &win, FilterTarget::PostFusion { sigma: 20.0 }).unwrap();
        let f = ex.filter((4, 4), 0).unwrap();
        assert!(f.weights[0].get(0, 4, 4) > 0.0);
        let eval = |w: &[PlaneTensor<f64>]| {
            let field = net.udvd_forward(w).unwrap();
            let raw = field.raw_cov.unwrap();
            let post = PixelPosterior::new(vec![field.mu.get(0, 4, 4)], vec![raw.get(0, 4, 4)], 20.0).unwrap();
            posterior_mean(&[w[0].get(0, 4, 4)], &post).unwrap()[0]
        };
        for (r, c) in [(4, 4), (2, 4), (4, 6)] {
            let h = 1e-4;
            let mut plus = win.clone();
            plus[0].set(0, r, c, win[0].get(0, r, c) + h);
            let mut minus = win.clone();
            minus[0].set(0, r, c, win[0].get(0, r, c) - h);
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let g = f.weights[0].get(0, r, c);
            assert!((fd - g).abs() < 1e-6 * g.abs().max(1e-3), "({r},{c}) fd {fd} vs {g}");
        }
    }

    #[test]
    fn single_frame_net_has_no_neighbours() {
        let net = BlindSpotNetwork::<f64>::new(tiny(1, ColorMode::Grayscale)).unwrap();
        let win = window(1, 1, 8, 8, 4);
        let f = equivalent_filters(&net, &win, (2, 2), 0).unwrap();
        let fc = frame_contributions(&[f.clone(), f], 0.1).unwrap();
        assert_eq!(fc.per_frame_mean.len(), 1);
        assert_eq!(fc.non_central(), 0.0);
    }

    #[test]
    fn contributions_reject_empty() {
        assert!(frame_contributions(&[], 0.1).is_err());
    }

    #[test]
    fn histogram_mode_and_bins() {
        let h = Histogram::new(&[0.96, 1.02, 1.04, 0.31, 2.0], 0.1).unwrap();
        assert!((h.mode() - 1.0).abs() < 1e-12);
        assert_eq!(h.counts.iter().sum::<usize>(), 5);
    }

    #[test]
    fn centroid_examples() {
        let mut delta = vec![0.0; 16 * 12];
        delta[10 * 12 + 7] = 3.0;
        assert_eq!(filter_centroid(&delta, 12), Some((10.0, 7.0)));
        let mut plateau = vec![0.0; 11 * 11];
        for r in 4..=6 {
            for c in 4..=6 {
                plateau[r * 11 + c] = 1.0;
            }
        }
        assert_eq!(filter_centroid(&plateau, 11), Some((5.0, 5.0)));
        assert_eq!(filter_centroid(&vec![0.0; 9], 3), None);
        assert_eq!(filter_centroid(&vec![-1.0; 9], 3), None);
    }

    #[test]
    fn centroid_matches_brute_force_on_sparse_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let map: Vec<f64> = (0..20 * 9)
                .map(|_| if rng.gen_bool(0.1) { rng.gen_range(-1.0..1.0) } else { 0.0 })
                .collect();
            let a = filter_centroid(&map, 9);
            let b = brute_centroid(&map, 9);
            match (a, b) {
                (Some(a), Some(b)) => assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn flow_rejects_single_frame_net() {
        let net = BlindSpotNetwork::<f64>::new(tiny(1, ColorMode::Grayscale)).unwrap();
        assert!(flow_from_filters(&net, &window(1, 1, 8, 8, 1), 2, 0, &FlowMask::default()).is_err());
    }

    #[test]
    fn shifted_filters_give_their_shift() {
        let mut weights = Vec::new();
        for t in 0..5 {
            let mut m = PlaneTensor::zeros(1, 20, 20);
            m.set(0, 8 + t, 6 + 2 * t, 1.0);
            weights.push(m);
        }
        let f = EquivalentFilter {
            pixel: (10, 10),
            channel: 0,
            weights,
            output: 0.0,
            bias: 0.0,
            perturbed: false,
        };
        let mask = FlowMask {
            min_support: 1,
            ..FlowMask::default()
        };
        assert_eq!(pixel_flow(&f, &mask), Some((2.0, 1.0)));
        assert_eq!(pixel_flow(&f, &FlowMask::default()), None);
    }

    #[test]
    fn exports_write_files() {
        let dir = tempfile::tempdir().unwrap();
        let net = BlindSpotNetwork::<f64>::new(tiny(3, ColorMode::Grayscale)).unwrap();
        let f = equivalent_filters(&net, &window(3, 1, 8, 8, 5), (4, 4), 0).unwrap();
        let paths = write_filter_heatmaps(&f, dir.path(), "px").unwrap();
        assert_eq!(paths.len(), 3);
        assert!(paths.iter().all(|p| p.exists()));
        export_filter(&f, &dir.path().join("f.bin")).unwrap();
        let (h, d) = crate::data_metrics::read_array(&dir.path().join("f.bin")).unwrap();
        assert_eq!(h.shape, vec![3, 1, 8, 8]);
        assert_eq!(d.len(), 192);
        assert_eq!(diverging_rgb(-5.0, 1.0), [0, 0, 255]);
        assert_eq!(diverging_rgb(0.0, 1.0), [255, 255, 255]);
    }
}
