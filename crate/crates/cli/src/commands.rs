use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use udvd::analysis::{
    export_filter, export_flow, flow_from_filters, frame_contributions, write_filter_heatmaps, FilterExtractor,
    FilterTarget, FlowMask,
};
use udvd::checkpoint::TrainedModel;
use udvd::data_metrics::{
    add_gaussian_noise, load_frames, psnr, psnr_planes, read_array, save_frames, ssim, ssim_video, synth_video,
    write_array, ArrayHeader, SyntheticScene, Velocity, VideoTensor,
};
use udvd::denoise::{denoise_video, estimate_sigma};
use udvd::loss_fusion::{NoiseKind, NoiseModel};
use udvd::network::{BlindSpotNetwork, ColorMode, NetworkConfig, OutputLayout};
use udvd::training::{fit, write_loss_csv, Augmentation, NoisyVideo, TrainConfig};
use udvd::PlaneTensor;

use crate::args::{AnalyzeArgs, AnalyzeCommand, AnalyzeCommon, Color, DenoiseArgs, SigmaMode, SynthArgs, TrainArgs, Width};
use crate::manifest::Manifest;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn require_input(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("input not found: {}", path.display())))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let color = match a.color {
        Color::Gray => ColorMode::Grayscale,
        Color::Rgb => ColorMode::Rgb,
    };
    let velocity = Velocity::new(a.velocity.0, a.velocity.1);
    let mut scene = SyntheticScene::translating_texture(a.seed, color, velocity);
    if a.objects {
        let bench = SyntheticScene::benchmark(a.seed, color);
        scene.objects = bench.objects;
    }
    if a.length == 0 || a.height < 8 || a.width < 8 {
        return Err(CliError::Usage("need at least one frame of at least 8x8 pixels".into()));
    }
    if !(a.sigma >= 0.0) {
        return Err(CliError::Usage(format!("sigma must be non-negative, got {}", a.sigma)));
    }
    scene.validate(a.length, a.height, a.width)?;
    let config = json!({
        "scene": serde_json::to_value(&scene).expect("scene serialises"),
        "length": a.length, "height": a.height, "width": a.width,
        "sigma": a.sigma, "format": format!("{:?}", a.format),
    });
    let mut manifest = Manifest::new("synth", config, Some(a.seed));
    let video = synth_video(&scene, a.length, a.height, a.width)?;
    create_dir(&a.out)?;
    let clean_dir = a.out.join("clean");
    save_frames(&video.clean, &clean_dir, a.format.into())?;
    manifest.output(&clean_dir);
    if a.sigma > 0.0 {
        let noisy = add_gaussian_noise(&video.clean, a.sigma, a.seed.wrapping_add(1))?;
        let noisy_dir = a.out.join("noisy");
        save_frames(&noisy, &noisy_dir, a.format.into())?;
        manifest.output(&noisy_dir);
    }
    if !video.flows.is_empty() {
        let (h, w) = (a.height, a.width);
        let mut data = Vec::with_capacity(video.flows.len() * 3 * h * w);
        for f in &video.flows {
            data.extend_from_slice(&f.dx);
            data.extend_from_slice(&f.dy);
            data.extend(f.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }));
        }
        let header = ArrayHeader::new(vec![video.flows.len(), 3, h, w], &["t", "component", "h", "w"])
            .with_description("flow from frame t to t+1: dx, dy, validity");
        let path = a.out.join("flows.bin");
        write_array(&path, &header, &data)?;
        manifest.output(path);
    }
    manifest.write(&a.out)?;
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            require_input(p)?;
            let text = fs::read_to_string(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
            TrainConfig::from_kv_text(&text)?
        }
        None => TrainConfig::desk(),
    };
    if let Some(mode) = a.sigma_mode {
        cfg.noise = match mode {
            SigmaMode::Known => {
                let sigma = a.sigma.or(cfg.noise.sigma).ok_or_else(|| {
                    CliError::Usage("invalid config field `sigma`: known-sigma training needs --sigma".into())
                })?;
                NoiseModel::known(sigma)?
            }
            SigmaMode::Estimate => NoiseModel::estimated(),
            SigmaMode::Unknown => NoiseModel::unknown(),
        };
    } else if let Some(sigma) = a.sigma {
        cfg.noise = NoiseModel::known(sigma)?;
    } else if a.config.is_none() {
        return Err(CliError::Usage(
            "invalid config field `sigma`: give --sigma, --sigma-mode or a config file".into(),
        ));
    }
    if a.sigma.is_some() && cfg.noise.kind != NoiseKind::GaussianKnownSigma {
        return Err(CliError::Usage(
            "invalid config field `sigma`: only meaningful with --sigma-mode known".into(),
        ));
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(list) = &a.augment {
        cfg.augmentations = Augmentation::parse_list(list)?;
    } else if a.single_video {
        cfg.augmentations = Augmentation::ALL.to_vec();
    }
    if let Some(n) = a.early_stop_frames {
        cfg.early_stop_frames = n;
    }
    if let Some(e) = a.epochs {
        if a.config.is_none() {
            // keep the decay points at the same fraction of training
            let d = TrainConfig::default();
            cfg.lr_checkpoints = d.lr_checkpoints.iter().map(|&c| c * e / d.epochs).collect();
            cfg.lr_checkpoints.dedup();
            cfg.lr_checkpoints.retain(|&c| c > 0);
        }
        cfg.epochs = e;
    }
    if let Some(n) = a.steps_per_epoch {
        cfg.steps_per_epoch = Some(n);
    }
    if let Some(p) = a.patch_size {
        cfg.patch_size = p;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.lr0 = lr;
    }
    cfg.validate()?;
    if a.single_video && a.input.len() != 1 {
        return Err(CliError::Usage(format!(
            "--single-video takes exactly one --input, got {}",
            a.input.len()
        )));
    }
    Ok(cfg)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(&a)?;
    for p in &a.input {
        require_input(p)?;
    }
    let videos: Vec<VideoTensor> = a.input.iter().map(|p| load_frames(p)).collect::<udvd::Result<_>>()?;
    let color = ColorMode::from_channels(videos[0].channels())?;
    if videos.iter().any(|v| v.channels() != videos[0].channels()) {
        return Err(CliError::Usage("input videos mix grayscale and color".into()));
    }
    let base = match a.width {
        Width::Desk => NetworkConfig::desk(a.frames, color),
        Width::Full => NetworkConfig::full(a.frames, color),
    };
    let layout = match cfg.noise.kind {
        NoiseKind::Unknown => OutputLayout::MeanOnly,
        _ => OutputLayout::Posterior,
    };
    let net_cfg = base.with_output(layout).with_seed(cfg.seed);
    let net = BlindSpotNetwork::<f32>::new(net_cfg.clone())?;

    let config = json!({
        "train": cfg.to_kv_text(),
        "augment": cfg.augmentations.iter().map(|a| a.name()).collect::<Vec<_>>(),
        "network": serde_json::to_value(&net_cfg).expect("config serialises"),
        "single_video": a.single_video,
    });
    let mut manifest = Manifest::new("train", config, Some(cfg.seed));
    for p in &a.input {
        manifest.input(p)?;
    }
    let mut source: Vec<NoisyVideo> = videos.into_iter().map(NoisyVideo::new).collect();
    let mut outcome = fit(&mut source, net, &cfg)?;
    outcome.model.metadata = format!(
        "frames = {}\ninputs = {}\n",
        a.frames,
        a.input.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")
    );

    create_dir(&a.out)?;
    let ckpt = a.out.join("model.ckpt");
    outcome.model.save(&ckpt)?;
    manifest.output(&ckpt);
    let csv = a.out.join("loss.csv");
    write_loss_csv(&csv, &outcome.trace)?;
    manifest.output(&csv);
    manifest.note("epoch_losses", json!(outcome.epoch_losses));
    manifest.note("validation", json!(outcome.validation));
    manifest.note("best_epoch", json!(outcome.best_epoch));
    manifest.note("stopped_early", json!(outcome.stopped_early));
    manifest.write(&a.out)?;
    Ok(())
}

pub fn denoise(a: DenoiseArgs) -> Result<()> {
    require_input(&a.model)?;
    require_input(&a.input)?;
    if let Some(c) = &a.clean {
        require_input(c)?;
    }
    let config = json!({"fusion": !a.no_fusion, "format": format!("{:?}", a.format)});
    let mut manifest = Manifest::new("denoise", config, None);
    manifest.input(&a.model)?;
    manifest.input(&a.input)?;
    let model = TrainedModel::load(&a.model)?;
    let video = load_frames(&a.input)?;
    let clean = a.clean.as_deref().map(load_frames).transpose()?;
    if let Some(c) = &clean {
        manifest.input(a.clean.as_deref().unwrap())?;
        if (c.len(), c.channels(), c.height(), c.width()) != (video.len(), video.channels(), video.height(), video.width())
        {
            return Err(CliError::Usage("clean reference and noisy input differ in shape".into()));
        }
    }
    let out = denoise_video(&model, &video, !a.no_fusion)?;

    create_dir(&a.out)?;
    let frames_dir = a.out.join("frames");
    save_frames(&out.denoised, &frames_dir, a.format.into())?;
    manifest.output(&frames_dir);
    manifest.note("fused", json!(out.fused));
    manifest.note("sigma", json!(out.sigma));
    if let Some(clean) = clean {
        let mut csv = String::from("frame,psnr_noisy,psnr,ssim_noisy,ssim\n");
        for t in 0..video.len() {
            let (c, n, d) = (clean.frame(t), video.frame(t), out.denoised.frame(t));
            let _ = writeln!(
                csv,
                "{t},{:.4},{:.4},{:.5},{:.5}",
                psnr_planes(c, n, 255.0)?,
                psnr_planes(c, d, 255.0)?,
                ssim(c, n)?,
                ssim(c, d)?
            );
        }
        let (p_noisy, p) = (psnr(&clean, &video, 255.0)?, psnr(&clean, &out.denoised, 255.0)?);
        let (s_noisy, s) = (ssim_video(&clean, &video)?, ssim_video(&clean, &out.denoised)?);
        let _ = writeln!(csv, "all,{p_noisy:.4},{p:.4},{s_noisy:.5},{s:.5}");
        let path = a.out.join("metrics.csv");
        write_text(&path, &csv)?;
        manifest.output(path);
        manifest.note("psnr", json!({"noisy": p_noisy, "denoised": p}));
        manifest.note("ssim", json!({"noisy": s_noisy, "denoised": s}));
    }
    manifest.write(&a.out)?;
    Ok(())
}

struct Loaded {
    model: TrainedModel,
    video: VideoTensor,
    center: usize,
    manifest: Manifest,
}

fn load_for_analysis(c: &AnalyzeCommon, command: &str, config: serde_json::Value) -> Result<Loaded> {
    require_input(&c.model)?;
    require_input(&c.input)?;
    let model = TrainedModel::load(&c.model)?;
    let video = load_frames(&c.input)?;
    let center = c.frame.unwrap_or(video.len() / 2);
    if center >= video.len() {
        return Err(CliError::Usage(format!(
            "frame {center} is past the end of a {}-frame video",
            video.len()
        )));
    }
    let mut manifest = Manifest::new(command, config, None);
    manifest.input(&c.model)?;
    manifest.input(&c.input)?;
    create_dir(&c.out)?;
    Ok(Loaded {
        model,
        video,
        center,
        manifest,
    })
}

fn window_f64(video: &VideoTensor, center: usize, k: usize) -> Vec<PlaneTensor<f64>> {
    video.window(center, k).iter().map(|f| f.cast()).collect()
}

fn check_pixel(video: &VideoTensor, (r, c): (usize, usize)) -> Result<()> {
    if r >= video.height() || c >= video.width() {
        return Err(CliError::Usage(format!(
            "pixel ({r}, {c}) outside {}x{} frames",
            video.height(),
            video.width()
        )));
    }
    Ok(())
}

fn check_analyzable(video: &VideoTensor) -> Result<()> {
    if video.height() % 4 != 0 || video.width() % 4 != 0 {
        return Err(CliError::Usage(format!(
            "analysis needs frame sides divisible by 4, got {}x{}",
            video.height(),
            video.width()
        )));
    }
    Ok(())
}

pub fn analyze(a: AnalyzeArgs) -> Result<()> {
    match a.what {
        AnalyzeCommand::Filters {
            common,
            pixel,
            channel,
            post_fusion,
        } => {
            let config = json!({"pixel": pixel, "channel": channel, "post_fusion": post_fusion, "frame": common.frame});
            let mut l = load_for_analysis(&common, "analyze filters", config)?;
            check_analyzable(&l.video)?;
            check_pixel(&l.video, pixel)?;
            let k = l.model.net.frame_count();
            let target = if post_fusion {
                let sigma = match (l.model.noise.sigma, &l.model.sigma_net) {
                    (Some(s), _) => s,
                    (None, Some(sn)) => estimate_sigma(sn, &l.video.window(l.center, k))?,
                    (None, None) => {
                        return Err(CliError::Usage("post-fusion filters need a Gaussian-noise model".into()))
                    }
                };
                FilterTarget::PostFusion { sigma }
            } else {
                FilterTarget::PreFusion
            };
            let net = l.model.net.cast::<f64>();
            let window = window_f64(&l.video, l.center, k);
            let filter = FilterExtractor::new(&net, &window, target)?.filter(pixel, channel)?;
            let stem = format!("filter_{}_{}", pixel.0, pixel.1);
            for p in write_filter_heatmaps(&filter, &common.out, &stem)? {
                l.manifest.output(p);
            }
            let bin = common.out.join(format!("{stem}.bin"));
            export_filter(&filter, &bin)?;
            l.manifest.output(bin);
            let mut csv = String::from("frame,sum\n");
            for (t, s) in filter.frame_sums().iter().enumerate() {
                let _ = writeln!(csv, "{t},{s:.6}");
            }
            let path = common.out.join(format!("{stem}.csv"));
            write_text(&path, &csv)?;
            l.manifest.output(path);
            l.manifest.note("output", json!(filter.output));
            l.manifest.note("bias", json!(filter.bias));
            l.manifest.note("perturbed", json!(filter.perturbed));
            l.manifest.write(&common.out)?;
        }
        AnalyzeCommand::Flow {
            common,
            grid,
            margin,
            min_support,
            truth,
        } => {
            let config = json!({"grid": grid, "margin": margin, "min_support": min_support, "frame": common.frame});
            if grid == 0 {
                return Err(CliError::Usage("--grid must be positive".into()));
            }
            require_input(&common.model)?;
            let model = TrainedModel::load(&common.model)?;
            if model.net.frame_count() < 3 {
                return Err(CliError::Usage(format!(
                    "flow needs >= 3 frames, model was trained with {}",
                    model.net.frame_count()
                )));
            }
            if let Some(t) = &truth {
                require_input(t)?;
            }
            let mut l = load_for_analysis(&common, "analyze flow", config)?;
            check_analyzable(&l.video)?;
            let k = l.model.net.frame_count();
            let net = l.model.net.cast::<f64>();
            let window = window_f64(&l.video, l.center, k);
            let mask = FlowMask {
                min_support,
                ..FlowMask::default()
            };
            let flow = flow_from_filters(&net, &window, grid, margin, &mask)?;
            let (h, w) = (l.video.height(), l.video.width());
            let grid_pixels: Vec<(usize, usize)> = (margin..h.saturating_sub(margin))
                .step_by(grid)
                .flat_map(|r| (margin..w.saturating_sub(margin)).step_by(grid).map(move |c| (r, c)))
                .collect();
            let mut csv = String::from("row,col,valid,dx,dy\n");
            for &(r, c) in &grid_pixels {
                match flow.get(r, c) {
                    Some((dx, dy)) => {
                        let _ = writeln!(csv, "{r},{c},1,{dx:.4},{dy:.4}");
                    }
                    None => {
                        let _ = writeln!(csv, "{r},{c},0,,");
                    }
                }
            }
            let path = common.out.join("flow.csv");
            write_text(&path, &csv)?;
            l.manifest.output(path);
            let bin = common.out.join("flow.bin");
            export_flow(&flow, &bin)?;
            l.manifest.output(bin);
            let valid = grid_pixels.iter().filter(|&&(r, c)| flow.get(r, c).is_some()).count();
            l.manifest.note("grid_pixels", json!(grid_pixels.len()));
            l.manifest.note("valid_pixels", json!(valid));
            if let Some(t) = truth {
                l.manifest.input(&t)?;
                let epe = endpoint_errors(&t, l.center, &grid_pixels, &flow)?;
                let mut csv = String::from("row,col,epe\n");
                for &(r, c, e) in &epe {
                    let _ = writeln!(csv, "{r},{c},{e:.4}");
                }
                let mean = epe.iter().map(|e| e.2).sum::<f64>() / epe.len().max(1) as f64;
                let _ = writeln!(csv, "mean,,{mean:.4}");
                let path = common.out.join("epe.csv");
                write_text(&path, &csv)?;
                l.manifest.output(path);
                l.manifest.note("mean_epe", json!(mean));
                l.manifest.note("epe_pixels", json!(epe.len()));
            }
            l.manifest.write(&common.out)?;
        }
        AnalyzeCommand::Contributions {
            common,
            pixels,
            bin_width,
            seed,
        } => {
            let config = json!({"pixels": pixels, "bin_width": bin_width, "seed": seed, "frame": common.frame});
            if pixels == 0 {
                return Err(CliError::Usage("--pixels must be positive".into()));
            }
            if !(bin_width > 0.0) {
                return Err(CliError::Usage("--bin-width must be positive".into()));
            }
            let mut l = load_for_analysis(&common, "analyze contributions", config)?;
            check_analyzable(&l.video)?;
            let k = l.model.net.frame_count();
            let net = l.model.net.cast::<f64>();
            let window = window_f64(&l.video, l.center, k);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (l.video.height(), l.video.width());
            let sample: Vec<(usize, usize)> = (0..pixels).map(|_| (rng.gen_range(0..h), rng.gen_range(0..w))).collect();
            let ex = FilterExtractor::new(&net, &window, FilterTarget::PreFusion)?;
            let filters = ex.filters(&sample, 0)?;
            let fc = frame_contributions(&filters, bin_width)?;
            let mut csv = String::from("frame,mean_sum\n");
            for (t, s) in fc.per_frame_mean.iter().enumerate() {
                let _ = writeln!(csv, "{t},{s:.6}");
            }
            let path = common.out.join("contributions.csv");
            write_text(&path, &csv)?;
            l.manifest.output(path);
            let mut csv = String::from("row,col,total\n");
            for (&(r, c), t) in sample.iter().zip(&fc.totals) {
                let _ = writeln!(csv, "{r},{c},{t:.6}");
            }
            let path = common.out.join("totals.csv");
            write_text(&path, &csv)?;
            l.manifest.output(path);
            let mut csv = String::from("bin_center,count\n");
            for (e, n) in fc.histogram.edges.iter().zip(&fc.histogram.counts) {
                let _ = writeln!(csv, "{:.4},{n}", e + 0.5 * bin_width);
            }
            let path = common.out.join("histogram.csv");
            write_text(&path, &csv)?;
            l.manifest.output(path);
            l.manifest.note("mode", json!(fc.mode()));
            l.manifest.note("central_dominates", json!(fc.central_dominates()));
            l.manifest.write(&common.out)?;
        }
    }
    Ok(())
}

fn endpoint_errors(
    path: &PathBuf,
    t: usize,
    pixels: &[(usize, usize)],
    flow: &udvd::data_metrics::FlowField,
) -> Result<Vec<(usize, usize, f64)>> {
    let (header, data) = read_array(path)?;
    let &[n, 3, h, w] = header.shape.as_slice() else {
        return Err(CliError::Usage(format!("{} is not a [T-1, 3, H, W] flow array", path.display())));
    };
    if (h, w) != (flow.height, flow.width) {
        return Err(CliError::Usage("ground-truth flow size differs from the video".into()));
    }
    if t >= n {
        return Err(CliError::Usage(format!("no ground-truth flow leaves frame {t}")));
    }
    let plane = h * w;
    let base = t * 3 * plane;
    Ok(pixels
        .iter()
        .filter_map(|&(r, c)| {
            let i = r * w + c;
            let (gx, gy, ok) = (data[base + i], data[base + plane + i], data[base + 2 * plane + i]);
            let (fx, fy) = flow.get(r, c)?;
            (ok > 0.5).then(|| (r, c, (((fx - gx).powi(2) + (fy - gy).powi(2)) as f64).sqrt()))
        })
        .collect())
}
