use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use flowlens::flow_completion::{flow_to_rgb, read_flow, write_flow};
use flowlens::inference_engine::{complete_with_report, Mode, SamplerConfig};
use flowlens::metrics_bench::{run_benchmark, BenchConfig, BenchVideo};
use flowlens::model_assembly::{count_flops, load_checkpoint, save_checkpoint, Generator, ModelConfig};
use flowlens::training_objective::{
    load_discriminator, synthetic_video, train_loop, DiscConfig, Discriminator, LossWeights, StreamSpec, SyntheticStream,
    TrainConfig, TrainOutputs, Trainer,
};
use flowlens::video_masks::{
    generate_fov_mask, load_mask, load_video, save_mask, save_video, synth_video, CameraKind, CameraModel, Direction, SyntheticSceneSpec,
};
use flowlens_tensor::Tensor;

#[derive(Parser)]
#[command(name = "flowlens", version, about = "Video field-of-view expansion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Camera {
    Pinhole,
    Fisheye,
}

impl From<Camera> for CameraKind {
    fn from(c: Camera) -> Self {
        match c {
            Camera::Pinhole => CameraKind::PinholeFtan,
            Camera::Fisheye => CameraKind::SphericalFtheta,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Dir {
    Outer,
    Inner,
}

impl From<Dir> for Direction {
    fn from(d: Dir) -> Self {
        match d {
            Dir::Outer => Direction::Outer,
            Dir::Inner => Direction::Inner,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RunMode {
    Online,
    Offline,
}

#[derive(clap::Args)]
struct CameraArgs {
    #[arg(long, value_enum, default_value = "pinhole")]
    camera: Camera,
    /// Field angle of the image corners in degrees (camera default if absent).
    #[arg(long)]
    theta_max: Option<f64>,
}

impl CameraArgs {
    fn model(&self, h: usize, w: usize) -> Result<CameraModel> {
        let kind = self.camera.into();
        Ok(match self.theta_max {
            Some(deg) => CameraModel::fitted(kind, h, w, deg.to_radians())?,
            None => CameraModel::default_for(kind, h, w),
        })
    }
}

#[derive(clap::Args)]
struct ModelArgs {
    /// Built-in preset: standard, small, tiny or micro.
    #[arg(long, default_value = "tiny")]
    preset: String,
    /// Model config file (TOML); its keys override the preset.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ModelArgs {
    fn config(&self) -> Result<ModelConfig> {
        let base = ModelConfig::preset(&self.preset)?;
        Ok(match &self.config {
            Some(p) => ModelConfig::load_over(&base, p)?,
            None => base,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a field-of-view mask image.
    Mask {
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        /// Fraction of the field angle to remove, e.g. 0.1.
        #[arg(long)]
        rate: f64,
        #[arg(long, value_enum, default_value = "outer")]
        direction: Dir,
        #[command(flatten)]
        camera: CameraArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Render a synthetic video directory with ground-truth flows.
    Synth {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 3)]
        sprites: usize,
        #[arg(long, default_value_t = 2.0)]
        max_speed: f64,
        #[arg(long, default_value_t = 0.1)]
        rate: f64,
        #[arg(long, value_enum, default_value = "outer")]
        direction: Dir,
        #[command(flatten)]
        camera: CameraArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a generator on the synthetic stream.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        /// Output directory for checkpoints and the metrics log.
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        steps: u64,
        #[arg(long, default_value_t = 2.5e-5)]
        lr: f64,
        #[arg(long, default_value_t = 2.5e-5)]
        disc_lr: f64,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 1.0)]
        lambda_rec: f64,
        #[arg(long, default_value_t = 0.01)]
        lambda_adv: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda_flow: f64,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        log_every: u64,
        #[arg(long, default_value_t = 500)]
        checkpoint_every: u64,
        /// Held-out synthetic videos scored at every log step.
        #[arg(long, default_value_t = 2)]
        val_videos: usize,
        /// Continue from a generator checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Continue from a discriminator checkpoint.
        #[arg(long)]
        resume_disc: Option<PathBuf>,
    },
    /// Complete a video directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "online")]
        mode: RunMode,
        /// Local frames per window (model default if absent).
        #[arg(long)]
        window: Option<usize>,
        /// Reference stride for offline mode.
        #[arg(long, default_value_t = 10)]
        ref_stride: usize,
        /// Average predictions over horizontal and vertical flips.
        #[arg(long)]
        flip: bool,
        /// Replace the stored mask with one generated at this rate.
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long, value_enum)]
        direction: Option<Dir>,
        /// Mask image overriding the one stored with the video.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Write warped-feature visualizations into this directory.
        #[arg(long)]
        dump_warped: Option<PathBuf>,
    },
    /// Score a checkpoint over mask rates.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Video directories; synthetic videos are generated when empty.
        #[arg(long, num_args = 1..)]
        data: Vec<PathBuf>,
        /// Number of synthetic videos when no data is given.
        #[arg(long, default_value_t = 4)]
        synthetic: usize,
        #[arg(long, default_value_t = 24)]
        frames: usize,
        #[arg(long, default_value_t = 1000)]
        seed: u64,
        /// Comma-separated rates in percent.
        #[arg(long, value_delimiter = ',', default_value = "5,10,20")]
        rates: Vec<f64>,
        #[arg(long, value_enum, default_value = "outer")]
        direction: Dir,
        /// Restrict PSNR/SSIM to the filled region.
        #[arg(long)]
        mask_only: bool,
        #[arg(long, value_enum, default_value = "online")]
        mode: RunMode,
        #[arg(long, default_value_t = 10)]
        ref_stride: usize,
        #[arg(long)]
        flip: bool,
        /// Line-delimited JSON output path.
        #[arg(long)]
        jsonl: Option<PathBuf>,
    },
    /// Render a flow file as a color image.
    FlowVis {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// Magnitude mapped to full saturation (maximum of the field if absent).
        #[arg(long)]
        max_mag: Option<f64>,
    },
    /// Print the analytic cost of one forward pass.
    Flops {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 240)]
        height: usize,
        #[arg(long, default_value_t = 432)]
        width: usize,
    },
    /// Print a model config file.
    Config {
        #[command(flatten)]
        model: ModelArgs,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Mask { height, width, rate, direction, camera, out } => {
            let cam = camera.model(height, width)?;
            let mask = generate_fov_mask(&cam, rate, direction.into(), (height, width))?;
            save_mask(&mask, &out)?;
            println!("{} of {} pixels masked", mask.count(), height * width);
        }
        Command::Synth { out, frames, height, width, sprites, max_speed, rate, direction, camera, seed } => {
            let scene = SyntheticSceneSpec::random(seed, height, width, frames, sprites, max_speed);
            let (video, flows) = synth_video::<f32>(&scene)?;
            let cam = camera.model(height, width)?;
            let mask = generate_fov_mask(&cam, rate, direction.into(), (height, width))?;
            let mut video = video.with_mask(mask)?;
            video.camera = cam;
            video.id = format!("synth-{seed}");
            save_video(&video, &out)?;
            let flow_dir = out.join("flows");
            fs::create_dir_all(&flow_dir)?;
            for (t, (f, b)) in flows.forward.iter().zip(&flows.backward).enumerate() {
                write_flow(f, &flow_dir.join(format!("fwd_{t:05}.flo")))?;
                write_flow(b, &flow_dir.join(format!("bwd_{t:05}.flo")))?;
            }
            println!("wrote {frames} frames to {}", out.display());
        }
        Command::Train {
            model,
            out,
            steps,
            lr,
            disc_lr,
            batch,
            lambda_rec,
            lambda_adv,
            lambda_flow,
            height,
            width,
            seed,
            log_every,
            checkpoint_every,
            val_videos,
            resume,
            resume_disc,
        } => {
            fs::create_dir_all(&out)?;
            let generator = match &resume {
                Some(p) => load_checkpoint::<f32>(p)?,
                None => Generator::new(model.config()?, seed)?,
            };
            let cfg = generator.config.clone();
            let weights = LossWeights { lambda_rec, lambda_adv, lambda_flow };
            let tc = TrainConfig { steps, lr, disc_lr, weights, batch, seed, log_every, checkpoint_every };
            let disc = match (&resume_disc, lambda_adv > 0.0) {
                (Some(p), _) => Some(load_discriminator(p)?),
                (None, true) => Some(Discriminator::new(DiscConfig::default(), seed ^ 0xd15c)?),
                (None, false) => None,
            };
            let spec = StreamSpec { height, width, ..Default::default() };
            let val_len = cfg.local_frames * 3;
            let val = (0..val_videos as u64)
                .map(|k| Ok(synthetic_video::<f32>(&spec, val_len, seed.wrapping_add(1_000_003), k)?.video))
                .collect::<Result<Vec<_>>>()?;
            let mut stream = SyntheticStream::new(spec, cfg.local_frames, cfg.ref_frames, seed)?;
            let mut trainer = Trainer::new(generator, disc, &tc)?;
            let outputs = TrainOutputs { metrics_log: Some(out.join("metrics.jsonl")), checkpoint_dir: Some(out.clone()) };
            train_loop(&mut trainer, &mut stream, &tc, &val, &outputs, &mut |m| {
                let val = m.psnr_val.map_or(String::new(), |p| format!(" val_psnr {p:.2}"));
                println!("step {:>6} total {:.4} rec {:.4} adv {:.4} d {:.4} flow {:.4}{val}", m.step, m.total, m.l_rec, m.l_adv, m.l_d, m.l_flow);
            })?;
            save_checkpoint(&trainer.generator, &out.join("generator.ckpt"))?;
            if let Some(d) = &trainer.discriminator {
                flowlens::training_objective::save_discriminator(d, &out.join("discriminator.ckpt"))?;
            }
            println!("saved {}", out.join("generator.ckpt").display());
        }
        Command::Infer { checkpoint, input, output, mode, window, ref_stride, flip, rate, direction, mask, dump_warped } => {
            let model = load_checkpoint::<f32>(&checkpoint)?;
            let mut video = load_video::<f32>(&input)?;
            let (h, w) = (video.height(), video.width());
            if let Some(p) = &mask {
                let m = load_mask(p, direction.map_or(video.mask.direction, Into::into), rate.unwrap_or(video.mask.rate))?;
                video = video.with_mask(m)?;
            } else if rate.is_some() || direction.is_some() {
                let m = generate_fov_mask(
                    &video.camera,
                    rate.unwrap_or(video.mask.rate),
                    direction.map_or(video.mask.direction, Into::into),
                    (h, w),
                )?;
                video = video.with_mask(m)?;
            }
            let mut sampler = sampler_for(&model, mode, ref_stride, flip);
            if let Some(n) = window {
                sampler.window = n;
            }
            sampler.dump_warped = dump_warped.is_some();
            let (done, report) = complete_with_report(&model, &video, &sampler)?;
            save_video(&done, &output)?;
            if let Some(dir) = &dump_warped {
                fs::create_dir_all(dir)?;
                for (i, win) in report.windows.iter().enumerate() {
                    for (j, f) in win.warped.iter().enumerate() {
                        save_feature_image(f, &dir.join(format!("window_{i:04}_warp_{j:02}.png")))?;
                    }
                }
            }
            println!("frames {}  total {:.3} s  runtime {:.4} s/frame", report.frames, report.seconds, report.seconds_per_frame());
        }
        Command::Eval { checkpoint, data, synthetic, frames, seed, rates, direction, mask_only, mode, ref_stride, flip, jsonl } => {
            let model = load_checkpoint::<f32>(&checkpoint)?;
            let dataset = if data.is_empty() {
                let spec = StreamSpec { height: 64, width: 64, ..Default::default() };
                (0..synthetic as u64)
                    .map(|k| {
                        let v = synthetic_video::<f32>(&spec, frames, seed, k)?;
                        Ok(BenchVideo { video: v.video, flows: Some(v.flows) })
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                data.iter().map(|d| Ok(BenchVideo { video: load_video(d)?, flows: None })).collect::<Result<Vec<_>>>()?
            };
            for r in &rates {
                if !(0.0..100.0).contains(r) {
                    bail!("rate {r} is not a percentage in [0, 100)");
                }
            }
            let cfg = BenchConfig {
                rates: rates.iter().map(|r| r / 100.0).collect(),
                direction: direction.into(),
                sampler: sampler_for(&model, mode, ref_stride, flip),
                mask_only,
            };
            let report = run_benchmark(&model, &dataset, &cfg, None)?;
            print!("{}", report.to_table());
            if let Some(p) = jsonl {
                fs::write(&p, report.to_jsonl()).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::FlowVis { input, output, max_mag } => {
            let flow = read_flow::<f32>(&input)?;
            let (h, w) = (flow.dim(1), flow.dim(2));
            let rgb = flow_to_rgb(&flow, max_mag);
            let img = image::RgbImage::from_raw(w as u32, h as u32, rgb).context("flow image buffer size")?;
            img.save(&output).with_context(|| format!("writing {}", output.display()))?;
        }
        Command::Flops { model, height, width } => {
            let r = count_flops(&model.config()?, height, width)?;
            let g = |x: f64| x / 1e9;
            println!("stem         {:>10.3} GFLOPs", g(r.stem));
            println!("flow         {:>10.3} GFLOPs", g(r.flow));
            println!("propagation  {:>10.3} GFLOPs", g(r.propagation));
            println!("embedding    {:>10.3} GFLOPs", g(r.embedding));
            println!("blocks       {:>10.3} GFLOPs", g(r.blocks));
            println!("hub          {:>10.3} GFLOPs", g(r.hub));
            println!("decoder      {:>10.3} GFLOPs", g(r.decoder));
            println!("total        {:>10.3} GFLOPs  (hub share {:.2}%)", g(r.total()), 100.0 * r.hub_share());
        }
        Command::Config { model } => print!("{}", model.config()?.to_toml()),
    }
    Ok(())
}

fn sampler_for(model: &Generator<f32>, mode: RunMode, ref_stride: usize, flip: bool) -> SamplerConfig {
    let mut s = match mode {
        RunMode::Online => SamplerConfig::for_model(model, Mode::Online),
        RunMode::Offline => SamplerConfig::offline(model.config.local_frames, ref_stride),
    };
    s.flip_augment = flip;
    s
}

/// Mean absolute activation over channels, scaled to the plane maximum.
fn save_feature_image(f: &Tensor<f32>, path: &Path) -> Result<()> {
    let s = f.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = f.len() / (h * w);
    let mut acc = vec![0f32; h * w];
    for (i, v) in f.data().iter().enumerate() {
        acc[i % (h * w)] += v.abs() / planes as f32;
    }
    let peak = acc.iter().copied().fold(0f32, f32::max).max(1e-12);
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(acc[y as usize * w + x as usize] / peak * 255.0).round() as u8])
    });
    img.save(path).with_context(|| format!("writing {}", path.display()))
}
