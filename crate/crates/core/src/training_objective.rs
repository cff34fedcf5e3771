//! Losses, a spectrally normalized spatio-temporal patch discriminator,
//! and the alternating optimization loop over a synthetic clip stream.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use flowlens_tensor::{Adam, AdamConfig, ConvGeom, Ctx, Graph, Init, ParamStore, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::flow_completion::downsample_flow;
use crate::inference_engine::{complete, online_refs, SamplerConfig};
use crate::layers::lrelu;
use crate::metrics_bench::psnr_video;
use crate::model_assembly::{generator_forward, load_archive, restore_params, save_archive, save_checkpoint, ClipInput, Generator, ModelCache};
use crate::video_masks::{
    generate_fov_mask, synth_video, CameraKind, CameraModel, Direction, FlowFieldSequence, SyntheticSceneSpec, VideoSequence,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_adv: f64,
    pub lambda_flow: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_rec: 1.0, lambda_adv: 0.01, lambda_flow: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_rec", self.lambda_rec), ("lambda_adv", self.lambda_adv), ("lambda_flow", self.lambda_flow)] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Mean absolute difference over all elements.
pub fn reconstruction_loss<'a, T: Scalar>(pred: Var<'a, T>, gt: Var<'a, T>) -> Result<Var<'a, T>> {
    if pred.shape() != gt.shape() {
        return Err(dim_err(format!("reconstruction shapes {:?} vs {:?}", pred.shape(), gt.shape())));
    }
    Ok(pred.l1(gt))
}

/// `−mean(D(fake))`.
pub fn generator_adv_loss<T: Scalar>(fake_logits: Var<'_, T>) -> Var<'_, T> {
    fake_logits.mean().neg()
}

/// `mean(relu(1 − D(real))) + mean(relu(1 + D(fake)))`.
pub fn discriminator_loss<'a, T: Scalar>(real_logits: Var<'a, T>, fake_logits: Var<'a, T>) -> Var<'a, T> {
    let real = real_logits.neg().add_scalar(T::one()).relu().mean();
    let fake = fake_logits.add_scalar(T::one()).relu().mean();
    real + fake
}

/// `(loss_G, loss_D)` of the hinge objective.
pub fn adversarial_losses<'a, T: Scalar>(real_logits: Var<'a, T>, fake_logits: Var<'a, T>) -> (Var<'a, T>, Var<'a, T>) {
    (generator_adv_loss(fake_logits), discriminator_loss(real_logits, fake_logits))
}

pub struct LossComponents<'a, T: Scalar> {
    pub rec: Var<'a, T>,
    pub adv: Option<Var<'a, T>>,
    pub flow: Option<Var<'a, T>>,
}

/// `λ_rec·L_rec + λ_adv·L_adv + λ_flow·L_flow` (absent terms skipped).
pub fn total_loss<'a, T: Scalar>(c: &LossComponents<'a, T>, w: &LossWeights) -> Result<Var<'a, T>> {
    let parts = [("reconstruction", Some(c.rec), w.lambda_rec), ("adversarial", c.adv, w.lambda_adv), ("flow", c.flow, w.lambda_flow)];
    let mut total: Option<Var<'a, T>> = None;
    for (name, v, lambda) in parts {
        let Some(v) = v else { continue };
        let x = v.value().item().to_f64_lossy();
        if !x.is_finite() {
            return Err(Error::TrainingAbort(format!("{name} loss is {x}")));
        }
        let term = v.scale(T::lit(lambda));
        total = Some(match total {
            Some(t) => t + term,
            None => term,
        });
    }
    Ok(total.expect("reconstruction term is always present"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscConfig {
    pub base_channels: usize,
    pub layers: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self { base_channels: 16, layers: 6 }
    }
}

impl DiscConfig {
    fn channels(&self, l: usize) -> usize {
        if l + 1 == self.layers {
            1
        } else {
            self.base_channels << l.min(2)
        }
    }
}

/// Spatio-temporal conv stack producing a field of patch logits.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Scalar> {
    pub config: DiscConfig,
    pub params: ParamStore<T>,
}

const DISC_KERNEL: [usize; 3] = [3, 5, 5];

impl<T: Scalar> Discriminator<T> {
    pub fn new(config: DiscConfig, seed: u64) -> Result<Self> {
        if config.layers == 0 || config.base_channels == 0 {
            return Err(Error::Config("discriminator needs layers and channels".into()));
        }
        let mut params = ParamStore::new(seed);
        let mut cin = 3;
        for l in 0..config.layers {
            let cout = config.channels(l);
            let fan_in = cin * DISC_KERNEL.iter().product::<usize>();
            params.declare(&format!("disc.l{l}.w"), &[cout, cin, 3, 5, 5], Init::KaimingUniform { fan_in });
            params.declare(&format!("disc.l{l}.b"), &[cout], Init::Zeros);
            params.declare_buffer(&format!("disc.l{l}.u"), &[cout], Init::Normal { std: 1.0 });
            cin = cout;
        }
        Ok(Self { config, params })
    }
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

/// `w / σ(w)` with σ from one power iteration on the stored `u`; the new
/// `u` is recorded as a buffer update when `update` is set.
fn spectral_normalized<'a, T: Scalar>(ctx: &Ctx<'a, T>, name: &str, update: bool) -> Var<'a, T> {
    let w = ctx.p(&format!("{name}.w"));
    let shape = w.shape();
    let (rows, cols) = (shape[0], shape[1..].iter().product::<usize>());
    let wv = w.value();
    let wd: Vec<f64> = wv.data().iter().map(|x| x.to_f64_lossy()).collect();
    let u0: Vec<f64> = ctx.store().value(&format!("{name}.u")).data().iter().map(|x| x.to_f64_lossy()).collect();
    let v = normalized((0..cols).map(|j| (0..rows).map(|i| wd[i * cols + j] * u0[i]).sum()).collect());
    let u = normalized((0..rows).map(|i| (0..cols).map(|j| wd[i * cols + j] * v[j]).sum()).collect());
    let g = ctx.graph();
    let to_t = |x: &[f64], s: &[usize]| Tensor::from_vec(s, x.iter().map(|&a| T::lit(a)).collect());
    let sigma = g
        .constant(to_t(&u, &[1, rows]))
        .matmul(w.reshape(&[rows, cols]))
        .matmul(g.constant(to_t(&v, &[cols, 1])))
        .reshape(&[1]);
    if update {
        ctx.update_buffer(&format!("{name}.u"), to_t(&u, &[rows]));
    }
    w.div_scalar_var(sigma)
}

/// Logits `[1, 1, t', h', w']` for frames `[t, 3, h, w]` in `[0, 1]`.
pub fn discriminate<'a, T: Scalar>(ctx: &Ctx<'a, T>, cfg: &DiscConfig, frames: Var<'a, T>, update_sn: bool) -> Var<'a, T> {
    let s = frames.shape();
    let mut x = frames.scale(T::lit(2.0)).add_scalar(-T::one()).permute(&[1, 0, 2, 3]).reshape(&[1, 3, s[0], s[2], s[3]]);
    for l in 0..cfg.layers {
        let name = format!("disc.l{l}");
        let last = l + 1 == cfg.layers;
        let stride = if last { [1, 1, 1] } else { [1, 2, 2] };
        let geom = ConvGeom { kernel: DISC_KERNEL, stride, pad: [1, 2, 2] };
        let w = spectral_normalized(ctx, &name, update_sn);
        x = x.conv3d(w, geom, 1).add_bias(ctx.p(&format!("{name}.b")), 1);
        if !last {
            x = lrelu(x);
        }
    }
    x
}

/// One training window.
#[derive(Clone, Debug)]
pub struct TrainSample<T: Scalar> {
    pub video_id: String,
    /// Ground-truth frames `[local + ref, 3, h, w]`, local first.
    pub frames: Tensor<T>,
    /// `[local + ref, 1, h, w]`.
    pub masks: Tensor<T>,
    /// Video frame index of every slot.
    pub index: Vec<usize>,
    pub local: usize,
    /// Quarter-resolution ground-truth flows between consecutive local
    /// frames, `[local − 1, 2, h/4, w/4]` each way.
    pub flow_fwd: Option<Tensor<T>>,
    pub flow_bwd: Option<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_rec: f64,
    pub l_adv: f64,
    pub l_d: f64,
    pub l_flow: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr_val: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub disc_lr: f64,
    pub weights: LossWeights,
    pub batch: usize,
    pub seed: u64,
    pub log_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 2.5e-5,
            disc_lr: 2.5e-5,
            weights: LossWeights::default(),
            batch: 2,
            seed: 0,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

/// Completed frames of the current video of one batch slot, used as
/// references for later windows.
#[derive(Clone, Debug, Default)]
struct History<T: Scalar> {
    video_id: String,
    frames: BTreeMap<usize, Tensor<T>>,
}

/// Generator, optional discriminator, their optimizers and per-slot
/// stream state.
pub struct Trainer<T: Scalar> {
    pub generator: Generator<T>,
    /// Absent when the adversarial weight is zero.
    pub discriminator: Option<Discriminator<T>>,
    pub weights: LossWeights,
    opt_g: Adam<T>,
    opt_d: Adam<T>,
    caches: Vec<ModelCache<T>>,
    history: Vec<History<T>>,
    step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(generator: Generator<T>, discriminator: Option<Discriminator<T>>, cfg: &TrainConfig) -> Result<Self> {
        cfg.weights.validate()?;
        let discriminator = if cfg.weights.lambda_adv > 0.0 {
            Some(discriminator.ok_or_else(|| Error::Config("adversarial weight set without a discriminator".into()))?)
        } else {
            discriminator
        };
        Ok(Self {
            generator,
            discriminator,
            weights: cfg.weights,
            opt_g: Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() }),
            opt_d: Adam::new(AdamConfig { lr: cfg.disc_lr, ..Default::default() }),
            caches: Vec::new(),
            history: Vec::new(),
            step: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Replaces reference slots already completed for this video with the
    /// completed frame and a clear mask.
    fn assemble(&mut self, slot: usize, s: &TrainSample<T>) -> Result<ClipInput<T>> {
        let hist = &mut self.history[slot];
        if hist.video_id != s.video_id {
            *hist = History { video_id: s.video_id.clone(), frames: BTreeMap::new() };
        }
        let mut frames = s.frames.clone();
        let mut masks = s.masks.clone();
        let (h, w) = (frames.dim(2), frames.dim(3));
        let (hw, hw3) = (h * w, 3 * h * w);
        for k in s.local..s.index.len() {
            if let Some(f) = hist.frames.get(&s.index[k]) {
                frames.data_mut()[k * hw3..(k + 1) * hw3].copy_from_slice(f.data());
                masks.data_mut()[k * hw..(k + 1) * hw].iter_mut().for_each(|v| *v = T::zero());
            }
        }
        ClipInput::new(frames, masks, s.local)
    }

    /// Discriminator update on detached fakes, then one generator update.
    pub fn train_step(&mut self, batch: &[TrainSample<T>]) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if self.caches.len() < batch.len() {
            self.caches.resize(batch.len(), ModelCache::new());
            self.history.resize(batch.len(), History::default());
        }
        let clips = batch.iter().enumerate().map(|(i, s)| self.assemble(i, s)).collect::<Result<Vec<_>>>()?;
        let cfg = self.generator.config.clone();
        let w = self.weights;
        let inv_b = T::one() / T::from_usize_lossy(batch.len());
        let use_flow = w.lambda_flow > 0.0 && !cfg.flow.frozen;

        let g = Graph::new();
        let gctx = Ctx::new(&g, &self.generator.params);
        let mut rec_terms = Vec::new();
        let mut flow_terms = Vec::new();
        let mut fakes = Vec::new();
        let mut targets = Vec::new();
        for (i, (s, clip)) in batch.iter().zip(&clips).enumerate() {
            let out = generator_forward(&gctx, &cfg, clip, &mut self.caches[i], &s.video_id)?;
            let target = g.constant(s.frames.narrow(0, 0, s.local));
            rec_terms.push(reconstruction_loss(out.composited, target)?);
            if use_flow {
                if let (Some(pf), Some(pb), Some(gf), Some(gb)) = (out.flows_fwd, out.flows_bwd, &s.flow_fwd, &s.flow_bwd) {
                    let lf = crate::flow_completion::flow_loss(pf, g.constant(gf.clone()))?;
                    let lb = crate::flow_completion::flow_loss(pb, g.constant(gb.clone()))?;
                    flow_terms.push((lf + lb).scale(T::lit(0.5)));
                }
            }
            let done = out.composited.value();
            let (h, wd) = (done.dim(2), done.dim(3));
            let hist = &mut self.history[i];
            for (k, &t) in s.index[..s.local].iter().enumerate() {
                hist.frames.insert(t, done.narrow(0, k, 1).into_reshape(&[3, h, wd]));
            }
            fakes.push(out.composited);
            targets.push(target);
        }
        let rec = mean_of(inv_b, &rec_terms).expect("non-empty batch");
        let flow = mean_of(inv_b, &flow_terms);

        let mut l_d = 0.0;
        let mut adv = None;
        if let (Some(disc), true) = (self.discriminator.as_mut(), w.lambda_adv > 0.0) {
            let dg = Graph::new();
            let (grads, updates) = {
                let dctx = Ctx::new(&dg, &disc.params);
                let mut terms = Vec::new();
                for (fake, real) in fakes.iter().zip(&targets) {
                    let real = discriminate(&dctx, &disc.config, dg.constant((*real.value()).clone()), true);
                    let fake = discriminate(&dctx, &disc.config, dg.constant((*fake.value()).clone()), true);
                    terms.push(discriminator_loss(real, fake));
                }
                let loss = terms.into_iter().reduce(|a, b| a + b).expect("non-empty").scale(inv_b);
                l_d = loss.value().item().to_f64_lossy();
                if !l_d.is_finite() {
                    return Err(Error::TrainingAbort(format!("discriminator loss is {l_d} at step {}", self.step)));
                }
                let gr = dg.backward(loss);
                (dctx.grads(&gr), dctx.take_updates())
            };
            self.opt_d.step(&mut disc.params, &grads);
            for (name, value) in updates {
                disc.params.insert(&name, value, false);
            }
            let dctx = Ctx::new(&g, &disc.params);
            let terms: Vec<_> = fakes.iter().map(|f| generator_adv_loss(discriminate(&dctx, &disc.config, *f, false))).collect();
            adv = mean_of(inv_b, &terms);
        }

        let comps = LossComponents { rec, adv, flow };
        let total = total_loss(&comps, &w).map_err(|e| match e {
            Error::TrainingAbort(m) => Error::TrainingAbort(format!("{m} at step {}", self.step)),
            other => other,
        })?;
        let grads = gctx.grads(&g.backward(total));
        let val = |v: Option<Var<'_, T>>| v.map_or(0.0, |x| x.value().item().to_f64_lossy());
        let metrics = StepMetrics {
            step: self.step + 1,
            l_rec: val(Some(rec)),
            l_adv: val(adv),
            l_d,
            l_flow: val(flow),
            total: val(Some(total)),
            psnr_val: None,
        };
        drop(gctx);
        self.opt_g.step(&mut self.generator.params, &grads);
        self.step += 1;
        Ok(metrics)
    }
}

fn mean_of<'a, T: Scalar>(inv_b: T, v: &[Var<'a, T>]) -> Option<Var<'a, T>> {
    v.iter().copied().reduce(|a, b| a + b).map(|s| s.scale(inv_b))
}

/// Synthetic training data: random moving-sprite videos cut into
/// consecutive online windows with past references.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub height: usize,
    pub width: usize,
    /// Windows per video.
    pub windows_per_video: usize,
    pub sprites: usize,
    pub max_speed: f64,
    pub rates: Vec<f64>,
    pub directions: Vec<Direction>,
    pub camera: CameraKind,
    /// Draw a different mask for every frame instead of one per video.
    pub random_masks: bool,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            height: 48,
            width: 48,
            windows_per_video: 4,
            sprites: 3,
            max_speed: 2.0,
            rates: vec![0.05, 0.1, 0.2],
            directions: vec![Direction::Outer, Direction::Inner],
            camera: CameraKind::PinholeFtan,
            random_masks: false,
        }
    }
}

/// A synthetic video with its ground-truth flows.
pub struct SyntheticVideo<T: Scalar> {
    pub video: VideoSequence<T>,
    pub flows: FlowFieldSequence<T>,
}

/// Renders video `k` of the stream seeded with `seed` (full frames, mask
/// drawn from the spec).
pub fn synthetic_video<T: Scalar>(spec: &StreamSpec, frames: usize, seed: u64, k: u64) -> Result<SyntheticVideo<T>> {
    let vseed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k);
    let scene = SyntheticSceneSpec::random(vseed, spec.height, spec.width, frames, spec.sprites, spec.max_speed);
    let (video, flows) = synth_video::<T>(&scene)?;
    let mut rng = ChaCha8Rng::seed_from_u64(vseed ^ 0xa5a5);
    let camera = CameraModel::default_for(spec.camera, spec.height, spec.width);
    let rate = spec.rates[rng.random_range(0..spec.rates.len())];
    let dir = spec.directions[rng.random_range(0..spec.directions.len())];
    let mask = generate_fov_mask(&camera, rate, dir, (spec.height, spec.width))?;
    let mut video = video.with_mask(mask)?;
    video.camera = camera;
    video.id = format!("synth-{seed}-{k}");
    Ok(SyntheticVideo { video, flows })
}

pub struct SyntheticStream<T: Scalar> {
    pub spec: StreamSpec,
    local: usize,
    refs: usize,
    seed: u64,
    rng: ChaCha8Rng,
    videos: u64,
    current: Option<SyntheticVideo<T>>,
    window: usize,
}

impl<T: Scalar> SyntheticStream<T> {
    pub fn new(spec: StreamSpec, local: usize, refs: usize, seed: u64) -> Result<Self> {
        if spec.rates.is_empty() || spec.directions.is_empty() || spec.windows_per_video == 0 {
            return Err(Error::Config("stream needs rates, directions and at least one window per video".into()));
        }
        if spec.height % 4 != 0 || spec.width % 4 != 0 {
            return Err(dim_err("stream frame size must be divisible by 4"));
        }
        Ok(Self { spec, local, refs, seed, rng: ChaCha8Rng::seed_from_u64(seed), videos: 0, current: None, window: 0 })
    }

    fn masks_for(&mut self, video: &VideoSequence<T>, index: &[usize]) -> Result<Tensor<T>> {
        let (h, w) = (video.height(), video.width());
        let mut out = Tensor::zeros(&[index.len(), 1, h, w]);
        for (k, _) in index.iter().enumerate() {
            let mask = if self.spec.random_masks {
                let rate = self.spec.rates[self.rng.random_range(0..self.spec.rates.len())];
                let dir = self.spec.directions[self.rng.random_range(0..self.spec.directions.len())];
                generate_fov_mask(&video.camera, rate, dir, (h, w))?
            } else {
                video.mask.clone()
            };
            out.data_mut()[k * h * w..(k + 1) * h * w].copy_from_slice(mask.to_tensor::<T>().data());
        }
        Ok(out)
    }

    pub fn next_sample(&mut self) -> Result<TrainSample<T>> {
        if self.current.is_none() || self.window >= self.spec.windows_per_video {
            let len = self.local * self.spec.windows_per_video;
            self.current = Some(synthetic_video(&self.spec, len, self.seed, self.videos)?);
            self.videos += 1;
            self.window = 0;
        }
        let cur = self.current.take().expect("video present");
        let start = self.window * self.local;
        let mut index: Vec<usize> = (start..start + self.local).collect();
        index.extend(online_refs(start, self.local, self.refs));
        let frames: Vec<Tensor<T>> = index.iter().map(|&t| cur.video.frame(t)).collect();
        let (h, w) = (cur.video.height(), cur.video.width());
        let frames = Tensor::concat(&frames.iter().collect::<Vec<_>>(), 0).into_reshape(&[index.len(), 3, h, w]);
        let masks = self.masks_for(&cur.video, &index)?;
        let flows = |list: &[Tensor<T>]| -> Result<Option<Tensor<T>>> {
            if self.local < 2 {
                return Ok(None);
            }
            let parts = (start..start + self.local - 1).map(|t| downsample_flow(&list[t], 4)).collect::<Result<Vec<_>>>()?;
            let s = parts[0].shape().to_vec();
            Ok(Some(Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0).into_reshape(&[parts.len(), s[0], s[1], s[2]])))
        };
        let sample = TrainSample {
            video_id: cur.video.id.clone(),
            frames,
            masks,
            index,
            local: self.local,
            flow_fwd: flows(&cur.flows.forward)?,
            flow_bwd: flows(&cur.flows.backward)?,
        };
        self.window += 1;
        self.current = Some(cur);
        Ok(sample)
    }
}

/// Mean online PSNR of `model` over `videos`.
pub fn validation_psnr<T: Scalar>(model: &Generator<T>, videos: &[VideoSequence<T>]) -> Result<f64> {
    let sampler = SamplerConfig::for_model(model, crate::inference_engine::Mode::Online);
    let mut acc = 0.0;
    for v in videos {
        let done = complete(model, v, &sampler)?;
        acc += psnr_video(&done.frames, &v.frames, None)?;
    }
    Ok(acc / videos.len().max(1) as f64)
}

/// Where the training loop writes its records and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub metrics_log: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

fn append_record(path: &Path, m: &StepMetrics) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(m).expect("metrics serialize");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn save_discriminator<T: Scalar>(d: &Discriminator<T>, path: &Path) -> Result<()> {
    save_archive(&toml::to_string(&d.config).expect("disc config serializes"), &d.params, path)
}

pub fn load_discriminator<T: Scalar>(path: &Path) -> Result<Discriminator<T>> {
    let (header, params) = load_archive(path)?;
    let cfg: DiscConfig = toml::from_str(&header).map_err(|e| Error::format(path, e.to_string()))?;
    let mut d = Discriminator::new(cfg, params.seed())?;
    restore_params(&mut d.params, params, path)?;
    Ok(d)
}

/// Runs `cfg.steps` steps; every `log_every` steps the record (with
/// validation PSNR when `val` is non-empty) is appended to the log.
pub fn train_loop<T: Scalar>(
    trainer: &mut Trainer<T>,
    stream: &mut SyntheticStream<T>,
    cfg: &TrainConfig,
    val: &[VideoSequence<T>],
    outputs: &TrainOutputs,
    on_record: &mut dyn FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    let mut history = Vec::with_capacity(cfg.steps as usize);
    for _ in 0..cfg.steps {
        let batch = (0..cfg.batch.max(1)).map(|_| stream.next_sample()).collect::<Result<Vec<_>>>()?;
        let mut m = trainer.train_step(&batch)?;
        let done = trainer.steps();
        if cfg.log_every > 0 && (done % cfg.log_every == 0 || done == cfg.steps) {
            if !val.is_empty() {
                m.psnr_val = Some(validation_psnr(&trainer.generator, val)?);
            }
            if let Some(p) = &outputs.metrics_log {
                append_record(p, &m)?;
            }
            on_record(&m);
        }
        if let (Some(dir), true) = (&outputs.checkpoint_dir, cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            save_checkpoint(&trainer.generator, &dir.join(format!("generator_{done:06}.ckpt")))?;
            if let Some(d) = &trainer.discriminator {
                save_discriminator(d, &dir.join(format!("discriminator_{done:06}.ckpt")))?;
            }
        }
        history.push(m);
    }
    Ok(history)
}
