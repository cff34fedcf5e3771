//! Window planning and the two completion protocols: online streaming
//! (past-only references, hub cache carried across windows) and offline
//! completion (overlapping windows, references from the whole video).

use std::collections::BTreeMap;
use std::str::FromStr;
use std::time::Instant;

use flowlens_tensor::{Ctx, Graph, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_assembly::{generator_forward, ClipInput, Generator, ModelCache};
use crate::video_masks::{FovMask, VideoSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Online,
    Offline,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "online" => Ok(Mode::Online),
            "offline" => Ok(Mode::Offline),
            other => Err(Error::InvalidInput(format!("unknown mode {other:?} (online|offline)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub mode: Mode,
    pub window: usize,
    /// Past references per online window.
    pub ref_frames: usize,
    /// Offline reference spacing over the whole video.
    pub ref_stride: usize,
    /// Average the horizontal, vertical and double flips with the plain pass.
    pub flip_augment: bool,
    /// Keep the warped propagation features of each window.
    #[serde(default)]
    pub dump_warped: bool,
}

impl SamplerConfig {
    pub fn online(window: usize, ref_frames: usize) -> Self {
        Self { mode: Mode::Online, window, ref_frames, ref_stride: 10, flip_augment: false, dump_warped: false }
    }

    pub fn offline(window: usize, ref_stride: usize) -> Self {
        Self { mode: Mode::Offline, window, ref_frames: 0, ref_stride, flip_augment: false, dump_warped: false }
    }

    /// Defaults of `mode` for a model: online windows match its local
    /// frame count; offline windows are 10 frames.
    pub fn for_model<T: Scalar>(model: &Generator<T>, mode: Mode) -> Self {
        match mode {
            Mode::Online => Self::online(model.config.local_frames, model.config.ref_frames),
            Mode::Offline => Self::offline(10, 10),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || (self.mode == Mode::Offline && self.ref_stride == 0) {
            return Err(Error::Config("window and ref_stride must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub local: Vec<usize>,
    pub refs: Vec<usize>,
}

/// Online references for a window starting at `start`: offsets of
/// `window·2^k` back, clipped at 0; the first window repeats its own first
/// frame.
pub fn online_refs(start: usize, window: usize, count: usize) -> Vec<usize> {
    (0..count).map(|k| if start == 0 { 0 } else { start.saturating_sub(window << k) }).collect()
}

pub fn plan_windows(t: usize, cfg: &SamplerConfig) -> Vec<Window> {
    let w = cfg.window.max(1);
    let mut out = Vec::new();
    match cfg.mode {
        Mode::Online => {
            let mut s = 0;
            while s < t {
                out.push(Window { local: (s..(s + w).min(t)).collect(), refs: online_refs(s, w, cfg.ref_frames) });
                s += w;
            }
        }
        Mode::Offline => {
            let refs: Vec<usize> = (0..t).step_by(cfg.ref_stride.max(1)).collect();
            let stride = (w / 2).max(1);
            let mut s = 0;
            loop {
                let end = (s + w).min(t);
                out.push(Window { local: (s..end).collect(), refs: refs.clone() });
                if end >= t {
                    break;
                }
                s += stride;
            }
        }
    }
    out
}

/// Where an online stream pulls its frames from.
pub trait FrameSource<T: Scalar> {
    fn id(&self) -> &str;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// `(height, width)`.
    fn size(&self) -> (usize, usize);
    /// `[3, h, w]` frame `t` in `[0, 1]`.
    fn frame(&self, t: usize) -> Tensor<T>;
    fn mask(&self, t: usize) -> FovMask;
}

impl<T: Scalar> FrameSource<T> for VideoSequence<T> {
    fn id(&self) -> &str {
        &self.id
    }
    fn len(&self) -> usize {
        VideoSequence::len(self)
    }
    fn size(&self) -> (usize, usize) {
        (self.height(), self.width())
    }
    fn frame(&self, t: usize) -> Tensor<T> {
        VideoSequence::frame(self, t)
    }
    fn mask(&self, _t: usize) -> FovMask {
        self.mask.clone()
    }
}

/// Flip variants: plain, horizontal, vertical, both.
const FLIPS: [(bool, bool); 4] = [(false, false), (true, false), (false, true), (true, true)];

fn flip<T: Scalar>(x: &Tensor<T>, (hf, vf): (bool, bool)) -> Tensor<T> {
    let mut y = x.clone();
    if hf {
        y = y.flip(3);
    }
    if vf {
        y = y.flip(2);
    }
    y
}

/// Hub caches of one stream, one set per flip variant.
#[derive(Clone, Debug, Default)]
pub struct StreamSession<T: Scalar> {
    pub caches: Vec<ModelCache<T>>,
}

impl<T: Scalar> StreamSession<T> {
    pub fn new() -> Self {
        Self { caches: Vec::new() }
    }

    pub fn reset(&mut self, variants: usize) {
        self.caches = vec![ModelCache::new(); variants];
    }
}

/// Instrumentation of one window.
#[derive(Clone, Debug, Default)]
pub struct WindowTrace<T: Scalar> {
    pub local: Vec<usize>,
    pub refs: Vec<usize>,
    /// Every source frame index read while processing this window.
    pub reads: Vec<usize>,
    /// Keys each hub queried (plain variant).
    pub queried_keys: BTreeMap<usize, Tensor<T>>,
    /// Hub cache keys after the window (plain variant).
    pub cached_keys: BTreeMap<usize, Tensor<T>>,
    pub warped: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct StreamReport<T: Scalar> {
    pub windows: Vec<WindowTrace<T>>,
    pub frames: usize,
    pub seconds: f64,
}

impl<T: Scalar> StreamReport<T> {
    pub fn seconds_per_frame(&self) -> f64 {
        self.seconds / self.frames.max(1) as f64
    }
}

fn mask_plane<T: Scalar>(mask: &FovMask) -> Tensor<T> {
    mask.to_tensor::<T>().into_reshape(&[1, mask.height, mask.width])
}

/// `pred` under the mask, `input` elsewhere; `[n, 3, h, w]` and `[h, w]` grid.
fn composite<T: Scalar>(pred: &Tensor<T>, input: &Tensor<T>, mask: &FovMask) -> Tensor<T> {
    let hw = mask.height * mask.width;
    let grid = mask.grid();
    let mut out = input.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if grid[i % hw] == 1 {
            *v = pred.data()[i];
        }
    }
    out
}

/// One frame slot of a generator clip.
struct Slot<T: Scalar> {
    frame: Tensor<T>,
    mask: Tensor<T>,
}

/// Runs all configured flip variants on one clip and averages the raw
/// predictions of the local frames.
fn predict<T: Scalar>(
    model: &Generator<T>,
    slots: &[Slot<T>],
    local: usize,
    caches: &mut [ModelCache<T>],
    video_id: &str,
    trace: Option<&mut WindowTrace<T>>,
) -> Result<Tensor<T>> {
    let frames: Vec<&Tensor<T>> = slots.iter().map(|s| &s.frame).collect();
    let masks: Vec<&Tensor<T>> = slots.iter().map(|s| &s.mask).collect();
    let (h, w) = (slots[0].frame.dim(1), slots[0].frame.dim(2));
    let n = slots.len();
    let frames = Tensor::concat(&frames, 0).into_reshape(&[n, 3, h, w]);
    let masks = Tensor::concat(&masks, 0).into_reshape(&[n, 1, h, w]);
    let mut acc = Tensor::zeros(&[local, 3, h, w]);
    let mut trace = trace;
    for (v, cache) in caches.iter_mut().enumerate() {
        let f = FLIPS[v];
        let clip = ClipInput::new(flip(&frames, f), flip(&masks, f), local)?;
        let g = Graph::no_grad();
        let ctx = Ctx::new(&g, &model.params);
        let out = generator_forward(&ctx, &model.config, &clip, cache, video_id)?;
        acc.add_assign(&flip(&out.frames.value(), f));
        if v == 0 {
            if let Some(t) = trace.as_deref_mut() {
                t.queried_keys = out.hub_keys;
                t.cached_keys = cache.hubs.iter().filter_map(|(b, c)| c.keys.clone().map(|k| (*b, k))).collect();
                t.warped = out.warped;
            }
        }
    }
    Ok(acc.scale(T::one() / T::from_usize_lossy(caches.len())))
}

fn variants(cfg: &SamplerConfig) -> usize {
    if cfg.flip_augment {
        FLIPS.len()
    } else {
        1
    }
}

/// Online completion. Frames are read from `source` window by window and
/// every completed frame is handed to `sink` as soon as its window is done;
/// references come from frames already emitted.
pub fn run_stream<T: Scalar>(
    model: &Generator<T>,
    source: &dyn FrameSource<T>,
    cfg: &SamplerConfig,
    session: &mut StreamSession<T>,
    sink: &mut dyn FnMut(usize, &Tensor<T>),
) -> Result<StreamReport<T>> {
    cfg.validate()?;
    if cfg.mode != Mode::Online {
        return Err(Error::Config("run_stream needs an online sampler".into()));
    }
    let mc = &model.config;
    if cfg.window != mc.local_frames || cfg.ref_frames != mc.ref_frames {
        return Err(Error::Config(format!(
            "sampler uses {} local + {} reference frames, model expects {} + {}",
            cfg.window, cfg.ref_frames, mc.local_frames, mc.ref_frames
        )));
    }
    let total = source.len();
    if total == 0 {
        return Err(Error::InvalidInput("empty video".into()));
    }
    let started = Instant::now();
    session.reset(variants(cfg));
    let mask = source.mask(0);
    let plane = mask_plane::<T>(&mask);
    let (h, w) = source.size();
    let clear = Tensor::zeros(&[1, h, w]);
    let mut completed: Vec<Option<Tensor<T>>> = vec![None; total];
    let mut traces = Vec::new();
    for win in plan_windows(total, cfg) {
        let mut trace = WindowTrace { local: win.local.clone(), refs: win.refs.clone(), ..Default::default() };
        let mut inputs = Vec::with_capacity(win.local.len());
        for &t in &win.local {
            trace.reads.push(t);
            if source.mask(t) != mask {
                return Err(Error::InvalidInput(format!("mask of frame {t} differs from the first frame's")));
            }
            inputs.push(source.frame(t));
        }
        let mut slots: Vec<Slot<T>> = (0..cfg.window)
            .map(|i| Slot { frame: inputs[i.min(inputs.len() - 1)].clone(), mask: plane.clone() })
            .collect();
        for &r in &win.refs {
            slots.push(match &completed[r] {
                Some(f) => Slot { frame: f.clone(), mask: clear.clone() },
                None => {
                    trace.reads.push(r);
                    Slot { frame: source.frame(r), mask: plane.clone() }
                }
            });
        }
        let pred = predict(model, &slots, cfg.window, &mut session.caches, source.id(), Some(&mut trace))?;
        for (i, &t) in win.local.iter().enumerate() {
            let out = composite(&pred.narrow(0, i, 1).into_reshape(&[3, h, w]), &inputs[i], &mask);
            sink(t, &out);
            completed[t] = Some(out);
        }
        if !cfg.dump_warped {
            trace.warped.clear();
        }
        traces.push(trace);
    }
    Ok(StreamReport { windows: traces, frames: total, seconds: started.elapsed().as_secs_f64() })
}

/// Offline completion of a whole video: overlapping windows averaged per
/// frame, references at multiples of `ref_stride`, a fresh hub cache per
/// window. References completed by earlier windows are fed unmasked.
pub fn run_offline<T: Scalar>(
    model: &Generator<T>,
    video: &VideoSequence<T>,
    cfg: &SamplerConfig,
) -> Result<(VideoSequence<T>, StreamReport<T>)> {
    cfg.validate()?;
    if cfg.mode != Mode::Offline {
        return Err(Error::Config("run_offline needs an offline sampler".into()));
    }
    let started = Instant::now();
    let (n, h, w) = (video.len(), video.height(), video.width());
    let plane = mask_plane::<T>(&video.mask);
    let clear = Tensor::zeros(&[1, h, w]);
    let mut sum = Tensor::zeros(&[n, 3, h, w]);
    let mut count = vec![0usize; n];
    let mut traces = Vec::new();
    let hw3 = 3 * h * w;
    for win in plan_windows(n, cfg) {
        let mut trace = WindowTrace { local: win.local.clone(), refs: win.refs.clone(), ..Default::default() };
        let mut slots: Vec<Slot<T>> = win.local.iter().map(|&t| Slot { frame: video.frame(t), mask: plane.clone() }).collect();
        for &r in &win.refs {
            slots.push(if count[r] > 0 {
                let avg = Tensor::from_vec(&[3, h, w], sum.data()[r * hw3..(r + 1) * hw3].to_vec())
                    .scale(T::one() / T::from_usize_lossy(count[r]));
                Slot { frame: composite(&avg, &video.frame(r), &video.mask), mask: clear.clone() }
            } else {
                Slot { frame: video.frame(r), mask: plane.clone() }
            });
        }
        trace.reads = win.local.iter().chain(&win.refs).copied().collect();
        let mut caches = vec![ModelCache::new(); variants(cfg)];
        let pred = predict(model, &slots, win.local.len(), &mut caches, &video.id, Some(&mut trace))?;
        for (i, &t) in win.local.iter().enumerate() {
            for (d, &s) in sum.data_mut()[t * hw3..(t + 1) * hw3].iter_mut().zip(&pred.data()[i * hw3..(i + 1) * hw3]) {
                *d += s;
            }
            count[t] += 1;
        }
        if !cfg.dump_warped {
            trace.warped.clear();
        }
        traces.push(trace);
    }
    let avg = Tensor::from_fn(&[n, 3, h, w], |i| sum.data()[i] / T::from_usize_lossy(count[i / hw3]));
    let mut out = video.clone();
    out.frames = composite(&avg, &video.frames, &video.mask);
    let report = StreamReport { windows: traces, frames: n, seconds: started.elapsed().as_secs_f64() };
    Ok((out, report))
}

/// Completes `video` under its own mask with either protocol.
pub fn complete<T: Scalar>(model: &Generator<T>, video: &VideoSequence<T>, cfg: &SamplerConfig) -> Result<VideoSequence<T>> {
    Ok(complete_with_report(model, video, cfg)?.0)
}

pub fn complete_with_report<T: Scalar>(
    model: &Generator<T>,
    video: &VideoSequence<T>,
    cfg: &SamplerConfig,
) -> Result<(VideoSequence<T>, StreamReport<T>)> {
    match cfg.mode {
        Mode::Offline => run_offline(model, video, cfg),
        Mode::Online => {
            let (h, w) = (video.height(), video.width());
            let mut frames = Tensor::zeros(&[video.len(), 3, h, w]);
            let hw3 = 3 * h * w;
            let mut session = StreamSession::new();
            let report = run_stream(model, video, cfg, &mut session, &mut |t, f| {
                frames.data_mut()[t * hw3..(t + 1) * hw3].copy_from_slice(f.data());
            })?;
            let mut out = video.clone();
            out.frames = frames;
            Ok((out, report))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video_masks::Direction;

    #[test]
    fn flips_are_involutions() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4, 5], |i| i as f64);
        for f in FLIPS {
            assert_eq!(flip(&flip(&x, f), f), x);
        }
        assert_eq!(flip(&x, (true, false)).data()[0], 4.0);
        assert_eq!(flip(&x, (false, true)).data()[0], 15.0);
    }

    #[test]
    fn composite_takes_prediction_under_the_mask_only() {
        let mask = FovMask::from_grid(1, 3, Direction::Outer, 0.1, vec![1, 0, 1]).unwrap();
        let pred = Tensor::<f64>::from_vec(&[2, 1, 3], vec![9.0; 6]);
        let input = Tensor::from_vec(&[2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(composite(&pred, &input, &mask).data(), &[9.0, 2.0, 9.0, 9.0, 5.0, 9.0]);
    }

    #[test]
    fn modes_parse() {
        assert_eq!("online".parse::<Mode>().unwrap(), Mode::Online);
        assert_eq!("offline".parse::<Mode>().unwrap(), Mode::Offline);
        assert!("both".parse::<Mode>().is_err());
        let mut cfg = SamplerConfig::online(5, 3);
        assert_eq!(variants(&cfg), 1);
        cfg.flip_augment = true;
        assert_eq!(variants(&cfg), 4);
    }
}
