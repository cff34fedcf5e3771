//! Field-of-view masks, video containers and I/O, and a synthetic scene
//! generator with exact ground-truth motion.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::path::Path;

use flowlens_tensor::{Bilinear, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraKind {
    /// Rectilinear projection, radius = f·tan θ.
    PinholeFtan,
    /// Equidistant fisheye projection, radius = f·θ.
    SphericalFtheta,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub kind: CameraKind,
    pub focal: f64,
    pub center: (f64, f64),
    pub theta_max: f64,
}

impl CameraModel {
    pub fn new(kind: CameraKind, focal: f64, center: (f64, f64), theta_max: f64) -> Result<Self> {
        let cam = Self { kind, focal, center, theta_max };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::InvalidCamera(format!("focal length must be positive, got {}", self.focal)));
        }
        if !(self.theta_max > 0.0 && self.theta_max <= PI) {
            return Err(Error::InvalidCamera(format!("theta_max must lie in (0, pi], got {}", self.theta_max)));
        }
        if self.kind == CameraKind::PinholeFtan && self.theta_max >= FRAC_PI_2 {
            return Err(Error::InvalidCamera(format!(
                "a pinhole camera cannot see {} rad off-axis (limit pi/2)",
                self.theta_max
            )));
        }
        Ok(())
    }

    /// Camera centered on an `h × w` image whose corner pixels sit at
    /// `theta_max`.
    pub fn fitted(kind: CameraKind, h: usize, w: usize, theta_max: f64) -> Result<Self> {
        let center = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let r = center.0.hypot(center.1).max(0.5);
        let focal = match kind {
            CameraKind::PinholeFtan => r / theta_max.tan(),
            CameraKind::SphericalFtheta => r / theta_max,
        };
        Self::new(kind, focal, center, theta_max)
    }

    /// Default field of view per camera kind: 60° half-angle for pinhole,
    /// a 180° fisheye for spherical.
    pub fn default_for(kind: CameraKind, h: usize, w: usize) -> Self {
        let theta = match kind {
            CameraKind::PinholeFtan => PI / 3.0,
            CameraKind::SphericalFtheta => FRAC_PI_2,
        };
        Self::fitted(kind, h, w, theta).expect("default cameras are valid")
    }

    /// Field angle of the ray through pixel `(row, col)`.
    pub fn field_angle(&self, row: usize, col: usize) -> f64 {
        let r = (col as f64 - self.center.0).hypot(row as f64 - self.center.1);
        match self.kind {
            CameraKind::PinholeFtan => (r / self.focal).atan(),
            CameraKind::SphericalFtheta => r / self.focal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Outer,
    Inner,
}

impl std::str::FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "outer" => Ok(Direction::Outer),
            "inner" => Ok(Direction::Inner),
            other => Err(Error::InvalidInput(format!("unknown direction {other:?} (outer|inner)"))),
        }
    }
}

/// Binary mask, 1 marks pixels to fill.
#[derive(Clone, Debug, PartialEq)]
pub struct FovMask {
    pub height: usize,
    pub width: usize,
    pub direction: Direction,
    pub rate: f64,
    grid: Vec<u8>,
}

impl FovMask {
    pub fn from_grid(height: usize, width: usize, direction: Direction, rate: f64, grid: Vec<u8>) -> Result<Self> {
        if grid.len() != height * width {
            return Err(dim_err(format!("mask grid has {} cells, expected {height}x{width}", grid.len())));
        }
        if grid.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, direction, rate, grid })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, direction: Direction::Outer, rate: 0.0, grid: vec![0; height * width] }
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.grid[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.grid.iter().map(|&v| v as usize).sum()
    }

    /// `[1, 1, h, w]` tensor of 0/1.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, 1, self.height, self.width], |i| T::from_usize_lossy(self.grid[i] as usize))
    }

    /// Same mask for `frames` frames: `[frames, 1, h, w]`.
    pub fn repeat<T: Scalar>(&self, frames: usize) -> Tensor<T> {
        let hw = self.height * self.width;
        Tensor::from_fn(&[frames, 1, self.height, self.width], |i| T::from_usize_lossy(self.grid[i % hw] as usize))
    }

    pub fn is_subset_of(&self, other: &FovMask) -> bool {
        self.grid.len() == other.grid.len() && self.grid.iter().zip(&other.grid).all(|(&a, &b)| a <= b)
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if rate.is_nan() || !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidRate(rate));
    }
    Ok(())
}

/// Angular-band mask: outer covers field angles above `(1 − rate)·θmax`,
/// inner covers angles below `rate·θmax`. A zero rate yields an empty mask.
pub fn generate_fov_mask(camera: &CameraModel, rate: f64, direction: Direction, size: (usize, usize)) -> Result<FovMask> {
    check_rate(rate)?;
    camera.validate()?;
    let (h, w) = size;
    if h == 0 || w == 0 {
        return Err(dim_err("mask size must be positive"));
    }
    let mut grid = vec![0u8; h * w];
    if rate > 0.0 {
        let lo = (1.0 - rate) * camera.theta_max;
        let hi = rate * camera.theta_max;
        for i in 0..h {
            for j in 0..w {
                let th = camera.field_angle(i, j);
                let on = match direction {
                    Direction::Outer => th > lo,
                    Direction::Inner => th < hi,
                };
                grid[i * w + j] = on as u8;
            }
        }
    }
    Ok(FovMask { height: h, width: w, direction, rate, grid })
}

/// A clip of RGB frames in `[0, 1]`, stored `[t, 3, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence<T: Scalar> {
    pub frames: Tensor<T>,
    pub mask: FovMask,
    pub camera: CameraModel,
    pub id: String,
}

impl<T: Scalar> VideoSequence<T> {
    pub fn new(frames: Tensor<T>, mask: FovMask, camera: CameraModel, id: impl Into<String>) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[1] != 3 || s[0] == 0 {
            return Err(dim_err(format!("frames must be [t>=1, 3, h, w], got {s:?}")));
        }
        if (mask.height, mask.width) != (s[2], s[3]) {
            return Err(dim_err(format!("mask {}x{} vs frames {}x{}", mask.height, mask.width, s[2], s[3])));
        }
        Ok(Self { frames, mask, camera, id: id.into() })
    }

    pub fn len(&self) -> usize {
        self.frames.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.dim(2)
    }

    pub fn width(&self) -> usize {
        self.frames.dim(3)
    }

    /// `[3, h, w]` copy of frame `t`.
    pub fn frame(&self, t: usize) -> Tensor<T> {
        let s = self.frames.shape();
        self.frames.narrow(0, t, 1).into_reshape(&[3, s[2], s[3]])
    }

    pub fn with_mask(mut self, mask: FovMask) -> Result<Self> {
        if (mask.height, mask.width) != (self.height(), self.width()) {
            return Err(dim_err("mask does not match frame size"));
        }
        self.mask = mask;
        Ok(self)
    }
}

/// `frames·(1 − M) + fill·M`, exact: masked pixels become `fill`, the
/// rest are copied unchanged.
pub fn apply_mask<T: Scalar>(seq: &VideoSequence<T>, fill: T) -> Result<VideoSequence<T>> {
    let (h, w) = (seq.height(), seq.width());
    if (seq.mask.height, seq.mask.width) != (h, w) {
        return Err(dim_err("mask does not match frame size"));
    }
    let hw = h * w;
    let mut out = seq.clone();
    for (i, v) in out.frames.data_mut().iter_mut().enumerate() {
        if seq.mask.grid[i % hw] == 1 {
            *v = fill;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpriteShape {
    Rect { half_w: f64, half_h: f64 },
    Disk { radius: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub shape: SpriteShape,
    /// Base RGB color in `[0, 1]`.
    pub color: [f64; 3],
    /// Color change per pixel along x and y (sprite-local, added to all channels).
    pub gradient: [f64; 2],
    /// Center at frame 0.
    pub start: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
}

impl Sprite {
    fn center(&self, t: usize) -> (f64, f64) {
        (self.start.0 + t as f64 * self.velocity.0, self.start.1 + t as f64 * self.velocity.1)
    }

    fn covers(&self, t: usize, x: f64, y: f64) -> bool {
        let (cx, cy) = self.center(t);
        let (dx, dy) = (x - cx, y - cy);
        match self.shape {
            SpriteShape::Rect { half_w, half_h } => dx.abs() < half_w && dy.abs() < half_h,
            SpriteShape::Disk { radius } => dx * dx + dy * dy < radius * radius,
        }
    }

    fn shade(&self, t: usize, x: f64, y: f64, ch: usize) -> f64 {
        let (cx, cy) = self.center(t);
        self.color[ch] + self.gradient[0] * (x - cx) + self.gradient[1] * (y - cy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub height: usize,
    pub width: usize,
    pub length: usize,
    pub background_seed: u64,
    /// Whole-background translation in pixels per frame (camera pan).
    #[serde(default)]
    pub background_velocity: (f64, f64),
    /// Drawn in order; later sprites occlude earlier ones.
    pub sprites: Vec<Sprite>,
}

impl SyntheticSceneSpec {
    /// Random scene: `sprites` sprites with speeds up to `max_speed` px/frame.
    pub fn random(seed: u64, height: usize, width: usize, length: usize, sprites: usize, max_speed: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5ce4e);
        let side = height.min(width) as f64;
        let sprites = (0..sprites)
            .map(|_| {
                let size = rng.random_range(0.12..0.25) * side;
                let shape = if rng.random_bool(0.5) {
                    SpriteShape::Rect { half_w: size * rng.random_range(0.6..1.0), half_h: size * rng.random_range(0.6..1.0) }
                } else {
                    SpriteShape::Disk { radius: size }
                };
                let color = [rng.random_range(0.25..0.75), rng.random_range(0.25..0.75), rng.random_range(0.25..0.75)];
                let g = 0.2 / size;
                let gradient = [rng.random_range(-g..g), rng.random_range(-g..g)];
                let start = (rng.random_range(0.0..width as f64), rng.random_range(0.0..height as f64));
                let velocity = if max_speed > 0.0 {
                    (rng.random_range(-max_speed..=max_speed), rng.random_range(-max_speed..=max_speed))
                } else {
                    (0.0, 0.0)
                };
                Sprite { shape, color, gradient, start, velocity }
            })
            .collect();
        let pan = max_speed.floor().min(1.0) as i32;
        let background_velocity = if pan > 0 {
            (rng.random_range(-pan..=pan) as f64, rng.random_range(-pan..=pan) as f64)
        } else {
            (0.0, 0.0)
        };
        Self { height, width, length, background_seed: seed, background_velocity, sprites }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::InvalidSpec("scene length must be at least one frame".into()));
        }
        if self.height < 2 || self.width < 2 {
            return Err(Error::InvalidSpec("canvas must be at least 2x2".into()));
        }
        if self.sprites.is_empty() {
            return Err(Error::InvalidSpec("scene needs at least one sprite".into()));
        }
        if !(self.background_velocity.0.is_finite() && self.background_velocity.1.is_finite()) {
            return Err(Error::InvalidSpec("background velocity must be finite".into()));
        }
        for s in &self.sprites {
            if !(s.velocity.0.is_finite() && s.velocity.1.is_finite()) {
                return Err(Error::InvalidSpec("sprite velocities must be finite".into()));
            }
        }
        Ok(())
    }
}

/// Smooth texture: a few random plane waves per channel.
struct Background {
    waves: Vec<[f64; 6]>,
}

impl Background {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = (0..4)
            .map(|_| {
                [
                    rng.random_range(-0.25..0.25),
                    rng.random_range(-0.25..0.25),
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.0..0.2),
                    rng.random_range(0.0..0.2),
                    rng.random_range(0.0..0.2),
                ]
            })
            .collect();
        Self { waves }
    }

    fn value(&self, x: f64, y: f64, ch: usize) -> f64 {
        let mut v = 0.5;
        for w in &self.waves {
            v += w[3 + ch] * (w[0] * x + w[1] * y + w[2]).sin();
        }
        v
    }
}

/// Ground-truth motion between consecutive frames, `[2, h, w]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowFieldSequence<T: Scalar> {
    /// Entry `t` maps frame `t` pixels into frame `t + 1`.
    pub forward: Vec<Tensor<T>>,
    /// Entry `t` maps frame `t + 1` pixels into frame `t`.
    pub backward: Vec<Tensor<T>>,
    /// 1 where the forward correspondence is unoccluded, `[h, w]`.
    pub forward_valid: Vec<Tensor<T>>,
    pub backward_valid: Vec<Tensor<T>>,
}

const BACKGROUND: usize = usize::MAX;

fn labels(spec: &SyntheticSceneSpec, t: usize) -> Vec<usize> {
    let (h, w) = (spec.height, spec.width);
    let mut out = vec![BACKGROUND; h * w];
    for i in 0..h {
        for j in 0..w {
            for (k, s) in spec.sprites.iter().enumerate().rev() {
                if s.covers(t, j as f64, i as f64) {
                    out[i * w + j] = k;
                    break;
                }
            }
        }
    }
    out
}

/// Flow from frame `from` into frame `to` (adjacent), with validity.
fn motion<T: Scalar>(spec: &SyntheticSceneSpec, from: &[usize], to: &[usize], sign: f64) -> (Tensor<T>, Tensor<T>) {
    let (h, w) = (spec.height, spec.width);
    let mut flow = Tensor::zeros(&[2, h, w]);
    let mut valid = Tensor::zeros(&[h, w]);
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let label = from[p];
            let (vx, vy) = if label == BACKGROUND {
                (sign * spec.background_velocity.0, sign * spec.background_velocity.1)
            } else {
                let v = spec.sprites[label].velocity;
                (sign * v.0, sign * v.1)
            };
            flow.data_mut()[p] = T::lit(vx);
            flow.data_mut()[h * w + p] = T::lit(vy);
            let (x, y) = (j as f64 + vx, i as f64 + vy);
            if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
                continue;
            }
            let st = Bilinear::new(x, y, h, w);
            let ok = (0..4).all(|k| st.weight[k] == 0.0 || to[st.idx[k]] == label);
            if ok {
                valid.data_mut()[p] = T::one();
            }
        }
    }
    (flow, valid)
}

/// Renders a scene and its exact forward/backward flows.
pub fn synth_video<T: Scalar>(spec: &SyntheticSceneSpec) -> Result<(VideoSequence<T>, FlowFieldSequence<T>)> {
    spec.validate()?;
    let (h, w, n) = (spec.height, spec.width, spec.length);
    let bg = Background::new(spec.background_seed);
    let all_labels: Vec<Vec<usize>> = (0..n).map(|t| labels(spec, t)).collect();
    let mut frames = Tensor::zeros(&[n, 3, h, w]);
    for (t, lab) in all_labels.iter().enumerate() {
        for ch in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    let (x, y) = (j as f64, i as f64);
                    let l = lab[i * w + j];
                    let (px, py) = (x - t as f64 * spec.background_velocity.0, y - t as f64 * spec.background_velocity.1);
                    let v = if l == BACKGROUND { bg.value(px, py, ch) } else { spec.sprites[l].shade(t, x, y, ch) };
                    frames.data_mut()[((t * 3 + ch) * h + i) * w + j] = T::lit(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    let mut flows = FlowFieldSequence { forward: vec![], backward: vec![], forward_valid: vec![], backward_valid: vec![] };
    for t in 0..n.saturating_sub(1) {
        let (f, fv) = motion(spec, &all_labels[t], &all_labels[t + 1], 1.0);
        let (b, bv) = motion(spec, &all_labels[t + 1], &all_labels[t], -1.0);
        flows.forward.push(f);
        flows.forward_valid.push(fv);
        flows.backward.push(b);
        flows.backward_valid.push(bv);
    }
    let camera = CameraModel::default_for(CameraKind::PinholeFtan, h, w);
    let seq = VideoSequence::new(frames, FovMask::empty(h, w), camera, format!("synth-{}", spec.background_seed))?;
    Ok((seq, flows))
}

#[derive(Serialize, Deserialize)]
struct MaskMeta {
    rate: f64,
    direction: Direction,
}

#[derive(Serialize, Deserialize)]
struct VideoMeta {
    id: String,
    frames: usize,
    height: usize,
    width: usize,
    camera: CameraModel,
    mask: MaskMeta,
}

pub fn frame_file_name(t: usize) -> String {
    format!("frame_{t:05}.png")
}

pub const META_FILE: &str = "meta.toml";
pub const MASK_FILE: &str = "mask.png";

pub fn quantize<T: Scalar>(v: T) -> u8 {
    (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes frames as 8-bit PNGs plus `mask.png` and `meta.toml`.
pub fn save_video<T: Scalar>(seq: &VideoSequence<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (seq.height(), seq.width());
    let hw = h * w;
    for t in 0..seq.len() {
        let f = seq.frame(t);
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for (p, px) in img.pixels_mut().enumerate() {
            *px = image::Rgb([quantize(f.data()[p]), quantize(f.data()[hw + p]), quantize(f.data()[2 * hw + p])]);
        }
        let path = dir.join(frame_file_name(t));
        img.save(&path).map_err(|e| Error::format(&path, e.to_string()))?;
    }
    save_mask(&seq.mask, &dir.join(MASK_FILE))?;
    let meta = VideoMeta {
        id: seq.id.clone(),
        frames: seq.len(),
        height: h,
        width: w,
        camera: seq.camera,
        mask: MaskMeta { rate: seq.mask.rate, direction: seq.mask.direction },
    };
    let path = dir.join(META_FILE);
    let text = toml::to_string(&meta).map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn save_mask(mask: &FovMask, path: &Path) -> Result<()> {
    let img = image::GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        image::Luma([mask.get(y as usize, x as usize) * 255])
    });
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_mask(path: &Path, direction: Direction, rate: f64) -> Result<FovMask> {
    let img = open_image(path)?.to_luma8();
    let mut grid = Vec::with_capacity(img.len());
    for p in img.pixels() {
        match p.0[0] {
            0 => grid.push(0),
            255 => grid.push(1),
            v => return Err(Error::format(path, format!("mask value {v} is neither 0 nor 255"))),
        }
    }
    FovMask::from_grid(img.height() as usize, img.width() as usize, direction, rate, grid)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a directory written by [`save_video`].
pub fn load_video<T: Scalar>(dir: &Path) -> Result<VideoSequence<T>> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: VideoMeta = toml::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let (h, w) = (meta.height, meta.width);
    let hw = h * w;
    let mut frames = Tensor::zeros(&[meta.frames, 3, h, w]);
    for t in 0..meta.frames {
        let path = dir.join(frame_file_name(t));
        let img = open_image(&path)?.to_rgb8();
        if (img.height() as usize, img.width() as usize) != (h, w) {
            return Err(Error::format(&path, format!("frame is {}x{}, expected {h}x{w}", img.height(), img.width())));
        }
        let base = t * 3 * hw;
        for (p, px) in img.pixels().enumerate() {
            for ch in 0..3 {
                frames.data_mut()[base + ch * hw + p] = T::lit(px.0[ch] as f64 / 255.0);
            }
        }
    }
    let mask_path = dir.join(MASK_FILE);
    let mask = if mask_path.exists() {
        load_mask(&mask_path, meta.mask.direction, meta.mask.rate)?
    } else {
        generate_fov_mask(&meta.camera, meta.mask.rate, meta.mask.direction, (h, w))?
    };
    VideoSequence::new(frames, mask, meta.camera, meta.id)
}

/// Rounds every value to the nearest 8-bit level.
pub fn quantize_frames<T: Scalar>(frames: &Tensor<T>) -> Tensor<T> {
    frames.map(|v| T::lit(quantize(v) as f64 / 255.0))
}
