//! Coarse-to-fine optical flow between masked frames, output at quarter
//! resolution.
//!
//! A shared encoder builds a feature pyramid (level `l` at `1/2^l` scale).
//! Predictions run from the coarsest level down to level 2: each level warps
//! the second frame's features by the upsampled coarser flow and regresses a
//! residual with a small head whose last layer starts at zero.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use flowlens_tensor::{Ctx, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::layers::{conv, declare_conv, lrelu, WeightInit};

pub const FLOW_MAGIC: &[u8; 8] = b"FLWFLOW1";
/// Finest prediction level; flows there are at 1/4 of the input resolution.
pub const FINEST_LEVEL: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowNetConfig {
    /// Encoder depth; predictions are made at levels `levels..=2`.
    pub levels: usize,
    /// Channels at level 1; doubled per level up to 8x.
    pub base_channels: usize,
    /// Keep the flow network fixed during training.
    pub frozen: bool,
}

impl Default for FlowNetConfig {
    fn default() -> Self {
        Self { levels: 6, base_channels: 16, frozen: false }
    }
}

impl FlowNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < FINEST_LEVEL || self.base_channels == 0 {
            return Err(Error::Config(format!("flow net needs at least {FINEST_LEVEL} levels and some channels")));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * (1 << (level - 1).min(3))
    }

    pub fn prediction_levels(&self) -> usize {
        self.levels - FINEST_LEVEL + 1
    }
}

/// Spatial size at a pyramid level (stride-2 convolutions round up).
pub fn level_dims(h: usize, w: usize, level: usize) -> (usize, usize) {
    let (mut a, mut b) = (h, w);
    for _ in 0..level {
        a = a.div_ceil(2);
        b = b.div_ceil(2);
    }
    (a, b)
}

pub fn declare<T: Scalar>(s: &mut ParamStore<T>, cfg: &FlowNetConfig, in_channels: usize) {
    let mut cin = in_channels;
    for l in 1..=cfg.levels {
        let c = cfg.channels(l);
        declare_conv(s, &format!("flow.enc{l}.a"), cin, c, 3, 1, WeightInit::Kaiming);
        declare_conv(s, &format!("flow.enc{l}.b"), c, c, 3, 1, WeightInit::Kaiming);
        cin = c;
    }
    for l in FINEST_LEVEL..=cfg.levels {
        let c = cfg.channels(l);
        declare_conv(s, &format!("flow.dec{l}.a"), 2 * c + 2, c, 3, 1, WeightInit::Kaiming);
        declare_conv(s, &format!("flow.dec{l}.b"), c, 2, 3, 1, WeightInit::Zero);
    }
}

/// Feature pyramid of `frames: [n, c, h, w]`; entry `l − 1` is level `l`.
pub fn encode<'a, T: Scalar>(ctx: &Ctx<'a, T>, cfg: &FlowNetConfig, frames: Var<'a, T>) -> Vec<Var<'a, T>> {
    let mut x = frames;
    let mut out = Vec::with_capacity(cfg.levels);
    for l in 1..=cfg.levels {
        x = lrelu(conv(ctx, &format!("flow.enc{l}.a"), x, 3, 2, 1));
        x = lrelu(conv(ctx, &format!("flow.enc{l}.b"), x, 3, 1, 1));
        out.push(x);
    }
    out
}

/// Rows `index` of a `[n, ...]` stack along the leading axis.
pub fn select_frames<'a, T: Scalar>(x: Var<'a, T>, index: &[usize]) -> Var<'a, T> {
    let s = x.shape();
    let rest: usize = s[1..].iter().product();
    let mut shape = s.clone();
    shape[0] = index.len();
    x.reshape(&[s[0], rest]).index_rows(index).reshape(&shape)
}

/// Bilinear upsampling of a flow to `(h, w)`, doubling vector magnitude.
pub fn upsample_flow<'a, T: Scalar>(flow: Var<'a, T>, h: usize, w: usize) -> Var<'a, T> {
    flow.resize_bilinear(h, w).scale(T::lit(2.0))
}

/// Coarse-to-fine predictions, coarsest first, each `[pairs, 2, h_l, w_l]`.
pub struct FlowPyramid<'a, T: Scalar> {
    pub levels: Vec<Var<'a, T>>,
}

impl<'a, T: Scalar> FlowPyramid<'a, T> {
    pub fn finest(&self) -> Var<'a, T> {
        *self.levels.last().expect("pyramid has at least one level")
    }
}

/// Flow from `src[k]` to `dst[k]` for every pair, given a precomputed
/// feature pyramid of all frames.
pub fn pyramid_from_features<'a, T: Scalar>(
    ctx: &Ctx<'a, T>,
    cfg: &FlowNetConfig,
    features: &[Var<'a, T>],
    src: &[usize],
    dst: &[usize],
) -> FlowPyramid<'a, T> {
    assert_eq!(src.len(), dst.len(), "flow pairs");
    let mut levels = Vec::with_capacity(cfg.prediction_levels());
    let mut prev: Option<Var<'a, T>> = None;
    for l in (FINEST_LEVEL..=cfg.levels).rev() {
        let feat = features[l - 1];
        let s = feat.shape();
        let (h, w) = (s[2], s[3]);
        let fi = select_frames(feat, src);
        let fj = select_frames(feat, dst);
        let up = match prev {
            Some(p) => upsample_flow(p, h, w),
            None => ctx.graph().constant(Tensor::zeros(&[src.len(), 2, h, w])),
        };
        let warped = fj.warp(up);
        let x = Var::concat(&[fi, warped, up], 1);
        let hidden = lrelu(conv(ctx, &format!("flow.dec{l}.a"), x, 3, 1, 1));
        let flow = up + conv(ctx, &format!("flow.dec{l}.b"), hidden, 3, 1, 1);
        levels.push(flow);
        prev = Some(flow);
    }
    FlowPyramid { levels }
}

fn check_pair<T: Scalar>(a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb || sa.len() != 4 {
        return Err(dim_err(format!("flow inputs must share a [n, c, h, w] shape, got {sa:?} and {sb:?}")));
    }
    if sa[2] % 4 != 0 || sa[3] % 4 != 0 {
        return Err(dim_err(format!("frame size {}x{} must be divisible by 4", sa[2], sa[3])));
    }
    Ok(())
}

/// All pyramid predictions for `frame_i → frame_j` (batched over the
/// leading axis).
pub fn pyramid_forward<'a, T: Scalar>(
    ctx: &Ctx<'a, T>,
    cfg: &FlowNetConfig,
    frame_i: Var<'a, T>,
    frame_j: Var<'a, T>,
) -> Result<FlowPyramid<'a, T>> {
    check_pair(&frame_i, &frame_j)?;
    let n = frame_i.shape()[0];
    let feats = encode(ctx, cfg, Var::concat(&[frame_i, frame_j], 0));
    let src: Vec<usize> = (0..n).collect();
    let dst: Vec<usize> = (n..2 * n).collect();
    Ok(pyramid_from_features(ctx, cfg, &feats, &src, &dst))
}

/// Finest (quarter-resolution) prediction.
pub fn estimate_flow<'a, T: Scalar>(
    ctx: &Ctx<'a, T>,
    cfg: &FlowNetConfig,
    frame_i: Var<'a, T>,
    frame_j: Var<'a, T>,
) -> Result<Var<'a, T>> {
    Ok(pyramid_forward(ctx, cfg, frame_i, frame_j)?.finest())
}

/// Mean absolute difference between flow stacks.
pub fn flow_loss<'a, T: Scalar>(pred: Var<'a, T>, gt: Var<'a, T>) -> Result<Var<'a, T>> {
    if pred.shape() != gt.shape() {
        return Err(dim_err(format!("flow loss shapes {:?} vs {:?}", pred.shape(), gt.shape())));
    }
    Ok(pred.l1(gt))
}

/// Block-average downsampling of a `[2, h, w]` flow by `factor`, with the
/// vectors rescaled to the coarse pixel grid.
pub fn downsample_flow<T: Scalar>(flow: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let s = flow.shape();
    if s.len() != 3 || s[0] != 2 || s[1] % factor != 0 || s[2] % factor != 0 {
        return Err(dim_err(format!("cannot downsample flow {s:?} by {factor}")));
    }
    let (h, w) = (s[1] / factor, s[2] / factor);
    let norm = T::one() / T::from_usize_lossy(factor * factor * factor);
    let mut out = Tensor::zeros(&[2, h, w]);
    for c in 0..2 {
        for i in 0..s[1] {
            for j in 0..s[2] {
                let v = flow.data()[(c * s[1] + i) * s[2] + j];
                out.data_mut()[(c * h + i / factor) * w + j / factor] += v * norm;
            }
        }
    }
    Ok(out)
}

/// Writes a `[2, h, w]` flow: 8-byte magic, `u32` height and width, then
/// little-endian `f32` pairs `(dx, dy)` in row-major pixel order.
pub fn write_flow<T: Scalar>(flow: &Tensor<T>, path: &Path) -> Result<()> {
    let s = flow.shape();
    if s.len() != 3 || s[0] != 2 {
        return Err(dim_err(format!("flow must be [2, h, w], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut buf = Vec::with_capacity(16 + 8 * h * w);
    buf.write_all(FLOW_MAGIC).expect("vec write");
    buf.write_u32::<LittleEndian>(h as u32).expect("vec write");
    buf.write_u32::<LittleEndian>(w as u32).expect("vec write");
    for p in 0..h * w {
        buf.write_f32::<LittleEndian>(flow.data()[p].to_f64_lossy() as f32).expect("vec write");
        buf.write_f32::<LittleEndian>(flow.data()[h * w + p].to_f64_lossy() as f32).expect("vec write");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_flow<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::format(path, "truncated header"))?;
    if &magic != FLOW_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let h = r.read_u32::<LittleEndian>().map_err(|_| Error::format(path, "truncated header"))? as usize;
    let w = r.read_u32::<LittleEndian>().map_err(|_| Error::format(path, "truncated header"))? as usize;
    if r.len() != 8 * h * w {
        return Err(Error::format(path, format!("expected {} payload bytes, found {}", 8 * h * w, r.len())));
    }
    let mut out = Tensor::zeros(&[2, h, w]);
    for p in 0..h * w {
        out.data_mut()[p] = T::lit(r.read_f32::<LittleEndian>().expect("length checked") as f64);
        out.data_mut()[h * w + p] = T::lit(r.read_f32::<LittleEndian>().expect("length checked") as f64);
    }
    Ok(out)
}

/// Color-wheel rendering of a `[2, h, w]` flow as interleaved RGB bytes.
/// Hue encodes direction, saturation the magnitude relative to `max_mag`
/// (the largest magnitude present when `None`).
pub fn flow_to_rgb<T: Scalar>(flow: &Tensor<T>, max_mag: Option<f64>) -> Vec<u8> {
    let (h, w) = (flow.dim(1), flow.dim(2));
    let hw = h * w;
    let mags: Vec<f64> = (0..hw)
        .map(|p| flow.data()[p].to_f64_lossy().hypot(flow.data()[hw + p].to_f64_lossy()))
        .collect();
    let top = max_mag.unwrap_or_else(|| mags.iter().copied().fold(0.0, f64::max)).max(1e-9);
    let mut out = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        let (dx, dy) = (flow.data()[p].to_f64_lossy(), flow.data()[hw + p].to_f64_lossy());
        let hue = (dy.atan2(dx) / std::f64::consts::TAU).rem_euclid(1.0) * 6.0;
        let sat = (mags[p] / top).min(1.0);
        let x = 1.0 - (hue % 2.0 - 1.0).abs();
        let (r, g, b) = match hue as usize {
            0 => (1.0, x, 0.0),
            1 => (x, 1.0, 0.0),
            2 => (0.0, 1.0, x),
            3 => (0.0, x, 1.0),
            4 => (x, 0.0, 1.0),
            _ => (1.0, 0.0, x),
        };
        for c in [r, g, b] {
            out.push(((1.0 - sat + sat * c) * 255.0).round() as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flow_colors() {
        // zero, right, down, left at unit magnitude
        let flow = Tensor::<f64>::from_vec(&[2, 1, 4], vec![0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0]);
        let rgb = flow_to_rgb(&flow, Some(1.0));
        assert_eq!(&rgb[0..3], &[255, 255, 255]);
        assert_eq!(&rgb[3..6], &[255, 0, 0]);
        assert_eq!(&rgb[9..12], &[0, 255, 255]);
        let half = flow_to_rgb(&flow, Some(2.0));
        assert_eq!(&half[3..6], &[255, 128, 128]);
    }
}
