//! Image/video quality metrics and the benchmark harness that reports them
//! per expansion rate.

use std::fmt::Write as _;
use std::time::Instant;

use flowlens_tensor::{Bilinear, Scalar, Tensor};
use serde::Serialize;

use crate::error::{dim_err, Error, Result};
use crate::inference_engine::{complete, SamplerConfig};
use crate::model_assembly::{count_flops, Generator};
use crate::video_masks::{generate_fov_mask, Direction, FlowFieldSequence, VideoSequence};

/// Reported PSNR when the two inputs are identical.
pub const PSNR_CAP: f64 = 100.0;

fn check_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(format!("metric inputs {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(dim_err("metric inputs are empty"));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// `10·log10(1 / MSE)` for values in `[0, 1]`.
pub fn psnr<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    check_same(pred, gt)?;
    let se: f64 = pred.data().iter().zip(gt.data()).map(|(&a, &b)| (a - b).to_f64_lossy().powi(2)).sum();
    Ok(psnr_from_mse(se / pred.len() as f64))
}

/// PSNR over the pixels where the `[h, w]` plane `region` is nonzero; the
/// same region applies to every leading plane of `pred`.
pub fn psnr_in_region<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, region: &[u8]) -> Result<f64> {
    check_same(pred, gt)?;
    let hw = region.len();
    if hw == 0 || pred.len() % hw != 0 {
        return Err(dim_err("region does not tile the frames"));
    }
    let (mut se, mut n) = (0.0, 0usize);
    for (i, (&a, &b)) in pred.data().iter().zip(gt.data()).enumerate() {
        if region[i % hw] != 0 {
            se += (a - b).to_f64_lossy().powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Ok(PSNR_CAP);
    }
    Ok(psnr_from_mse(se / n as f64))
}

/// Mean PSNR over the frames of `[t, c, h, w]` stacks.
pub fn psnr_video<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, region: Option<&[u8]>) -> Result<f64> {
    check_same(pred, gt)?;
    let t = pred.dim(0);
    let mut acc = 0.0;
    for i in 0..t {
        let (a, b) = (pred.narrow(0, i, 1), gt.narrow(0, i, 1));
        acc += match region {
            Some(r) => psnr_in_region(&a, &b, r)?,
            None => psnr(&a, &b)?,
        };
    }
    Ok(acc / t as f64)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Luma `0.299 R + 0.587 G + 0.114 B` of a `[3, h, w]` frame; `[1, h, w]`
/// and `[h, w]` inputs pass through.
pub fn to_gray<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<f64>, usize, usize)> {
    let s = x.shape();
    let d = x.data();
    match s.len() {
        2 => Ok((d.iter().map(|v| v.to_f64_lossy()).collect(), s[0], s[1])),
        3 if s[0] == 1 => Ok((d.iter().map(|v| v.to_f64_lossy()).collect(), s[1], s[2])),
        3 if s[0] == 3 => {
            let hw = s[1] * s[2];
            let g = (0..hw)
                .map(|p| {
                    0.299 * d[p].to_f64_lossy() + 0.587 * d[hw + p].to_f64_lossy() + 0.114 * d[2 * hw + p].to_f64_lossy()
                })
                .collect();
            Ok((g, s[1], s[2]))
        }
        _ => Err(dim_err(format!("expected a [3|1, h, w] or [h, w] frame, got {s:?}"))),
    }
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let z: f64 = g.iter().sum();
    g.into_iter().map(|v| v / z).collect()
}

/// Local SSIM values at every valid window position, row-major, plus the
/// map's `(rows, cols)`.
pub fn ssim_map(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<(Vec<f64>, usize, usize)> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(dim_err(format!("{h}x{w} frame is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let g = gaussian_window();
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..SSIM_WINDOW {
                for v in 0..SSIM_WINDOW {
                    let wt = g[u] * g[v];
                    let p = (i + u) * w + j + v;
                    let (x, y) = (a[p], b[p]);
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            out.push(((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
        }
    }
    Ok((out, oh, ow))
}

/// Mean local SSIM of the grayscale frames (Gaussian 11×11, σ = 1.5,
/// unit dynamic range, valid windows only).
pub fn ssim<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    check_same(pred, gt)?;
    let (a, h, w) = to_gray(pred)?;
    let (b, _, _) = to_gray(gt)?;
    let (m, _, _) = ssim_map(&a, &b, h, w)?;
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}

/// SSIM averaged over windows centred on a nonzero `region` pixel.
pub fn ssim_in_region<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, region: &[u8]) -> Result<f64> {
    check_same(pred, gt)?;
    let (a, h, w) = to_gray(pred)?;
    let (b, _, _) = to_gray(gt)?;
    if region.len() != h * w {
        return Err(dim_err("region does not match the frame"));
    }
    let (m, oh, ow) = ssim_map(&a, &b, h, w)?;
    let r = SSIM_WINDOW / 2;
    let (mut acc, mut n) = (0.0, 0usize);
    for i in 0..oh {
        for j in 0..ow {
            if region[(i + r) * w + j + r] != 0 {
                acc += m[i * ow + j];
                n += 1;
            }
        }
    }
    Ok(if n == 0 { 1.0 } else { acc / n as f64 })
}

/// Mean SSIM over the frames of `[t, 3, h, w]` stacks.
pub fn ssim_video<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, region: Option<&[u8]>) -> Result<f64> {
    check_same(pred, gt)?;
    let s = pred.shape().to_vec();
    let t = s[0];
    let mut acc = 0.0;
    for i in 0..t {
        let a = pred.narrow(0, i, 1).into_reshape(&s[1..]);
        let b = gt.narrow(0, i, 1).into_reshape(&s[1..]);
        acc += match region {
            Some(r) => ssim_in_region(&a, &b, r)?,
            None => ssim(&a, &b)?,
        };
    }
    Ok(acc / t as f64)
}

/// Forward-backward consistency threshold, in pixels.
pub const OCCLUSION_THRESHOLD: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WarpError {
    /// Mean squared error between each frame and its warped successor over
    /// consistent pixels.
    pub e_warp: f64,
    /// `e_warp` expressed in units of 10⁻².
    pub e_warp_star: f64,
}

/// Temporal warping error of a `[t, 3, h, w]` video under its
/// ground-truth flows (forward `t → t+1`, backward `t+1 → t`).
pub fn warp_error<T: Scalar>(video: &Tensor<T>, flows: &FlowFieldSequence<T>) -> Result<WarpError> {
    let s = video.shape();
    if s.len() != 4 {
        return Err(dim_err(format!("video must be [t, c, h, w], got {s:?}")));
    }
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    if flows.forward.len() + 1 < t || flows.backward.len() + 1 < t {
        return Err(Error::InvalidInput(format!("{t} frames need {} flow pairs", t.saturating_sub(1))));
    }
    let hw = h * w;
    let d = video.data();
    let (mut se, mut n) = (0.0, 0usize);
    for k in 0..t.saturating_sub(1) {
        let (fw, bw) = (flows.forward[k].data(), flows.backward[k].data());
        if flows.forward[k].shape() != [2, h, w] || flows.backward[k].shape() != [2, h, w] {
            return Err(Error::InvalidInput("flow size does not match the video".into()));
        }
        let next = &d[(k + 1) * c * hw..(k + 2) * c * hw];
        let cur = &d[k * c * hw..(k + 1) * c * hw];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let (u, v) = (fw[p].to_f64_lossy(), fw[hw + p].to_f64_lossy());
                let (x, y) = (j as f64 + u, i as f64 + v);
                if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
                    continue;
                }
                let st = Bilinear::new(T::lit(x), T::lit(y), h, w);
                let bu = st.sample(&bw[..hw]).to_f64_lossy();
                let bv = st.sample(&bw[hw..]).to_f64_lossy();
                if ((u + bu).powi(2) + (v + bv).powi(2)).sqrt() >= OCCLUSION_THRESHOLD {
                    continue;
                }
                for ch in 0..c {
                    let warped = st.sample(&next[ch * hw..(ch + 1) * hw]).to_f64_lossy();
                    se += (cur[ch * hw + p].to_f64_lossy() - warped).powi(2);
                    n += 1;
                }
            }
        }
    }
    let e = if n == 0 { 0.0 } else { se / n as f64 };
    Ok(WarpError { e_warp: e, e_warp_star: e * 100.0 })
}

/// A video metric computed by an external feature extractor.
pub trait VideoMetric {
    fn name(&self) -> &str;
    fn score(&self, pred: &Tensor<f64>, gt: &Tensor<f64>) -> f64;
}

/// One evaluation video: full ground-truth frames and, optionally, their
/// flows for the warping error.
#[derive(Clone, Debug)]
pub struct BenchVideo<T: Scalar> {
    pub video: VideoSequence<T>,
    pub flows: Option<FlowFieldSequence<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateRow {
    pub rate: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub e_warp_star: Option<f64>,
    pub vfid: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Efficiency {
    pub gflops: f64,
    pub seconds_per_frame: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub direction: Direction,
    pub mask_only: bool,
    pub rows: Vec<RateRow>,
    pub average: RateRow,
    pub efficiency: Efficiency,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricReport {
    /// Builds the report, deriving the average row from `rows`.
    pub fn new(direction: Direction, mask_only: bool, rows: Vec<RateRow>, efficiency: Efficiency) -> Self {
        let average = RateRow {
            rate: f64::NAN,
            psnr: mean(rows.iter().map(|r| r.psnr)),
            ssim: mean(rows.iter().map(|r| r.ssim)),
            e_warp_star: mean_opt(rows.iter().map(|r| r.e_warp_star)),
            vfid: mean_opt(rows.iter().map(|r| r.vfid)),
        };
        Self { direction, mask_only, rows, average, efficiency }
    }

    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>, p: usize| v.map_or("n/a".to_string(), |x| format!("{x:.p$}"));
        let mut s = String::new();
        let dir = match self.direction {
            Direction::Outer => "outer",
            Direction::Inner => "inner",
        };
        let scope = if self.mask_only { "mask" } else { "full" };
        let _ = writeln!(s, "{dir} expansion ({scope}-frame metrics)");
        let _ = writeln!(s, "{:>8}  {:>8}  {:>7}  {:>9}  {:>6}", "rate", "PSNR", "SSIM", "E*warp", "VFID");
        let mut line = |label: String, r: &RateRow| {
            let _ = writeln!(
                s,
                "{:>8}  {:>8.2}  {:>7.4}  {:>9}  {:>6}",
                label,
                r.psnr,
                r.ssim,
                opt(r.e_warp_star, 4),
                opt(r.vfid, 3)
            );
        };
        for r in &self.rows {
            line(format!("{:.0}%", r.rate * 100.0), r);
        }
        line("avg".into(), &self.average);
        let _ = writeln!(s, "FLOPs {:.2}G  runtime {:.4} s/frame", self.efficiency.gflops, self.efficiency.seconds_per_frame);
        s
    }

    /// One JSON object per rate row, then the average and efficiency.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(s, "{}", serde_json::json!({ "kind": "rate", "direction": self.direction, "row": r }));
        }
        let _ = writeln!(s, "{}", serde_json::json!({ "kind": "average", "direction": self.direction, "row": self.average }));
        let _ = writeln!(s, "{}", serde_json::json!({ "kind": "efficiency", "efficiency": self.efficiency }));
        s
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub rates: Vec<f64>,
    pub direction: Direction,
    pub sampler: SamplerConfig,
    pub mask_only: bool,
}

/// Completes every video at every rate and aggregates the metrics.
pub fn run_benchmark<T: Scalar>(
    model: &Generator<T>,
    dataset: &[BenchVideo<T>],
    cfg: &BenchConfig,
    vfid: Option<&dyn VideoMetric>,
) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("benchmark dataset is empty".into()));
    }
    let mut rows = Vec::with_capacity(cfg.rates.len());
    let (mut seconds, mut frames) = (0.0, 0usize);
    for &rate in &cfg.rates {
        let (mut ps, mut ss, mut ew, mut vf) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for item in dataset {
            let v = &item.video;
            let mask = generate_fov_mask(&v.camera, rate, cfg.direction, (v.height(), v.width()))?;
            let input = v.clone().with_mask(mask.clone())?;
            let start = Instant::now();
            let done = complete(model, &input, &cfg.sampler)?;
            seconds += start.elapsed().as_secs_f64();
            frames += v.len();
            let region = cfg.mask_only.then_some(mask.grid());
            ps.push(psnr_video(&done.frames, &v.frames, region)?);
            ss.push(ssim_video(&done.frames, &v.frames, region)?);
            ew.push(match &item.flows {
                Some(f) => Some(warp_error(&done.frames, f)?.e_warp_star),
                None => None,
            });
            vf.push(vfid.map(|m| m.score(&done.frames.cast(), &v.frames.cast())));
        }
        rows.push(RateRow {
            rate,
            psnr: mean(ps.into_iter()),
            ssim: mean(ss.into_iter()),
            e_warp_star: mean_opt(ew.into_iter()),
            vfid: mean_opt(vf.into_iter()),
        });
    }
    let v0 = &dataset[0].video;
    let flops = count_flops(&model.config, v0.height(), v0.width())?;
    let efficiency = Efficiency { gflops: flops.total() / 1e9, seconds_per_frame: seconds / frames.max(1) as f64 };
    Ok(MetricReport::new(cfg.direction, cfg.mask_only, rows, efficiency))
}
