//! Flow-guided bidirectional feature propagation with deformable
//! compensation.
//!
//! Each chain walks the local frames in one temporal direction. For frame
//! `i` with already-propagated neighbour `j`, the neighbour is warped by the
//! flow `i → j`; offsets (flow plus a bounded residual) and modulation are
//! predicted from the warped neighbour, the frame and the flow; a modulated
//! deformable convolution of the neighbour is then merged into the frame by
//! a residual convolution stack. The two chains are fused by a 1×1
//! convolution added to the input features.

use flowlens_tensor::{Ctx, Init, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::layers::{conv, declare_conv, frame, lrelu, WeightInit};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagationConfig {
    pub enabled: bool,
    /// Deformable compensation; when off the warped neighbour is used as is.
    pub deformable: bool,
    pub kernel: usize,
    pub groups: usize,
    /// Bound on the learned offset residual, in pixels.
    pub r_max: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self { enabled: true, deformable: true, kernel: 3, groups: 4, r_max: 10.0 }
    }
}

impl PropagationConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.kernel % 2 == 0 || self.groups == 0 || channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "deformable kernel must be odd and {} groups must divide {channels} channels",
                self.groups
            )));
        }
        if !(self.r_max > 0.0) {
            return Err(Error::Config("r_max must be positive".into()));
        }
        Ok(())
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel
    }
}

pub const CHAINS: [&str; 2] = ["prop.bwd", "prop.fwd"];

pub fn declare<T: Scalar>(s: &mut ParamStore<T>, cfg: &PropagationConfig, c: usize) {
    let gk = cfg.groups * cfg.taps();
    for p in CHAINS {
        declare_conv(s, &format!("{p}.off1"), 2 * c + 2, c, 3, 1, WeightInit::Kaiming);
        declare_conv(s, &format!("{p}.off2"), c, 3 * gk, 3, 1, WeightInit::Zero);
        s.declare(&format!("{p}.dcn.w"), &[c, c * cfg.taps()], Init::KaimingUniform { fan_in: c * cfg.taps() });
        s.declare(&format!("{p}.dcn.b"), &[c], Init::Zeros);
        declare_conv(s, &format!("{p}.comp1"), 2 * c, c, 3, 1, WeightInit::Kaiming);
        declare_conv(s, &format!("{p}.comp2"), c, c, 3, 1, WeightInit::Scaled(0.1));
    }
    declare_conv(s, "prop.fuse", 2 * c, c, 1, 1, WeightInit::Scaled(0.1));
}

/// `f_j` sampled at `x + flow(x)`; both `[n, c, h, w]` / `[n, 2, h, w]`.
pub fn warp<'a, T: Scalar>(f_j: Var<'a, T>, flow: Var<'a, T>) -> Result<Var<'a, T>> {
    let (sf, sv) = (f_j.shape(), flow.shape());
    if sf.len() != 4 || sv != [sf[0], 2, sf[2], sf[3]] {
        return Err(dim_err(format!("flow {sv:?} does not match features {sf:?}")));
    }
    Ok(f_j.warp(flow))
}

pub struct DeformableParams<'a, T: Scalar> {
    /// `[n, groups·k²·2, h, w]`, laid out `(group, tap, {dx, dy})`.
    pub offsets: Var<'a, T>,
    /// `[n, groups·k², h, w]`, in `(0, 1)`.
    pub modulation: Var<'a, T>,
}

/// `flow` repeated once per (group, tap).
pub fn tile_flow<'a, T: Scalar>(flow: Var<'a, T>, copies: usize) -> Var<'a, T> {
    Var::concat(&vec![flow; copies], 1)
}

pub fn compute_deformable_params<'a, T: Scalar>(
    ctx: &Ctx<'a, T>,
    prefix: &str,
    cfg: &PropagationConfig,
    warped: Var<'a, T>,
    f_i: Var<'a, T>,
    flow: Var<'a, T>,
) -> DeformableParams<'a, T> {
    let gk = cfg.groups * cfg.taps();
    let x = Var::concat(&[warped, f_i, flow], 1);
    let hidden = lrelu(conv(ctx, &format!("{prefix}.off1"), x, 3, 1, 1));
    let raw = conv(ctx, &format!("{prefix}.off2"), hidden, 3, 1, 1);
    let residual = raw.narrow(1, 0, 2 * gk).tanh().scale(T::lit(cfg.r_max));
    DeformableParams {
        offsets: tile_flow(flow, gk) + residual,
        modulation: raw.narrow(1, 2 * gk, gk).sigmoid(),
    }
}

/// Modulated deformable convolution of `f_j` (weights `{prefix}.dcn`).
pub fn deformable_conv<'a, T: Scalar>(
    ctx: &Ctx<'a, T>,
    prefix: &str,
    cfg: &PropagationConfig,
    f_j: Var<'a, T>,
    dp: &DeformableParams<'a, T>,
) -> Var<'a, T> {
    let s = f_j.shape();
    let cols = f_j.deform_columns(dp.offsets, dp.modulation, cfg.kernel, cfg.groups);
    cols.apply_weight(ctx.p(&format!("{prefix}.dcn.w")))
        .reshape(&[s[0], s[1], s[2], s[3]])
        .add_bias(ctx.p(&format!("{prefix}.dcn.b")), 1)
}

/// `f_i` plus a convolutional residual of `f_i ⊕ aligned`.
pub fn compensate<'a, T: Scalar>(ctx: &Ctx<'a, T>, prefix: &str, f_i: Var<'a, T>, aligned: Var<'a, T>) -> Var<'a, T> {
    let x = Var::concat(&[f_i, aligned], 1);
    let hidden = lrelu(conv(ctx, &format!("{prefix}.comp1"), x, 3, 1, 1));
    f_i + conv(ctx, &format!("{prefix}.comp2"), hidden, 3, 1, 1)
}

/// Deformable alignment of `f_j` followed by the residual merge into `f_i`.
pub fn deformable_compensate<'a, T: Scalar>(
    ctx: &Ctx<'a, T>,
    prefix: &str,
    cfg: &PropagationConfig,
    f_i: Var<'a, T>,
    f_j: Var<'a, T>,
    dp: &DeformableParams<'a, T>,
) -> Result<Var<'a, T>> {
    if f_i.shape() != f_j.shape() {
        return Err(dim_err(format!("feature shapes {:?} vs {:?}", f_i.shape(), f_j.shape())));
    }
    let aligned = deformable_conv(ctx, prefix, cfg, f_j, dp);
    Ok(compensate(ctx, prefix, f_i, aligned))
}

pub struct PropagationOutput<'a, T: Scalar> {
    /// `[t, c, h, w]`.
    pub fused: Var<'a, T>,
    /// Warped neighbour features per chain step, for inspection.
    pub warped: Vec<Tensor<T>>,
}

fn step<'a, T: Scalar>(
    ctx: &Ctx<'a, T>,
    prefix: &str,
    cfg: &PropagationConfig,
    f_i: Var<'a, T>,
    f_j: Var<'a, T>,
    flow: Var<'a, T>,
    warped_log: &mut Vec<Tensor<T>>,
) -> Result<Var<'a, T>> {
    let warped = warp(f_j, flow)?;
    warped_log.push((*warped.value()).clone());
    if !cfg.deformable {
        return Ok(compensate(ctx, prefix, f_i, warped));
    }
    let dp = compute_deformable_params(ctx, prefix, cfg, warped, f_i, flow);
    deformable_compensate(ctx, prefix, cfg, f_i, f_j, &dp)
}

/// Backward chain (from the last frame, using flows `i → i+1`), then the
/// forward chain (from the first frame, using flows `i → i−1`), then a
/// residual fusion.
///
/// `flows_fwd[i]` maps frame `i` into `i + 1`; `flows_bwd[i]` maps frame
/// `i + 1` into `i`. Both are `[t − 1, 2, h, w]`.
pub fn bidirectional_propagate<'a, T: Scalar>(
    ctx: &Ctx<'a, T>,
    cfg: &PropagationConfig,
    features: Var<'a, T>,
    flows_fwd: Option<Var<'a, T>>,
    flows_bwd: Option<Var<'a, T>>,
) -> Result<PropagationOutput<'a, T>> {
    let s = features.shape();
    if s.len() != 4 {
        return Err(dim_err(format!("features must be [t, c, h, w], got {s:?}")));
    }
    if !cfg.enabled {
        return Ok(PropagationOutput { fused: features, warped: Vec::new() });
    }
    let t = s[0];
    let pair_shape = [t.saturating_sub(1), 2, s[2], s[3]];
    let (ff, fb) = if t > 1 {
        match (flows_fwd, flows_bwd) {
            (Some(a), Some(b)) if a.shape() == pair_shape && b.shape() == pair_shape => (Some(a), Some(b)),
            (Some(_), Some(_)) => return Err(dim_err(format!("flows must be {pair_shape:?}"))),
            _ => return Err(Error::InvalidInput("propagation needs flows in both directions".into())),
        }
    } else {
        (None, None)
    };
    let mut warped = Vec::new();
    let mut bwd: Vec<Option<Var<'a, T>>> = vec![None; t];
    bwd[t - 1] = Some(frame(features, t - 1));
    for i in (0..t.saturating_sub(1)).rev() {
        let flow = frame(ff.expect("checked"), i);
        let next = bwd[i + 1].expect("filled in order");
        bwd[i] = Some(step(ctx, CHAINS[0], cfg, frame(features, i), next, flow, &mut warped)?);
    }
    let mut fwd: Vec<Var<'a, T>> = Vec::with_capacity(t);
    fwd.push(frame(features, 0));
    for i in 1..t {
        let flow = frame(fb.expect("checked"), i - 1);
        let prev = fwd[i - 1];
        fwd.push(step(ctx, CHAINS[1], cfg, frame(features, i), prev, flow, &mut warped)?);
    }
    let b = Var::concat(&bwd.into_iter().map(|v| v.expect("filled")).collect::<Vec<_>>(), 0);
    let f = Var::concat(&fwd, 0);
    let fused = features + conv(ctx, "prop.fuse", Var::concat(&[f, b], 1), 1, 1, 1);
    Ok(PropagationOutput { fused, warped })
}
