//! Transformer blocks over spatio-temporal token grids: multi-head attention
//! with pluggable neighbourhood structure plus the feed-forward ladder
//! (plain, fused, mixed-conv, mixed-conv fused).
//!
//! Tokens are rows of a `[t·gh·gw, c]` matrix in `(frame, row, col)` order.

use flowlens_tensor::{attention_weights, Ctx, Neighborhoods, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::layers::{conv, declare_conv, declare_layer_norm, declare_linear, layer_norm, linear, WeightInit};
use crate::token_embedding::{soft_composite, TokenLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Dense,
    LocalWindow,
    Focal,
    Decoupled3d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionVariant {
    pub kind: AttentionKind,
    /// Window `(rows, cols)` for the windowed kinds; the last window along an
    /// axis is shorter when the grid does not divide evenly.
    pub window: (usize, usize),
    /// Pooled coarse levels for the focal kind (0 = local window only).
    pub focal_levels: usize,
    /// Pooling block of the first coarse level; doubled per further level.
    pub pool_kernel: (usize, usize),
}

impl Default for AttentionVariant {
    fn default() -> Self {
        Self { kind: AttentionKind::Focal, window: (5, 9), focal_levels: 1, pool_kernel: (4, 4) }
    }
}

impl AttentionVariant {
    pub fn dense() -> Self {
        Self { kind: AttentionKind::Dense, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window.0 == 0 || self.window.1 == 0 || self.pool_kernel.0 == 0 || self.pool_kernel.1 == 0 {
            return Err(Error::Config("attention window and pool kernel must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    Ffn,
    F3n,
    MixFfn,
    Mixf3n,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FfnVariant {
    pub kind: FfnKind,
    pub hidden_ratio: usize,
    /// Channels of the composited hidden plane for the fused kinds;
    /// derived from `hidden_ratio` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_channels: Option<usize>,
}

impl Default for FfnVariant {
    fn default() -> Self {
        Self { kind: FfnKind::Mixf3n, hidden_ratio: 4, hidden_channels: None }
    }
}

impl FfnVariant {
    /// Hidden width of the token-space kinds, or plane channels for the
    /// fused kinds (`hidden_ratio · c / k²` rounded to an even count).
    pub fn plane_channels(&self, embed_dim: usize, patch_area: usize) -> usize {
        self.hidden_channels.unwrap_or_else(|| {
            let raw = (self.hidden_ratio * embed_dim) as f64 / patch_area as f64;
            (((raw / 2.0).round() as usize) * 2).max(2)
        })
    }

    pub fn validate(&self, embed_dim: usize, patch_area: usize) -> Result<()> {
        if self.hidden_ratio == 0 {
            return Err(Error::Config("hidden_ratio must be at least 1".into()));
        }
        let ch = self.plane_channels(embed_dim, patch_area);
        let split = matches!(self.kind, FfnKind::Mixf3n | FfnKind::MixFfn);
        let width = if self.kind == FfnKind::MixFfn { self.hidden_ratio * embed_dim } else { ch };
        if split && width % 2 != 0 {
            return Err(Error::Config(format!("mixed feed-forward needs an even channel count, got {width}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub attention: AttentionVariant,
    pub ffn: FfnVariant,
}

impl BlockConfig {
    pub fn validate(&self, patch_area: usize) -> Result<()> {
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide width {}", self.heads, self.embed_dim)));
        }
        self.attention.validate()?;
        self.ffn.validate(self.embed_dim, patch_area)
    }
}

/// Which key rows every query sees, plus pooled key rows appended after
/// the token keys.
#[derive(Clone, Debug)]
pub struct KeyPlan {
    pub neighborhoods: Neighborhoods,
    /// Each group averages token key rows into one extra key.
    pub pools: Option<Neighborhoods>,
}

fn blocks(len: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    (0..len.div_ceil(size)).map(|b| b * size..((b + 1) * size).min(len)).collect()
}

/// Per-frame pooling groups of `(ph, pw)` token blocks, all frames.
pub fn pool_groups(frames: usize, gh: usize, gw: usize, ph: usize, pw: usize) -> Vec<Vec<usize>> {
    let mut groups = Vec::new();
    for t in 0..frames {
        for rows in blocks(gh, ph) {
            for cols in blocks(gw, pw) {
                let g = rows.clone().flat_map(|i| cols.clone().map(move |j| (t * gh + i) * gw + j)).collect();
                groups.push(g);
            }
        }
    }
    groups
}

pub fn key_plan(variant: &AttentionVariant, frames: usize, gh: usize, gw: usize) -> KeyPlan {
    let n = frames * gh * gw;
    let idx = |t: usize, i: usize, j: usize| (t * gh + i) * gw + j;
    match variant.kind {
        AttentionKind::Dense => KeyPlan { neighborhoods: Neighborhoods::dense(n, n), pools: None },
        AttentionKind::LocalWindow | AttentionKind::Focal => {
            let (wh, ww) = variant.window;
            let mut pools = Vec::new();
            if variant.kind == AttentionKind::Focal {
                for l in 0..variant.focal_levels {
                    let f = 1 << l;
                    pools.extend(pool_groups(frames, gh, gw, variant.pool_kernel.0 * f, variant.pool_kernel.1 * f));
                }
            }
            let coarse: Vec<usize> = (n..n + pools.len()).collect();
            let lists = (0..n).map(|q| {
                let (i, j) = ((q / gw) % gh, q % gw);
                let rows = (i / wh) * wh..((i / wh + 1) * wh).min(gh);
                let cols = (j / ww) * ww..((j / ww + 1) * ww).min(gw);
                let mut keys = Vec::new();
                for t in 0..frames {
                    for r in rows.clone() {
                        for c in cols.clone() {
                            keys.push(idx(t, r, c));
                        }
                    }
                }
                keys.extend_from_slice(&coarse);
                keys
            });
            let neighborhoods = Neighborhoods::from_lists(lists.collect::<Vec<_>>());
            KeyPlan { neighborhoods, pools: (!pools.is_empty()).then(|| Neighborhoods::from_lists(pools)) }
        }
        AttentionKind::Decoupled3d => {
            let lists = (0..n).map(|q| {
                let (t0, i0, j0) = (q / (gh * gw), (q / gw) % gh, q % gw);
                let mut keys: Vec<usize> = (0..frames).map(|t| idx(t, i0, j0)).collect();
                keys.extend((0..gw).map(|j| idx(t0, i0, j)));
                keys.extend((0..gh).map(|i| idx(t0, i, j0)));
                keys.sort_unstable();
                keys.dedup();
                keys
            });
            KeyPlan { neighborhoods: Neighborhoods::from_lists(lists.collect::<Vec<_>>()), pools: None }
        }
    }
}

/// Token keys/values with any pooled rows appended.
pub fn expand<'a, T: Scalar>(x: Var<'a, T>, plan: &KeyPlan) -> Var<'a, T> {
    match &plan.pools {
        Some(p) => Var::concat(&[x, x.group_mean(p)], 0),
        None => x,
    }
}

/// Per-query scaled dot-product attention under `variant`, no projections.
pub fn attend<'a, T: Scalar>(
    q: Var<'a, T>,
    k: Var<'a, T>,
    v: Var<'a, T>,
    layout: &TokenLayout,
    variant: &AttentionVariant,
    heads: usize,
) -> Result<Var<'a, T>> {
    let n = layout.tokens();
    let c = q.shape()[1];
    for (name, x) in [("queries", q), ("keys", k), ("values", v)] {
        if x.shape() != [n, c] {
            return Err(dim_err(format!("{name} {:?} vs {n} tokens of width {c}", x.shape())));
        }
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide width {c}")));
    }
    let plan = key_plan(variant, layout.frames, layout.grid_h, layout.grid_w);
    Ok(q.index_attention(expand(k, &plan), expand(v, &plan), heads, &plan.neighborhoods))
}

/// Softmax weights `[head][pair]` (debug path) and the key plan they follow.
pub fn attention_debug<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    layout: &TokenLayout,
    variant: &AttentionVariant,
    heads: usize,
) -> (Vec<Vec<T>>, KeyPlan) {
    let g = flowlens_tensor::Graph::no_grad();
    let plan = key_plan(variant, layout.frames, layout.grid_h, layout.grid_w);
    let keys = expand(g.constant(k.clone()), &plan).value();
    (attention_weights(q, &keys, heads, &plan.neighborhoods), plan)
}

pub fn declare_block<T: Scalar>(s: &mut ParamStore<T>, prefix: &str, cfg: &BlockConfig, patch_area: usize) {
    let c = cfg.embed_dim;
    declare_layer_norm(s, &format!("{prefix}.ln1"), c);
    declare_linear(s, &format!("{prefix}.qkv"), c, 3 * c, WeightInit::Kaiming);
    declare_linear(s, &format!("{prefix}.proj"), c, c, WeightInit::Kaiming);
    declare_layer_norm(s, &format!("{prefix}.ln2"), c);
    declare_ffn(s, prefix, cfg, patch_area);
}

fn declare_ffn<T: Scalar>(s: &mut ParamStore<T>, prefix: &str, cfg: &BlockConfig, patch_area: usize) {
    let c = cfg.embed_dim;
    let f = cfg.ffn;
    let (hidden, plane) = match f.kind {
        FfnKind::Ffn | FfnKind::MixFfn => (f.hidden_ratio * c, f.hidden_ratio * c),
        FfnKind::F3n | FfnKind::Mixf3n => {
            let ch = f.plane_channels(c, patch_area);
            (ch * patch_area, ch)
        }
    };
    declare_linear(s, &format!("{prefix}.fc1"), c, hidden, WeightInit::Kaiming);
    declare_linear(s, &format!("{prefix}.fc2"), hidden, c, WeightInit::Kaiming);
    if matches!(f.kind, FfnKind::MixFfn | FfnKind::Mixf3n) {
        let half = plane / 2;
        declare_conv(s, &format!("{prefix}.dw3"), half, half, 3, half, WeightInit::Dirac(0.1));
        declare_conv(s, &format!("{prefix}.dw5"), half, half, 5, half, WeightInit::Dirac(0.1));
    }
}

/// Query, key and value projections of (already normalized) tokens.
pub fn qkv<'a, T: Scalar>(ctx: &Ctx<'a, T>, prefix: &str, x: Var<'a, T>) -> (Var<'a, T>, Var<'a, T>, Var<'a, T>) {
    let c = x.shape()[1];
    let all = linear(ctx, &format!("{prefix}.qkv"), x);
    (all.narrow(1, 0, c), all.narrow(1, c, c), all.narrow(1, 2 * c, c))
}

/// Multi-head attention followed by the output projection.
pub fn mhfa<'a, T: Scalar>(
    ctx: &Ctx<'a, T>,
    prefix: &str,
    q: Var<'a, T>,
    k: Var<'a, T>,
    v: Var<'a, T>,
    layout: &TokenLayout,
    cfg: &BlockConfig,
) -> Result<Var<'a, T>> {
    let z = attend(q, k, v, layout, &cfg.attention, cfg.heads)?;
    Ok(linear(ctx, &format!("{prefix}.proj"), z))
}

/// `[n, c]` tokens as a `[t, c, gh, gw]` plane.
pub fn tokens_to_grid<'a, T: Scalar>(x: Var<'a, T>, layout: &TokenLayout) -> Var<'a, T> {
    let c = x.shape()[1];
    x.reshape(&[layout.frames, layout.grid_h, layout.grid_w, c]).permute(&[0, 3, 1, 2])
}

pub fn grid_to_tokens<'a, T: Scalar>(x: Var<'a, T>) -> Var<'a, T> {
    let s = x.shape();
    x.permute(&[0, 2, 3, 1]).reshape(&[s[0] * s[2] * s[3], s[1]])
}

/// Depthwise 3×3 on the first channel half, 5×5 on the second.
pub fn mixed_depthwise<'a, T: Scalar>(ctx: &Ctx<'a, T>, prefix: &str, plane: Var<'a, T>) -> Result<Var<'a, T>> {
    let c = plane.shape()[1];
    if c % 2 != 0 {
        return Err(Error::Config(format!("mixed depthwise branches need an even channel count, got {c}")));
    }
    let half = c / 2;
    let a = conv(ctx, &format!("{prefix}.dw3"), plane.narrow(1, 0, half), 3, 1, half);
    let b = conv(ctx, &format!("{prefix}.dw5"), plane.narrow(1, half, half), 5, 1, half);
    Ok(Var::concat(&[a, b], 1))
}

/// Feed-forward branch on normalized tokens `[n, c]`.
pub fn feed_forward<'a, T: Scalar>(
    ctx: &Ctx<'a, T>,
    prefix: &str,
    x: Var<'a, T>,
    layout: &TokenLayout,
    cfg: &BlockConfig,
) -> Result<Var<'a, T>> {
    let h = linear(ctx, &format!("{prefix}.fc1"), x);
    let hidden = h.shape()[1];
    let mixed = match cfg.ffn.kind {
        FfnKind::Ffn => h,
        FfnKind::MixFfn => grid_to_tokens(mixed_depthwise(ctx, prefix, tokens_to_grid(h, layout))?),
        FfnKind::F3n | FfnKind::Mixf3n => {
            let area = layout.geom.kernel * layout.geom.kernel;
            if hidden % area != 0 {
                return Err(Error::Config(format!("hidden width {hidden} is not a multiple of the patch area {area}")));
            }
            let plane_layout = layout.with_channels(hidden / area);
            let tokens = h.reshape(&[layout.frames, layout.per_frame(), hidden]);
            let mut plane = soft_composite(tokens, &plane_layout)?;
            if cfg.ffn.kind == FfnKind::Mixf3n {
                plane = mixed_depthwise(ctx, prefix, plane)?;
            }
            plane.unfold_patches(layout.geom).reshape(&[layout.tokens(), hidden])
        }
    };
    Ok(linear(ctx, &format!("{prefix}.fc2"), mixed.gelu()))
}

/// Output of the attention half of a block.
pub struct AttentionStage<'a, T: Scalar> {
    /// `x + MHFA(LN1(x))`.
    pub z: Var<'a, T>,
    pub q: Var<'a, T>,
    pub k: Var<'a, T>,
    pub v: Var<'a, T>,
}

pub fn attention_stage<'a, T: Scalar>(
    ctx: &Ctx<'a, T>,
    prefix: &str,
    x: Var<'a, T>,
    layout: &TokenLayout,
    cfg: &BlockConfig,
) -> Result<AttentionStage<'a, T>> {
    let (q, k, v) = qkv(ctx, prefix, layer_norm(ctx, &format!("{prefix}.ln1"), x));
    let z = x + mhfa(ctx, prefix, q, k, v, layout, cfg)?;
    Ok(AttentionStage { z, q, k, v })
}

pub fn ffn_stage<'a, T: Scalar>(
    ctx: &Ctx<'a, T>,
    prefix: &str,
    z: Var<'a, T>,
    layout: &TokenLayout,
    cfg: &BlockConfig,
) -> Result<Var<'a, T>> {
    let y = feed_forward(ctx, prefix, layer_norm(ctx, &format!("{prefix}.ln2"), z), layout, cfg)?;
    Ok(z + y)
}

/// Full block: attention residual, then feed-forward residual.
pub fn block_forward<'a, T: Scalar>(
    ctx: &Ctx<'a, T>,
    prefix: &str,
    x: Var<'a, T>,
    layout: &TokenLayout,
    cfg: &BlockConfig,
) -> Result<Var<'a, T>> {
    let a = attention_stage(ctx, prefix, x, layout, cfg)?;
    ffn_stage(ctx, prefix, a.z, layout, cfg)
}
