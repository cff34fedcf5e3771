//! The full generator: convolutional stem, flow-guided propagation of the
//! local frames, a transformer over local and reference tokens (with the
//! clip-recurrent hub in selected blocks), and a transpose-conv decoder.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use flowlens_tensor::{Ctx, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::clip_recurrent_hub::{self as hub, strip_plan, temporal_plan, ClipCache, HubConfig, StripAxis};
use crate::error::{dim_err, Error, Result};
use crate::explicit_propagation::{self as prop, PropagationConfig};
use crate::flow_completion::{self as flow, level_dims, FlowNetConfig, FINEST_LEVEL};
use crate::layers::{conv, conv_transpose, declare_conv, declare_conv_transpose, declare_linear, linear, lrelu, WeightInit};
use crate::mix_focal_transformer::{
    attention_stage, declare_block, ffn_stage, key_plan, AttentionVariant, BlockConfig, FfnKind, FfnVariant,
};
use crate::token_embedding::{soft_composite, soft_split, PatchConfig, TokenLayout};

/// Which transformer blocks carry a clip-recurrent hub.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HubPlacement {
    #[default]
    Early,
    Middle,
    Late,
    All,
    None,
}

impl HubPlacement {
    pub fn blocks(&self, n: usize) -> Vec<usize> {
        match self {
            HubPlacement::Early => vec![0],
            HubPlacement::Middle => vec![n / 2],
            HubPlacement::Late => vec![n - 1],
            HubPlacement::All => (0..n).collect(),
            HubPlacement::None => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature channels `C` of the stem and propagation.
    pub channels: usize,
    /// Transformer width `C_e`.
    pub embed_dim: usize,
    /// Transformer blocks, hub-equipped ones included.
    pub blocks: usize,
    pub heads: usize,
    pub local_frames: usize,
    pub ref_frames: usize,
    pub patch: PatchConfig,
    pub attention: AttentionVariant,
    pub ffn: FfnVariant,
    pub hub_placement: HubPlacement,
    pub hub: HubConfig,
    pub flow: FlowNetConfig,
    pub propagation: PropagationConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl ModelConfig {
    pub fn standard() -> Self {
        Self {
            channels: 128,
            embed_dim: 512,
            blocks: 9,
            heads: 4,
            local_frames: 5,
            ref_frames: 3,
            patch: PatchConfig::default(),
            attention: AttentionVariant::default(),
            ffn: FfnVariant::default(),
            hub_placement: HubPlacement::Early,
            hub: HubConfig::default(),
            flow: FlowNetConfig::default(),
            propagation: PropagationConfig::default(),
        }
    }

    pub fn small() -> Self {
        Self { channels: 64, embed_dim: 256, blocks: 5, ..Self::standard() }
    }

    /// Overfitting-scale model for 64×64 clips.
    pub fn tiny() -> Self {
        Self {
            channels: 32,
            embed_dim: 64,
            blocks: 2,
            attention: AttentionVariant { window: (3, 3), pool_kernel: (2, 2), ..Default::default() },
            hub: HubConfig { strip_width: 2, pool_kernel: 2 },
            flow: FlowNetConfig { levels: 4, base_channels: 8, frozen: false },
            ..Self::standard()
        }
    }

    /// Smallest useful model, for long ablation runs on 48×48 clips.
    pub fn micro() -> Self {
        Self {
            channels: 16,
            embed_dim: 32,
            blocks: 2,
            heads: 2,
            local_frames: 3,
            ref_frames: 2,
            attention: AttentionVariant { window: (2, 2), pool_kernel: (2, 2), ..Default::default() },
            hub: HubConfig { strip_width: 2, pool_kernel: 2 },
            flow: FlowNetConfig { levels: 3, base_channels: 8, frozen: false },
            propagation: PropagationConfig { groups: 2, ..Default::default() },
            ..Self::standard()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "standard" => Ok(Self::standard()),
            "small" => Ok(Self::small()),
            "tiny" => Ok(Self::tiny()),
            "micro" => Ok(Self::micro()),
            other => Err(Error::Config(format!("unknown preset {other:?} (standard|small|tiny|micro)"))),
        }
    }

    pub fn frames(&self) -> usize {
        self.local_frames + self.ref_frames
    }

    pub fn patch_area(&self) -> usize {
        self.patch.patch * self.patch.patch
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig { embed_dim: self.embed_dim, heads: self.heads, attention: self.attention, ffn: self.ffn }
    }

    pub fn hub_blocks(&self) -> Vec<usize> {
        self.hub_placement.blocks(self.blocks)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("local_frames", self.local_frames),
            ("patch", self.patch.patch),
            ("stride", self.patch.stride),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.channels % 4 != 0 {
            return Err(Error::Config(format!("channels {} must be divisible by 4", self.channels)));
        }
        self.block().validate(self.patch_area())?;
        self.hub.validate()?;
        self.flow.validate()?;
        if self.propagation.enabled {
            self.propagation.validate(self.channels)?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    /// `self` with the keys of a partial TOML document replaced; nested
    /// tables merge key by key, so an ablation is a few-line diff.
    pub fn with_overrides(&self, diff: &str) -> Result<Self> {
        let diff: toml::Table = toml::from_str(diff).map_err(|e| Error::Config(e.to_string()))?;
        let mut base = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, diff);
        let cfg: Self = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file as a diff over `base`.
    pub fn load_over(base: &Self, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        base.with_overrides(&text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

fn merge(base: &mut toml::Table, diff: toml::Table) {
    for (k, v) in diff {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(d)) => merge(b, d),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Input channels of stem and flow net: masked RGB plus the mask.
pub const INPUT_CHANNELS: usize = 4;

pub fn declare_model<T: Scalar>(s: &mut ParamStore<T>, cfg: &ModelConfig) {
    let c = cfg.channels;
    declare_conv(s, "stem.c1", INPUT_CHANNELS, c / 2, 3, 1, WeightInit::Kaiming);
    declare_conv(s, "stem.c2", c / 2, c / 2, 3, 1, WeightInit::Kaiming);
    declare_conv(s, "stem.c3", c / 2, c, 3, 1, WeightInit::Kaiming);
    declare_conv(s, "stem.c4", c, c, 3, 1, WeightInit::Kaiming);
    if cfg.propagation.enabled {
        flow::declare(s, &cfg.flow, INPUT_CHANNELS);
        prop::declare(s, &cfg.propagation, c);
        if cfg.flow.frozen {
            s.set_trainable("flow.", false);
        }
    }
    let patch_dim = c * cfg.patch_area();
    declare_linear(s, "embed", patch_dim, cfg.embed_dim, WeightInit::Kaiming);
    let block = cfg.block();
    let hubs = cfg.hub_blocks();
    for b in 0..cfg.blocks {
        declare_block(s, &format!("blocks.{b}"), &block, cfg.patch_area());
        if hubs.contains(&b) {
            hub::declare(s, &format!("blocks.{b}.hub"), cfg.embed_dim);
        }
    }
    declare_linear(s, "unembed", cfg.embed_dim, patch_dim, WeightInit::Kaiming);
    declare_conv_transpose(s, "dec.up1", c, c / 2, 4);
    declare_conv(s, "dec.c1", c / 2, c / 2, 3, 1, WeightInit::Kaiming);
    declare_conv_transpose(s, "dec.up2", c / 2, c / 4, 4);
    declare_conv(s, "dec.out", c / 4, 3, 3, 1, WeightInit::Scaled(0.1));
}

/// One generator with its parameters.
#[derive(Clone, Debug)]
pub struct Generator<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(seed);
        declare_model(&mut params, &config);
        Ok(Self { config, params })
    }
}

/// Hub caches of one video stream, keyed by block index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelCache<T: Scalar> {
    pub hubs: BTreeMap<usize, ClipCache<T>>,
}

impl<T: Scalar> ModelCache<T> {
    pub fn new() -> Self {
        Self { hubs: BTreeMap::new() }
    }

    pub fn reset(&mut self) {
        self.hubs.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.hubs.values().all(ClipCache::is_empty)
    }
}

/// A clip as the generator sees it.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipInput<T: Scalar> {
    /// `[local + ref, 3, h, w]` in `[0, 1]`, local frames first. Values under
    /// the mask are ignored.
    pub frames: Tensor<T>,
    /// `[local + ref, 1, h, w]`, 1 marks missing pixels.
    pub masks: Tensor<T>,
    /// Number of leading frames to complete; the rest are references.
    pub local: usize,
}

impl<T: Scalar> ClipInput<T> {
    pub fn new(frames: Tensor<T>, masks: Tensor<T>, local: usize) -> Result<Self> {
        let (f, m) = (frames.shape(), masks.shape());
        if f.len() != 4 || f[1] != 3 || m != [f[0], 1, f[2], f[3]] {
            return Err(dim_err(format!("frames {f:?} and masks {m:?} do not form a clip")));
        }
        if local == 0 || local > f[0] {
            return Err(dim_err(format!("{local} local frames in a clip of {}", f[0])));
        }
        Ok(Self { frames, masks, local })
    }

    pub fn refs(&self) -> usize {
        self.len() - self.local
    }

    pub fn len(&self) -> usize {
        self.frames.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn size(&self) -> (usize, usize) {
        (self.frames.dim(2), self.frames.dim(3))
    }

    /// Masks repeated over the colour channels, `[n, 3, h, w]`.
    pub fn masks_rgb(&self) -> Tensor<T> {
        let (h, w) = self.size();
        let hw = h * w;
        let m = self.masks.data();
        Tensor::from_fn(&[self.len(), 3, h, w], |i| m[(i / (3 * hw)) * hw + i % hw])
    }

    /// `[n, 4, h, w]` network input: masked frames in `[−1, 1]` (zero under
    /// the mask) and the mask.
    pub fn network_input(&self) -> Tensor<T> {
        let (h, w) = self.size();
        let hw = h * w;
        let n = self.len();
        let (f, m) = (self.frames.data(), self.masks.data());
        Tensor::from_fn(&[n, INPUT_CHANNELS, h, w], |i| {
            let (t, ch, p) = (i / (INPUT_CHANNELS * hw), (i / hw) % INPUT_CHANNELS, i % hw);
            let mv = m[t * hw + p];
            if ch == 3 {
                mv
            } else {
                (f[(t * 3 + ch) * hw + p] * T::lit(2.0) - T::one()) * (T::one() - mv)
            }
        })
    }
}

/// Completed local frames.
pub struct GeneratorOutput<'a, T: Scalar> {
    /// Raw predictions `[local, 3, h, w]` in `[0, 1]`.
    pub frames: Var<'a, T>,
    /// Predictions under the mask, input elsewhere.
    pub composited: Var<'a, T>,
    /// Quarter-resolution flows `i → i+1` and `i+1 → i` of the local frames.
    pub flows_fwd: Option<Var<'a, T>>,
    pub flows_bwd: Option<Var<'a, T>>,
    /// Warped neighbour features of each propagation step.
    pub warped: Vec<Tensor<T>>,
    /// Cached keys each hub queried, by block.
    pub hub_keys: BTreeMap<usize, Tensor<T>>,
}

/// Quarter-resolution features `[n, C, h/4, w/4]` of a `[n, 4, h, w]` input.
pub fn encode<'a, T: Scalar>(ctx: &Ctx<'a, T>, input: Var<'a, T>) -> Result<Var<'a, T>> {
    let s = input.shape();
    if s.len() != 4 || s[1] != INPUT_CHANNELS {
        return Err(dim_err(format!("stem input must be [n, {INPUT_CHANNELS}, h, w], got {s:?}")));
    }
    if s[2] % 4 != 0 || s[3] % 4 != 0 {
        return Err(dim_err(format!("frame size {}x{} must be divisible by 4", s[2], s[3])));
    }
    let x = lrelu(conv(ctx, "stem.c1", input, 3, 2, 1));
    let x = lrelu(conv(ctx, "stem.c2", x, 3, 1, 1));
    let x = lrelu(conv(ctx, "stem.c3", x, 3, 2, 1));
    Ok(lrelu(conv(ctx, "stem.c4", x, 3, 1, 1)))
}

/// Full-resolution residual from features `[n, C, h/4, w/4]`.
pub fn decode<'a, T: Scalar>(ctx: &Ctx<'a, T>, features: Var<'a, T>) -> Var<'a, T> {
    let x = lrelu(conv_transpose(ctx, "dec.up1", features));
    let x = lrelu(conv(ctx, "dec.c1", x, 3, 1, 1));
    let x = lrelu(conv_transpose(ctx, "dec.up2", x));
    conv(ctx, "dec.out", x, 3, 1, 1)
}

/// Flows between consecutive local frames at quarter resolution.
fn local_flows<'a, T: Scalar>(
    ctx: &Ctx<'a, T>,
    cfg: &ModelConfig,
    input: Var<'a, T>,
) -> (Var<'a, T>, Var<'a, T>) {
    let t = input.shape()[0];
    let feats = flow::encode(ctx, &cfg.flow, input);
    let a: Vec<usize> = (0..t - 1).collect();
    let b: Vec<usize> = (1..t).collect();
    let src: Vec<usize> = a.iter().chain(&b).copied().collect();
    let dst: Vec<usize> = b.iter().chain(&a).copied().collect();
    let both = flow::pyramid_from_features(ctx, &cfg.flow, &feats, &src, &dst).finest();
    (both.narrow(0, 0, t - 1), both.narrow(0, t - 1, t - 1))
}

pub fn generator_forward<'a, T: Scalar>(
    ctx: &Ctx<'a, T>,
    cfg: &ModelConfig,
    clip: &ClipInput<T>,
    cache: &mut ModelCache<T>,
    video_id: &str,
) -> Result<GeneratorOutput<'a, T>> {
    let g = ctx.graph();
    let nl = clip.local;
    let input = g.constant(clip.network_input());
    let features = encode(ctx, input)?;
    let local = features.narrow(0, 0, nl);

    let (mut flows_fwd, mut flows_bwd) = (None, None);
    if cfg.propagation.enabled && nl > 1 {
        let (f, b) = local_flows(ctx, cfg, input.narrow(0, 0, nl));
        flows_fwd = Some(f);
        flows_bwd = Some(b);
    }
    let propagated = prop::bidirectional_propagate(ctx, &cfg.propagation, local, flows_fwd, flows_bwd)?;
    let all = if clip.refs() > 0 {
        Var::concat(&[propagated.fused, features.narrow(0, nl, clip.refs())], 0)
    } else {
        propagated.fused
    };

    let (tokens, layout) = soft_split(all, cfg.patch)?;
    let mut x = linear(ctx, "embed", tokens.reshape(&[layout.tokens(), layout.patch_dim()]));
    let block = cfg.block();
    let hubs = cfg.hub_blocks();
    let mut hub_keys = BTreeMap::new();
    for b in 0..cfg.blocks {
        let prefix = format!("blocks.{b}");
        let a = attention_stage(ctx, &prefix, x, &layout, &block)?;
        let z = if hubs.contains(&b) {
            let c = cache.hubs.entry(b).or_default();
            let out = hub::hub_forward(ctx, &format!("{prefix}.hub"), a.z, a.q, a.k, a.v, &layout, &cfg.hub, cfg.heads, c, video_id)?;
            hub_keys.insert(b, out.queried_keys);
            out.tokens
        } else {
            a.z
        };
        x = ffn_stage(ctx, &prefix, z, &layout, &block)?;
    }
    let back = linear(ctx, "unembed", x).reshape(&[layout.frames, layout.per_frame(), layout.patch_dim()]);
    let plane = soft_composite(back, &layout)?.narrow(0, 0, nl);
    let residual = decode(ctx, propagated.fused + plane);

    let base = input.narrow(0, 0, nl).narrow(1, 0, 3);
    let net = (base + residual).clamp(-T::one(), T::one());
    let frames = net.add_scalar(T::one()).scale(T::lit(0.5));
    let m = clip.masks_rgb().narrow(0, 0, nl);
    let keep = m.map(|v| T::one() - v);
    let known = clip.frames.narrow(0, 0, nl).zip_map(&keep, |a, b| a * b);
    let composited = frames * g.constant(m) + g.constant(known);
    Ok(GeneratorOutput { frames, composited, flows_fwd, flows_bwd, warped: propagated.warped, hub_keys })
}

/// Analytic cost of one generator forward pass, in FLOPs (2 per
/// multiply-accumulate), by component.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FlopReport {
    pub stem: f64,
    pub flow: f64,
    pub propagation: f64,
    pub embedding: f64,
    pub blocks: f64,
    pub hub: f64,
    pub decoder: f64,
}

impl FlopReport {
    pub fn total(&self) -> f64 {
        self.stem + self.flow + self.propagation + self.embedding + self.blocks + self.hub + self.decoder
    }

    pub fn hub_share(&self) -> f64 {
        self.hub / self.total()
    }
}

fn conv_macs(cin: usize, cout: usize, k: usize, groups: usize, out_hw: (usize, usize)) -> f64 {
    (cout * (cin / groups) * k * k) as f64 * (out_hw.0 * out_hw.1) as f64
}

/// Counts bilinear sampling as four multiply-accumulates per channel.
fn sample_macs(c: usize, hw: (usize, usize)) -> f64 {
    4.0 * (c * hw.0 * hw.1) as f64
}

fn attention_macs(pairs: usize, width: usize) -> f64 {
    2.0 * pairs as f64 * width as f64
}

/// Cost at frame size `h × w` for the configured clip length.
pub fn count_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<FlopReport> {
    cfg.validate()?;
    let (c, ce, nl, nt) = (cfg.channels, cfg.embed_dim, cfg.local_frames, cfg.frames());
    let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
    let (h4, w4) = (h2.div_ceil(2), w2.div_ceil(2));
    let mut r = FlopReport::default();

    r.stem = nt as f64
        * (conv_macs(INPUT_CHANNELS, c / 2, 3, 1, (h2, w2))
            + conv_macs(c / 2, c / 2, 3, 1, (h2, w2))
            + conv_macs(c / 2, c, 3, 1, (h4, w4))
            + conv_macs(c, c, 3, 1, (h4, w4)));

    if cfg.propagation.enabled && nl > 1 {
        let f = &cfg.flow;
        let mut cin = INPUT_CHANNELS;
        let mut enc = 0.0;
        for l in 1..=f.levels {
            let dims = level_dims(h, w, l);
            enc += conv_macs(cin, f.channels(l), 3, 1, dims) + conv_macs(f.channels(l), f.channels(l), 3, 1, dims);
            cin = f.channels(l);
        }
        let pairs = 2 * (nl - 1);
        let mut dec = 0.0;
        for l in FINEST_LEVEL..=f.levels {
            let (dims, cl) = (level_dims(h, w, l), f.channels(l));
            dec += sample_macs(cl, dims) + conv_macs(2 * cl + 2, cl, 3, 1, dims) + conv_macs(cl, 2, 3, 1, dims);
        }
        r.flow = nl as f64 * enc + pairs as f64 * dec;

        let p = &cfg.propagation;
        let taps = p.kernel * p.kernel;
        let q = (h4, w4);
        let mut step = sample_macs(c, q) + conv_macs(2 * c, c, 3, 1, q) + conv_macs(c, c, 3, 1, q);
        if p.deformable {
            step += conv_macs(2 * c + 2, c, 3, 1, q)
                + conv_macs(c, 3 * p.groups * taps, 3, 1, q)
                + sample_macs(c * taps, q)
                + conv_macs(c * taps, c, 1, 1, q);
        }
        r.propagation = pairs as f64 * step + nl as f64 * conv_macs(2 * c, c, 1, 1, q);
    }

    let layout = TokenLayout::new(nt, c, h4, w4, cfg.patch)?;
    let n = layout.tokens();
    let patch_dim = layout.patch_dim();
    r.embedding = 2.0 * (n * patch_dim * ce) as f64;

    let plan = key_plan(&cfg.attention, nt, layout.grid_h, layout.grid_w);
    let pooled = plan.pools.as_ref().map_or(0, |p| p.pairs());
    let ffn = &cfg.ffn;
    let area = cfg.patch_area();
    let ffn_macs = match ffn.kind {
        FfnKind::Ffn => 2.0 * (n * ce * ffn.hidden_ratio * ce) as f64,
        FfnKind::MixFfn => {
            let hid = ffn.hidden_ratio * ce;
            2.0 * (n * ce * hid) as f64 + (n * hid / 2) as f64 * (9.0 + 25.0)
        }
        FfnKind::F3n | FfnKind::Mixf3n => {
            let ch = ffn.plane_channels(ce, area);
            let mut m = 2.0 * (n * ce * ch * area) as f64;
            if ffn.kind == FfnKind::Mixf3n {
                m += (nt * h4 * w4 * ch / 2) as f64 * (9.0 + 25.0);
            }
            m
        }
    };
    let block = 4.0 * (n * ce * ce) as f64 + attention_macs(plan.neighborhoods.pairs(), ce) + (pooled * ce) as f64 + ffn_macs;
    r.blocks = cfg.blocks as f64 * block;

    let hubs = cfg.hub_blocks().len();
    if hubs > 0 {
        let (h_nb, h_pool) = strip_plan(&layout, StripAxis::Horizontal, &cfg.hub);
        let (v_nb, v_pool) = strip_plan(&layout, StripAxis::Vertical, &cfg.hub);
        let pairs = temporal_plan(&layout).pairs() + h_nb.pairs() + v_nb.pairs();
        let pooling = h_pool.map_or(0, |p| p.pairs()) + v_pool.map_or(0, |p| p.pairs());
        let proj = 7.0 * (n * ce * ce) as f64;
        r.hub = hubs as f64 * (proj + attention_macs(pairs, ce) + 2.0 * (pooling * ce) as f64);
    }

    r.decoder = nl as f64
        * (conv_macs(c, c / 2, 4, 1, (h4, w4))
            + conv_macs(c / 2, c / 2, 3, 1, (h2, w2))
            + conv_macs(c / 2, c / 4, 4, 1, (h2, w2))
            + conv_macs(c / 4, 3, 3, 1, (h, w)));

    for v in [&mut r.stem, &mut r.flow, &mut r.propagation, &mut r.embedding, &mut r.blocks, &mut r.hub, &mut r.decoder] {
        *v *= 2.0;
    }
    Ok(r)
}

const ARCHIVE_MAGIC: &[u8; 8] = b"FLWPARM1";

/// Binary archive: magic, seed, an embedded TOML document, then named
/// little-endian `f32` tensors with their trainable flags.
pub fn save_archive<T: Scalar>(header: &str, params: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(ARCHIVE_MAGIC);
    buf.write_u64::<LittleEndian>(params.seed()).expect("vec write");
    buf.write_u32::<LittleEndian>(header.len() as u32).expect("vec write");
    buf.extend_from_slice(header.as_bytes());
    buf.write_u32::<LittleEndian>(params.len() as u32).expect("vec write");
    for (name, p) in params.iter() {
        buf.write_u32::<LittleEndian>(name.len() as u32).expect("vec write");
        buf.extend_from_slice(name.as_bytes());
        buf.push(p.trainable as u8);
        buf.write_u32::<LittleEndian>(p.value.ndim() as u32).expect("vec write");
        for &d in p.value.shape() {
            buf.write_u32::<LittleEndian>(d as u32).expect("vec write");
        }
        for &v in p.value.data() {
            buf.write_f32::<LittleEndian>(v.to_f64_lossy() as f32).expect("vec write");
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads an archive written by [`save_archive`]: `(header, params)`.
pub fn load_archive<T: Scalar>(path: &Path) -> Result<(String, ParamStore<T>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::format(path, msg);
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != ARCHIVE_MAGIC {
        return Err(bad("not a parameter archive"));
    }
    let read_u32 = |r: &mut Cursor<Vec<u8>>| r.read_u32::<LittleEndian>().map_err(|_| bad("truncated"));
    let seed = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated"))?;
    let len = read_u32(&mut r)? as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
    let header = String::from_utf8(header).map_err(|_| bad("header is not UTF-8"))?;
    let mut params = ParamStore::new(seed);
    let count = read_u32(&mut r)? as usize;
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
        let trainable = r.read_u8().map_err(|_| bad("truncated"))? == 1;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(T::lit(r.read_f32::<LittleEndian>().map_err(|_| bad("truncated tensor"))? as f64));
        }
        params.insert(&name, Tensor::from_vec(&shape, data), trainable);
    }
    if r.position() as usize != r.get_ref().len() {
        return Err(bad("trailing bytes"));
    }
    Ok((header, params))
}

/// Overwrites `target` values with those of `source`; both must hold
/// exactly the same names and shapes.
pub fn restore_params<T: Scalar>(target: &mut ParamStore<T>, source: ParamStore<T>, path: &Path) -> Result<()> {
    if target.names() != source.names() {
        return Err(Error::format(path, "parameter names do not match the configuration"));
    }
    for (name, p) in source.iter() {
        if target.value(name).shape() != p.value.shape() {
            return Err(Error::format(path, format!("parameter {name} has the wrong shape")));
        }
        target.insert(name, p.value.clone(), p.trainable);
    }
    Ok(())
}

/// Generator checkpoint: an archive whose header is the model config.
pub fn save_checkpoint<T: Scalar>(model: &Generator<T>, path: &Path) -> Result<()> {
    save_archive(&model.config.to_toml(), &model.params, path)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Generator<T>> {
    let (header, params) = load_archive(path)?;
    let mut model = Generator::new(ModelConfig::from_toml(&header)?, params.seed())?;
    restore_params(&mut model.params, params, path)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_recurses_into_tables_and_replaces_leaves() {
        let mut base: toml::Table = toml::from_str("a = 1\n[t]\nx = 1\ny = [1, 2]\n").unwrap();
        let diff: toml::Table = toml::from_str("b = 2\n[t]\ny = [3]\n").unwrap();
        merge(&mut base, diff);
        let want: toml::Table = toml::from_str("a = 1\nb = 2\n[t]\nx = 1\ny = [3]\n").unwrap();
        assert_eq!(base, want);
    }

    #[test]
    fn mac_counts() {
        assert_eq!(conv_macs(8, 4, 3, 1, (5, 6)), (4 * 8 * 9 * 30) as f64);
        assert_eq!(conv_macs(8, 8, 3, 8, (5, 6)), (8 * 9 * 30) as f64);
        assert_eq!(sample_macs(2, (3, 3)), 72.0);
        assert_eq!(attention_macs(10, 4), 80.0);
    }
}
