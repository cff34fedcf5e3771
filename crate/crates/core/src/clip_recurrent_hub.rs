//! Cross-clip memory: keys and values of the previous clip are cached
//! without gradient and queried by the current clip through decoupled
//! temporal / horizontal-strip / vertical-strip attention.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use flowlens_tensor::{Ctx, Init, Neighborhoods, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::layers::{declare_linear, linear, WeightInit};
use crate::mix_focal_transformer::pool_groups;
use crate::token_embedding::TokenLayout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HubConfig {
    /// Token rows (columns) per horizontal (vertical) strip.
    pub strip_width: usize,
    /// Columns (rows) averaged into each pooled global key; 0 disables pooling.
    pub pool_kernel: usize,
}

impl Default for HubConfig {
    fn default() -> Self {
        Self { strip_width: 2, pool_kernel: 4 }
    }
}

impl HubConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strip_width == 0 {
            return Err(Error::Config("strip_width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StripAxis {
    Horizontal,
    Vertical,
}

/// Stop-gradient snapshot of one hub's keys and values.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipCache<T: Scalar> {
    pub keys: Option<Tensor<T>>,
    pub values: Option<Tensor<T>>,
    /// Number of updates since the cache was (re)started; `None` when empty.
    pub iteration: Option<u64>,
    pub video_id: String,
}

impl<T: Scalar> Default for ClipCache<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ClipCache<T> {
    pub fn new() -> Self {
        Self { keys: None, values: None, iteration: None, video_id: String::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_none()
    }

    pub fn clear(&mut self) {
        *self = Self::new();
    }

    /// Stores copies of `k`, `v`. A new `video_id` restarts the cache; within
    /// one video the shape must stay the same.
    pub fn update(&mut self, k: &Tensor<T>, v: &Tensor<T>, video_id: &str) -> Result<()> {
        if k.shape() != v.shape() {
            return Err(dim_err("cached keys and values must share a shape"));
        }
        if self.is_empty() || self.video_id != video_id {
            *self = Self { keys: Some(k.clone()), values: Some(v.clone()), iteration: Some(0), video_id: video_id.into() };
            return Ok(());
        }
        let old = self.keys.as_ref().expect("non-empty").shape();
        if old != k.shape() {
            return Err(Error::InvalidCache(format!("key shape changed from {old:?} to {:?} within video {video_id}", k.shape())));
        }
        self.keys = Some(k.clone());
        self.values = Some(v.clone());
        self.iteration = Some(self.iteration.unwrap_or(0) + 1);
        Ok(())
    }
}

/// Functional form of [`ClipCache::update`].
pub fn cache_update<T: Scalar>(mut cache: ClipCache<T>, k: &Tensor<T>, v: &Tensor<T>, video_id: &str) -> Result<ClipCache<T>> {
    cache.update(k, v, video_id)?;
    Ok(cache)
}

fn check_qkv<T: Scalar>(q: &Var<'_, T>, k: &Var<'_, T>, v: &Var<'_, T>, layout: &TokenLayout) -> Result<()> {
    let n = layout.tokens();
    let c = q.shape()[1];
    for x in [q, k, v] {
        if x.shape() != [n, c] {
            return Err(dim_err(format!("expected [{n}, {c}] tokens, got {:?}", x.shape())));
        }
    }
    Ok(())
}

/// Query `(t, i, j)` sees cached keys `(t', i, j)` for every `t'`.
pub fn temporal_plan(layout: &TokenLayout) -> Neighborhoods {
    let (f, gh, gw) = (layout.frames, layout.grid_h, layout.grid_w);
    let l = gh * gw;
    Neighborhoods::from_lists((0..f * l).map(|q| (0..f).map(|t| t * l + q % l).collect()).collect::<Vec<_>>())
}

/// Strip neighbourhoods: local strip keys of the query's frame, then that
/// frame's pooled global keys (rows `tokens..` of the expanded key matrix).
pub fn strip_plan(layout: &TokenLayout, axis: StripAxis, cfg: &HubConfig) -> (Neighborhoods, Option<Neighborhoods>) {
    let (f, gh, gw) = (layout.frames, layout.grid_h, layout.grid_w);
    let n = f * gh * gw;
    let sw = cfg.strip_width;
    let pools = (cfg.pool_kernel > 0).then(|| match axis {
        StripAxis::Horizontal => pool_groups(f, gh, gw, gh, cfg.pool_kernel),
        StripAxis::Vertical => pool_groups(f, gh, gw, cfg.pool_kernel, gw),
    });
    let per_frame = pools.as_ref().map_or(0, |p| p.len() / f);
    let lists = (0..n).map(|q| {
        let (t, i, j) = (q / (gh * gw), (q / gw) % gh, q % gw);
        let mut keys = Vec::new();
        match axis {
            StripAxis::Horizontal => {
                let rows = (i / sw) * sw..((i / sw + 1) * sw).min(gh);
                for r in rows {
                    keys.extend((0..gw).map(|c| (t * gh + r) * gw + c));
                }
            }
            StripAxis::Vertical => {
                let cols = (j / sw) * sw..((j / sw + 1) * sw).min(gw);
                for r in 0..gh {
                    keys.extend(cols.clone().map(|c| (t * gh + r) * gw + c));
                }
            }
        }
        keys.extend((0..per_frame).map(|p| n + t * per_frame + p));
        keys
    });
    (Neighborhoods::from_lists(lists.collect::<Vec<_>>()), pools.map(Neighborhoods::from_lists))
}

/// Attention along time at every spatial location.
pub fn temporal_attention<'a, T: Scalar>(
    q: Var<'a, T>,
    k: Var<'a, T>,
    v: Var<'a, T>,
    layout: &TokenLayout,
    heads: usize,
) -> Result<Var<'a, T>> {
    check_qkv(&q, &k, &v, layout)?;
    Ok(q.index_attention(k, v, heads, &temporal_plan(layout)))
}

/// Attention within horizontal or vertical strips plus pooled strip keys.
pub fn strip_attention<'a, T: Scalar>(
    q: Var<'a, T>,
    k: Var<'a, T>,
    v: Var<'a, T>,
    layout: &TokenLayout,
    axis: StripAxis,
    cfg: &HubConfig,
    heads: usize,
) -> Result<Var<'a, T>> {
    check_qkv(&q, &k, &v, layout)?;
    cfg.validate()?;
    let (nb, pools) = strip_plan(layout, axis, cfg);
    let (k, v) = match &pools {
        Some(p) => (Var::concat(&[k, k.group_mean(p)], 0), Var::concat(&[v, v.group_mean(p)], 0)),
        None => (k, v),
    };
    Ok(q.index_attention(k, v, heads, &nb))
}

pub fn declare<T: Scalar>(s: &mut ParamStore<T>, prefix: &str, c: usize) {
    for name in ["pk", "pv"] {
        s.declare(&format!("{prefix}.{name}.w"), &[c, c], Init::Identity { noise: 1e-3 });
        s.declare(&format!("{prefix}.{name}.b"), &[c], Init::Zeros);
    }
    declare_linear(s, &format!("{prefix}.pt"), c, c, WeightInit::Kaiming);
    declare_linear(s, &format!("{prefix}.phw"), 2 * c, c, WeightInit::Kaiming);
    declare_linear(s, &format!("{prefix}.fuse"), 2 * c, c, WeightInit::Zero);
}

/// `P_t(Z_t) + P_hw([Z_h, Z_v])`, the three branches computed in parallel
/// from the same queries and keys.
#[allow(clippy::too_many_arguments)]
pub fn ddca<'a, T: Scalar>(
    ctx: &Ctx<'a, T>,
    prefix: &str,
    q: Var<'a, T>,
    k: Var<'a, T>,
    v: Var<'a, T>,
    layout: &TokenLayout,
    cfg: &HubConfig,
    heads: usize,
) -> Result<Var<'a, T>> {
    let zt = temporal_attention(q, k, v, layout, heads)?;
    let zh = strip_attention(q, k, v, layout, StripAxis::Horizontal, cfg, heads)?;
    let zv = strip_attention(q, k, v, layout, StripAxis::Vertical, cfg, heads)?;
    let t = linear(ctx, &format!("{prefix}.pt"), zt);
    let hw = linear(ctx, &format!("{prefix}.phw"), Var::concat(&[zh, zv], 1));
    Ok(t + hw)
}

/// [`ddca`] against the keys and values held by `cache`.
#[allow(clippy::too_many_arguments)]
pub fn ddca_cached<'a, T: Scalar>(
    ctx: &Ctx<'a, T>,
    prefix: &str,
    q: Var<'a, T>,
    cache: &ClipCache<T>,
    layout: &TokenLayout,
    cfg: &HubConfig,
    heads: usize,
) -> Result<Var<'a, T>> {
    let (Some(k), Some(v)) = (&cache.keys, &cache.values) else {
        return Err(Error::MustBootstrapFirst);
    };
    let g = ctx.graph();
    ddca(ctx, prefix, q, g.constant(k.clone()), g.constant(v.clone()), layout, cfg, heads)
}

pub struct HubOutput<'a, T: Scalar> {
    /// `Z' + P_fuse(Z̄' ⊕ Z')`.
    pub tokens: Var<'a, T>,
    /// Features retrieved from the cache, `Z̄'`.
    pub retrieved: Var<'a, T>,
    /// The cached keys this query used (after any bootstrap).
    pub queried_keys: Tensor<T>,
}

/// Queries the cache (bootstrapping with the current clip when the cache is
/// empty or belongs to another video), fuses the result into `z`, then
/// stores the current keys and values.
#[allow(clippy::too_many_arguments)]
pub fn hub_forward<'a, T: Scalar>(
    ctx: &Ctx<'a, T>,
    prefix: &str,
    z: Var<'a, T>,
    q: Var<'a, T>,
    k: Var<'a, T>,
    v: Var<'a, T>,
    layout: &TokenLayout,
    cfg: &HubConfig,
    heads: usize,
    cache: &mut ClipCache<T>,
    video_id: &str,
) -> Result<HubOutput<'a, T>> {
    let g = ctx.graph();
    let (kbar, vbar) = if cache.is_empty() || cache.video_id != video_id {
        (k.detach(), v.detach())
    } else {
        let ck = cache.keys.as_ref().expect("non-empty");
        if ck.shape() != k.value().shape() {
            return Err(Error::InvalidCache(format!("cached keys {:?} vs current {:?}", ck.shape(), k.shape())));
        }
        (g.constant(ck.clone()), g.constant(cache.values.clone().expect("non-empty")))
    };
    let queried_keys = (*kbar.value()).clone();
    let kp = linear(ctx, &format!("{prefix}.pk"), kbar);
    let vp = linear(ctx, &format!("{prefix}.pv"), vbar);
    let retrieved = ddca(ctx, prefix, q, kp, vp, layout, cfg, heads)?;
    let tokens = z + linear(ctx, &format!("{prefix}.fuse"), Var::concat(&[retrieved, z], 1));
    cache.update(&k.value(), &v.value(), video_id)?;
    Ok(HubOutput { tokens, retrieved, queried_keys })
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    iteration: Option<u64>,
    video_id: String,
    shape: Vec<usize>,
}

fn write_f32<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let mut buf = vec![0u8; 4 * t.len()];
    for (chunk, &v) in buf.chunks_exact_mut(4).zip(t.data()) {
        LittleEndian::write_f32(chunk, v.to_f64_lossy() as f32);
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_f32<T: Scalar>(path: &Path, shape: &[usize]) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::format(path, format!("expected {} bytes, found {}", 4 * n, bytes.len())));
    }
    let data = bytes.chunks_exact(4).map(|c| T::lit(LittleEndian::read_f32(c) as f64)).collect();
    Ok(Tensor::from_vec(shape, data))
}

/// Writes `cache.toml` plus raw little-endian `f32` key/value files.
pub fn save_cache<T: Scalar>(cache: &ClipCache<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let shape = cache.keys.as_ref().map(|k| k.shape().to_vec()).unwrap_or_default();
    let meta = CacheMeta { iteration: cache.iteration, video_id: cache.video_id.clone(), shape };
    let path = dir.join("cache.toml");
    fs::write(&path, toml::to_string(&meta).map_err(|e| Error::format(&path, e.to_string()))?).map_err(|e| Error::io(&path, e))?;
    if let (Some(k), Some(v)) = (&cache.keys, &cache.values) {
        write_f32(k, &dir.join("keys.f32"))?;
        write_f32(v, &dir.join("values.f32"))?;
    }
    Ok(())
}

pub fn load_cache<T: Scalar>(dir: &Path) -> Result<ClipCache<T>> {
    let path = dir.join("cache.toml");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CacheMeta = toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if meta.iteration.is_none() {
        return Ok(ClipCache { video_id: meta.video_id, ..ClipCache::new() });
    }
    Ok(ClipCache {
        keys: Some(read_f32(&dir.join("keys.f32"), &meta.shape)?),
        values: Some(read_f32(&dir.join("values.f32"), &meta.shape)?),
        iteration: meta.iteration,
        video_id: meta.video_id,
    })
}
