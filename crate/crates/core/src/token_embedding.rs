//! Overlapping-patch tokenization (soft split) and its normalized
//! overlap-add inverse (soft composite).

use flowlens_tensor::{PatchGeom, Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    pub patch: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self { patch: 7, stride: 3, pad: 2 }
    }
}

impl PatchConfig {
    pub fn geom(&self) -> PatchGeom {
        PatchGeom::new(self.patch, self.stride, self.pad)
    }
}

/// Shape bookkeeping for a token grid cut from `[frames, channels, h, w]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub geom: PatchGeom,
}

impl TokenLayout {
    pub fn new(frames: usize, channels: usize, height: usize, width: usize, cfg: PatchConfig) -> Result<Self> {
        let geom = cfg.geom();
        if frames == 0 || channels == 0 || height == 0 || width == 0 {
            return Err(dim_err("empty feature map"));
        }
        let (grid_h, grid_w) = geom
            .grid(height, width)
            .ok_or_else(|| dim_err(format!("{height}x{width} plane is smaller than a {} patch", cfg.patch)))?;
        Ok(Self { frames, grid_h, grid_w, channels, height, width, geom })
    }

    pub fn per_frame(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.per_frame()
    }

    /// Length of one flattened patch, `channels · patch²`.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.geom.kernel * self.geom.kernel
    }

    /// Token index of `(frame, row, col)`.
    pub fn index(&self, t: usize, i: usize, j: usize) -> usize {
        (t * self.grid_h + i) * self.grid_w + j
    }

    pub fn with_frames(&self, frames: usize) -> Self {
        Self { frames, ..*self }
    }

    pub fn with_channels(&self, channels: usize) -> Self {
        Self { channels, ..*self }
    }
}

/// `[t, c, h, w] -> [t, L, c·k²]`, anchors row-major.
pub fn soft_split<'a, T: Scalar>(features: Var<'a, T>, cfg: PatchConfig) -> Result<(Var<'a, T>, TokenLayout)> {
    let s = features.shape();
    if s.len() != 4 {
        return Err(dim_err(format!("features must be [t, c, h, w], got {s:?}")));
    }
    let layout = TokenLayout::new(s[0], s[1], s[2], s[3], cfg)?;
    Ok((features.unfold_patches(layout.geom), layout))
}

/// Inverse of [`soft_split`]: `[t, L, c·k²] -> [t, c, h, w]`.
pub fn soft_composite<'a, T: Scalar>(tokens: Var<'a, T>, layout: &TokenLayout) -> Result<Var<'a, T>> {
    let s = tokens.shape();
    let want = [layout.frames, layout.per_frame(), layout.patch_dim()];
    if s != want {
        return Err(dim_err(format!("tokens {s:?} do not match layout {want:?}")));
    }
    Ok(tokens.fold_mean(layout.geom, layout.channels, layout.height, layout.width))
}

/// Number of patches covering each pixel.
pub fn overlap_counts(cfg: PatchConfig, h: usize, w: usize) -> Vec<usize> {
    cfg.geom().coverage(h, w)
}
