//! Overlapping patch extraction (unfold) and its normalized overlap-add inverse.

use crate::graph::Var;
use crate::ops::conv::{col2im, im2col, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Patch-grid geometry for a `h × w` plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PatchGeom {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kernel, stride, pad }
    }

    fn conv(&self) -> ConvGeom {
        ConvGeom::new2d(self.kernel, self.stride, self.pad)
    }

    /// Anchor grid `(rows, cols)`, or `None` when the patch does not fit.
    pub fn grid(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        self.conv().output_dims([1, h, w]).map(|[_, a, b]| (a, b))
    }

    /// Number of patches covering each pixel, row-major `h × w`.
    pub fn coverage(&self, h: usize, w: usize) -> Vec<usize> {
        let (gh, gw) = self.grid(h, w).expect("patch larger than padded plane");
        let k = self.kernel;
        let mut counts = vec![0usize; h * w];
        for a in 0..gh {
            for b in 0..gw {
                for i in 0..k {
                    for j in 0..k {
                        let y = (a * self.stride + i) as isize - self.pad as isize;
                        let x = (b * self.stride + j) as isize - self.pad as isize;
                        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                            counts[y as usize * w + x as usize] += 1;
                        }
                    }
                }
            }
        }
        counts
    }
}

fn transpose<T: Scalar>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// `[n, c, h, w] -> [n, l, c·k·k]`: one row per patch anchor (row-major),
    /// patch vector ordered `(channel, ki, kj)`, zero padding.
    pub fn unfold_patches(self, geom: PatchGeom) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.ndim(), 4, "unfold input must be [n, c, h, w]");
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let cg = geom.conv();
        let (gh, gw) = geom.grid(h, w).expect("patch larger than padded plane");
        let l = gh * gw;
        let d = c * geom.kernel * geom.kernel;
        let out = [1, gh, gw];
        let mut y = Tensor::zeros(&[n, l, d]);
        for b in 0..n {
            let cols = im2col(&x.data()[b * c * h * w..(b + 1) * c * h * w], c, [1, h, w], &cg, out);
            transpose(&cols, d, l, &mut y.data_mut()[b * l * d..(b + 1) * l * d]);
        }
        self.graph.op(
            y,
            &[self],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                let mut cols = vec![T::zero(); d * l];
                for b in 0..n {
                    transpose(&g.data()[b * l * d..(b + 1) * l * d], l, d, &mut cols);
                    col2im(&cols, c, [1, h, w], &cg, out, &mut gx.data_mut()[b * c * h * w..(b + 1) * c * h * w]);
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Inverse of [`Var::unfold_patches`]: overlap-add of `[n, l, c·k·k]`
    /// patches onto `[n, c, h, w]`, divided by per-pixel coverage.
    pub fn fold_mean(self, geom: PatchGeom, channels: usize, h: usize, w: usize) -> Var<'g, T> {
        let x = self.value();
        let (gh, gw) = geom.grid(h, w).expect("patch larger than padded plane");
        let (l, d) = (gh * gw, channels * geom.kernel * geom.kernel);
        assert_eq!(x.ndim(), 3, "fold input must be [n, l, d]");
        assert_eq!(&x.shape()[1..], &[l, d], "fold: token grid does not match the source shape");
        let n = x.dim(0);
        let cg = geom.conv();
        let out = [1, gh, gw];
        let inv: Vec<T> = geom
            .coverage(h, w)
            .into_iter()
            .map(|k| if k == 0 { T::zero() } else { T::one() / T::from_usize_lossy(k) })
            .collect();
        let hw = h * w;
        let mut y = Tensor::zeros(&[n, channels, h, w]);
        let mut cols = vec![T::zero(); d * l];
        for b in 0..n {
            transpose(&x.data()[b * l * d..(b + 1) * l * d], l, d, &mut cols);
            let ys = &mut y.data_mut()[b * channels * hw..(b + 1) * channels * hw];
            col2im(&cols, channels, [1, h, w], &cg, out, ys);
            for (i, v) in ys.iter_mut().enumerate() {
                *v *= inv[i % hw];
            }
        }
        self.graph.op(
            y,
            &[self],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&[n, l, d]);
                let mut scaled = vec![T::zero(); channels * hw];
                for b in 0..n {
                    let gs = &g.data()[b * channels * hw..(b + 1) * channels * hw];
                    for (i, (s, &v)) in scaled.iter_mut().zip(gs).enumerate() {
                        *s = v * inv[i % hw];
                    }
                    let cols = im2col(&scaled, channels, [1, h, w], &cg, out);
                    transpose(&cols, d, l, &mut gx.data_mut()[b * l * d..(b + 1) * l * d]);
                }
                vec![Some(gx)]
            }),
        )
    }
}
