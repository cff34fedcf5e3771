//! Convolutions via im2col + gemm.
//!
//! Everything is expressed in three spatial dimensions; 2-D convolutions are
//! the `depth == 1` case.

use crate::graph::Var;
use crate::scalar::{gemm, Scalar, Trans};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn new2d(kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kernel: [1, kernel, kernel], stride: [1, stride, stride], pad: [0, pad, pad] }
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output extent for an input extent, or `None` when the kernel does not fit.
    pub fn output_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            if padded < self.kernel[a] || self.stride[a] == 0 {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    /// Input extent reproduced by a transposed convolution.
    pub fn transposed_dims(&self, input: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = (input[a] - 1) * self.stride[a] + self.kernel[a] - 2 * self.pad[a];
        }
        out
    }
}

/// Unfolds `channels` planes of extent `dims` into `[channels·kvol, out_volume]`.
pub fn im2col<T: Scalar>(x: &[T], channels: usize, dims: [usize; 3], geom: &ConvGeom, out: [usize; 3]) -> Vec<T> {
    let [d, h, w] = dims;
    let [kd, kh, kw] = geom.kernel;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.pad;
    let [od, oh, ow] = out;
    let l = od * oh * ow;
    let mut cols = vec![T::zero(); channels * kd * kh * kw * l];
    for c in 0..channels {
        let plane = &x[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    let dst = &mut cols[row * l..(row + 1) * l];
                    for z in 0..od {
                        let iz = (z * sd + a) as isize - pd as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for y in 0..oh {
                            let iy = (y * sh + b) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = (iz as usize * h + iy as usize) * w;
                            let dst_row = (z * oh + y) * ow;
                            for xo in 0..ow {
                                let ix = (xo * sw + e) as isize - pw as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[dst_row + xo] = plane[src_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
pub fn col2im<T: Scalar>(cols: &[T], channels: usize, dims: [usize; 3], geom: &ConvGeom, out: [usize; 3], x: &mut [T]) {
    let [d, h, w] = dims;
    let [kd, kh, kw] = geom.kernel;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.pad;
    let [od, oh, ow] = out;
    let l = od * oh * ow;
    for c in 0..channels {
        let plane = &mut x[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    let src = &cols[row * l..(row + 1) * l];
                    for z in 0..od {
                        let iz = (z * sd + a) as isize - pd as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for y in 0..oh {
                            let iy = (y * sh + b) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst_row = (iz as usize * h + iy as usize) * w;
                            let src_row = (z * oh + y) * ow;
                            for xo in 0..ow {
                                let ix = (xo * sw + e) as isize - pw as isize;
                                if ix >= 0 && ix < w as isize {
                                    plane[dst_row + ix as usize] += src[src_row + xo];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Grouped 3-D convolution without bias.
    ///
    /// `self: [n, cin, d, h, w]`, `weight: [cout, cin/groups, kd, kh, kw]`.
    pub fn conv3d(self, weight: Var<'g, T>, geom: ConvGeom, groups: usize) -> Var<'g, T> {
        let x = self.value();
        let wv = weight.value();
        assert_eq!(x.ndim(), 5, "conv3d input must be [n, c, d, h, w], got {:?}", x.shape());
        assert_eq!(wv.ndim(), 5, "conv3d weight must be 5-D");
        let (n, cin) = (x.dim(0), x.dim(1));
        let dims = [x.dim(2), x.dim(3), x.dim(4)];
        let cout = wv.dim(0);
        assert!(groups > 0 && cin % groups == 0 && cout % groups == 0, "conv3d: bad group count");
        let cig = cin / groups;
        let cog = cout / groups;
        assert_eq!(&wv.shape()[1..], &[cig, geom.kernel[0], geom.kernel[1], geom.kernel[2]], "conv3d weight shape");
        let out = geom.output_dims(dims).expect("conv3d: kernel larger than padded input");
        let l: usize = out.iter().product();
        let vin: usize = dims.iter().product();
        let kk = cig * geom.kernel_volume();
        let mut y = Tensor::zeros(&[n, cout, out[0], out[1], out[2]]);
        for b in 0..n {
            for g in 0..groups {
                let xs = &x.data()[(b * cin + g * cig) * vin..(b * cin + (g + 1) * cig) * vin];
                let cols = im2col(xs, cig, dims, &geom, out);
                let ys = &mut y.data_mut()[(b * cout + g * cog) * l..(b * cout + (g + 1) * cog) * l];
                gemm(cog, kk, l, &wv.data()[g * cog * kk..(g + 1) * cog * kk], Trans::No, &cols, Trans::No, ys, T::zero());
            }
        }
        self.graph.op(
            y,
            &[self, weight],
            Box::new(move |gy, needs| {
                let mut gx = needs[0].then(|| Tensor::zeros(x.shape()));
                let mut gw = needs[1].then(|| Tensor::zeros(wv.shape()));
                for b in 0..n {
                    for g in 0..groups {
                        let gys = &gy.data()[(b * cout + g * cog) * l..(b * cout + (g + 1) * cog) * l];
                        let wg = &wv.data()[g * cog * kk..(g + 1) * cog * kk];
                        if let Some(gw) = gw.as_mut() {
                            let xs = &x.data()[(b * cin + g * cig) * vin..(b * cin + (g + 1) * cig) * vin];
                            let cols = im2col(xs, cig, dims, &geom, out);
                            gemm(cog, l, kk, gys, Trans::No, &cols, Trans::Yes, &mut gw.data_mut()[g * cog * kk..(g + 1) * cog * kk], T::one());
                        }
                        if let Some(gx) = gx.as_mut() {
                            let mut dcols = vec![T::zero(); kk * l];
                            gemm(kk, cog, l, wg, Trans::Yes, gys, Trans::No, &mut dcols, T::zero());
                            let gxs = &mut gx.data_mut()[(b * cin + g * cig) * vin..(b * cin + (g + 1) * cig) * vin];
                            col2im(&dcols, cig, dims, &geom, out, gxs);
                        }
                    }
                }
                vec![gx, gw]
            }),
        )
    }

    /// Grouped 2-D convolution without bias: `[n, c, h, w]`, weight `[cout, cin/groups, k, k]`.
    pub fn conv2d(self, weight: Var<'g, T>, kernel: usize, stride: usize, pad: usize, groups: usize) -> Var<'g, T> {
        let s = self.shape();
        assert_eq!(s.len(), 4, "conv2d input must be [n, c, h, w], got {s:?}");
        let ws = weight.shape();
        let x5 = self.reshape(&[s[0], s[1], 1, s[2], s[3]]);
        let w5 = weight.reshape(&[ws[0], ws[1], 1, ws[2], ws[3]]);
        let y = x5.conv3d(w5, ConvGeom::new2d(kernel, stride, pad), groups);
        let ys = y.shape();
        y.reshape(&[ys[0], ys[1], ys[3], ys[4]])
    }

    /// 2-D transposed convolution without bias: `[n, cin, h, w]`, weight `[cin, cout, k, k]`.
    pub fn conv_transpose2d(self, weight: Var<'g, T>, kernel: usize, stride: usize, pad: usize) -> Var<'g, T> {
        let x = self.value();
        let wv = weight.value();
        assert_eq!(x.ndim(), 4, "conv_transpose2d input must be [n, c, h, w]");
        let (n, cin, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        assert_eq!(wv.shape(), &[cin, wv.dim(1), kernel, kernel], "conv_transpose2d weight shape");
        let cout = wv.dim(1);
        let geom = ConvGeom::new2d(kernel, stride, pad);
        let big = geom.transposed_dims([1, h, w]);
        assert_eq!(geom.output_dims(big), Some([1, h, w]), "conv_transpose2d geometry does not invert");
        let l = h * w;
        let vout: usize = big.iter().product();
        let kk = cout * kernel * kernel;
        let mut y = Tensor::zeros(&[n, cout, big[1], big[2]]);
        for b in 0..n {
            let mut cols = vec![T::zero(); kk * l];
            gemm(kk, cin, l, wv.data(), Trans::Yes, &x.data()[b * cin * l..(b + 1) * cin * l], Trans::No, &mut cols, T::zero());
            col2im(&cols, cout, big, &geom, [1, h, w], &mut y.data_mut()[b * cout * vout..(b + 1) * cout * vout]);
        }
        self.graph.op(
            y,
            &[self, weight],
            Box::new(move |gy, needs| {
                let mut gx = needs[0].then(|| Tensor::zeros(&[n, cin, h, w]));
                let mut gw = needs[1].then(|| Tensor::zeros(&[cin, cout, kernel, kernel]));
                for b in 0..n {
                    let cols = im2col(&gy.data()[b * cout * vout..(b + 1) * cout * vout], cout, big, &geom, [1, h, w]);
                    if let Some(gx) = gx.as_mut() {
                        gemm(cin, kk, l, wv.data(), Trans::No, &cols, Trans::No, &mut gx.data_mut()[b * cin * l..(b + 1) * cin * l], T::zero());
                    }
                    if let Some(gw) = gw.as_mut() {
                        gemm(cin, l, kk, &x.data()[b * cin * l..(b + 1) * cin * l], Trans::No, &cols, Trans::Yes, gw.data_mut(), T::one());
                    }
                }
                vec![gx, gw]
            }),
        )
    }
}
