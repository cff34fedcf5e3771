//! Bilinear sampling: flow warping, modulated deformable gathers and resizing.
//!
//! Sample coordinates outside the plane are clamped to the border; the
//! gradient with respect to a clamped coordinate is zero.

use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bilinear interpolation stencil at a (possibly fractional) location.
#[derive(Clone, Copy, Debug)]
pub struct Bilinear<T> {
    pub idx: [usize; 4],
    pub weight: [T; 4],
    ax: T,
    ay: T,
    live_x: bool,
    live_y: bool,
}

impl<T: Scalar> Bilinear<T> {
    /// Stencil for plane coordinates `(x, y)` on an `h × w` plane.
    pub fn new(x: T, y: T, h: usize, w: usize) -> Self {
        let maxx = T::from_usize_lossy(w - 1);
        let maxy = T::from_usize_lossy(h - 1);
        let live_x = x >= T::zero() && x <= maxx;
        let live_y = y >= T::zero() && y <= maxy;
        let cx = x.max(T::zero()).min(maxx);
        let cy = y.max(T::zero()).min(maxy);
        let x0 = cx.floor().to_usize().unwrap_or(0).min(w - 1);
        let y0 = cy.floor().to_usize().unwrap_or(0).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let ax = cx - T::from_usize_lossy(x0);
        let ay = cy - T::from_usize_lossy(y0);
        let one = T::one();
        Self {
            idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
            weight: [(one - ax) * (one - ay), ax * (one - ay), (one - ax) * ay, ax * ay],
            ax,
            ay,
            live_x,
            live_y,
        }
    }

    pub fn sample(&self, plane: &[T]) -> T {
        (0..4).map(|i| self.weight[i] * plane[self.idx[i]]).sum()
    }

    /// Derivatives of the sampled value with respect to `x` and `y`.
    pub fn coord_grad(&self, plane: &[T]) -> (T, T) {
        let v = self.idx.map(|i| plane[i]);
        let one = T::one();
        let dx = if self.live_x { (one - self.ay) * (v[1] - v[0]) + self.ay * (v[3] - v[2]) } else { T::zero() };
        let dy = if self.live_y { (one - self.ax) * (v[2] - v[0]) + self.ax * (v[3] - v[1]) } else { T::zero() };
        (dx, dy)
    }

    pub fn scatter(&self, plane: &mut [T], g: T) {
        for i in 0..4 {
            plane[self.idx[i]] += self.weight[i] * g;
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Backward warp: `out(x) = self(x + flow(x))`.
    ///
    /// `self: [n, c, h, w]`, `flow: [n, 2, h, w]` with channel 0 the
    /// horizontal and channel 1 the vertical displacement in pixels.
    pub fn warp(self, flow: Var<'g, T>) -> Var<'g, T> {
        let x = self.value();
        let f = flow.value();
        assert_eq!(x.ndim(), 4, "warp input must be [n, c, h, w]");
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        assert_eq!(f.shape(), &[n, 2, h, w], "warp flow shape {:?} vs features {:?}", f.shape(), x.shape());
        let hw = h * w;
        let stencils = move |b: usize| -> Vec<Bilinear<T>> {
            let fd = &f.data()[b * 2 * hw..(b + 1) * 2 * hw];
            (0..hw)
                .map(|p| {
                    let (i, j) = (p / w, p % w);
                    Bilinear::new(T::from_usize_lossy(j) + fd[p], T::from_usize_lossy(i) + fd[hw + p], h, w)
                })
                .collect()
        };
        let mut y = Tensor::zeros(&[n, c, h, w]);
        for b in 0..n {
            let st = stencils(b);
            for ch in 0..c {
                let plane = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                let out = &mut y.data_mut()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for (o, s) in out.iter_mut().zip(&st) {
                    *o = s.sample(plane);
                }
            }
        }
        self.graph.op(
            y,
            &[self, flow],
            Box::new(move |gy, needs| {
                let mut gx = needs[0].then(|| Tensor::zeros(&[n, c, h, w]));
                let mut gf = needs[1].then(|| Tensor::zeros(&[n, 2, h, w]));
                for b in 0..n {
                    let st = stencils(b);
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        let plane = &x.data()[base..base + hw];
                        let g = &gy.data()[base..base + hw];
                        if let Some(gx) = gx.as_mut() {
                            let gp = &mut gx.data_mut()[base..base + hw];
                            for (s, &gv) in st.iter().zip(g) {
                                s.scatter(gp, gv);
                            }
                        }
                        if let Some(gf) = gf.as_mut() {
                            let gfd = &mut gf.data_mut()[b * 2 * hw..(b + 1) * 2 * hw];
                            for (p, (s, &gv)) in st.iter().zip(g).enumerate() {
                                let (dx, dy) = s.coord_grad(plane);
                                gfd[p] += gv * dx;
                                gfd[hw + p] += gv * dy;
                            }
                        }
                    }
                }
                vec![gx, gf]
            }),
        )
    }

    /// Modulated deformable gather producing convolution columns.
    ///
    /// `self: [n, c, h, w]`; `offsets: [n, groups·k²·2, h, w]` laid out as
    /// `(group, tap, {dx, dy})`; `modulation: [n, groups·k², h, w]`.
    /// Output `[n, c·k², h·w]` with row `ch·k² + tap`, stride 1, dilation 1,
    /// and `k / 2` implicit padding.
    pub fn deform_columns(self, offsets: Var<'g, T>, modulation: Var<'g, T>, kernel: usize, groups: usize) -> Var<'g, T> {
        let x = self.value();
        let off = offsets.value();
        let m = modulation.value();
        assert_eq!(x.ndim(), 4, "deform_columns input must be [n, c, h, w]");
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let kk = kernel * kernel;
        assert!(kernel % 2 == 1, "deformable kernel must be odd");
        assert!(groups > 0 && c % groups == 0, "channels must divide into deform groups");
        assert_eq!(off.shape(), &[n, groups * kk * 2, h, w], "offset shape");
        assert_eq!(m.shape(), &[n, groups * kk, h, w], "modulation shape");
        let hw = h * w;
        let cpg = c / groups;
        let half = (kernel / 2) as isize;
        let stencil = move |offd: &[T], b: usize, g: usize, t: usize, p: usize| -> Bilinear<T> {
            let (i, j) = (p / w, p % w);
            let (a, e) = ((t / kernel) as isize - half, (t % kernel) as isize - half);
            let ch = ((g * kk + t) * 2) + b * groups * kk * 2;
            let dx = offd[ch * hw + p];
            let dy = offd[(ch + 1) * hw + p];
            Bilinear::new(
                T::lit((j as isize + e) as f64) + dx,
                T::lit((i as isize + a) as f64) + dy,
                h,
                w,
            )
        };
        let mut y = Tensor::zeros(&[n, c * kk, hw]);
        for b in 0..n {
            for g in 0..groups {
                for t in 0..kk {
                    let mrow = &m.data()[((b * groups + g) * kk + t) * hw..((b * groups + g) * kk + t + 1) * hw];
                    let st: Vec<_> = (0..hw).map(|p| stencil(off.data(), b, g, t, p)).collect();
                    for ch in g * cpg..(g + 1) * cpg {
                        let plane = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                        let row = (b * c * kk + ch * kk + t) * hw;
                        let out = &mut y.data_mut()[row..row + hw];
                        for p in 0..hw {
                            out[p] = mrow[p] * st[p].sample(plane);
                        }
                    }
                }
            }
        }
        self.graph.op(
            y,
            &[self, offsets, modulation],
            Box::new(move |gy, needs| {
                let mut gx = needs[0].then(|| Tensor::zeros(&[n, c, h, w]));
                let mut goff = needs[1].then(|| Tensor::zeros(&[n, groups * kk * 2, h, w]));
                let mut gm = needs[2].then(|| Tensor::zeros(&[n, groups * kk, h, w]));
                for b in 0..n {
                    for g in 0..groups {
                        for t in 0..kk {
                            let mbase = ((b * groups + g) * kk + t) * hw;
                            let mrow = &m.data()[mbase..mbase + hw];
                            let st: Vec<_> = (0..hw).map(|p| stencil(off.data(), b, g, t, p)).collect();
                            let obase = (b * groups * kk * 2 + (g * kk + t) * 2) * hw;
                            for ch in g * cpg..(g + 1) * cpg {
                                let pbase = (b * c + ch) * hw;
                                let plane = &x.data()[pbase..pbase + hw];
                                let row = (b * c * kk + ch * kk + t) * hw;
                                let gr = &gy.data()[row..row + hw];
                                if let Some(gx) = gx.as_mut() {
                                    let gp = &mut gx.data_mut()[pbase..pbase + hw];
                                    for p in 0..hw {
                                        st[p].scatter(gp, gr[p] * mrow[p]);
                                    }
                                }
                                if let Some(goff) = goff.as_mut() {
                                    let gd = goff.data_mut();
                                    for p in 0..hw {
                                        let (dx, dy) = st[p].coord_grad(plane);
                                        let s = gr[p] * mrow[p];
                                        gd[obase + p] += s * dx;
                                        gd[obase + hw + p] += s * dy;
                                    }
                                }
                                if let Some(gm) = gm.as_mut() {
                                    let gd = &mut gm.data_mut()[mbase..mbase + hw];
                                    for p in 0..hw {
                                        gd[p] += gr[p] * st[p].sample(plane);
                                    }
                                }
                            }
                        }
                    }
                }
                vec![gx, goff, gm]
            }),
        )
    }

    /// Bilinear resize of `[n, c, h, w]` to `[n, c, out_h, out_w]`
    /// (half-pixel centers, border clamped).
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.ndim(), 4, "resize input must be [n, c, h, w]");
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let sy = h as f64 / out_h as f64;
        let sx = w as f64 / out_w as f64;
        let st: Vec<Bilinear<T>> = (0..out_h * out_w)
            .map(|p| {
                let (i, j) = (p / out_w, p % out_w);
                let yy = ((i as f64 + 0.5) * sy - 0.5).max(0.0);
                let xx = ((j as f64 + 0.5) * sx - 0.5).max(0.0);
                Bilinear::new(T::lit(xx), T::lit(yy), h, w)
            })
            .collect();
        let (hw, ohw) = (h * w, out_h * out_w);
        let mut y = Tensor::zeros(&[n, c, out_h, out_w]);
        for pl in 0..n * c {
            let plane = &x.data()[pl * hw..(pl + 1) * hw];
            let out = &mut y.data_mut()[pl * ohw..(pl + 1) * ohw];
            for (o, s) in out.iter_mut().zip(&st) {
                *o = s.sample(plane);
            }
        }
        self.graph.op(
            y,
            &[self],
            Box::new(move |gy, _| {
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                for pl in 0..n * c {
                    let gp = &mut gx.data_mut()[pl * hw..(pl + 1) * hw];
                    let g = &gy.data()[pl * ohw..(pl + 1) * ohw];
                    for (s, &gv) in st.iter().zip(g) {
                        s.scatter(gp, gv);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}
