//! Matrix products.

use crate::graph::Var;
use crate::scalar::{gemm, Scalar, Trans};
use crate::tensor::Tensor;

impl<'g, T: Scalar> Var<'g, T> {
    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'g, T>) -> Var<'g, T> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.ndim(), 2, "matmul lhs must be 2-D, got {:?}", a.shape());
        assert_eq!(b.ndim(), 2, "matmul rhs must be 2-D, got {:?}", b.shape());
        let (m, k) = (a.dim(0), a.dim(1));
        let (k2, n) = (b.dim(0), b.dim(1));
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
        let mut c = Tensor::zeros(&[m, n]);
        gemm(m, k, n, a.data(), Trans::No, b.data(), Trans::No, c.data_mut(), T::zero());
        self.graph.op(
            c,
            &[self, other],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut out = Tensor::zeros(&[m, k]);
                    gemm(m, n, k, g.data(), Trans::No, b.data(), Trans::Yes, out.data_mut(), T::zero());
                    out
                });
                let gb = needs[1].then(|| {
                    let mut out = Tensor::zeros(&[k, n]);
                    gemm(k, m, n, a.data(), Trans::Yes, g.data(), Trans::No, out.data_mut(), T::zero());
                    out
                });
                vec![ga, gb]
            }),
        )
    }

    /// Applies `w: [o, k]` to every item of a batch `self: [b, k, l]`,
    /// giving `[b, o, l]`.
    pub fn apply_weight(self, w: Var<'g, T>) -> Var<'g, T> {
        let x = self.value();
        let wv = w.value();
        assert_eq!(x.ndim(), 3, "apply_weight expects [b, k, l]");
        let (bn, k, l) = (x.dim(0), x.dim(1), x.dim(2));
        assert_eq!(wv.shape(), &[wv.dim(0), k], "apply_weight weight shape mismatch");
        let o = wv.dim(0);
        let mut y = Tensor::zeros(&[bn, o, l]);
        for b in 0..bn {
            gemm(
                o,
                k,
                l,
                wv.data(),
                Trans::No,
                &x.data()[b * k * l..(b + 1) * k * l],
                Trans::No,
                &mut y.data_mut()[b * o * l..(b + 1) * o * l],
                T::zero(),
            );
        }
        self.graph.op(
            y,
            &[self, w],
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut out = Tensor::zeros(&[bn, k, l]);
                    for b in 0..bn {
                        gemm(
                            k,
                            o,
                            l,
                            wv.data(),
                            Trans::Yes,
                            &g.data()[b * o * l..(b + 1) * o * l],
                            Trans::No,
                            &mut out.data_mut()[b * k * l..(b + 1) * k * l],
                            T::zero(),
                        );
                    }
                    out
                });
                let gw = needs[1].then(|| {
                    let mut out = Tensor::zeros(&[o, k]);
                    for b in 0..bn {
                        gemm(
                            o,
                            l,
                            k,
                            &g.data()[b * o * l..(b + 1) * o * l],
                            Trans::No,
                            &x.data()[b * k * l..(b + 1) * k * l],
                            Trans::Yes,
                            out.data_mut(),
                            T::one(),
                        );
                    }
                    out
                });
                vec![gx, gw]
            }),
        )
    }
}
