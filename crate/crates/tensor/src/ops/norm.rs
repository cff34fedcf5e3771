//! Normalization over the trailing axis.

use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<'g, T: Scalar> Var<'g, T> {
    /// Zero-mean, unit-variance normalization of every trailing-axis row
    /// (biased variance), without affine parameters.
    pub fn normalize_last(self, eps: T) -> Var<'g, T> {
        let x = self.value();
        let d = *x.shape().last().expect("normalize_last on a scalar");
        let rows = x.len() / d;
        let inv_d = T::one() / T::from_usize_lossy(d);
        let mut y = Tensor::zeros(x.shape());
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let xs = &x.data()[r * d..(r + 1) * d];
            let mean = xs.iter().copied().sum::<T>() * inv_d;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let s = T::one() / (var + eps).sqrt();
            rstd[r] = s;
            for (o, &v) in y.data_mut()[r * d..(r + 1) * d].iter_mut().zip(xs) {
                *o = (v - mean) * s;
            }
        }
        let saved = std::rc::Rc::new(y.clone());
        self.graph.op(
            y,
            &[self],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(saved.shape());
                for r in 0..rows {
                    let ys = &saved.data()[r * d..(r + 1) * d];
                    let gs = &g.data()[r * d..(r + 1) * d];
                    let mg = gs.iter().copied().sum::<T>() * inv_d;
                    let mgy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                    for ((o, &gv), &yv) in gx.data_mut()[r * d..(r + 1) * d].iter_mut().zip(gs).zip(ys) {
                        *o = rstd[r] * (gv - mg - yv * mgy);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Layer normalization with per-channel `gamma`, `beta` over the last axis.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> Var<'g, T> {
        let axis = self.value().ndim() - 1;
        self.normalize_last(eps).mul_bias(gamma, axis).add_bias(beta, axis)
    }
}
