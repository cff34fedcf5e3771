//! Layout operations: reshape, permute, slicing, concatenation, row gathers.

use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<'g, T: Scalar> Var<'g, T> {
    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = x.reshape(shape);
        self.graph.op(y, &[self], Box::new(move |g, _| vec![Some(g.reshape(&old))]))
    }

    pub fn permute(self, axes: &[usize]) -> Var<'g, T> {
        let y = self.value().permute(axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.graph.op(y, &[self], Box::new(move |g, _| vec![Some(g.permute(&inverse))]))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = x.narrow(axis, start, len);
        self.graph.op(
            y,
            &[self],
            Box::new(move |g, _| {
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let d = shape[axis];
                let mut out = Tensor::zeros(&shape);
                let od = out.data_mut();
                for o in 0..outer {
                    let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                    let base = (o * d + start) * inner;
                    od[base..base + len * inner].copy_from_slice(src);
                }
                vec![Some(out)]
            }),
        )
    }

    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Var<'g, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let y = Tensor::concat(&refs, axis);
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        parts[0].graph.op(
            y,
            parts,
            Box::new(move |g, needs| {
                let mut start = 0;
                sizes
                    .iter()
                    .zip(needs)
                    .map(|(&len, &need)| {
                        let r = need.then(|| g.narrow(axis, start, len));
                        start += len;
                        r
                    })
                    .collect()
            }),
        )
    }

    /// Rows `index[i]` of a 2-D tensor (repeats allowed).
    pub fn index_rows(self, index: &[usize]) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.ndim(), 2, "index_rows expects a matrix");
        let (n, c) = (x.dim(0), x.dim(1));
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            assert!(i < n, "row index {i} out of range {n}");
            data.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
        }
        let index = index.to_vec();
        self.graph.op(
            Tensor::from_vec(&[index.len(), c], data),
            &[self],
            Box::new(move |g, _| {
                let mut out = Tensor::zeros(&[n, c]);
                let od = out.data_mut();
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        od[i * c + j] += g.data()[r * c + j];
                    }
                }
                vec![Some(out)]
            }),
        )
    }

    /// Reverse along `axis`.
    pub fn flip(self, axis: usize) -> Var<'g, T> {
        let y = self.value().flip(axis);
        self.graph.op(y, &[self], Box::new(move |g, _| vec![Some(g.flip(axis))]))
    }
}
