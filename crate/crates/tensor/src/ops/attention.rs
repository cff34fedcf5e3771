//! Multi-head scaled dot-product attention over explicit key neighborhoods.
//!
//! Every attention variant (dense, windowed, strip, temporal) reduces to a
//! sparse pattern: query `i` attends to the key rows listed in
//! `Neighborhoods::keys(i)`, in that order.

use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Compressed per-query key lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighborhoods {
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl Neighborhoods {
    pub fn from_lists<I: IntoIterator<Item = Vec<usize>>>(lists: I) -> Self {
        let mut offsets = vec![0];
        let mut indices = Vec::new();
        for l in lists {
            indices.extend(l);
            offsets.push(indices.len());
        }
        Self { offsets, indices }
    }

    /// Every query sees all `keys` keys in index order.
    pub fn dense(queries: usize, keys: usize) -> Self {
        Self::from_lists((0..queries).map(|_| (0..keys).collect()))
    }

    pub fn queries(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn keys(&self, q: usize) -> &[usize] {
        &self.indices[self.offsets[q]..self.offsets[q + 1]]
    }

    /// Pair positions of query `q` in `[head][pair]` layouts.
    pub fn range(&self, q: usize) -> std::ops::Range<usize> {
        self.offsets[q]..self.offsets[q + 1]
    }

    /// Total number of (query, key) pairs.
    pub fn pairs(&self) -> usize {
        self.indices.len()
    }

    pub fn max_key(&self) -> Option<usize> {
        self.indices.iter().copied().max()
    }
}

fn softmax_in_place<T: Scalar>(s: &mut [T]) {
    let m = s.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in s.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in s.iter_mut() {
        *v /= z;
    }
}

/// Softmax weights laid out `[head][pair]`, pairs in neighborhood order.
pub fn attention_weights<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, heads: usize, nb: &Neighborhoods) -> Vec<Vec<T>> {
    let c = q.dim(1);
    let hd = c / heads;
    let scale = T::one() / T::from_usize_lossy(hd).sqrt();
    let mut out = vec![vec![T::zero(); nb.pairs()]; heads];
    for (h, probs) in out.iter_mut().enumerate() {
        for i in 0..nb.queries() {
            let qi = &q.data()[i * c + h * hd..i * c + (h + 1) * hd];
            let span = nb.offsets[i]..nb.offsets[i + 1];
            let s = &mut probs[span];
            for (slot, &j) in s.iter_mut().zip(nb.keys(i)) {
                let kj = &k.data()[j * c + h * hd..j * c + (h + 1) * hd];
                *slot = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
            }
            softmax_in_place(s);
        }
    }
    out
}

impl<'g, T: Scalar> Var<'g, T> {
    /// `self` = queries `[nq, c]`, keys and values `[nk, c]`; `heads` must
    /// divide `c`. Returns `[nq, c]`, heads concatenated along channels.
    pub fn index_attention(self, k: Var<'g, T>, v: Var<'g, T>, heads: usize, nb: &Neighborhoods) -> Var<'g, T> {
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        assert_eq!(qv.ndim(), 2, "attention queries must be [n, c]");
        let (nq, c) = (qv.dim(0), qv.dim(1));
        let nk = kv.dim(0);
        assert_eq!(kv.shape(), &[nk, c], "attention keys shape");
        assert_eq!(vv.shape(), &[nk, c], "attention values shape");
        assert!(heads > 0 && c % heads == 0, "heads must divide channels");
        assert_eq!(nb.queries(), nq, "neighborhood count vs queries");
        assert!(nb.max_key().map_or(true, |m| m < nk), "neighborhood key out of range");
        for i in 0..nq {
            assert!(!nb.keys(i).is_empty(), "query {i} has no keys");
        }
        let hd = c / heads;
        let probs = attention_weights(&qv, &kv, heads, nb);
        let mut y = Tensor::zeros(&[nq, c]);
        {
            let yd = y.data_mut();
            for (h, p) in probs.iter().enumerate() {
                for i in 0..nq {
                    let out = &mut yd[i * c + h * hd..i * c + (h + 1) * hd];
                    for (&w, &j) in p[nb.offsets[i]..nb.offsets[i + 1]].iter().zip(nb.keys(i)) {
                        let vj = &vv.data()[j * c + h * hd..j * c + (h + 1) * hd];
                        for (o, &x) in out.iter_mut().zip(vj) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        let nb = nb.clone();
        let scale = T::one() / T::from_usize_lossy(hd).sqrt();
        self.graph.op(
            y,
            &[self, k, v],
            Box::new(move |g, _| {
                let mut gq = Tensor::zeros(&[nq, c]);
                let mut gk = Tensor::zeros(&[nk, c]);
                let mut gv = Tensor::zeros(&[nk, c]);
                let mut ds = Vec::new();
                for (h, p) in probs.iter().enumerate() {
                    let hs = h * hd..(h + 1) * hd;
                    for i in 0..nq {
                        let keys = nb.keys(i);
                        let pi = &p[nb.offsets[i]..nb.offsets[i + 1]];
                        let go = &g.data()[i * c + hs.start..i * c + hs.end];
                        ds.clear();
                        let mut dot = T::zero();
                        for (&w, &j) in pi.iter().zip(keys) {
                            let vj = &vv.data()[j * c + hs.start..j * c + hs.end];
                            let dp: T = go.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                            ds.push(dp);
                            dot += w * dp;
                            let gvj = &mut gv.data_mut()[j * c + hs.start..j * c + hs.end];
                            for (o, &x) in gvj.iter_mut().zip(go) {
                                *o += w * x;
                            }
                        }
                        let qi = &qv.data()[i * c + hs.start..i * c + hs.end];
                        for ((&w, &j), d) in pi.iter().zip(keys).zip(ds.iter_mut()) {
                            *d = w * (*d - dot) * scale;
                            let kj = &kv.data()[j * c + hs.start..j * c + hs.end];
                            let gqi = &mut gq.data_mut()[i * c + hs.start..i * c + hs.end];
                            for (o, &x) in gqi.iter_mut().zip(kj) {
                                *o += *d * x;
                            }
                            let gkj = &mut gk.data_mut()[j * c + hs.start..j * c + hs.end];
                            for (o, &x) in gkj.iter_mut().zip(qi) {
                                *o += *d * x;
                            }
                        }
                    }
                }
                vec![Some(gq), Some(gk), Some(gv)]
            }),
        )
    }

    /// Mean of row groups: `[n, c] -> [groups, c]`. Groups must be non-empty.
    pub fn group_mean(self, groups: &Neighborhoods) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.ndim(), 2, "group_mean expects [n, c]");
        let (n, c) = (x.dim(0), x.dim(1));
        let gn = groups.queries();
        let mut y = Tensor::zeros(&[gn, c]);
        for gi in 0..gn {
            let rows = groups.keys(gi);
            assert!(!rows.is_empty(), "empty pooling group");
            let inv = T::one() / T::from_usize_lossy(rows.len());
            let out = &mut y.data_mut()[gi * c..(gi + 1) * c];
            for &r in rows {
                assert!(r < n, "pooling row out of range");
                for (o, &v) in out.iter_mut().zip(&x.data()[r * c..(r + 1) * c]) {
                    *o += v * inv;
                }
            }
        }
        let groups = groups.clone();
        self.graph.op(
            y,
            &[self],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&[n, c]);
                for gi in 0..groups.queries() {
                    let rows = groups.keys(gi);
                    let inv = T::one() / T::from_usize_lossy(rows.len());
                    let src = &g.data()[gi * c..(gi + 1) * c];
                    for &r in rows {
                        for (o, &v) in gx.data_mut()[r * c..(r + 1) * c].iter_mut().zip(src) {
                            *o += v * inv;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}
