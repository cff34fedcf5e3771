//! Pointwise arithmetic, activations and reductions.

use std::ops::{Add, Mul, Neg, Sub};

use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<'g, T: Scalar> Var<'g, T> {
    /// Pointwise op whose derivative is a function of input and output.
    pub fn unary(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'g, T> {
        let x = self.value();
        let y = x.map(&f);
        let saved_x = x.clone();
        let saved_y = std::rc::Rc::new(y.clone());
        self.graph.op(
            y,
            &[self],
            Box::new(move |g, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(saved_x.data())
                    .zip(saved_y.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(Tensor::from_vec(g.shape(), data))]
            }),
        )
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        self.graph.op(a.zip_map(&b, |x, y| x + y), &[self, other], Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        self.graph.op(
            a.zip_map(&b, |x, y| x - y),
            &[self, other],
            Box::new(|g, needs| vec![Some(g.clone()), needs[1].then(|| g.map(|x| -x))]),
        )
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let y = a.zip_map(&b, |x, y| x * y);
        self.graph.op(
            y,
            &[self, other],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&b, |g, y| g * y)),
                    needs[1].then(|| g.zip_map(&a, |g, x| g * x)),
                ]
            }),
        )
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-T::one())
    }

    pub fn scale(self, c: T) -> Var<'g, T> {
        let y = self.value().scale(c);
        self.graph.op(y, &[self], Box::new(move |g, _| vec![Some(g.scale(c))]))
    }

    pub fn add_scalar(self, c: T) -> Var<'g, T> {
        let y = self.value().map(|x| x + c);
        self.graph.op(y, &[self], Box::new(|g, _| vec![Some(g.clone())]))
    }

    pub fn abs(self) -> Var<'g, T> {
        self.unary(|x| x.abs(), |x, _| if x > T::zero() { T::one() } else if x < T::zero() { -T::one() } else { T::zero() })
    }

    pub fn square(self) -> Var<'g, T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(|x| x.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn leaky_relu(self, slope: T) -> Var<'g, T> {
        self.unary(move |x| if x > T::zero() { x } else { x * slope }, move |x, _| if x > T::zero() { T::one() } else { slope })
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(self) -> Var<'g, T> {
        self.unary(gelu, |x, _| gelu_grad(x))
    }

    /// Gradient passes where `lo <= x <= hi`.
    pub fn clamp(self, lo: T, hi: T) -> Var<'g, T> {
        self.unary(move |x| x.max(lo).min(hi), move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() })
    }

    /// Adds a 1-D `bias` broadcast along `axis`.
    pub fn add_bias(self, bias: Var<'g, T>, axis: usize) -> Var<'g, T> {
        let x = self.value();
        let b = bias.value();
        let shape = x.shape().to_vec();
        assert_eq!(b.shape(), &[shape[axis]], "add_bias: bias shape {:?} vs axis {} of {:?}", b.shape(), axis, shape);
        let d = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut y = (*x).clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += b.data()[(i / inner) % d];
        }
        self.graph.op(
            y,
            &[self, bias],
            Box::new(move |g, needs| {
                let gb = needs[1].then(|| {
                    let mut acc = vec![T::zero(); d];
                    for (i, &v) in g.data().iter().enumerate() {
                        acc[(i / inner) % d] += v;
                    }
                    Tensor::from_vec(&[d], acc)
                });
                vec![Some(g.clone()), gb]
            }),
        )
    }

    /// Multiplies by a 1-D `w` broadcast along `axis`.
    pub fn mul_bias(self, w: Var<'g, T>, axis: usize) -> Var<'g, T> {
        let x = self.value();
        let wv = w.value();
        let shape = x.shape().to_vec();
        assert_eq!(wv.shape(), &[shape[axis]], "mul_bias: weight shape mismatch");
        let d = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut y = (*x).clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v *= wv.data()[(i / inner) % d];
        }
        self.graph.op(
            y,
            &[self, w],
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut out = g.clone();
                    for (i, v) in out.data_mut().iter_mut().enumerate() {
                        *v *= wv.data()[(i / inner) % d];
                    }
                    out
                });
                let gw = needs[1].then(|| {
                    let mut acc = vec![T::zero(); d];
                    for (i, (&gv, &xv)) in g.data().iter().zip(x.data()).enumerate() {
                        acc[(i / inner) % d] += gv * xv;
                    }
                    Tensor::from_vec(&[d], acc)
                });
                vec![gx, gw]
            }),
        )
    }

    /// `self / s` for a one-element `s`.
    pub fn div_scalar_var(self, s: Var<'g, T>) -> Var<'g, T> {
        let x = self.value();
        let sv = s.value().item();
        let s_shape = s.shape();
        let y = x.map(|v| v / sv);
        self.graph.op(
            y,
            &[self, s],
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| g.map(|v| v / sv));
                let gs = needs[1].then(|| {
                    let dot: T = g.data().iter().zip(x.data()).map(|(&a, &b)| a * b).sum();
                    Tensor::full(&s_shape, -dot / (sv * sv))
                });
                vec![gx, gs]
            }),
        )
    }

    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.graph.op(
            Tensor::scalar(x.sum()),
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = T::from_usize_lossy(self.value().len().max(1));
        self.sum().scale(T::one() / n)
    }

    /// Mean absolute difference.
    pub fn l1(self, other: Var<'g, T>) -> Var<'g, T> {
        self.sub(other).abs().mean()
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

impl<'g, T: Scalar> Add for Var<'g, T> {
    type Output = Var<'g, T>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(self, rhs)
    }
}

impl<'g, T: Scalar> Sub for Var<'g, T> {
    type Output = Var<'g, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(self, rhs)
    }
}

impl<'g, T: Scalar> Mul for Var<'g, T> {
    type Output = Var<'g, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(self, rhs)
    }
}

impl<'g, T: Scalar> Neg for Var<'g, T> {
    type Output = Var<'g, T>;
    fn neg(self) -> Self::Output {
        Var::neg(self)
    }
}
