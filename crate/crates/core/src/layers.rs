//! Parameterized building blocks shared by the model modules.

use flowlens_tensor::{Ctx, Init, ParamStore, Scalar, Var};

pub const LRELU: f64 = 0.2;
pub const LN_EPS: f64 = 1e-6;

/// How the weight of a layer starts out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightInit {
    Kaiming,
    /// Kaiming scaled by a factor (small residual branches).
    Scaled(f64),
    /// Identity kernel plus `Scaled` noise.
    Dirac(f64),
    Zero,
}

fn weight_init(init: WeightInit, fan_in: usize) -> Init {
    match init {
        WeightInit::Kaiming => Init::KaimingUniform { fan_in },
        WeightInit::Scaled(s) => Init::Uniform { bound: s / (fan_in.max(1) as f64).sqrt() },
        WeightInit::Dirac(s) => Init::Dirac { noise: s / (fan_in.max(1) as f64).sqrt() },
        WeightInit::Zero => Init::Zeros,
    }
}

/// `name.w: [cout, cin/groups, k, k]`, `name.b: [cout]`.
pub fn declare_conv<T: Scalar>(s: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, groups: usize, init: WeightInit) {
    let fan_in = cin / groups * k * k;
    s.declare(&format!("{name}.w"), &[cout, cin / groups, k, k], weight_init(init, fan_in));
    s.declare(&format!("{name}.b"), &[cout], Init::Zeros);
}

/// Same-padded (for odd `k`) convolution with bias.
pub fn conv<'a, T: Scalar>(ctx: &Ctx<'a, T>, name: &str, x: Var<'a, T>, k: usize, stride: usize, groups: usize) -> Var<'a, T> {
    x.conv2d(ctx.p(&format!("{name}.w")), k, stride, k / 2, groups).add_bias(ctx.p(&format!("{name}.b")), 1)
}

/// `name.w: [cin, cout, k, k]`, `name.b: [cout]`.
pub fn declare_conv_transpose<T: Scalar>(s: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize) {
    s.declare(&format!("{name}.w"), &[cin, cout, k, k], Init::KaimingUniform { fan_in: cin * k * k / 4 });
    s.declare(&format!("{name}.b"), &[cout], Init::Zeros);
}

/// Kernel 4, stride 2, padding 1: doubles both spatial extents.
pub fn conv_transpose<'a, T: Scalar>(ctx: &Ctx<'a, T>, name: &str, x: Var<'a, T>) -> Var<'a, T> {
    x.conv_transpose2d(ctx.p(&format!("{name}.w")), 4, 2, 1).add_bias(ctx.p(&format!("{name}.b")), 1)
}

/// `name.w: [cin, cout]`, `name.b: [cout]`.
pub fn declare_linear<T: Scalar>(s: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, init: WeightInit) {
    s.declare(&format!("{name}.w"), &[cin, cout], weight_init(init, cin));
    s.declare(&format!("{name}.b"), &[cout], Init::Zeros);
}

/// Row-wise affine map of `[n, cin]`.
pub fn linear<'a, T: Scalar>(ctx: &Ctx<'a, T>, name: &str, x: Var<'a, T>) -> Var<'a, T> {
    x.matmul(ctx.p(&format!("{name}.w"))).add_bias(ctx.p(&format!("{name}.b")), 1)
}

pub fn declare_layer_norm<T: Scalar>(s: &mut ParamStore<T>, name: &str, dim: usize) {
    s.declare(&format!("{name}.g"), &[dim], Init::Ones);
    s.declare(&format!("{name}.b"), &[dim], Init::Zeros);
}

pub fn layer_norm<'a, T: Scalar>(ctx: &Ctx<'a, T>, name: &str, x: Var<'a, T>) -> Var<'a, T> {
    x.layer_norm(ctx.p(&format!("{name}.g")), ctx.p(&format!("{name}.b")), T::lit(LN_EPS))
}

pub fn lrelu<T: Scalar>(x: Var<'_, T>) -> Var<'_, T> {
    x.leaky_relu(T::lit(LRELU))
}

/// Frame `i` of a `[n, ...]` stack, keeping the leading axis.
pub fn frame<T: Scalar>(x: Var<'_, T>, i: usize) -> Var<'_, T> {
    x.narrow(0, i, 1)
}
