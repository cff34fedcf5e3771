#![allow(dead_code)]

use flowlens_tensor::{ParamStore, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-scale..scale)))
}

/// Overwrites every trainable parameter with uniform noise in `±scale`.
pub fn randomize<T: Scalar>(store: &mut ParamStore<T>, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for name in store.names() {
        if store.is_trainable(&name) {
            let t = store.get_mut(&name).unwrap();
            for v in t.data_mut() {
                *v = T::lit(r.random_range(-scale..scale));
            }
        }
    }
}

/// Smooth texture translated by `(dx, dy)`: value at `(x, y)` is the
/// base pattern at `(x − dx, y − dy)`. Shape `[1, 3, h, w]` in `[−1, 1]`.
pub fn shifted_texture(seed: u64, h: usize, w: usize, dx: f64, dy: f64) -> Tensor<f64> {
    let mut r = rng(seed);
    let waves: Vec<[f64; 4]> = (0..6)
        .map(|_| [r.random_range(-0.6..0.6), r.random_range(-0.6..0.6), r.random_range(0.0..6.3), r.random_range(0.1..0.25)])
        .collect();
    Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        let (x, y) = ((p % w) as f64 - dx, (p / w) as f64 - dy);
        waves.iter().enumerate().map(|(k, a)| a[3] * (a[0] * x + a[1] * y + a[2] + (c + k) as f64).sin()).sum()
    })
}

pub fn max_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).abs()).fold(0.0, f64::max)
}
