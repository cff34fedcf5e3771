mod common;

use common::*;
use flowlens::inference_engine::SamplerConfig;
use flowlens::metrics_bench::*;
use flowlens::model_assembly::{Generator, ModelConfig};
use flowlens::training_objective::{synthetic_video, StreamSpec};
use flowlens::video_masks::{Direction, FlowFieldSequence};
use flowlens::Error;
use flowlens_tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn unit(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(0.0..1.0))
}

/// Direct SSIM: Gaussian weights built from scratch, every window summed
/// independently.
fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k: Vec<f64> = (-5..=5).map(|i: i32| (-(i * i) as f64 / 4.5).exp()).collect();
    let z: f64 = k.iter().sum::<f64>().powi(2);
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    let mut n = 0;
    for i in 0..=h - 11 {
        for j in 0..=w - 11 {
            let win = |f: &dyn Fn(f64, f64) -> f64| {
                let mut s = 0.0;
                for u in 0..11 {
                    for v in 0..11 {
                        let p = (i + u) * w + j + v;
                        s += k[u] * k[v] / z * f(a[p], b[p]);
                    }
                }
                s
            };
            let (ma, mb) = (win(&|x, _| x), win(&|_, y| y));
            let va = win(&|x, _| (x - ma) * (x - ma));
            let vb = win(&|_, y| (y - mb) * (y - mb));
            let cov = win(&|x, y| (x - ma) * (y - mb));
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            n += 1;
        }
    }
    total / n as f64
}

#[test]
fn psnr_examples() {
    let a = unit(1, &[3, 8, 8]);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    let gt = Tensor::full(&[3, 8, 8], 0.4);
    let off = Tensor::full(&[3, 8, 8], 0.5);
    assert!((psnr(&off, &gt).unwrap() - 20.0).abs() < 1e-9);
    let b = unit(2, &[3, 8, 8]);
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-6);
    assert!(matches!(psnr(&a, &unit(3, &[3, 8, 7])), Err(Error::Dimension(_))));
}

#[test]
fn region_and_video_psnr() {
    let gt = Tensor::full(&[2, 3, 4, 4], 0.5);
    let mut pred = gt.clone();
    // error only at pixel 0 of every plane
    for (i, v) in pred.data_mut().iter_mut().enumerate() {
        if i % 16 == 0 {
            *v = 0.6;
        }
    }
    let mut region = vec![0u8; 16];
    region[0] = 1;
    assert!((psnr_in_region(&pred, &gt, &region).unwrap() - 20.0).abs() < 1e-9);
    region[1] = 1;
    assert!((psnr_in_region(&pred, &gt, &region).unwrap() - 10.0 * 200f64.log10()).abs() < 1e-9);
    assert_eq!(psnr_in_region(&pred, &gt, &[0; 16]).unwrap(), PSNR_CAP);
    let full = 10.0 * (16.0f64 / 0.01).log10();
    assert!((psnr_video(&pred, &gt, None).unwrap() - full).abs() < 1e-9);
}

#[test]
fn ssim_matches_direct_formula() {
    let a = unit(4, &[1, 16, 19]);
    let b = a.map(|v| (0.7 * v + 0.1 * (v * 9.0).sin()).clamp(0.0, 1.0));
    let got = ssim(&a, &b).unwrap();
    assert!((got - ssim_oracle(a.data(), b.data(), 16, 19)).abs() < 1e-10);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn ssim_closed_forms() {
    let (x, d) = (0.3, 0.2);
    let a = Tensor::full(&[1, 12, 12], x);
    let b = Tensor::full(&[1, 12, 12], x + d);
    let want = (2.0 * x * (x + d) + 1e-4) / (x * x + (x + d) * (x + d) + 1e-4);
    assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);

    // checkerboard away from mid-gray against its negative
    let gt = Tensor::from_fn(&[1, 14, 14], |i| if (i / 14 + i % 14) % 2 == 0 { 0.1 } else { 0.9 });
    let inv = gt.map(|v| 1.0 - v);
    assert!(ssim(&inv, &gt).unwrap() < 0.0);
    assert!(matches!(ssim(&Tensor::<f64>::zeros(&[3, 10, 20]), &Tensor::zeros(&[3, 10, 20])), Err(Error::Dimension(_))));
}

#[test]
fn rgb_frames_are_reduced_to_luma() {
    let rgb = unit(5, &[3, 12, 12]);
    let (g, h, w) = to_gray(&rgb).unwrap();
    assert_eq!((h, w), (12, 12));
    let d = rgb.data();
    for p in [0, 17, 143] {
        assert!((g[p] - (0.299 * d[p] + 0.587 * d[144 + p] + 0.114 * d[288 + p])).abs() < 1e-15);
    }
}

fn static_flows(t: usize, h: usize, w: usize) -> FlowFieldSequence<f64> {
    let z = || vec![Tensor::zeros(&[2, h, w]); t - 1];
    let o = || vec![Tensor::full(&[h, w], 1.0); t - 1];
    FlowFieldSequence { forward: z(), backward: z(), forward_valid: o(), backward_valid: o() }
}

#[test]
fn warp_error_of_static_and_flickering_video() {
    let frame = unit(6, &[1, 3, 8, 8]);
    let video = Tensor::concat(&[&frame, &frame, &frame], 0);
    let flows = static_flows(3, 8, 8);
    assert_eq!(warp_error(&video, &flows).unwrap().e_warp, 0.0);
    let mut flicker = video.clone();
    let mut r = rng(7);
    for v in &mut flicker.data_mut()[192..384] {
        *v += r.random_range(-0.1..0.1);
    }
    let e = warp_error(&flicker, &flows).unwrap();
    let direct = video.data()[..192].iter().zip(&flicker.data()[192..384]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() * 2.0 / 384.0;
    assert!((e.e_warp - direct).abs() < 1e-12);
    assert!((e.e_warp_star - 100.0 * e.e_warp).abs() < 1e-12);
    let short = FlowFieldSequence { forward: vec![], backward: vec![], forward_valid: vec![], backward_valid: vec![] };
    assert!(matches!(warp_error(&video, &short), Err(Error::InvalidInput(_))));
}

#[test]
fn warp_error_skips_inconsistent_pixels() {
    let a = unit(8, &[1, 3, 6, 6]);
    let b = unit(9, &[1, 3, 6, 6]);
    let video = Tensor::concat(&[&a, &b], 0);
    let mut flows = static_flows(2, 6, 6);
    // backward flow disagreeing by 2 px everywhere marks all pixels occluded
    flows.backward[0] = Tensor::full(&[2, 6, 6], 2.0);
    assert_eq!(warp_error(&video, &flows).unwrap().e_warp, 0.0);
}

#[test]
fn flow_consistent_synthetic_video_has_no_warp_error() {
    let spec = StreamSpec { height: 32, width: 32, max_speed: 1.0, ..StreamSpec::default() };
    let s = synthetic_video::<f64>(&spec, 6, 3, 0).unwrap();
    let whole = warp_error(&s.video.frames, &s.flows).unwrap();
    // send pixels whose bilinear footprint straddles a sprite edge off-frame
    let mut flows = s.flows.clone();
    for (f, valid) in flows.forward.iter_mut().zip(&s.flows.forward_valid) {
        for p in 0..32 * 32 {
            if valid.data()[p] == 0.0 {
                f.data_mut()[p] = -1e3;
            }
        }
    }
    let interior = warp_error(&s.video.frames, &flows).unwrap();
    assert!(interior.e_warp < 1e-6, "{interior:?}");
    assert!(interior.e_warp <= whole.e_warp);
}

fn bench_set() -> Vec<BenchVideo<f64>> {
    let spec = StreamSpec { height: 32, width: 32, ..StreamSpec::default() };
    (0..2)
        .map(|k| {
            let s = synthetic_video::<f64>(&spec, 4, 11, k).unwrap();
            BenchVideo { video: s.video, flows: Some(s.flows) }
        })
        .collect()
}

#[test]
fn benchmark_report_is_consistent_and_deterministic() {
    let mut model = Generator::<f64>::new(ModelConfig::micro(), 0).unwrap();
    randomize(&mut model.params, 1, 0.05);
    let cfg = BenchConfig {
        rates: vec![0.05, 0.1, 0.2],
        direction: Direction::Outer,
        sampler: SamplerConfig::for_model(&model, flowlens::inference_engine::Mode::Online),
        mask_only: false,
    };
    let data = bench_set();
    let r = run_benchmark(&model, &data, &cfg, None).unwrap();
    assert_eq!(r.rows.len(), 3);
    let avg = |f: fn(&RateRow) -> f64| r.rows.iter().map(f).sum::<f64>() / 3.0;
    assert!((r.average.psnr - avg(|x| x.psnr)).abs() < 1e-9);
    assert!((r.average.ssim - avg(|x| x.ssim)).abs() < 1e-9);
    assert!((r.average.e_warp_star.unwrap() - avg(|x| x.e_warp_star.unwrap())).abs() < 1e-9);
    assert!(r.rows.iter().all(|x| x.vfid.is_none()));
    assert!(r.rows[0].psnr >= r.rows[2].psnr);
    assert!(r.efficiency.gflops > 0.0);

    let again = run_benchmark(&model, &data, &cfg, None).unwrap();
    assert_eq!(r.rows, again.rows);

    let table = r.to_table();
    assert!(table.contains("outer expansion"));
    assert!(table.contains("10%") && table.contains("avg") && table.contains("n/a"));
    let lines: Vec<serde_json::Value> = r.to_jsonl().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[1]["row"]["rate"], 0.1);
    assert_eq!(lines[3]["kind"], "average");
    assert_eq!(lines[4]["kind"], "efficiency");

    let masked = run_benchmark(&model, &data, &BenchConfig { mask_only: true, ..cfg.clone() }, None).unwrap();
    assert!(masked.rows[0].psnr < r.rows[0].psnr);
    assert!(matches!(run_benchmark(&model, &[], &cfg, None), Err(Error::InvalidInput(_))));
}

struct MeanGap;

impl VideoMetric for MeanGap {
    fn name(&self) -> &str {
        "gap"
    }
    fn score(&self, pred: &Tensor<f64>, gt: &Tensor<f64>) -> f64 {
        max_abs_diff(pred, gt)
    }
}

#[test]
fn plugged_video_metric_fills_the_vfid_slot() {
    let model = Generator::<f64>::new(ModelConfig::micro(), 0).unwrap();
    let cfg = BenchConfig {
        rates: vec![0.2],
        direction: Direction::Inner,
        sampler: SamplerConfig::offline(10, 10),
        mask_only: false,
    };
    let r = run_benchmark(&model, &bench_set(), &cfg, Some(&MeanGap)).unwrap();
    assert!(r.rows[0].vfid.unwrap() > 0.0);
    assert!(!r.to_table().contains("n/a"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metrics_are_symmetric(seed in 0u64..1000) {
        let a = unit(seed, &[3, 12, 13]);
        let b = unit(seed + 5000, &[3, 12, 13]);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }
}
