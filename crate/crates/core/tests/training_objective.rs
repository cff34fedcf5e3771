mod common;

use common::*;
use flowlens::flow_completion::flow_loss;
use flowlens::model_assembly::*;
use flowlens::training_objective::*;
use flowlens::video_masks::Direction;
use flowlens::Error;
use flowlens_tensor::gradcheck::{check_params, worst};
use flowlens_tensor::{Ctx, Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn scalar(v: flowlens_tensor::Var<'_, f64>) -> f64 {
    v.value().item()
}

/// Outer 20% pinhole masks: large enough holes for short runs.
fn stream_spec() -> StreamSpec {
    StreamSpec { rates: vec![0.2], directions: vec![Direction::Outer], height: 32, width: 32, ..StreamSpec::default() }
}

fn micro_trainer(seed: u64, lambda_adv: f64) -> (Trainer<f64>, TrainConfig) {
    let tc = TrainConfig {
        lr: 1e-3,
        disc_lr: 1e-3,
        weights: LossWeights { lambda_adv, ..Default::default() },
        batch: 1,
        seed,
        log_every: 0,
        ..Default::default()
    };
    let disc = (lambda_adv > 0.0).then(|| Discriminator::new(DiscConfig { base_channels: 4, layers: 3 }, seed).unwrap());
    let g = Generator::new(ModelConfig::micro(), seed).unwrap();
    (Trainer::new(g, disc, &tc).unwrap(), tc)
}

#[test]
fn reconstruction_loss_examples() {
    let g = Graph::no_grad();
    let mut r = rng(1);
    let a = rand_tensor::<f64>(&mut r, &[2, 3, 4, 5], 1.0);
    let b = rand_tensor::<f64>(&mut r, &[2, 3, 4, 5], 1.0);
    assert_eq!(scalar(reconstruction_loss(g.constant(a.clone()), g.constant(a.clone())).unwrap()), 0.0);
    let shifted = a.map(|v| v + 0.25);
    assert!((scalar(reconstruction_loss(g.constant(shifted), g.constant(a.clone())).unwrap()) - 0.25).abs() < 1e-12);
    let want = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    assert!((scalar(reconstruction_loss(g.constant(a.clone()), g.constant(b)).unwrap()) - want).abs() < 1e-7);
    let bad = reconstruction_loss(g.constant(a), g.constant(Tensor::zeros(&[2, 3, 4, 4])));
    assert!(matches!(bad, Err(Error::Dimension(_))));
}

#[test]
fn hinge_examples() {
    let g = Graph::no_grad();
    let ones = g.constant(Tensor::full(&[1, 1, 2, 3, 3], 1.0));
    let neg = g.constant(Tensor::full(&[1, 1, 2, 3, 3], -1.0));
    let zero = g.constant(Tensor::zeros(&[1, 1, 2, 3, 3]));
    let (_, d) = adversarial_losses(ones, neg);
    assert_eq!(scalar(d), 0.0);
    let (lg, d) = adversarial_losses(ones, zero);
    assert_eq!(scalar(lg), 0.0);
    assert_eq!(scalar(d), 1.0);

    let mut r = rng(2);
    let real = rand_tensor::<f64>(&mut r, &[1, 1, 3, 4, 4], 3.0);
    let fake = rand_tensor::<f64>(&mut r, &[1, 1, 3, 4, 4], 3.0);
    let (lg, d) = adversarial_losses(g.constant(real.clone()), g.constant(fake.clone()));
    let n = real.len() as f64;
    let want_g = -fake.data().iter().sum::<f64>() / n;
    let want_d = real.data().iter().map(|x| (1.0 - x).max(0.0)).sum::<f64>() / n + fake.data().iter().map(|x| (1.0 + x).max(0.0)).sum::<f64>() / n;
    assert!((scalar(lg) - want_g).abs() < 1e-7);
    assert!((scalar(d) - want_d).abs() < 1e-7);
}

#[test]
fn total_loss_weights_and_aborts() {
    let g = Graph::no_grad();
    let s = |v: f64| g.constant(Tensor::scalar(v));
    let w = LossWeights { lambda_rec: 1.0, lambda_adv: 0.01, lambda_flow: 1.0 };
    let t = total_loss(&LossComponents { rec: s(0.2), adv: Some(s(0.5)), flow: None }, &w).unwrap();
    assert!((scalar(t) - 0.205).abs() < 1e-12);
    let t = total_loss(&LossComponents { rec: s(0.2), adv: Some(s(0.5)), flow: Some(s(0.1)) }, &w).unwrap();
    assert!((scalar(t) - 0.305).abs() < 1e-12);
    let pure = LossWeights { lambda_adv: 0.0, ..w };
    let t = total_loss(&LossComponents { rec: s(0.2), adv: Some(s(7.0)), flow: None }, &pure).unwrap();
    assert_eq!(scalar(t), 0.2);
    let nan = total_loss(&LossComponents { rec: s(0.2), adv: Some(s(f64::NAN)), flow: None }, &w);
    assert!(matches!(nan, Err(Error::TrainingAbort(_))));
    let inf = total_loss(&LossComponents { rec: s(f64::INFINITY), adv: None, flow: None }, &w);
    assert!(matches!(inf, Err(Error::TrainingAbort(_))));
    assert!(LossWeights { lambda_adv: -0.1, ..w }.validate().is_err());
    assert!(LossWeights { lambda_rec: f64::NAN, ..w }.validate().is_err());
}

#[test]
fn total_gradient_is_weighted_sum_of_parts() {
    let mut s = ParamStore::<f64>::new(0);
    let mut r = rng(3);
    s.insert("p", rand_tensor(&mut r, &[3, 4], 1.0), true);
    let a = rand_tensor::<f64>(&mut r, &[3, 4], 1.0);
    let b = rand_tensor::<f64>(&mut r, &[3, 4], 1.0);
    let w = LossWeights { lambda_rec: 0.7, lambda_adv: 0.03, lambda_flow: 1.9 };
    let grad = |which: u8| {
        let g = Graph::new();
        let ctx = Ctx::new(&g, &s);
        let p = ctx.p("p");
        let rec = reconstruction_loss(p * g.constant(a.clone()), g.constant(b.clone())).unwrap();
        let adv = generator_adv_loss(p.tanh());
        let flow = flow_loss(p.scale(2.0), g.constant(a.clone())).unwrap();
        let loss = match which {
            0 => total_loss(&LossComponents { rec, adv: Some(adv), flow: Some(flow) }, &w).unwrap(),
            1 => rec,
            2 => adv,
            _ => flow,
        };
        ctx.grads(&g.backward(loss))["p"].clone()
    };
    let (total, rec, adv, flow) = (grad(0), grad(1), grad(2), grad(3));
    for i in 0..12 {
        let want = w.lambda_rec * rec.data()[i] + w.lambda_adv * adv.data()[i] + w.lambda_flow * flow.data()[i];
        assert!((total.data()[i] - want).abs() < 1e-6);
    }
}

#[test]
fn discriminator_emits_unsquashed_patch_logits() {
    let d = Discriminator::<f64>::new(DiscConfig::default(), 4).unwrap();
    let mut r = rng(4);
    let frames = Tensor::from_fn(&[5, 3, 32, 32], |_| r.random_range(0.0..1.0));
    let g = Graph::no_grad();
    let ctx = Ctx::new(&g, &d.params);
    let logits = discriminate(&ctx, &d.config, g.constant(frames.clone()), true).value();
    assert_eq!(logits.shape(), &[1, 1, 5, 1, 1]);
    assert!(ctx.take_updates().len() == d.config.layers);
    let again = discriminate(&ctx, &d.config, g.constant(frames), false).value();
    assert_eq!(*logits, *again);
    assert!(ctx.take_updates().is_empty());
    let d2 = Discriminator::<f64>::new(DiscConfig { base_channels: 4, layers: 3 }, 4).unwrap();
    let ctx = Ctx::new(&g, &d2.params);
    let big = Tensor::from_fn(&[4, 3, 32, 32], |i| ((i * 7919) % 101) as f64 / 100.0);
    let l = discriminate(&ctx, &d2.config, g.constant(big), false).value();
    assert_eq!(l.shape(), &[1, 1, 4, 8, 8]);
    let (lo, hi) = l.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    assert!(lo < hi);
    assert!(Discriminator::<f64>::new(DiscConfig { base_channels: 0, layers: 2 }, 0).is_err());
}

#[test]
fn fakes_detached_for_the_discriminator_carry_no_generator_gradient() {
    let cfg = ModelConfig::micro();
    let model = Generator::<f64>::new(cfg.clone(), 5).unwrap();
    let d = Discriminator::<f64>::new(DiscConfig { base_channels: 4, layers: 3 }, 5).unwrap();
    let spec = stream_spec();
    let sample = SyntheticStream::<f64>::new(spec, 3, 2, 5).unwrap().next_sample().unwrap();
    let clip = ClipInput::new(sample.frames.clone(), sample.masks.clone(), 3).unwrap();
    let g = Graph::new();
    let gctx = Ctx::new(&g, &model.params);
    let out = generator_forward(&gctx, &cfg, &clip, &mut ModelCache::new(), "v").unwrap();
    let dctx = Ctx::new(&g, &d.params);
    let real = discriminate(&dctx, &d.config, g.constant(sample.frames.narrow(0, 0, 3)), false);
    let fake = discriminate(&dctx, &d.config, out.composited.detach(), false);
    let grads = g.backward(discriminator_loss(real, fake));
    let gen = gctx.grads(&grads);
    assert!(gen.values().all(|t| t.data().iter().all(|&v| v == 0.0)));
    assert!(dctx.grads(&grads).values().any(|t| t.data().iter().any(|&v| v != 0.0)));
}

const PROBES: [(&str, usize); 14] = [
    ("stem.c1.w", 5),
    ("stem.c4.w", 40),
    ("prop.fuse.w", 3),
    ("embed.w", 100),
    ("blocks.0.qkv.w", 17),
    ("blocks.0.hub.fuse.w", 9),
    ("blocks.1.fc1.w", 33),
    ("blocks.1.dw5.w", 4),
    ("unembed.w", 50),
    ("dec.up1.w", 21),
    ("dec.out.w", 2),
    ("dec.out.b", 1),
    ("flow.dec2.b.w", 7),
    ("disc.l0.b", 0),
];

#[test]
fn total_loss_gradients_match_finite_differences() {
    let cfg = ModelConfig::micro();
    let mut store = Generator::<f64>::new(cfg.clone(), 6).unwrap().params;
    randomize(&mut store, 7, 0.15);
    let d = Discriminator::<f64>::new(DiscConfig { base_channels: 4, layers: 3 }, 6).unwrap();
    for name in d.params.names() {
        store.insert(&name, d.params.value(&name).clone(), d.params.is_trainable(&name));
    }
    let spec = stream_spec();
    let mut stream = SyntheticStream::<f64>::new(spec, 3, 2, 6).unwrap();
    // the memory is a stop-gradient input, so it is filled once by a previous window and held fixed
    let warm = stream.next_sample().unwrap();
    let mut cache = ModelCache::new();
    {
        let g = Graph::no_grad();
        let ctx = Ctx::new(&g, &store);
        let clip = ClipInput::new(warm.frames, warm.masks, 3).unwrap();
        generator_forward(&ctx, &cfg, &clip, &mut cache, &warm.video_id).unwrap();
    }
    let sample = stream.next_sample().unwrap();
    assert_eq!(sample.video_id, warm.video_id);
    let clip = ClipInput::new(sample.frames.clone(), sample.masks.clone(), 3).unwrap();
    let target = sample.frames.narrow(0, 0, 3);
    // keep the flow residuals away from the kink of |x|
    let gt_flow = Tensor::full(&[2, 2, 8, 8], 0.9);
    let w = LossWeights::default();
    let dcfg = d.config;
    let probes = PROBES;
    let res = check_params(&store, &probes, 1e-5, |ctx| {
        let g = ctx.graph();
        let out = generator_forward(ctx, &cfg, &clip, &mut cache.clone(), &sample.video_id).unwrap();
        let rec = reconstruction_loss(out.composited, g.constant(target.clone())).unwrap();
        let adv = generator_adv_loss(discriminate(ctx, &dcfg, out.composited, false));
        let flow = flow_loss(out.flows_fwd.unwrap(), g.constant(gt_flow.clone())).unwrap();
        total_loss(&LossComponents { rec, adv: Some(adv), flow: Some(flow) }, &w).unwrap()
    });
    let e = worst(&res, 1e-6);
    assert!(e < 1e-3, "worst relative error {e}: {res:#?}");
}

#[test]
fn zero_adversarial_weight_leaves_discriminator_untouched() {
    let tc = TrainConfig { lr: 1e-3, weights: LossWeights { lambda_adv: 0.0, ..Default::default() }, batch: 1, log_every: 0, ..Default::default() };
    let d = Discriminator::<f64>::new(DiscConfig { base_channels: 4, layers: 3 }, 1).unwrap();
    let before = d.params.clone();
    let g = Generator::new(ModelConfig::micro(), 1).unwrap();
    let g0 = g.params.clone();
    let mut tr = Trainer::new(g, Some(d), &tc).unwrap();
    let mut stream = SyntheticStream::<f64>::new(stream_spec(), 3, 2, 1).unwrap();
    let m = tr.train_step(&[stream.next_sample().unwrap()]).unwrap();
    assert_eq!((m.step, m.l_adv, m.l_d), (1, 0.0, 0.0));
    let after = &tr.discriminator.as_ref().unwrap().params;
    for name in before.names() {
        assert_eq!(before.value(&name), after.value(&name));
    }
    assert!(g0.names().iter().any(|n| g0.value(n) != tr.generator.params.value(n)));

    let no_disc = TrainConfig { weights: LossWeights::default(), ..tc };
    let g = Generator::<f64>::new(ModelConfig::micro(), 1).unwrap();
    assert!(matches!(Trainer::new(g, None, &no_disc), Err(Error::Config(_))));
}

#[test]
fn adversarial_steps_update_both_networks() {
    let (mut tr, _) = micro_trainer(2, 0.01);
    let d0 = tr.discriminator.as_ref().unwrap().params.clone();
    let mut stream = SyntheticStream::<f64>::new(stream_spec(), 3, 2, 2).unwrap();
    let m = tr.train_step(&[stream.next_sample().unwrap(), stream.next_sample().unwrap()]).unwrap();
    assert!(m.l_d > 0.0 && m.l_adv != 0.0 && m.l_flow > 0.0);
    assert!((m.total - (m.l_rec + 0.01 * m.l_adv + m.l_flow)).abs() < 1e-9);
    let d1 = &tr.discriminator.as_ref().unwrap().params;
    assert!(d0.names().iter().any(|n| d0.value(n) != d1.value(n)));
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let (mut tr, _) = micro_trainer(3, 0.01);
        let mut stream = SyntheticStream::<f64>::new(stream_spec(), 3, 2, 3).unwrap();
        let metrics: Vec<_> = (0..10).map(|_| tr.train_step(&[stream.next_sample().unwrap()]).unwrap()).collect();
        (metrics, tr.generator.params)
    };
    let (m1, p1) = run();
    let (m2, p2) = run();
    assert_eq!(m1, m2);
    for n in p1.names() {
        assert_eq!(p1.value(&n), p2.value(&n));
    }
}

#[test]
fn non_finite_input_aborts_the_step() {
    let (mut tr, _) = micro_trainer(4, 0.0);
    let mut stream = SyntheticStream::<f64>::new(stream_spec(), 3, 2, 4).unwrap();
    let mut s = stream.next_sample().unwrap();
    s.frames.data_mut()[0] = f64::NAN;
    assert!(matches!(tr.train_step(&[s]), Err(Error::TrainingAbort(_))));
    assert!(matches!(tr.train_step(&[]), Err(Error::InvalidInput(_))));
}

#[test]
fn random_mask_sequences_are_supported() {
    let spec = StreamSpec { random_masks: true, rates: vec![0.05, 0.1, 0.2], directions: vec![Direction::Outer, Direction::Inner], ..stream_spec() };
    let mut stream = SyntheticStream::<f64>::new(spec, 3, 2, 8).unwrap();
    let (mut tr, _) = micro_trainer(8, 0.0);
    let mut distinct = false;
    for _ in 0..4 {
        let s = stream.next_sample().unwrap();
        let hw = 32 * 32;
        let first = &s.masks.data()[..hw];
        distinct |= (1..s.masks.dim(0)).any(|k| &s.masks.data()[k * hw..(k + 1) * hw] != first);
        tr.train_step(&[s]).unwrap();
    }
    assert!(distinct);
}

#[test]
fn stream_windows_follow_the_online_layout() {
    let mut stream = SyntheticStream::<f32>::new(stream_spec(), 3, 2, 0).unwrap();
    let s: Vec<_> = (0..5).map(|_| stream.next_sample().unwrap()).collect();
    assert_eq!(s[0].index, vec![0, 1, 2, 0, 0]);
    assert_eq!(s[2].index, vec![6, 7, 8, 3, 0]);
    assert_eq!(s[3].index, vec![9, 10, 11, 6, 3]);
    assert_eq!(s[0].video_id, s[3].video_id);
    assert_ne!(s[3].video_id, s[4].video_id);
    assert_eq!(s[4].index, vec![0, 1, 2, 0, 0]);
    assert_eq!(s[0].frames.shape(), &[5, 3, 32, 32]);
    assert_eq!(s[0].flow_fwd.as_ref().unwrap().shape(), &[2, 2, 8, 8]);
    let bad = StreamSpec { height: 30, ..stream_spec() };
    assert!(SyntheticStream::<f32>::new(bad, 3, 2, 0).is_err());
}

#[test]
fn loss_decreases_on_synthetic_data() {
    let tc = TrainConfig { steps: 1000, lr: 1e-3, weights: LossWeights { lambda_adv: 0.0, ..Default::default() }, batch: 1, log_every: 0, ..Default::default() };
    let g = Generator::<f32>::new(ModelConfig::micro(), 0).unwrap();
    let mut tr = Trainer::new(g, None, &tc).unwrap();
    let mut stream = SyntheticStream::<f32>::new(stream_spec(), 3, 2, 0).unwrap();
    let hist = train_loop(&mut tr, &mut stream, &tc, &[], &TrainOutputs::default(), &mut |_| {}).unwrap();
    let median = |r: std::ops::Range<usize>| {
        let mut v: Vec<f64> = hist[r].iter().map(|m| m.total).collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (early, late) = (median(0..100), median(900..1000));
    assert!(late < early, "median total {early} -> {late}");
}

#[test]
fn loop_writes_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let tc = TrainConfig { steps: 4, lr: 1e-3, disc_lr: 1e-3, batch: 1, log_every: 2, checkpoint_every: 2, ..Default::default() };
    let g = Generator::<f32>::new(ModelConfig::micro(), 0).unwrap();
    let d = Discriminator::new(DiscConfig { base_channels: 4, layers: 3 }, 0).unwrap();
    let mut tr = Trainer::new(g, Some(d), &tc).unwrap();
    let mut stream = SyntheticStream::<f32>::new(stream_spec(), 3, 2, 0).unwrap();
    let val = vec![synthetic_video::<f32>(&stream_spec(), 6, 99, 0).unwrap().video];
    let outputs = TrainOutputs { metrics_log: Some(dir.path().join("metrics.jsonl")), checkpoint_dir: Some(dir.path().join("ckpt")) };
    let mut seen = Vec::new();
    let hist = train_loop(&mut tr, &mut stream, &tc, &val, &outputs, &mut |m| seen.push(m.step)).unwrap();
    assert_eq!(hist.len(), 4);
    assert_eq!(seen, vec![2, 4]);
    let text = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for key in ["step", "l_rec", "l_adv", "l_d", "l_flow", "total", "psnr_val"] {
        assert!(lines[1].get(key).is_some(), "missing {key}");
    }
    assert_eq!(lines[1]["step"], 4);
    let g4 = load_checkpoint::<f32>(&dir.path().join("ckpt/generator_000004.ckpt")).unwrap();
    for n in g4.params.names() {
        assert_eq!(g4.params.value(&n), tr.generator.params.value(&n));
    }
    let d4 = load_discriminator::<f32>(&dir.path().join("ckpt/discriminator_000002.ckpt")).unwrap();
    assert_eq!(d4.config, DiscConfig { base_channels: 4, layers: 3 });
    let path = dir.path().join("d.ckpt");
    let d = tr.discriminator.as_ref().unwrap();
    save_discriminator(d, &path).unwrap();
    let back = load_discriminator::<f32>(&path).unwrap();
    for n in d.params.names() {
        assert_eq!(back.params.value(&n), d.params.value(&n));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hinge_loss_bounds(real in prop::collection::vec(-5.0f64..5.0, 8), fake in prop::collection::vec(-5.0f64..5.0, 8)) {
        let g = Graph::no_grad();
        let d = |r: &[f64], f: &[f64]| scalar(discriminator_loss(g.constant(Tensor::from_vec(&[8], r.to_vec())), g.constant(Tensor::from_vec(&[8], f.to_vec()))));
        prop_assert!(d(&real, &fake) >= 0.0);
        let clip = |v: &[f64]| v.iter().map(|x| x.clamp(-1.0, 1.0)).collect::<Vec<_>>();
        prop_assert!(d(&clip(&real), &clip(&fake)) <= 4.0 + 1e-12);
    }
}
