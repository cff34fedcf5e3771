mod common;

use common::*;
use flowlens::flow_completion::flow_loss;
use flowlens::mix_focal_transformer::{AttentionKind, FfnKind};
use flowlens::model_assembly::*;
use flowlens::training_objective::reconstruction_loss;
use flowlens::Error;
use flowlens_tensor::{Ctx, Graph, Tensor};
use rand::Rng;

fn clip(seed: u64, h: usize, w: usize, local: usize, refs: usize) -> ClipInput<f64> {
    let n = local + refs;
    let mut r = rng(seed);
    let frames = Tensor::from_fn(&[n, 3, h, w], |_| r.random_range(0.0..1.0));
    // outer band of two pixels missing in every frame
    let masks = Tensor::from_fn(&[n, 1, h, w], |i| {
        let (y, x) = ((i / w) % h, i % w);
        (y < 2 || x < 2 || y >= h - 2 || x >= w - 2) as u8 as f64
    });
    ClipInput::new(frames, masks, local).unwrap()
}

#[test]
fn presets_follow_the_reference_sizes() {
    let s = ModelConfig::standard();
    assert_eq!((s.channels, s.embed_dim, s.blocks, s.heads), (128, 512, 9, 4));
    assert_eq!((s.patch.patch, s.patch.stride, s.local_frames, s.ref_frames), (7, 3, 5, 3));
    assert_eq!(s.propagation.r_max, 10.0);
    assert_eq!(s.hub_placement, HubPlacement::Early);
    assert_eq!(ModelConfig::default(), s);
    assert_eq!(s.hub_blocks(), vec![0]);
    let small = ModelConfig::small();
    assert_eq!((small.channels, small.embed_dim, small.blocks), (64, 256, 5));
    for name in ["standard", "small", "tiny", "micro"] {
        ModelConfig::preset(name).unwrap().validate().unwrap();
    }
    assert!(matches!(ModelConfig::preset("huge"), Err(Error::Config(_))));
}

#[test]
fn hub_placements_pick_blocks() {
    assert_eq!(HubPlacement::Early.blocks(9), vec![0]);
    assert_eq!(HubPlacement::Middle.blocks(9), vec![4]);
    assert_eq!(HubPlacement::Late.blocks(9), vec![8]);
    assert_eq!(HubPlacement::All.blocks(3), vec![0, 1, 2]);
    assert!(HubPlacement::None.blocks(9).is_empty());
}

#[test]
fn configs_round_trip_and_take_diffs() {
    let s = ModelConfig::small();
    assert_eq!(ModelConfig::from_toml(&s.to_toml()).unwrap(), s);
    let rows: [(&str, fn(&ModelConfig) -> bool); 5] = [
        ("hub_placement = \"none\"", |c: &ModelConfig| c.hub_blocks().is_empty()),
        ("hub_placement = \"late\"", |c: &ModelConfig| c.hub_blocks() == vec![4]),
        ("[ffn]\nkind = \"ffn\"", |c: &ModelConfig| c.ffn.kind == FfnKind::Ffn && c.ffn.hidden_ratio == 4),
        ("[propagation]\nenabled = false", |c: &ModelConfig| !c.propagation.enabled && c.propagation.deformable),
        ("[attention]\nkind = \"dense\"", |c: &ModelConfig| c.attention.kind == AttentionKind::Dense && c.attention.window == (5, 9)),
    ];
    for (diff, check) in rows {
        let c = s.with_overrides(diff).unwrap();
        assert!(check(&c), "{diff}");
        assert_eq!(c.channels, 64);
    }
    assert!(matches!(s.with_overrides("heads = 3"), Err(Error::Config(_))));
    assert!(matches!(s.with_overrides("colour = 1"), Err(Error::Config(_))));
    assert!(matches!(ModelConfig::from_toml("channels = 8"), Err(Error::Config(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("row.toml");
    std::fs::write(&path, "blocks = 3\n[hub]\nstrip_width = 1\n").unwrap();
    let c = ModelConfig::load_over(&ModelConfig::micro(), &path).unwrap();
    assert_eq!((c.blocks, c.hub.strip_width, c.hub.pool_kernel), (3, 1, 2));
}

#[test]
fn stem_reduces_to_quarter_resolution() {
    let cfg = ModelConfig { channels: 8, ..ModelConfig::micro() };
    let model = Generator::<f32>::new(cfg, 0).unwrap();
    let g = Graph::no_grad();
    let ctx = Ctx::new(&g, &model.params);
    let x = Tensor::from_fn(&[1, 4, 240, 432], |i| ((i % 97) as f32 / 97.0) - 0.5);
    let f = encode(&ctx, g.constant(x.clone())).unwrap();
    assert_eq!(f.shape(), vec![1, 8, 60, 108]);
    let again = encode(&ctx, g.constant(x)).unwrap();
    assert_eq!(*f.value(), *again.value());
    assert!(matches!(encode(&ctx, g.constant(Tensor::zeros(&[1, 3, 8, 8]))), Err(Error::Dimension(_))));
    assert!(matches!(encode(&ctx, g.constant(Tensor::zeros(&[1, 4, 10, 8]))), Err(Error::Dimension(_))));
}

#[test]
fn stem_sees_the_mask_channel() {
    let model = Generator::<f64>::new(ModelConfig::micro(), 1).unwrap();
    let c = clip(1, 16, 16, 1, 0);
    let mut moved = c.clone();
    // same frame content, mask shifted by one column
    moved.masks = Tensor::from_fn(&[1, 1, 16, 16], |i| c.masks.data()[(i / 16) * 16 + (i % 16 + 1) % 16]);
    let mut a = c.network_input();
    let b = moved.network_input();
    for (i, v) in a.data_mut().iter_mut().enumerate().take(3 * 256) {
        *v = b.data()[i];
    }
    let g = Graph::no_grad();
    let ctx = Ctx::new(&g, &model.params);
    let fa = encode(&ctx, g.constant(a)).unwrap().value();
    let fb = encode(&ctx, g.constant(b)).unwrap().value();
    assert!(max_abs_diff(&fa, &fb) > 1e-6);
}

#[test]
fn forward_keeps_known_pixels_and_emits_local_frames_only() {
    let cfg = ModelConfig::micro();
    let mut model = Generator::<f64>::new(cfg.clone(), 2).unwrap();
    randomize(&mut model.params, 3, 0.2);
    let c = clip(4, 32, 32, 3, 2);
    let g = Graph::no_grad();
    let ctx = Ctx::new(&g, &model.params);
    let mut cache = ModelCache::new();
    let out = generator_forward(&ctx, &cfg, &c, &mut cache, "v").unwrap();
    let (frames, comp) = (out.frames.value(), out.composited.value());
    assert_eq!(frames.shape(), &[3, 3, 32, 32]);
    assert_eq!(comp.shape(), &[3, 3, 32, 32]);
    assert!(frames.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let m = c.masks_rgb();
    for i in 0..comp.len() {
        if m.data()[i] == 0.0 {
            assert_eq!(comp.data()[i].to_bits(), c.frames.data()[i].to_bits());
        } else {
            assert_eq!(comp.data()[i], frames.data()[i]);
        }
    }
    assert_eq!(out.flows_fwd.unwrap().shape(), vec![2, 2, 8, 8]);
    assert!(!cache.is_empty());
    assert_eq!(out.hub_keys.keys().copied().collect::<Vec<_>>(), vec![0]);
}

#[test]
fn forward_is_deterministic_given_cache() {
    let cfg = ModelConfig::micro();
    let mut model = Generator::<f64>::new(cfg.clone(), 5).unwrap();
    randomize(&mut model.params, 6, 0.2);
    let first = clip(7, 16, 16, 3, 2);
    let second = clip(8, 16, 16, 3, 2);
    let g = Graph::no_grad();
    let ctx = Ctx::new(&g, &model.params);
    let mut cache = ModelCache::new();
    generator_forward(&ctx, &cfg, &first, &mut cache, "v").unwrap();
    let mut c2 = cache.clone();
    let a = generator_forward(&ctx, &cfg, &second, &mut cache, "v").unwrap().frames.value();
    let b = generator_forward(&ctx, &cfg, &second, &mut c2, "v").unwrap().frames.value();
    assert_eq!(*a, *b);
    assert_eq!(cache, c2);
}

#[test]
fn every_trainable_parameter_gets_gradient() {
    let cfg = ModelConfig::micro();
    let model = Generator::<f64>::new(cfg.clone(), 9).unwrap();
    let c = clip(10, 16, 16, 3, 2);
    let g = Graph::new();
    let ctx = Ctx::new(&g, &model.params);
    let mut cache = ModelCache::new();
    let out = generator_forward(&ctx, &cfg, &c, &mut cache, "v").unwrap();
    let gt = g.constant(c.frames.narrow(0, 0, 3));
    let target = g.constant(Tensor::full(&[2, 2, 4, 4], 0.3));
    let loss = reconstruction_loss(out.frames, gt).unwrap() + flow_loss(out.flows_fwd.unwrap(), target).unwrap();
    let grads = ctx.grads(&g.backward(loss));
    // the flow net is audited by its own loss; zero-initialized on purpose: the hub fuse projection gates the hub
    // branch, the last offset conv gates the first one
    let gated = |n: &str| {
        ["blocks.0.hub.pk.", "blocks.0.hub.pv.", "blocks.0.hub.pt.", "blocks.0.hub.phw."].iter().any(|p| n.starts_with(p))
            || (n.starts_with("prop.") && n.contains(".off1."))
    };
    let mut dead = Vec::new();
    for name in model.params.names() {
        if !model.params.is_trainable(&name) || name.starts_with("flow.") || gated(&name) {
            continue;
        }
        let live = grads.get(&name).is_some_and(|t| t.data().iter().any(|&v| v != 0.0));
        if !live {
            dead.push(name);
        }
    }
    assert!(dead.is_empty(), "parameters without gradient: {dead:?}");
}

#[test]
fn flop_budget_meets_efficiency_targets() {
    let std = count_flops(&ModelConfig::standard(), 240, 432).unwrap();
    let small = count_flops(&ModelConfig::small(), 240, 432).unwrap();
    assert!(std.hub_share() < 0.05, "hub share {}", std.hub_share());
    assert!(small.total() < 0.5 * std.total(), "{} vs {}", small.total(), std.total());
    assert!(std.hub > 0.0 && std.flow > 0.0 && std.propagation > 0.0);

    let double = count_flops(&ModelConfig::standard(), 240, 864).unwrap();
    assert!((double.stem / std.stem - 2.0).abs() < 1e-12);
    let none = count_flops(&ModelConfig { hub_placement: HubPlacement::None, ..ModelConfig::standard() }, 240, 432).unwrap();
    assert_eq!(none.hub, 0.0);
    assert_eq!(none.blocks, std.blocks);
    let off = ModelConfig { propagation: flowlens::explicit_propagation::PropagationConfig { enabled: false, ..Default::default() }, ..ModelConfig::standard() };
    let off = count_flops(&off, 240, 432).unwrap();
    assert_eq!((off.flow, off.propagation), (0.0, 0.0));
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/g.ckpt");
    let mut model = Generator::<f32>::new(ModelConfig::micro().with_overrides("hub_placement = \"all\"").unwrap(), 11).unwrap();
    model.params.set_trainable("flow.", false);
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(back.params.names(), model.params.names());
    for name in model.params.names() {
        assert_eq!(back.params.value(&name), model.params.value(&name), "{name}");
        assert_eq!(back.params.is_trainable(&name), model.params.is_trainable(&name));
    }
    let as_f64 = load_checkpoint::<f64>(&path).unwrap();
    assert_eq!(as_f64.params.count(""), model.params.count(""));

    let bytes = std::fs::read(&path).unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&bad), Err(Error::Format { .. })));
    let mut extra = bytes.clone();
    extra.push(0);
    std::fs::write(&bad, &extra).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&bad), Err(Error::Format { .. })));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    std::fs::write(&bad, &magic).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&bad), Err(Error::Format { .. })));
    assert!(matches!(load_checkpoint::<f32>(&dir.path().join("nope")), Err(Error::Io { .. })));

    // params from a different config are rejected
    let other = Generator::<f32>::new(ModelConfig::micro(), 1).unwrap();
    let swapped = dir.path().join("swapped.ckpt");
    save_archive(&model.config.to_toml(), &other.params, &swapped).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&swapped), Err(Error::Format { .. })));
}
