use flowlens::video_masks::*;
use flowlens::Error;
use flowlens_tensor::Tensor;
use proptest::prelude::*;

fn angle(cam: &CameraModel, i: usize, j: usize) -> f64 {
    let r = ((j as f64 - cam.center.0).powi(2) + (i as f64 - cam.center.1).powi(2)).sqrt();
    match cam.kind {
        CameraKind::PinholeFtan => (r / cam.focal).atan(),
        CameraKind::SphericalFtheta => r / cam.focal,
    }
}

fn oracle_count(cam: &CameraModel, rate: f64, dir: Direction, h: usize, w: usize) -> usize {
    let mut n = 0;
    for i in 0..h {
        for j in 0..w {
            let th = angle(cam, i, j);
            let on = rate > 0.0
                && match dir {
                    Direction::Outer => th > (1.0 - rate) * cam.theta_max,
                    Direction::Inner => th < rate * cam.theta_max,
                };
            n += on as usize;
        }
    }
    n
}

#[test]
fn zero_rate_gives_empty_mask() {
    for kind in [CameraKind::PinholeFtan, CameraKind::SphericalFtheta] {
        let cam = CameraModel::default_for(kind, 30, 50);
        for dir in [Direction::Outer, Direction::Inner] {
            assert_eq!(generate_fov_mask(&cam, 0.0, dir, (30, 50)).unwrap().count(), 0);
        }
    }
}

#[test]
fn pinhole_outer_ring_matches_angle_oracle() {
    let cam = CameraModel::default_for(CameraKind::PinholeFtan, 240, 432);
    let m = generate_fov_mask(&cam, 0.2, Direction::Outer, (240, 432)).unwrap();
    assert_eq!(m.count(), oracle_count(&cam, 0.2, Direction::Outer, 240, 432));
    assert_eq!(m.get(0, 0), 1);
    assert_eq!(m.get(120, 216), 0);
}

#[test]
fn spherical_inner_disk_is_centered() {
    let cam = CameraModel::default_for(CameraKind::SphericalFtheta, 336, 336);
    let m = generate_fov_mask(&cam, 0.1, Direction::Inner, (336, 336)).unwrap();
    assert_eq!(m.count(), oracle_count(&cam, 0.1, Direction::Inner, 336, 336));
    assert_eq!(m.get(168, 168), 1);
    for (i, j) in [(0, 0), (0, 335), (335, 0), (335, 335)] {
        assert_eq!(m.get(i, j), 0);
    }
}

#[test]
fn pinhole_at_right_angle_is_invalid_camera() {
    let cam = CameraModel { kind: CameraKind::PinholeFtan, focal: 10.0, center: (4.0, 4.0), theta_max: 1.6 };
    assert!(matches!(generate_fov_mask(&cam, 0.1, Direction::Outer, (8, 8)), Err(Error::InvalidCamera(_))));
}

fn small_video(h: usize, w: usize, t: usize, seed: u64) -> VideoSequence<f64> {
    let spec = SyntheticSceneSpec::random(seed, h, w, t, 2, 1.5);
    synth_video::<f64>(&spec).unwrap().0
}

#[test]
fn apply_mask_examples() {
    let v = small_video(24, 40, 3, 1);
    let same = apply_mask(&v, 0.3).unwrap();
    assert_eq!(same.frames, v.frames);

    let full = FovMask::from_grid(24, 40, Direction::Outer, 0.5, vec![1; 24 * 40]).unwrap();
    let zeroed = apply_mask(&v.clone().with_mask(full).unwrap(), 0.0).unwrap();
    assert!(zeroed.frames.data().iter().all(|&x| x == 0.0));

    let cam = CameraModel::default_for(CameraKind::PinholeFtan, 24, 40);
    let ring = generate_fov_mask(&cam, 0.2, Direction::Outer, (24, 40)).unwrap();
    let masked = apply_mask(&v.clone().with_mask(ring.clone()).unwrap(), 0.25).unwrap();
    for t in 0..3 {
        for c in 0..3 {
            for i in 0..24 {
                for j in 0..40 {
                    let got = masked.frames.at(&[t, c, i, j]);
                    let want = if ring.get(i, j) == 1 { 0.25 } else { v.frames.at(&[t, c, i, j]) };
                    assert_eq!(got, want);
                }
            }
        }
    }
}

#[test]
fn apply_mask_rejects_mismatched_mask() {
    let mut v = small_video(8, 8, 1, 2);
    v.mask = FovMask::empty(4, 4);
    assert!(matches!(apply_mask(&v, 0.0), Err(Error::Dimension(_))));
}

fn one_sprite(velocity: (f64, f64)) -> SyntheticSceneSpec {
    SyntheticSceneSpec {
        height: 32,
        width: 32,
        length: 3,
        background_seed: 3,
        background_velocity: (0.0, 0.0),
        sprites: vec![Sprite {
            shape: SpriteShape::Rect { half_w: 5.0, half_h: 4.0 },
            color: [0.4, 0.5, 0.6],
            gradient: [0.01, -0.01],
            start: (12.0, 15.0),
            velocity,
        }],
    }
}

#[test]
fn rigid_sprite_flow_is_its_velocity() {
    let (_, flows) = synth_video::<f64>(&one_sprite((2.0, 0.0))).unwrap();
    let f = &flows.forward[0];
    for i in 12..18 {
        for j in 9..15 {
            assert_eq!((f.at(&[0, i, j]), f.at(&[1, i, j])), (2.0, 0.0));
        }
    }
}

#[test]
fn static_scene_has_zero_flow() {
    let (_, flows) = synth_video::<f64>(&one_sprite((0.0, 0.0))).unwrap();
    for f in flows.forward.iter().chain(&flows.backward) {
        assert!(f.data().iter().all(|&x| x == 0.0));
    }
}

/// Bilinear sample of channel plane `c` of frame `t` at `(x, y)`.
fn sample(frames: &Tensor<f64>, t: usize, c: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (ax, ay) = (x - x0, y - y0);
    let at = |i: f64, j: f64| frames.at(&[t, c, i as usize, j as usize]);
    let x1 = if ax > 0.0 { x0 + 1.0 } else { x0 };
    let y1 = if ay > 0.0 { y0 + 1.0 } else { y0 };
    (1.0 - ay) * ((1.0 - ax) * at(y0, x0) + ax * at(y0, x1)) + ay * ((1.0 - ax) * at(y1, x0) + ax * at(y1, x1))
}

fn warp_residual(spec: &SyntheticSceneSpec) -> (f64, usize) {
    let (v, flows) = synth_video::<f64>(spec).unwrap();
    let (h, w) = (spec.height, spec.width);
    let (mut worst, mut checked) = (0.0f64, 0);
    for t in 0..spec.length - 1 {
        let (f, valid) = (&flows.forward[t], &flows.forward_valid[t]);
        for i in 0..h {
            for j in 0..w {
                if valid.at(&[i, j]) == 0.0 {
                    continue;
                }
                let (x, y) = (j as f64 + f.at(&[0, i, j]), i as f64 + f.at(&[1, i, j]));
                for c in 0..3 {
                    worst = worst.max((sample(&v.frames, t + 1, c, x, y) - v.frames.at(&[t, c, i, j])).abs());
                }
                checked += 1;
            }
        }
    }
    (worst, checked)
}

#[test]
fn two_sprite_warp_reconstructs_previous_frame() {
    let mut spec = one_sprite((1.5, 0.5));
    spec.length = 4;
    spec.sprites.push(Sprite {
        shape: SpriteShape::Disk { radius: 5.0 },
        color: [0.3, 0.6, 0.4],
        gradient: [-0.02, 0.015],
        start: (20.0, 10.0),
        velocity: (-1.25, 0.75),
    });
    let (worst, checked) = warp_residual(&spec);
    assert!(checked > 32 * 32);
    assert!(worst < 1e-6, "max warp residual {worst}");
}

#[test]
fn empty_or_zero_length_spec_is_invalid() {
    let mut spec = one_sprite((1.0, 0.0));
    spec.length = 0;
    assert!(matches!(synth_video::<f64>(&spec), Err(Error::InvalidSpec(_))));
    let mut spec = one_sprite((1.0, 0.0));
    spec.sprites.clear();
    assert!(matches!(synth_video::<f64>(&spec), Err(Error::InvalidSpec(_))));
}

#[test]
fn video_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small_video(20, 28, 12, 9);
    let cam = CameraModel::default_for(CameraKind::SphericalFtheta, 20, 28);
    v = v.with_mask(generate_fov_mask(&cam, 0.1, Direction::Outer, (20, 28)).unwrap()).unwrap();
    v.camera = cam;
    v.frames = quantize_frames(&v.frames);
    save_video(&v, dir.path()).unwrap();
    let back = load_video::<f64>(dir.path()).unwrap();
    assert_eq!(back.frames.max_abs_diff(&v.frames), 0.0);
    assert_eq!(back.mask, v.mask);
    assert_eq!(back.camera, v.camera);
    assert_eq!(back.id, v.id);
}

#[test]
fn missing_video_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_video::<f32>(&dir.path().join("nope")), Err(Error::Io { .. })));
}

#[test]
fn mask_file_round_trip_uses_0_and_255() {
    let dir = tempfile::tempdir().unwrap();
    let cam = CameraModel::default_for(CameraKind::PinholeFtan, 16, 24);
    let m = generate_fov_mask(&cam, 0.2, Direction::Outer, (16, 24)).unwrap();
    let p = dir.path().join("m.png");
    save_mask(&m, &p).unwrap();
    let raw = image::open(&p).unwrap().to_luma8();
    assert!(raw.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
    assert_eq!(load_mask(&p, Direction::Outer, 0.2).unwrap(), m);
}

fn camera_strategy() -> impl Strategy<Value = (CameraModel, usize, usize)> {
    (any::<bool>(), 4usize..40, 4usize..40, 0.2f64..1.4).prop_map(|(fish, h, w, theta)| {
        let kind = if fish { CameraKind::SphericalFtheta } else { CameraKind::PinholeFtan };
        (CameraModel::fitted(kind, h, w, theta).unwrap(), h, w)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masks_nest_with_rate((cam, h, w) in camera_strategy(), a in 0.0f64..0.99, b in 0.0f64..0.99, inner in any::<bool>()) {
        let dir = if inner { Direction::Inner } else { Direction::Outer };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let m1 = generate_fov_mask(&cam, lo, dir, (h, w)).unwrap();
        let m2 = generate_fov_mask(&cam, hi, dir, (h, w)).unwrap();
        prop_assert!(m1.is_subset_of(&m2));
    }

    #[test]
    fn outer_and_inner_are_disjoint_below_half((cam, h, w) in camera_strategy(), r in 0.0f64..0.5) {
        let o = generate_fov_mask(&cam, r, Direction::Outer, (h, w)).unwrap();
        let i = generate_fov_mask(&cam, r, Direction::Inner, (h, w)).unwrap();
        prop_assert!(o.grid().iter().zip(i.grid()).all(|(a, b)| a * b == 0));
    }

    #[test]
    fn mask_obeys_angular_band((cam, h, w) in camera_strategy(), r in 0.01f64..0.99) {
        let m = generate_fov_mask(&cam, r, Direction::Outer, (h, w)).unwrap();
        for i in 0..h {
            for j in 0..w {
                prop_assert_eq!(m.get(i, j) == 1, angle(&cam, i, j) > (1.0 - r) * cam.theta_max);
            }
        }
    }

    #[test]
    fn synthetic_scenes_are_deterministic_and_flow_consistent(seed in 0u64..1000) {
        let spec = SyntheticSceneSpec::random(seed, 20, 24, 3, 3, 2.0);
        let (a, fa) = synth_video::<f64>(&spec).unwrap();
        let (b, fb) = synth_video::<f64>(&spec).unwrap();
        prop_assert_eq!(a.frames.data(), b.frames.data());
        prop_assert_eq!(fa, fb);
        let (worst, _) = warp_residual(&spec);
        prop_assert!(worst < 1e-6);
    }
}

#[test]
fn panned_background_flow_is_the_pan() {
    let mut spec = one_sprite((0.0, 0.0));
    spec.background_velocity = (1.0, -1.0);
    let (_, flows) = synth_video::<f64>(&spec).unwrap();
    let f = &flows.forward[0];
    assert_eq!((f.at(&[0, 2, 30]), f.at(&[1, 2, 30])), (1.0, -1.0));
    assert_eq!((f.at(&[0, 15, 12]), f.at(&[1, 15, 12])), (0.0, 0.0));
    let (worst, _) = warp_residual(&spec);
    assert!(worst < 1e-6);
}
