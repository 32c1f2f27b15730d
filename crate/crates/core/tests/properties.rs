//! Property tests for the invariants each module promises.

mod common;

use std::collections::{HashMap, HashSet};

use entropy_splat::gaussian::GaussianPrimitive;
use entropy_splat::geometry::{backproject, build_anchor_cloud, project};
use entropy_splat::metrics::{psnr, ssim, RgbFrame, PSNR_CAP_DB};
use entropy_splat::neighborhood::SpatialIndex;
use entropy_splat::pipeline::{neighborhoods, run_pipeline, sample_bundle, HeadPreset, PipelineConfig};
use entropy_splat::ply::export_ply;
use entropy_splat::predictor::{
    activate_attributes, head_forward, init_weights, predict_gaussians, ActivationBounds, HeadConfig, HeadVariant, NeighborhoodFeatures,
    RawAttributes, RAW_DIM,
};
use entropy_splat::renderer::{composite_pixel, render, render_backward, render_with_cache, Contribution, RenderConfig};
use entropy_splat::sampling::{bernoulli_sample, local_entropy, probability_map, sample_view, SamplerConfig};
use entropy_splat::scene::{generate_synthetic_scene, grayscale, load_scene_bundle, save_scene_bundle, CameraPose, SceneBundle, SyntheticSpec};
use entropy_splat::trainer::{mse_loss, scene_loss_and_grad, TrainTarget};
use nalgebra::{Matrix4, Rotation3, Translation3, Vector3};
use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, rng_seed: RngSeed::Fixed(0x5eed), failure_persistence: None, ..ProptestConfig::default() }
}

fn small_scene(seed: u64) -> SceneBundle {
    generate_synthetic_scene(&SyntheticSpec::textured(40, 30, 2, (seed % 5) as u32), seed).unwrap()
}

fn random_rigid(rng: &mut ChaCha8Rng) -> Matrix4<f64> {
    let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let rot = Rotation3::new(axis * rng.gen_range(0.1..3.0));
    let t = Translation3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
    t.to_homogeneous() * rot.to_homogeneous()
}

fn frame(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RgbFrame {
    RgbFrame { width: w, height: h, data: (0..w * h * 3).map(|_| rng.gen()).collect() }
}

// Scene model.

proptest! {
    #![proptest_config(config(256))]

    #[test]
    fn grayscale_is_bounded_and_monotone(r in 0.0f32..=1.0, g in 0.0f32..=1.0, b in 0.0f32..=1.0, d in 0.0f32..=1.0, ch in 0usize..3) {
        let base = [r, g, b];
        let y = grayscale(&base)[0];
        prop_assert!((0.0..=1.0).contains(&y));
        let mut brighter = base;
        brighter[ch] = (brighter[ch] + d).min(1.0);
        prop_assert!(grayscale(&brighter)[0] >= y);
    }
}

proptest! {
    #![proptest_config(config(6))]

    #[test]
    fn bundle_round_trip_and_determinism(seed in 0u64..1000) {
        let bundle = small_scene(seed);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        save_scene_bundle(&bundle, a.path()).unwrap();
        save_scene_bundle(&small_scene(seed), b.path()).unwrap();
        let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        for name in &names {
            prop_assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
        }
        let back = load_scene_bundle(a.path()).unwrap();
        prop_assert_eq!(back.views.len(), bundle.views.len());
        for (x, y) in back.views.iter().zip(&bundle.views) {
            prop_assert_eq!(&x.image.rgb, &y.image.rgb);
            prop_assert_eq!(&x.depth, &y.depth);
            prop_assert_eq!(&x.features, &y.features);
            let err = (x.pose.matrix() - y.pose.matrix()).amax();
            prop_assert!(err <= 1e-12, "pose error {}", err);
        }
    }

    #[test]
    fn synthetic_depth_round_trips(seed in 0u64..1000) {
        let bundle = small_scene(seed);
        for view in &bundle.views {
            for v in 0..view.height() {
                for u in 0..view.width() {
                    let Some(d) = view.depth.at(u, v) else { continue };
                    let p = backproject(u as f64, v as f64, d, &view.intrinsics, &view.pose).unwrap();
                    let (pu, pv, _) = project(&p, &view.intrinsics, &view.pose).unwrap();
                    prop_assert!((pu - u as f64).abs() <= 1e-6 && (pv - v as f64).abs() <= 1e-6);
                }
            }
        }
    }
}

// Sampling.

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn entropy_is_bounded(seed in any::<u64>(), window in prop::sample::select(vec![3usize, 5, 7]), levels in prop::sample::select(vec![2usize, 16, 256])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gray = common::patchy_gray(&mut rng, 20, 16);
        let e = local_entropy(&gray, 20, 16, window, levels).unwrap();
        let max = (levels as f64).log2();
        prop_assert!(e.values.iter().all(|&x| (0.0..=max).contains(&x)));
    }

    #[test]
    fn constant_window_has_zero_entropy(seed in any::<u64>(), value in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gray = common::random_gray(&mut rng, 16, 16);
        let (x0, y0) = (rng.gen_range(0..10), rng.gen_range(0..10));
        for y in y0..y0 + 7 {
            for x in x0..x0 + 7 {
                gray[y * 16 + x] = value;
            }
        }
        let e = local_entropy(&gray, 16, 16, 7, 256).unwrap();
        prop_assert_eq!(e.values[(y0 + 3) * 16 + x0 + 3], 0.0);
    }

    #[test]
    fn sample_sets_nest_in_tau(seed in any::<u64>(), t1 in 0.0f64..2.0, t2 in 0.0f64..2.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gray = common::patchy_gray(&mut rng, 24, 20);
        let e = local_entropy(&gray, 24, 20, 5, 64).unwrap();
        let valid: Vec<bool> = (0..24 * 20).map(|_| rng.gen_bool(0.9)).collect();
        let small = bernoulli_sample(&probability_map(&e, lo).unwrap(), &valid, 3, seed).unwrap();
        let large: HashSet<_> = bernoulli_sample(&probability_map(&e, hi).unwrap(), &valid, 3, seed).unwrap().pixels.into_iter().collect();
        prop_assert!(small.pixels.iter().all(|p| large.contains(p)));
        let prob_lo = probability_map(&e, lo).unwrap();
        let prob_hi = probability_map(&e, hi).unwrap();
        prop_assert!(prob_lo.values.iter().zip(&prob_hi.values).all(|(a, b)| a <= b));
    }

    #[test]
    fn samples_are_unique_valid_and_in_bounds(seed in any::<u64>(), tau in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gray = common::random_gray(&mut rng, 24, 20);
        let valid: Vec<bool> = (0..24 * 20).map(|_| rng.gen_bool(0.7)).collect();
        let e = local_entropy(&gray, 24, 20, 3, 16).unwrap();
        let set = bernoulli_sample(&probability_map(&e, tau).unwrap(), &valid, 0, seed).unwrap();
        let unique: HashSet<_> = set.pixels.iter().collect();
        prop_assert_eq!(unique.len(), set.len());
        prop_assert!(set.pixels.iter().all(|&(u, v)| u < 24 && v < 20 && valid[v as usize * 24 + u as usize]));
    }
}

proptest! {
    #![proptest_config(config(6))]

    #[test]
    fn sampling_is_deterministic(seed in 0u64..1000, tau in 0.1f64..1.0) {
        let bundle = small_scene(seed);
        let cfg = SamplerConfig { tau, seed, ..SamplerConfig::default() };
        for view in &bundle.views {
            prop_assert_eq!(sample_view(view, &cfg).unwrap(), sample_view(view, &cfg).unwrap());
        }
    }

    // Geometry.

    #[test]
    fn anchors_match_samples_and_face_the_camera(seed in 0u64..1000, tau in 0.2f64..1.0) {
        let bundle = small_scene(seed);
        let sampled = sample_bundle(&bundle, &SamplerConfig { tau, seed, ..SamplerConfig::default() }, None, 0.02).unwrap();
        let cloud = build_anchor_cloud(&sampled.sets, &bundle).unwrap();
        prop_assert_eq!(cloud.len(), sampled.sets.iter().map(|s| s.len()).sum::<usize>());
        for a in &cloud.anchors {
            prop_assert!((a.normal.norm() - 1.0).abs() <= 1e-6);
            prop_assert!((a.ray.norm() - 1.0).abs() <= 1e-6);
            prop_assert!(a.normal.dot(&a.ray) <= 0.0);
            let expected: Vec<f64> = a.position.iter().chain(a.normal.iter()).chain(a.ray.iter()).copied().collect();
            prop_assert_eq!(a.geo.to_vec(), expected);
        }
    }

    #[test]
    fn anchors_follow_rigid_reexpression(seed in 0u64..1000) {
        let bundle = small_scene(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_rigid(&mut rng);
        let mut moved = bundle.clone();
        for v in &mut moved.views {
            v.pose = v.pose.reexpressed(&t).unwrap();
        }
        let sampled = sample_bundle(&bundle, &SamplerConfig { tau: 0.5, seed, ..SamplerConfig::default() }, None, 0.02).unwrap();
        let a = build_anchor_cloud(&sampled.sets, &bundle).unwrap();
        let b = build_anchor_cloud(&sampled.sets, &moved).unwrap();
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.anchors.iter().zip(&b.anchors) {
            let expected = t.transform_point(&x.position.into()).coords;
            prop_assert!((expected - y.position).amax() <= 1e-9);
        }
    }
}

// Neighborhoods.

proptest! {
    #![proptest_config(config(48))]

    #[test]
    fn knn_geometry_survives_relabeling(seed in any::<u64>(), n in 2usize..400, k in 1usize..25) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<Vector3<f64>> = (0..n).map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let relabeled: Vec<Vector3<f64>> = perm.iter().map(|&i| points[i]).collect();
        let a = SpatialIndex::build(&points).unwrap();
        let b = SpatialIndex::build(&relabeled).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            let x = a.knn(old, k);
            let y = b.knn(new, k);
            prop_assert_eq!(x.len(), k.min(n - 1));
            prop_assert_eq!(&x.dist2, &y.dist2);
            let px: Vec<_> = x.indices.iter().map(|&i| points[i]).collect();
            let py: Vec<_> = y.indices.iter().map(|&i| relabeled[i]).collect();
            prop_assert_eq!(px, py);
            prop_assert!(x.dist2.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(!x.indices.contains(&old));
        }
    }

    #[test]
    fn knn_sets_are_scale_invariant(seed in any::<u64>(), n in 2usize..400, k in 1usize..25, e in -4i32..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = common::random_points(&mut rng, n);
        // Powers of two scale exactly, so ties stay ties.
        let lambda = 2f64.powi(e);
        let scaled: Vec<_> = points.iter().map(|p| p * lambda).collect();
        let a = SpatialIndex::build(&points).unwrap();
        let b = SpatialIndex::build(&scaled).unwrap();
        for i in 0..n {
            prop_assert_eq!(a.knn(i, k).indices, b.knn(i, k).indices);
        }
    }
}

// Predictor.

fn random_features(rng: &mut ChaCha8Rng, width: usize, k: usize) -> NeighborhoodFeatures {
    let mut v = |n: usize| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
    NeighborhoodFeatures {
        center: v(width),
        neighbors: (0..k).map(|_| v(width)).collect(),
        offsets: (0..k).map(|_| Vector3::from_iterator(v(3))).collect(),
    }
}

proptest! {
    #![proptest_config(config(32))]

    #[test]
    fn heads_ignore_neighbor_order(seed in any::<u64>(), k in 1usize..12, v in 0usize..4) {
        let variant = HeadVariant::ALL[v];
        let config = HeadConfig::compact(variant, 27);
        let weights = init_weights(&config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = random_features(&mut rng, config.width(), k);
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut rng);
        let permuted = NeighborhoodFeatures {
            center: feats.center.clone(),
            neighbors: order.iter().map(|&i| feats.neighbors[i].clone()).collect(),
            offsets: order.iter().map(|&i| feats.offsets[i]).collect(),
        };
        let a = head_forward(&feats, &config, &weights, true).unwrap();
        let b = head_forward(&permuted, &config, &weights, false).unwrap();
        prop_assert_eq!(&a.output, &b.output);
        prop_assert_eq!(a.output.len(), config.agg_dim());
        if let Some(layers) = a.cache.as_ref().and_then(|c| c.attention_weights()) {
            for layer in layers {
                for row in layer {
                    prop_assert_eq!(row.len(), k + 1);
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn activations_stay_in_range(raw in prop::collection::vec(-1e300f64..1e300, RAW_DIM), mild in prop::collection::vec(-40.0f64..40.0, RAW_DIM), pick in any::<bool>()) {
        let values = if pick { raw } else { mild };
        let raw = RawAttributes(values.try_into().unwrap());
        let bounds = ActivationBounds { s_min: 1e-4, s_max: 0.5 };
        let g = activate_attributes(&raw, Vector3::zeros(), &bounds);
        prop_assert!(g.opacity > 0.0 && g.opacity < 1.0);
        prop_assert!(g.scale.iter().all(|s| (bounds.s_min..=bounds.s_max).contains(s)));
        let n = g.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((n - 1.0).abs() <= 1e-6);
    }
}

proptest! {
    #![proptest_config(config(4))]

    #[test]
    fn predictions_are_local(seed in 0u64..1000) {
        let bundle = small_scene(seed);
        let config = HeadConfig::compact(HeadVariant::GeoAttention, 27);
        let weights = init_weights(&config, seed).unwrap();
        let predict = |tau: f64| {
            let sampled = sample_bundle(&bundle, &SamplerConfig { tau, seed, ..SamplerConfig::default() }, None, 0.02).unwrap();
            let cloud = build_anchor_cloud(&sampled.sets, &bundle).unwrap();
            let sets = neighborhoods(&cloud, 6).unwrap();
            // The full cloud fixes the bounds so that only the neighborhoods vary.
            let bounds = ActivationBounds { s_min: 1e-4, s_max: 0.3 };
            let prims = predict_gaussians(&cloud, &sets, &config, &weights, &bounds).unwrap();
            let keys: Vec<(u32, (u32, u32))> = cloud.anchors.iter().map(|a| (a.source_view, a.pixel)).collect();
            let neighbor_keys: Vec<Vec<(u32, (u32, u32))>> = sets.iter().map(|s| s.indices.iter().map(|&j| keys[j]).collect()).collect();
            (keys, neighbor_keys, prims)
        };
        let (big_keys, big_neighbors, big_prims) = predict(1.0);
        let (small_keys, small_neighbors, small_prims) = predict(0.5);
        let lookup: HashMap<_, _> = big_keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let mut compared = 0;
        for (i, key) in small_keys.iter().enumerate() {
            let j = lookup[key];
            let mut a = small_neighbors[i].clone();
            let mut b = big_neighbors[j].clone();
            a.sort();
            b.sort();
            if a == b {
                prop_assert_eq!(&small_prims[i], &big_prims[j]);
                compared += 1;
            }
        }
        prop_assert!(compared > 0);
    }
}

// Renderer.

proptest! {
    #![proptest_config(config(256))]

    #[test]
    fn compositing_conserves_and_occludes(weights in prop::collection::vec(0.0f64..0.99, 1..8), idx in 0usize..8, bump in 0.0f64..0.5, later in 0usize..8) {
        let n = weights.len();
        let contributions = |w: &[f64], onehot: usize| -> Vec<Contribution> {
            w.iter()
                .enumerate()
                .map(|(i, &a)| Contribution { weight: a, color: if i == onehot { [1.0, 0.0, 0.0] } else { [0.0; 3] }, depth: i as f64 })
                .collect()
        };
        let px = composite_pixel(&contributions(&weights, usize::MAX), [0.2, 0.4, 0.6]);
        prop_assert!((px.alpha + px.transmittance - 1.0).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&px.alpha));
        for ch in 0..3 {
            prop_assert!((px.color[ch] - px.transmittance * [0.2, 0.4, 0.6][ch]).abs() <= 1e-12);
        }
        let (front, back) = (idx % n, later % n);
        if back > front {
            let mut raised = weights.clone();
            raised[front] = (raised[front] + bump).min(0.99);
            let before = composite_pixel(&contributions(&weights, back), [0.0; 3]).color[0];
            let after = composite_pixel(&contributions(&raised, back), [0.0; 3]).color[0];
            prop_assert!(after <= before);
        }
    }
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn render_is_deterministic_and_culled_gradients_vanish(seed in any::<u64>(), n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prims: Vec<GaussianPrimitive> = (0..n).map(|_| common::random_primitive(&mut rng)).collect();
        // Behind the camera and far off to the side.
        prims.push(GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, -2.0), 0.5, 0.9, [0.5; 3]));
        prims.push(GaussianPrimitive::isotropic(Vector3::new(50.0, 0.0, 2.0), 0.1, 0.9, [0.5; 3]));
        let intr = entropy_splat::scene::CameraIntrinsics::new(30.0, 30.0, 15.5, 15.5, 32, 32).unwrap();
        let pose = CameraPose::identity();
        let cfg = RenderConfig::default();
        let a = render_with_cache(&prims, &intr, &pose, &cfg);
        let b = render_with_cache(&prims, &intr, &pose, &cfg);
        prop_assert_eq!(&a.color, &b.color);
        prop_assert_eq!(&a.depth, &b.depth);
        let upstream: Vec<f64> = (0..a.color.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grads = render_backward(&a, &prims, &intr, &pose, &cfg, &upstream).unwrap();
        prop_assert!(grads[n].is_zero());
        prop_assert!(grads[n + 1].is_zero());

        let target = TrainTarget { image: frame(&mut rng, 32, 32), intrinsics: intr, pose };
        let (_, g) = scene_loss_and_grad(&prims, std::slice::from_ref(&target), &cfg).unwrap();
        prop_assert!(g[n].is_zero() && g[n + 1].is_zero());
    }
}

// Trainer and metrics.

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn loss_and_metrics_behave(seed in any::<u64>(), w in 11usize..24, h in 11usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = frame(&mut rng, w, h);
        let b = frame(&mut rng, w, h);
        let (l, _) = mse_loss(&a, &b).unwrap();
        prop_assert!(l > 0.0);
        prop_assert_eq!(mse_loss(&a, &a).unwrap().0, 0.0);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
    }
}

// Pipeline.

proptest! {
    #![proptest_config(config(4))]

    #[test]
    fn pipeline_is_deterministic(seed in 0u64..1000, tau in 0.2f64..0.8) {
        let bundle = small_scene(seed);
        let mut cfg = PipelineConfig::default().with_head_preset(HeadVariant::Mlp, HeadPreset::Compact);
        cfg.sampler.tau = tau;
        cfg.sampler.seed = seed;
        let out = run_pipeline(&bundle, &cfg).unwrap();
        prop_assert_eq!(out.gaussians.len(), out.cloud.len());
        prop_assert_eq!(out.timing.gaussian_count, out.timing.anchor_count);
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ply"), dir.path().join("b.ply"));
        export_ply(&out.gaussians, &p1).unwrap();
        export_ply(&run_pipeline(&bundle, &cfg).unwrap().gaussians, &p2).unwrap();
        prop_assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn config_round_trips(seed in 0..=i64::MAX as u64, k in 1usize..40, budget in prop::option::of(1usize..100_000), tau in 0.0f64..4.0, v in 0usize..4) {
        let mut cfg = PipelineConfig::default().with_head_preset(HeadVariant::ALL[v], HeadPreset::Compact);
        cfg.k = k;
        cfg.budget = budget;
        cfg.sampler.tau = tau;
        cfg.sampler.seed = seed;
        cfg.init_seed = seed / 3;
        prop_assert_eq!(PipelineConfig::from_toml(&cfg.to_toml().unwrap(), "test").unwrap(), cfg.clone());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.toml");
        cfg.save(&path).unwrap();
        prop_assert_eq!(PipelineConfig::load(&path).unwrap(), cfg);
    }
}

#[test]
fn render_reference_agrees_on_a_fixed_scene() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let prims: Vec<GaussianPrimitive> = (0..40).map(|_| common::random_primitive(&mut rng)).collect();
    let intr = entropy_splat::scene::CameraIntrinsics::new(30.0, 30.0, 15.5, 15.5, 32, 32).unwrap();
    let got = render(&prims, &intr, &CameraPose::identity(), &RenderConfig::default());
    let want = common::render_oracle(&prims, &intr, &CameraPose::identity(), &common::OracleConfig::default());
    let err = got.color.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err <= 1e-10, "max error {err}");
}
