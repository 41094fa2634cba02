mod common;

use common::{brute_force_render, max_gradient_error, random_scene, random_upstream};
use ligsm_core::splatmap::{render, render_backward, RasterConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for bg in [[0.0; 3], [0.3, 0.6, 0.9]] {
        let cfg = RasterConfig { background: bg, ..RasterConfig::default() };
        for _ in 0..8 {
            let scene = random_scene(&mut rng, 10, 16);
            let up = random_upstream(&mut rng, 256);
            let g = render_backward(&scene.gaussians, &scene.pose, &scene.k, &cfg, &up);
            assert!(g.iter().any(|x| x.position.norm() > 1e-3 && x.radius.abs() > 1e-3));
            let err = max_gradient_error(&scene, &cfg, &up, &g);
            assert!(err < 1e-4, "relative error {err}");
        }
    }
}

#[test]
fn tiled_render_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cfg = RasterConfig { background: [0.1, 0.2, 0.3], ..RasterConfig::default() };
    for n in [1, 7, 25, 50] {
        let scene = random_scene(&mut rng, n, 32);
        let fast = render(&scene.gaussians, &scene.pose, &scene.k, &cfg);
        let slow = brute_force_render(&scene.gaussians, &scene.pose, &scene.k, cfg.background);
        for i in 0..32 * 32 {
            for c in 0..3 {
                assert!((fast.color.data[i][c] - slow.color[i][c]).abs() < 1e-5);
            }
            assert!((fast.depth[i] - slow.depth[i]).abs() < 1e-5);
            assert!((fast.silhouette[i] - slow.silhouette[i]).abs() < 1e-5);
        }
    }
}

#[test]
fn multi_tile_image_matches_brute_force() {
    // 40 px is not a multiple of the tile size.
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let scene = random_scene(&mut rng, 40, 40);
    let fast = render(&scene.gaussians, &scene.pose, &scene.k, &RasterConfig::default());
    let slow = brute_force_render(&scene.gaussians, &scene.pose, &scene.k, [0.0; 3]);
    for i in 0..40 * 40 {
        assert!((fast.silhouette[i] - slow.silhouette[i]).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn silhouette_stays_in_unit_interval(seed in 0u64..10_000, n in 0usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = random_scene(&mut rng, n, 24);
        let out = render(&scene.gaussians, &scene.pose, &scene.k, &RasterConfig::default());
        for (i, s) in out.silhouette.iter().enumerate() {
            prop_assert!((0.0..=1.0).contains(s));
            prop_assert!(out.depth[i] >= 0.0);
            if *s < 1e-6 {
                prop_assert_eq!(out.depth[i], 0.0);
                prop_assert_eq!(out.color.data[i], [0.0; 3]);
            }
        }
    }

    #[test]
    fn storage_order_does_not_change_pixels(seed in 0u64..10_000, rot in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = random_scene(&mut rng, 20, 24);
        let mut shuffled = scene.gaussians.clone();
        shuffled.rotate_left(rot % 20);
        shuffled.reverse();
        let cfg = RasterConfig::default();
        let a = render(&scene.gaussians, &scene.pose, &scene.k, &cfg);
        let b = render(&shuffled, &scene.pose, &scene.k, &cfg);
        for i in 0..a.depth.len() {
            for c in 0..3 {
                prop_assert!((a.color.data[i][c] - b.color.data[i][c]).abs() <= 1e-12);
            }
            prop_assert!((a.depth[i] - b.depth[i]).abs() <= 1e-12);
        }
    }
}
