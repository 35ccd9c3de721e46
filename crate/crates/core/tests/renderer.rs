use bevsplat_core::geometry::BevGridSpec;
use bevsplat_core::linalg::Sym2;
use bevsplat_core::maps::FeatureMap;
use bevsplat_core::renderer::{render_backward, render_forward, render_reference, BevOutput, RenderSettings, Splat2D};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid(size: usize) -> BevGridSpec {
    BevGridSpec::new(size, 1.0, 0.0, 0.0).unwrap()
}

fn splat(id: usize, mean2: [f64; 2], cov: Sym2, opacity: f64, feature: Vec<f64>, confidence: f64, sort_key: f64) -> Splat2D {
    Splat2D {
        mean2,
        cov2: cov,
        inv_cov2: cov.inverse().unwrap(),
        base_opacity: opacity,
        feature,
        confidence,
        sort_key,
        radius: 3.0 * cov.max_eigenvalue().sqrt(),
        id,
    }
}

fn random_splats(seed: u64, n: usize, size: usize, dim: usize) -> Vec<Splat2D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|id| {
            let a: f64 = rng.gen_range(0.4..6.0);
            let c: f64 = rng.gen_range(0.4..6.0);
            let b = rng.gen_range(-0.8..0.8) * (a * c).sqrt();
            let mean = [rng.gen_range(-2.0..size as f64 + 2.0), rng.gen_range(-2.0..size as f64 + 2.0)];
            let feature = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            splat(id, mean, Sym2::new(a, b, c), rng.gen_range(0.05..1.0), feature, rng.gen_range(0.0..1.0), rng.gen_range(-3.0..3.0))
        })
        .collect()
}

fn max_abs_diff(a: &BevOutput, b: &BevOutput) -> f64 {
    [(&a.f_bev, &b.f_bev), (&a.c_bev, &b.c_bev), (&a.final_t, &b.final_t)]
        .iter()
        .flat_map(|(x, y)| x.data.iter().zip(&y.data).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn empty_list_renders_zero_maps() {
    let g = grid(8);
    for out in [render_forward(&[], &g, 3, &RenderSettings::default()), render_reference(&[], &g, 3, 0.99)] {
        assert!(out.f_bev.data.iter().all(|v| *v == 0.0));
        assert!(out.c_bev.data.iter().all(|v| *v == 0.0));
        assert!(out.final_t.data.iter().all(|v| *v == 1.0));
    }
}

#[test]
fn single_splat_at_cell_centre() {
    let g = grid(9);
    let s = splat(0, [4.0, 4.0], Sym2::new(1.0, 0.0, 1.0), 0.5, vec![2.0, -4.0], 0.8, 0.0);
    for out in [render_forward(&[s.clone()], &g, 2, &RenderSettings::default()), render_reference(&[s.clone()], &g, 2, 0.99)] {
        assert!((out.f_bev.get(0, 4, 4) - 1.0).abs() < 1e-12);
        assert!((out.f_bev.get(1, 4, 4) + 2.0).abs() < 1e-12);
        assert!((out.c_bev.get(0, 4, 4) - 0.4).abs() < 1e-12);
        assert!((out.final_t.get(0, 4, 4) - 0.5).abs() < 1e-12);
    }
}

#[test]
fn two_coincident_splats_blend_front_to_back() {
    let g = grid(5);
    let cov = Sym2::new(1.0, 0.0, 1.0);
    let back = splat(0, [2.0, 2.0], cov, 0.8, vec![0.0, 1.0], 1.0, 1.0);
    let front = splat(1, [2.0, 2.0], cov, 0.5, vec![1.0, 0.0], 1.0, -1.0);
    let out = render_forward(&[back, front], &g, 2, &RenderSettings::default());
    assert!((out.f_bev.get(0, 2, 2) - 0.5).abs() < 1e-12);
    assert!((out.f_bev.get(1, 2, 2) - 0.4).abs() < 1e-12);
    assert!((out.final_t.get(0, 2, 2) - 0.1).abs() < 1e-12);
}

#[test]
fn tiled_matches_reference_on_seeded_scenes() {
    let g = grid(48);
    for seed in 0..20 {
        let splats = random_splats(seed, 100 + 20 * seed as usize, 48, 3);
        let fast = render_forward(&splats, &g, 3, &RenderSettings::exact());
        let slow = render_reference(&splats, &g, 3, 0.99);
        let err = max_abs_diff(&fast, &slow);
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn default_culling_error_is_bounded() {
    let g = grid(48);
    for seed in 0..5 {
        let splats = random_splats(seed, 200, 48, 2);
        let fast = render_forward(&splats, &g, 2, &RenderSettings::default());
        let slow = render_reference(&splats, &g, 2, 0.99);
        assert!(max_abs_diff(&fast, &slow) < 0.05);
    }
}

#[test]
fn normalization_holds_per_cell() {
    let g = grid(40);
    let mut splats = random_splats(7, 300, 40, 1);
    for s in &mut splats {
        s.feature = vec![1.0];
    }
    for settings in [RenderSettings::default(), RenderSettings::exact()] {
        let out = render_forward(&splats, &g, 1, &settings);
        for (f, t) in out.f_bev.data.iter().zip(&out.final_t.data) {
            assert!((f + t - 1.0).abs() < 1e-6);
            assert!((0.0..=1.0).contains(t));
        }
    }
    let out = render_reference(&splats, &g, 1, 0.99);
    for (f, t) in out.f_bev.data.iter().zip(&out.final_t.data) {
        assert!((f + t - 1.0).abs() < 1e-12);
    }
}

#[test]
fn opaque_front_splat_occludes() {
    let g = grid(16);
    let behind = splat(0, [8.0, 8.0], Sym2::new(4.0, 0.0, 4.0), 0.9, vec![1.0], 1.0, 2.0);
    let alone = render_reference(&[behind.clone()], &g, 1, 0.99);
    // Huge opacity saturates the clamp across the whole grid.
    let wall = splat(1, [8.0, 8.0], Sym2::new(400.0, 0.0, 400.0), 1e6, vec![0.0], 0.0, -5.0);
    let both = render_reference(&[behind, wall], &g, 1, 0.99);
    for (a, b) in alone.f_bev.data.iter().zip(&both.f_bev.data) {
        assert!(*b <= 0.01 * a + 1e-15);
    }
}

#[test]
fn thread_count_does_not_change_output() {
    let g = grid(64);
    let splats = random_splats(3, 800, 64, 4);
    let d_f = FeatureMap::filled(4, 64, 64, 0.3);
    let d_c = FeatureMap::filled(1, 64, 64, -0.2);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let out = render_forward(&splats, &g, 4, &RenderSettings::default());
            let grads = render_backward(&splats, &g, &RenderSettings::default(), &d_f, &d_c);
            (out, grads)
        })
    };
    let one = run(1);
    for threads in [2, 4, 8] {
        assert_eq!(run(threads), one);
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let g = grid(24);
    let splats = random_splats(11, 50, 24, 3);
    let grads = render_backward(&splats, &g, &RenderSettings::default(), &FeatureMap::zeros(3, 24, 24), &FeatureMap::zeros(1, 24, 24));
    assert!(grads.d_feature.iter().chain(&grads.d_confidence).chain(&grads.d_opacity).all(|v| *v == 0.0));
    assert!(grads.d_mean2.iter().all(|m| *m == [0.0, 0.0]));
    assert!(grads.d_inv_cov2.iter().all(|s| *s == Sym2::new(0.0, 0.0, 0.0)));
}

#[test]
fn single_splat_feature_gradient_is_alpha_weighted_sum() {
    let g = grid(12);
    let s = splat(0, [5.3, 6.1], Sym2::new(2.0, 0.4, 1.5), 0.7, vec![1.0, 2.0], 0.5, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d_f = FeatureMap::from_vec(2, 12, 12, (0..288).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let d_c = FeatureMap::zeros(1, 12, 12);
    let settings = RenderSettings::exact();
    let grads = render_backward(&[s.clone()], &g, &settings, &d_f, &d_c);
    let mut expected = [0.0; 2];
    for r in 0..12 {
        for c in 0..12 {
            let gk = (-0.5 * s.inv_cov2.quad(r as f64 - s.mean2[0], c as f64 - s.mean2[1])).exp();
            let alpha = (s.base_opacity * gk).min(0.99);
            for (ch, e) in expected.iter_mut().enumerate() {
                *e += d_f.get(ch, r, c) * alpha;
            }
        }
    }
    for ch in 0..2 {
        assert!((grads.feature(0)[ch] - expected[ch]).abs() < 1e-9);
    }
}

fn weighted_sum(out: &BevOutput, d_f: &FeatureMap, d_c: &FeatureMap) -> f64 {
    out.f_bev.data.iter().zip(&d_f.data).map(|(a, b)| a * b).sum::<f64>() + out.c_bev.data.iter().zip(&d_c.data).map(|(a, b)| a * b).sum::<f64>()
}

#[test]
fn backward_matches_finite_differences() {
    let size = 20;
    let g = grid(size);
    let settings = RenderSettings::exact();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    // Opacities kept below the clamp so every probe stays differentiable.
    let mut splats = random_splats(21, 12, size, 2);
    for s in &mut splats {
        s.base_opacity = rng.gen_range(0.1..0.8);
    }
    let d_f = FeatureMap::from_vec(2, size, size, (0..2 * size * size).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let d_c = FeatureMap::from_vec(1, size, size, (0..size * size).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let grads = render_backward(&splats, &g, &settings, &d_f, &d_c);
    let loss = |ss: &[Splat2D]| weighted_sum(&render_forward(ss, &g, 2, &settings), &d_f, &d_c);
    let h = 1e-5;
    let check = |i: usize, analytic: f64, edit: &dyn Fn(&mut Splat2D, f64)| {
        let (mut plus, mut minus) = (splats.clone(), splats.clone());
        edit(&mut plus[i], h);
        edit(&mut minus[i], -h);
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(err < 1e-4, "splat {i}: analytic {analytic} numeric {numeric}");
    };
    for i in 0..splats.len() {
        check(i, grads.d_opacity[i], &|s, e| s.base_opacity += e);
        check(i, grads.d_confidence[i], &|s, e| s.confidence += e);
        check(i, grads.feature(i)[1], &|s, e| s.feature[1] += e);
        check(i, grads.d_mean2[i][0], &|s, e| s.mean2[0] += e);
        check(i, grads.d_mean2[i][1], &|s, e| s.mean2[1] += e);
        check(i, grads.d_inv_cov2[i].a, &|s, e| s.inv_cov2.a += e);
        check(i, grads.d_inv_cov2[i].b, &|s, e| s.inv_cov2.b += e);
        check(i, grads.d_inv_cov2[i].c, &|s, e| s.inv_cov2.c += e);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shuffling_input_is_bitwise_invariant(seed in 0u64..1000, n in 1usize..120) {
        let g = grid(24);
        let mut splats = random_splats(seed, n, 24, 2);
        // Force key ties so the id tie-break is exercised.
        for s in splats.iter_mut().step_by(3) {
            s.sort_key = 0.0;
        }
        let base = render_forward(&splats, &g, 2, &RenderSettings::default());
        splats.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xabcd));
        prop_assert_eq!(render_forward(&splats, &g, 2, &RenderSettings::default()), base);
    }

    #[test]
    fn transmittance_stays_in_unit_interval(seed in 0u64..1000, n in 0usize..80) {
        let g = grid(16);
        let out = render_forward(&random_splats(seed, n, 16, 1), &g, 1, &RenderSettings::default());
        prop_assert!(out.final_t.data.iter().all(|t| (0.0..=1.0).contains(t)));
    }
}
