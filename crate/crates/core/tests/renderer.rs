mod common;

use cosavatar::geometry::normalize;
use cosavatar::image::{Image, Mask};
use cosavatar::renderer::{composite, render_frame, sample_along_rays, volume_render, RayBatch};
use cosavatar::Error;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth density and two-channel feature along `t ∈ [0, 1]`.
struct Profile {
    bumps: Vec<(f64, f64, f64)>,
    base: f64,
    phase: [f64; 2],
    freq: [f64; 2],
}

impl Profile {
    fn random(rng: &mut impl Rng) -> Self {
        let bumps = (0..rng.random_range(1..4))
            .map(|_| (rng.random_range(0.5..8.0), rng.random_range(0.1..0.9), rng.random_range(0.05..0.3)))
            .collect();
        Self {
            bumps,
            base: rng.random_range(0.0..0.5),
            phase: [rng.random_range(0.0..6.3), rng.random_range(0.0..6.3)],
            freq: [rng.random_range(0.5..4.0), rng.random_range(0.5..4.0)],
        }
    }

    fn sigma(&self, t: f64) -> f64 {
        self.base + self.bumps.iter().map(|(a, m, s)| a * (-((t - m) / s).powi(2)).exp()).sum::<f64>()
    }

    fn feature(&self, t: f64) -> [f64; 2] {
        [(self.freq[0] * t + self.phase[0]).sin(), (self.freq[1] * t + self.phase[1]).cos()]
    }

    /// Trapezoid integration of `∫ T(t) σ(t) c(t) dt` on a dense grid.
    fn dense(&self, n: usize) -> ([f64; 2], f64) {
        let h = 1.0 / n as f64;
        let mut optical = 0.0;
        let mut prev_s = self.sigma(0.0);
        let mut acc = [0.0; 2];
        let mut opacity = 0.0;
        let integrand = |s: f64, opt: f64, c: [f64; 2]| {
            let w = (-opt).exp() * s;
            [w * c[0], w * c[1], w]
        };
        let mut prev = integrand(prev_s, 0.0, self.feature(0.0));
        for i in 1..=n {
            let t = i as f64 * h;
            let s = self.sigma(t);
            optical += 0.5 * (prev_s + s) * h;
            let cur = integrand(s, optical, self.feature(t));
            acc[0] += 0.5 * (prev[0] + cur[0]) * h;
            acc[1] += 0.5 * (prev[1] + cur[1]) * h;
            opacity += 0.5 * (prev[2] + cur[2]) * h;
            prev = cur;
            prev_s = s;
        }
        (acc, opacity)
    }

    fn quadrature(&self, n: usize) -> ([f64; 2], f64) {
        let h = 1.0 / n as f64;
        let mut sigma = vec![0.0; n];
        let mut feats = Array2::zeros((n, 2));
        for i in 0..n {
            let t = (i as f64 + 0.5) * h;
            sigma[i] = self.sigma(t);
            let c = self.feature(t);
            feats[[i, 0]] = c[0];
            feats[[i, 1]] = c[1];
        }
        let vs = volume_render(&sigma, feats.view(), &vec![h; n]).unwrap();
        ([vs.feature[0], vs.feature[1]], vs.opacity)
    }
}

#[test]
fn quadrature_matches_dense_integration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let p = Profile::random(&mut rng);
        let (dense, dense_a) = p.dense(100_000);
        let (q, qa) = p.quadrature(1024);
        worst = worst.max((dense[0] - q[0]).abs()).max((dense[1] - q[1]).abs()).max((dense_a - qa).abs());
    }
    assert!(worst < 1e-3, "worst deviation {worst}");
}

#[test]
fn two_sample_worked_case() {
    let feats = Array2::from_shape_vec((2, 1), vec![1.0, 1.0]).unwrap();
    let vs = volume_render(&[1.0, 1.0], feats.view(), &[1.0, 1.0]).unwrap();
    assert!((vs.weights[0] - 0.632121).abs() < 1e-6);
    assert!((vs.weights[1] - 0.232544).abs() < 1e-6);
    assert!((vs.opacity - (1.0 - (-2.0f64).exp())).abs() < 1e-15);
}

#[test]
fn rejects_bad_inputs() {
    let f = Array2::zeros((2, 1));
    assert!(matches!(volume_render(&[1.0, -1.0], f.view(), &[1.0, 1.0]), Err(Error::Contract(_))));
    assert!(matches!(volume_render(&[1.0], f.view(), &[1.0]), Err(Error::DimMismatch { .. })));
    let batch = RayBatch {
        origins: vec![[0.0; 3]],
        directions: vec![[0.0, 0.0, 2.0]],
        near: 1.0,
        far: 2.0,
        sample_count: 4,
        guide_depth: None,
        guide_halfwidth: 0.1,
    };
    assert!(sample_along_rays(&batch, None).is_err());
}

#[test]
fn composite_selects_by_region() {
    let (w, h) = (4, 2);
    let head = Image::filled(w, h, [1.0, 0.0, 0.0]);
    let torso = Image::filled(w, h, [0.0, 1.0, 0.0]);
    let mut sh = Mask::new(w, h);
    let mut st = Mask::new(w, h);
    sh.data[0] = true;
    sh.data[1] = true;
    st.data[5] = true;
    let out = composite(&head, &torso, &sh, &st, [0.2, 0.3, 0.4]).unwrap();
    for p in 0..w * h {
        let px = &out.data[3 * p..3 * p + 3];
        let want = if p < 2 {
            [1.0, 0.0, 0.0]
        } else if p == 5 {
            [0.0, 1.0, 0.0]
        } else {
            [0.2, 0.3, 0.4]
        };
        assert_eq!(px, want);
    }
    st.data[0] = true;
    assert!(matches!(composite(&head, &torso, &sh, &st, [0.0; 3]), Err(Error::MaskOverlap { count: 1 })));
}

#[test]
fn frame_render_is_deterministic_and_respects_masks() {
    let ds = common::small_scene(2);
    let avatar = common::tiny_avatar(ds.frames[0].z_exp.len(), 3);
    let cfg = common::fast_render();
    let bg = ds.background();
    let a = render_frame(&ds.frames[1], &avatar, bg, &cfg).unwrap();
    let b = render_frame(&ds.frames[1], &avatar, bg, &cfg).unwrap();
    assert_eq!(a, b);
    let bgm = ds.frames[1].masks.get(cosavatar::scene_synth::MASK_BACKGROUND).unwrap();
    for p in 0..bgm.data.len() {
        if bgm.data[p] {
            assert_eq!(&a.rgb.data[3 * p..3 * p + 3], &bg);
        }
    }
    assert!(a.rgb.is_finite());
    assert!(a.head.opacity_map.iter().all(|o| (0.0..=1.0).contains(o)));
}

proptest! {
    #[test]
    fn weights_are_bounded_and_transmittance_monotone(
        sigma in prop::collection::vec(0.0f64..50.0, 1..40),
        dt in 0.001f64..0.5,
    ) {
        let n = sigma.len();
        let f = Array2::from_elem((n, 3), 1.0);
        let vs = volume_render(&sigma, f.view(), &vec![dt; n]).unwrap();
        let total: f64 = vs.weights.iter().sum();
        prop_assert!(vs.weights.iter().all(|w| *w >= 0.0));
        prop_assert!(total <= 1.0 + 1e-12);
        prop_assert!((0.0..=1.0).contains(&vs.opacity));
        // With a constant unit feature the composite equals the opacity.
        prop_assert!((vs.feature[0] - total).abs() < 1e-12);
        // T_{i+1} = T_i − w_i never increases.
        let mut t = 1.0;
        for w in &vs.weights {
            let next = t - w;
            prop_assert!(next <= t + 1e-15);
            prop_assert!(next >= -1e-12);
            t = next;
        }
    }

    #[test]
    fn samples_stay_inside_bounds(
        near in 0.5f64..2.0, len in 0.1f64..3.0, n in 2usize..64, seed in 0u64..100,
        guide in prop::option::of(0.0f64..6.0),
    ) {
        let far = near + len;
        let batch = RayBatch {
            origins: vec![[0.0; 3]; 3],
            directions: vec![normalize([0.1, -0.2, 1.0]); 3],
            near,
            far,
            sample_count: n,
            guide_depth: guide.map(|g| vec![g; 3]),
            guide_halfwidth: 0.15,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in [sample_along_rays(&batch, None).unwrap(), sample_along_rays(&batch, Some(&mut rng)).unwrap()] {
            for r in 0..3 {
                let row = s.t.row(r);
                prop_assert!(row.iter().all(|t| *t >= near && *t <= far));
                prop_assert!(row.windows(2).into_iter().all(|w| w[0] <= w[1]));
                prop_assert!(s.delta.row(r).iter().all(|d| *d >= 0.0));
            }
        }
    }
}
