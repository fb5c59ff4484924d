use cosavatar::du_loop::RegionRouting;
use cosavatar::editor::{
    cfg_score, ddim_edit, ddim_edit_at, hue_rotate, make_noisy_latent, EditConfig, FrameContext, HueShift,
    IdentityCodec, Latent, NoiseSchedule, TargetTransform, ToyDenoiser, Trace, Variant, WireRequest, WireResponse,
};
use cosavatar::image::Image;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(seed: u64, w: usize, h: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image {
        width: w,
        height: h,
        data: (0..3 * w * h).map(|_| rng.random_range(0.05..0.95)).collect(),
    }
}

fn unit(instruction: &str) -> EditConfig {
    EditConfig {
        instruction: instruction.into(),
        s_i: 1.0,
        s_t: 1.0,
        ..EditConfig::default()
    }
}

fn no_frame() -> FrameContext<'static> {
    FrameContext { index: 0, masks: None }
}

#[test]
fn cfg_identities_and_hand_value() {
    let (u, i, f) = ([0.3, -1.7, 2.25], [0.1, 0.4, -0.9], [-0.6, 1.3, 5.0]);
    assert_eq!(cfg_score(&u, &i, &f, 1.0, 1.0).unwrap(), f.to_vec());
    assert_eq!(cfg_score(&u, &i, &f, 0.0, 0.0).unwrap(), u.to_vec());
    assert_eq!(cfg_score(&[1.0], &[2.0], &[4.0], 1.5, 12.0).unwrap(), vec![26.5]);
    assert!(cfg_score(&u, &i[..2], &f, 1.0, 1.0).is_err());
}

#[test]
fn toy_edit_lands_on_transformed_condition() {
    let img = image(1, 8, 8);
    let shift = HueShift::new(RegionRouting::default());
    let target = shift.apply(&img, "make it purple", None).unwrap();
    let den = ToyDenoiser::new(Box::new(shift));
    let cfg = unit("make it purple");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let out = ddim_edit(&img, &img, &cfg, &den, &IdentityCodec, &NoiseSchedule::default(), no_frame(), &mut rng).unwrap();
    let err = out.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-9, "max error {err}");
}

#[test]
fn toy_trajectory_contracts_towards_target() {
    let img = image(2, 6, 4);
    let den = ToyDenoiser::identity();
    let cfg = unit("anything");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noise = Latent {
        width: 6,
        height: 4,
        channels: 3,
        data: (0..72).map(|_| rng.random_range(-2.0..2.0)).collect(),
    };
    let mut trace = Trace::new();
    ddim_edit_at(&img, &img, 0.9, &noise, &cfg, &den, &IdentityCodec, &NoiseSchedule::default(), no_frame(), Some(&mut trace))
        .unwrap();
    let target = Latent { width: 6, height: 4, channels: 3, data: img.data.clone() };
    let d: Vec<f64> = trace.iter().map(|z| z.distance(&target)).collect();
    assert!(d.len() > 2);
    assert!(d.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{d:?}");
    assert!(*d.last().unwrap() < 1e-9);
}

#[test]
fn zero_text_scale_ignores_instruction() {
    let img = image(3, 4, 4);
    let den = ToyDenoiser::new(Box::new(HueShift::new(RegionRouting::default())));
    let schedule = NoiseSchedule::default();
    let run = |instr: &str| {
        let cfg = EditConfig { instruction: instr.into(), s_t: 0.0, s_i: 1.0, ..EditConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        ddim_edit(&img, &img, &cfg, &den, &IdentityCodec, &schedule, no_frame(), &mut rng).unwrap()
    };
    assert_eq!(run("turn it blue"), run("turn it green"));
}

#[test]
fn edits_are_seed_deterministic() {
    let img = image(4, 4, 4);
    let den = ToyDenoiser::new(Box::new(HueShift::new(RegionRouting::default())));
    let cfg = EditConfig { instruction: "red".into(), ..EditConfig::default() };
    let schedule = NoiseSchedule::default();
    let go = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ddim_edit(&img, &img, &cfg, &den, &IdentityCodec, &schedule, no_frame(), &mut rng).unwrap()
    };
    assert_eq!(go(7), go(7));
    assert_ne!(go(7), go(8));
}

#[test]
fn hue_rotation_fixes_gray_and_composes() {
    assert!(hue_rotate([0.4, 0.4, 0.4], 123.0).iter().all(|v| (v - 0.4).abs() < 1e-12));
    let p = [0.5, 0.3, 0.4];
    let a = hue_rotate(hue_rotate(p, 40.0), 50.0);
    let b = hue_rotate(p, 90.0);
    for k in 0..3 {
        assert!((a[k] - b[k]).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn cfg_is_affine_in_predictions(
        u in prop::collection::vec(-5.0f64..5.0, 4),
        i in prop::collection::vec(-5.0f64..5.0, 4),
        f in prop::collection::vec(-5.0f64..5.0, 4),
        si in 0.0f64..3.0, st in 0.0f64..15.0, c in -2.0f64..2.0,
    ) {
        let base = cfg_score(&u, &i, &f, si, st).unwrap();
        let shift = |v: &Vec<f64>| v.iter().map(|x| x + c).collect::<Vec<_>>();
        // The coefficients sum to one, so a common offset passes straight through.
        let moved = cfg_score(&shift(&u), &shift(&i), &shift(&f), si, st).unwrap();
        for (a, b) in base.iter().zip(&moved) {
            prop_assert!((a + c - b).abs() < 1e-9);
        }
        let reference: Vec<f64> = (0..4).map(|k| u[k] + si * (i[k] - u[k]) + st * (f[k] - i[k])).collect();
        for (a, b) in base.iter().zip(&reference) {
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
        }
        let no_text = cfg_score(&u, &i, &vec![99.0; 4], si, 0.0).unwrap();
        let no_text2 = cfg_score(&u, &i, &vec![-7.0; 4], si, 0.0).unwrap();
        prop_assert_eq!(no_text, no_text2);
    }

    #[test]
    fn noising_preserves_variance(t in 0.0f64..=1.0) {
        let s = NoiseSchedule::default();
        let one = Latent { width: 1, height: 1, channels: 1, data: vec![1.0] };
        let zero = one.zeros_like();
        let a = make_noisy_latent(&one, t, &zero, &s).unwrap().data[0];
        let b = make_noisy_latent(&zero, t, &one, &s).unwrap().data[0];
        prop_assert!((a * a + b * b - 1.0).abs() < 1e-12);
        let ab = s.alpha_bar(t).unwrap();
        prop_assert!(ab > 0.0 && ab <= 1.0);
        if t < 0.999 {
            prop_assert!(s.alpha_bar((t + 0.001).min(1.0)).unwrap() <= ab);
        }
    }

    #[test]
    fn wire_messages_round_trip(
        id in any::<u64>(), tag in 0u8..3, t in 0.0f32..1.0,
        h in 1usize..4, w in 1usize..4, seed in any::<u64>(), instruction in ".{0,40}",
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lat = || Latent {
            width: w, height: h, channels: 3,
            data: (0..3 * w * h).map(|_| f64::from(rng.random_range(-3.0f32..3.0))).collect(),
        };
        let variant = Variant::from_tag(tag).unwrap();
        let req = WireRequest { id, variant, t, z_t: lat(), image_cond: lat(), instruction };
        let bytes = req.encode();
        prop_assert_eq!(u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize, bytes.len() - 4);
        prop_assert_eq!(&WireRequest::decode(&bytes[4..]).unwrap(), &req);
        prop_assert!(WireRequest::decode(&bytes[4..bytes.len() - 1]).is_err());
        let resp = WireResponse { id, variant, eps: lat() };
        let rb = resp.encode();
        prop_assert_eq!(&WireResponse::decode(&rb[4..]).unwrap(), &resp);
        let mut extra = rb[4..].to_vec();
        extra.push(0);
        prop_assert!(WireResponse::decode(&extra).is_err());
    }
}

#[test]
fn different_colors_differ_only_inside_the_routed_region() {
    let ds = cosavatar::scene_synth::synth_sequence(&cosavatar::scene_synth::SceneSpec {
        n_frames: 2,
        image_size: 32,
        ..Default::default()
    })
    .unwrap();
    let f = &ds.frames[0];
    let den = ToyDenoiser::new(Box::new(HueShift::new(RegionRouting::default())));
    let frame = FrameContext { index: 0, masks: Some(&f.masks) };
    let run = |instr: &str| {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        ddim_edit(&f.image_gt, &f.image_gt, &unit(instr), &den, &IdentityCodec, &NoiseSchedule::default(), frame, &mut rng)
            .unwrap()
    };
    let (pink, blue) = (run("pink hair"), run("blue hair"));
    let hair = f.masks.get(cosavatar::scene_synth::MASK_HAIR).unwrap();
    let mut inside = 0;
    for p in 0..hair.data.len() {
        let d = (0..3).map(|k| (pink.data[3 * p + k] - blue.data[3 * p + k]).abs()).fold(0.0, f64::max);
        if hair.data[p] {
            inside += usize::from(d > 1e-3);
        } else {
            assert!(d < 1e-9, "pixel {p} outside hair differs by {d}");
        }
    }
    assert!(inside > 0);
}
