//! Analytic denoiser whose DDIM trajectory lands on a known target image.

use crate::du_loop::{select_region, EditRegion, RegionRouting};
use crate::error::Result;
use crate::image::{Image, Mask};
use crate::scene_synth::{Masks, MASK_BACKGROUND};

use super::{DenoiseRequest, Denoiser, IdentityCodec, Latent, LatentCodec, NoiseSchedule, Variant};

/// Deterministic image → image map keyed by instruction and masks.
pub trait TargetTransform: Send + Sync {
    fn apply(&self, image: &Image, instruction: &str, masks: Option<&Masks>) -> Result<Image>;
}

/// Rotates the hue of pixels inside the routed region (the foreground for
/// instructions without a region keyword).
#[derive(Clone, Debug, PartialEq)]
pub struct HueShift {
    pub routing: RegionRouting,
    /// Fixed angle in degrees; derived from the instruction when `None`.
    pub angle_deg: Option<f64>,
}

const COLOR_ANGLES: [(&str, f64); 8] = [
    ("pink", 150.0),
    ("red", 60.0),
    ("blue", 120.0),
    ("green", 90.0),
    ("purple", 200.0),
    ("gold", 30.0),
    ("silver", 240.0),
    ("orange", 45.0),
];

impl HueShift {
    pub fn new(routing: RegionRouting) -> Self {
        Self {
            routing,
            angle_deg: None,
        }
    }

    pub fn with_angle(routing: RegionRouting, deg: f64) -> Self {
        Self {
            routing,
            angle_deg: Some(deg),
        }
    }

    /// Color keyword angle, or an FNV-1a hash of the text mapped into [60°, 240°).
    pub fn angle_for(&self, instruction: &str) -> f64 {
        if let Some(a) = self.angle_deg {
            return a;
        }
        let lower = instruction.to_lowercase();
        for (word, a) in COLOR_ANGLES {
            if lower.contains(word) {
                return a;
            }
        }
        let mut h: u64 = 0xcbf29ce484222325;
        for b in lower.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x100000001b3);
        }
        60.0 + (h % 180) as f64
    }
}

/// Hue rotation about the gray axis (Rodrigues), clamped to [0,1].
pub fn hue_rotate(rgb: [f64; 3], deg: f64) -> [f64; 3] {
    let th = deg.to_radians();
    let (s, c) = th.sin_cos();
    let k = 1.0 / 3.0f64.sqrt();
    let a = c + (1.0 - c) / 3.0;
    let b = (1.0 - c) / 3.0 - k * s;
    let d = (1.0 - c) / 3.0 + k * s;
    let m = [[a, b, d], [d, a, b], [b, d, a]];
    let mut out = [0.0; 3];
    for (i, row) in m.iter().enumerate() {
        out[i] = (row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2]).clamp(0.0, 1.0);
    }
    out
}

impl TargetTransform for HueShift {
    fn apply(&self, image: &Image, instruction: &str, masks: Option<&Masks>) -> Result<Image> {
        let region: Mask = match masks {
            None => Mask::full(image.width, image.height),
            Some(m) => match select_region(instruction, &self.routing, m)? {
                EditRegion::Mask(mask) => mask,
                EditRegion::Global => match m.get(MASK_BACKGROUND) {
                    Some(bg) => bg.complement(),
                    None => Mask::full(image.width, image.height),
                },
            },
        };
        let deg = self.angle_for(instruction);
        let mut out = image.clone();
        for p in 0..image.width * image.height {
            if region.data[p] {
                let px = [image.data[3 * p], image.data[3 * p + 1], image.data[3 * p + 2]];
                out.data[3 * p..3 * p + 3].copy_from_slice(&hue_rotate(px, deg));
            }
        }
        Ok(out)
    }
}

/// Leaves the image unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityTransform;

impl TargetTransform for IdentityTransform {
    fn apply(&self, image: &Image, _instruction: &str, _masks: Option<&Masks>) -> Result<Image> {
        Ok(image.clone())
    }
}

/// `ε̂ = (z_t − √ᾱ·target)/√(1−ᾱ)`; targets per variant are the zero
/// latent, the image condition, and the transformed image condition.
pub struct ToyDenoiser {
    pub transform: Box<dyn TargetTransform>,
    pub schedule: NoiseSchedule,
    codec: IdentityCodec,
}

impl ToyDenoiser {
    pub fn new(transform: Box<dyn TargetTransform>) -> Self {
        Self {
            transform,
            schedule: NoiseSchedule::default(),
            codec: IdentityCodec,
        }
    }

    pub fn identity() -> Self {
        Self::new(Box::new(IdentityTransform))
    }

    pub fn target(&self, req: &DenoiseRequest<'_>) -> Result<Latent> {
        match req.variant {
            Variant::Uncond => Ok(req.z_t.zeros_like()),
            Variant::Image => Ok(req.image_cond.clone()),
            Variant::Full => {
                let img = self.codec.decode(req.image_cond)?;
                let t = self.transform.apply(&img, req.instruction, req.frame.masks)?;
                self.codec.encode(&t)
            }
        }
    }
}

impl Denoiser for ToyDenoiser {
    fn denoise(&self, req: &DenoiseRequest<'_>) -> Result<Latent> {
        let ab = self.schedule.alpha_bar(req.t)?;
        let target = self.target(req)?;
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(Latent {
            data: req
                .z_t
                .data
                .iter()
                .zip(&target.data)
                .map(|(z, x)| (z - sa * x) / sb)
                .collect(),
            ..*req.z_t
        })
    }

    fn concurrent_safe(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::editor::{ddim_edit, ddim_edit_at, EditConfig, FrameContext, Trace};
    use crate::scene_synth::{synth_sequence, SceneSpec, MASK_HAIR};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_scales(instruction: &str) -> EditConfig {
        EditConfig {
            instruction: instruction.into(),
            s_i: 1.0,
            s_t: 1.0,
            ..EditConfig::default()
        }
    }

    fn tiny_image() -> Image {
        Image {
            width: 2,
            height: 2,
            data: vec![0.9, 0.1, 0.1, 0.2, 0.6, 0.3, 0.5, 0.5, 0.5, 0.1, 0.2, 0.8],
        }
    }

    #[test]
    fn hue_rotation_basics() {
        let gray = [0.4, 0.4, 0.4];
        let r = hue_rotate(gray, 77.0);
        for c in r {
            assert!((c - 0.4).abs() < 1e-12);
        }
        let p = [0.2, 0.5, 0.7];
        let back = hue_rotate(hue_rotate(p, 40.0), -40.0);
        for i in 0..3 {
            assert!((back[i] - p[i]).abs() < 1e-12);
        }
        let full = hue_rotate([1.0, 0.0, 0.0], 120.0);
        assert!((full[1] - 1.0).abs() < 1e-12 && full[0].abs() < 1e-12);
    }

    #[test]
    fn unit_scales_reach_the_transformed_target() {
        let img = tiny_image();
        let toy = ToyDenoiser::new(Box::new(HueShift::with_angle(RegionRouting::default(), 90.0)));
        let cfg = unit_scales("make it weird");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = ddim_edit(
            &img,
            &img,
            &cfg,
            &toy,
            &IdentityCodec,
            &NoiseSchedule::default(),
            FrameContext { index: 0, masks: None },
            &mut rng,
        )
        .unwrap();
        let want = HueShift::with_angle(RegionRouting::default(), 90.0)
            .apply(&img, "", None)
            .unwrap();
        for (a, b) in out.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn identity_target_returns_input() {
        let img = tiny_image();
        let toy = ToyDenoiser::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = ddim_edit(
            &img,
            &img,
            &unit_scales("anything"),
            &toy,
            &IdentityCodec,
            &NoiseSchedule::default(),
            FrameContext { index: 0, masks: None },
            &mut rng,
        )
        .unwrap();
        for (a, b) in out.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_text_scale_ignores_instruction() {
        let img = tiny_image();
        let toy = ToyDenoiser::new(Box::new(HueShift::new(RegionRouting::default())));
        let run = |instr: &str| {
            let cfg = EditConfig {
                instruction: instr.into(),
                s_t: 0.0,
                ..EditConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            ddim_edit(
                &img,
                &img,
                &cfg,
                &toy,
                &IdentityCodec,
                &NoiseSchedule::default(),
                FrameContext { index: 0, masks: None },
                &mut rng,
            )
            .unwrap()
        };
        assert_eq!(run("turn it blue"), run("turn it green"));
    }

    #[test]
    fn latent_distance_to_target_never_grows() {
        let img = tiny_image();
        let toy = ToyDenoiser::new(Box::new(HueShift::with_angle(RegionRouting::default(), 45.0)));
        let cfg = unit_scales("x");
        let schedule = NoiseSchedule::default();
        let noise = Latent {
            width: 2,
            height: 2,
            channels: 3,
            data: vec![0.3, -1.0, 0.8, 1.2, -0.4, 0.1, -0.9, 0.5, 2.0, -1.5, 0.2, 0.6],
        };
        let mut trace = Trace::new();
        ddim_edit_at(
            &img,
            &img,
            0.7,
            &noise,
            &cfg,
            &toy,
            &IdentityCodec,
            &schedule,
            FrameContext { index: 0, masks: None },
            Some(&mut trace),
        )
        .unwrap();
        let target = IdentityCodec
            .encode(&HueShift::with_angle(RegionRouting::default(), 45.0).apply(&img, "", None).unwrap())
            .unwrap();
        let ks = crate::editor::ddim_timesteps(700, cfg.denoise_steps);
        let mut prev = f64::INFINITY;
        for (z, &k) in trace.iter().zip(&ks) {
            let ab = schedule.alpha_bar_step(k).sqrt();
            let scaled = Latent {
                data: target.data.iter().map(|v| ab * v).collect(),
                ..target
            };
            let d = z.distance(&scaled);
            assert!(d <= prev + 1e-12, "{d} > {prev}");
            prev = d;
        }
    }

    #[test]
    fn different_instructions_differ_only_in_region() {
        let d = synth_sequence(&SceneSpec {
            n_frames: 2,
            image_size: 32,
            ..SceneSpec::default()
        })
        .unwrap();
        let f = &d.frames[0];
        let shift = HueShift::new(RegionRouting::default());
        let a = shift.apply(&f.image_gt, "make the hair pink", Some(&f.masks)).unwrap();
        let b = shift.apply(&f.image_gt, "make the hair blue", Some(&f.masks)).unwrap();
        let hair = f.masks.get(MASK_HAIR).unwrap();
        let mut differs = false;
        for p in 0..hair.data.len() {
            let (pa, pb) = (&a.data[3 * p..3 * p + 3], &b.data[3 * p..3 * p + 3]);
            if hair.data[p] {
                differs |= pa != pb;
            } else {
                assert_eq!(pa, pb);
                assert_eq!(pa, &f.image_gt.data[3 * p..3 * p + 3]);
            }
        }
        assert!(differs);
    }
}
