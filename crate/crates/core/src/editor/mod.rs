//! Instruction-conditioned image editing: noise schedule, classifier-free
//! guidance, deterministic DDIM sampling and the denoiser/codec seams.

mod external;
mod toy;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scene_synth::Masks;

pub use external::{ExternalDenoiser, WireRequest, WireResponse, EDITOR_ADDR_ENV};
pub use toy::{hue_rotate, HueShift, IdentityTransform, TargetTransform, ToyDenoiser};

pub const SCHEDULE_STEPS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub instruction: String,
    pub s_t: f64,
    pub s_i: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub denoise_steps: usize,
    /// Ordered `(keyword, mask name)` pairs.
    pub region_lexicon: Vec<(String, String)>,
}

pub fn default_lexicon() -> Vec<(String, String)> {
    [
        ("hair", "hair"),
        ("cloth", "torso"),
        ("clothes", "torso"),
        ("shirt", "torso"),
        ("face", "face"),
    ]
    .iter()
    .map(|(k, m)| (k.to_string(), m.to_string()))
    .collect()
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            instruction: String::new(),
            s_t: 12.0,
            s_i: 1.5,
            t_min: 0.25,
            t_max: 0.95,
            denoise_steps: 25,
            region_lexicon: default_lexicon(),
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(0.0 <= self.t_min && self.t_min < self.t_max && self.t_max <= 1.0) {
            errs.push(format!(
                "need 0 <= t_min < t_max <= 1 (got {} / {})",
                self.t_min, self.t_max
            ));
        }
        if self.denoise_steps == 0 {
            errs.push("denoise_steps must be >= 1".into());
        }
        if !(self.s_t >= 0.0 && self.s_i >= 0.0) {
            errs.push("guidance scales must be >= 0".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs.join("; ")))
        }
    }
}

/// Linear-β variance-preserving schedule over [`SCHEDULE_STEPS`] steps.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    /// `ᾱ_k` for `k = 0..=SCHEDULE_STEPS`, with `ᾱ_0 = 1`.
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1e-4, 2e-2)
    }
}

impl NoiseSchedule {
    pub fn linear(beta_start: f64, beta_end: f64) -> Self {
        let n = SCHEDULE_STEPS;
        let mut alpha_bar = Vec::with_capacity(n + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for k in 0..n {
            let beta = beta_start + (beta_end - beta_start) * k as f64 / (n - 1) as f64;
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Self { alpha_bar }
    }

    /// `ᾱ` at an integer step.
    pub fn alpha_bar_step(&self, k: usize) -> f64 {
        self.alpha_bar[k.min(SCHEDULE_STEPS)]
    }

    /// `ᾱ(t)` for `t ∈ [0,1]`, log-linear between integer steps.
    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::OutOfRange(format!("noise level t = {t} outside [0,1]")));
        }
        let mut x = t * SCHEDULE_STEPS as f64;
        if (x - x.round()).abs() < 1e-9 {
            x = x.round();
        }
        let k = x.floor() as usize;
        if k >= SCHEDULE_STEPS {
            return Ok(self.alpha_bar[SCHEDULE_STEPS]);
        }
        let f = x - k as f64;
        if f == 0.0 {
            return Ok(self.alpha_bar[k]);
        }
        let (a, b) = (self.alpha_bar[k].ln(), self.alpha_bar[k + 1].ln());
        Ok((a + f * (b - a)).exp())
    }

    /// Maps a noise fraction to its step index by rounding.
    pub fn step_of(t: f64) -> usize {
        (t * SCHEDULE_STEPS as f64).round() as usize
    }
}

/// Latent tensor, `height × width × channels` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Latent {
    pub fn zeros_like(&self) -> Self {
        Self {
            data: vec![0.0; self.data.len()],
            ..*self
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn distance(&self, other: &Latent) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

pub trait LatentCodec {
    fn encode(&self, image: &Image) -> Result<Latent>;
    fn decode(&self, latent: &Latent) -> Result<Image>;
}

/// Latent space equals pixel space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn encode(&self, image: &Image) -> Result<Latent> {
        Ok(Latent {
            width: image.width,
            height: image.height,
            channels: 3,
            data: image.data.clone(),
        })
    }

    fn decode(&self, latent: &Latent) -> Result<Image> {
        if latent.channels != 3 {
            return Err(Error::DimMismatch {
                what: "identity codec channels",
                expected: 3,
                got: latent.channels,
            });
        }
        Ok(Image {
            width: latent.width,
            height: latent.height,
            data: latent.data.clone(),
        })
    }
}

/// Conditioning variant of one denoiser query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// `(∅, ∅)`
    Uncond,
    /// `(I, ∅)`
    Image,
    /// `(I, T)`
    Full,
}

impl Variant {
    pub fn tag(self) -> u8 {
        match self {
            Variant::Uncond => 0,
            Variant::Image => 1,
            Variant::Full => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Variant::Uncond),
            1 => Some(Variant::Image),
            2 => Some(Variant::Full),
            _ => None,
        }
    }
}

/// Frame the edit belongs to; lets region-aware denoisers see the masks.
#[derive(Clone, Copy, Debug)]
pub struct FrameContext<'a> {
    pub index: usize,
    pub masks: Option<&'a Masks>,
}

pub struct DenoiseRequest<'a> {
    pub z_t: &'a Latent,
    pub t: f64,
    pub variant: Variant,
    pub image_cond: &'a Latent,
    pub instruction: &'a str,
    pub frame: FrameContext<'a>,
}

pub trait Denoiser {
    /// Noise prediction with the same shape as `z_t`.
    fn denoise(&self, req: &DenoiseRequest<'_>) -> Result<Latent>;
    /// Whether concurrent calls on one instance are allowed.
    fn concurrent_safe(&self) -> bool;
}

/// `ε_u + s_I(ε_i − ε_u) + s_T(ε_f − ε_i)`, evaluated as
/// `(1−s_I)ε_u + (s_I−s_T)ε_i + s_T·ε_f` so the unit and zero scale
/// settings reproduce `ε_f` and `ε_u` exactly.
pub fn cfg_score(eps_uncond: &[f64], eps_img: &[f64], eps_full: &[f64], s_i: f64, s_t: f64) -> Result<Vec<f64>> {
    for (what, v) in [("eps_img", eps_img), ("eps_full", eps_full)] {
        if v.len() != eps_uncond.len() {
            return Err(Error::DimMismatch {
                what,
                expected: eps_uncond.len(),
                got: v.len(),
            });
        }
    }
    Ok(eps_uncond
        .iter()
        .zip(eps_img)
        .zip(eps_full)
        .map(|((&u, &i), &f)| (1.0 - s_i) * u + (s_i - s_t) * i + s_t * f)
        .collect())
}

/// `z_t = √ᾱ(t)·z0 + √(1−ᾱ(t))·noise`.
pub fn make_noisy_latent(z0: &Latent, t: f64, noise: &Latent, schedule: &NoiseSchedule) -> Result<Latent> {
    if noise.shape() != z0.shape() {
        return Err(Error::DimMismatch {
            what: "noise",
            expected: z0.data.len(),
            got: noise.data.len(),
        });
    }
    let ab = schedule.alpha_bar(t)?;
    Ok(mix(z0, noise, ab))
}

fn mix(z0: &Latent, noise: &Latent, ab: f64) -> Latent {
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Latent {
        data: z0
            .data
            .iter()
            .zip(&noise.data)
            .map(|(z, n)| a * z + b * n)
            .collect(),
        ..*z0
    }
}

/// Descending integer steps from `k0` to 0 in at most `steps` moves.
pub fn ddim_timesteps(k0: usize, steps: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=steps)
        .map(|i| ((k0 * (steps - i)) as f64 / steps as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

/// Latents visited by the sampler, the first being the noisy start.
pub type Trace = Vec<Latent>;

/// Deterministic (η = 0) DDIM from step `k0` down to 0.
#[allow(clippy::too_many_arguments)]
pub fn ddim_sample(
    z_start: Latent,
    k0: usize,
    image_cond: &Latent,
    instruction: &str,
    cfg: &EditConfig,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    frame: FrameContext<'_>,
    mut trace: Option<&mut Trace>,
) -> Result<Latent> {
    let ks = ddim_timesteps(k0, cfg.denoise_steps);
    let mut z = z_start;
    if let Some(tr) = trace.as_deref_mut() {
        tr.push(z.clone());
    }
    for (step, w) in ks.windows(2).enumerate() {
        let (k, k_prev) = (w[0], w[1]);
        let t = k as f64 / SCHEDULE_STEPS as f64;
        let query = |variant| {
            let req = DenoiseRequest {
                z_t: &z,
                t,
                variant,
                image_cond,
                instruction,
                frame,
            };
            let eps = denoiser.denoise(&req).map_err(|e| Error::Editor {
                frame: frame.index,
                step,
                source: Box::new(e),
            })?;
            if eps.shape() != z.shape() {
                return Err(Error::Editor {
                    frame: frame.index,
                    step,
                    source: Box::new(Error::DimMismatch {
                        what: "denoiser output",
                        expected: z.data.len(),
                        got: eps.data.len(),
                    }),
                });
            }
            Ok(eps)
        };
        let eu = query(Variant::Uncond)?;
        let ei = query(Variant::Image)?;
        let ef = query(Variant::Full)?;
        let eps = cfg_score(&eu.data, &ei.data, &ef.data, cfg.s_i, cfg.s_t)?;
        let ab = schedule.alpha_bar_step(k);
        let ab_prev = schedule.alpha_bar_step(k_prev);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        for (zv, e) in z.data.iter_mut().zip(&eps) {
            let x0 = (*zv - sb * e) / sa;
            *zv = pa * x0 + pb * e;
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(z.clone());
        }
    }
    Ok(z)
}

/// Edits `init_render` towards `instruction` conditioned on `image_cond`
/// starting from noise level `t` with the given noise.
#[allow(clippy::too_many_arguments)]
pub fn ddim_edit_at(
    image_cond: &Image,
    init_render: &Image,
    t: f64,
    noise: &Latent,
    cfg: &EditConfig,
    denoiser: &dyn Denoiser,
    codec: &dyn LatentCodec,
    schedule: &NoiseSchedule,
    frame: FrameContext<'_>,
    trace: Option<&mut Trace>,
) -> Result<Image> {
    if !image_cond.same_size(init_render) {
        return Err(Error::Contract(format!(
            "image condition {}x{} and render {}x{} differ",
            image_cond.width, image_cond.height, init_render.width, init_render.height
        )));
    }
    let k0 = NoiseSchedule::step_of(t);
    let z0 = codec.encode(init_render)?;
    if noise.shape() != z0.shape() {
        return Err(Error::DimMismatch {
            what: "noise",
            expected: z0.data.len(),
            got: noise.data.len(),
        });
    }
    let zt = mix(&z0, noise, schedule.alpha_bar_step(k0));
    let cond = codec.encode(image_cond)?;
    let z = ddim_sample(
        zt,
        k0,
        &cond,
        &cfg.instruction,
        cfg,
        denoiser,
        schedule,
        frame,
        trace,
    )?;
    let mut out = codec.decode(&z)?;
    for v in &mut out.data {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Draws `t ~ U[t_min, t_max]` and Gaussian noise from `rng`, then runs
/// [`ddim_edit_at`].
#[allow(clippy::too_many_arguments)]
pub fn ddim_edit<R: Rng + ?Sized>(
    image_cond: &Image,
    init_render: &Image,
    cfg: &EditConfig,
    denoiser: &dyn Denoiser,
    codec: &dyn LatentCodec,
    schedule: &NoiseSchedule,
    frame: FrameContext<'_>,
    rng: &mut R,
) -> Result<Image> {
    cfg.validate()?;
    let t = rng.random_range(cfg.t_min..=cfg.t_max);
    let shape = codec.encode(init_render)?;
    let noise = Latent {
        data: (0..shape.data.len())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect(),
        ..shape
    };
    ddim_edit_at(
        image_cond,
        init_render,
        t,
        &noise,
        cfg,
        denoiser,
        codec,
        schedule,
        frame,
        None,
    )
}
