//! Depth-guided ray sampling, feature volume rendering, upsampling and
//! head/torso compositing.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::conv::FeatureMap;
use crate::error::{Error, Result};
use crate::fields::{Avatar, CodeGrads, LatentBundle, PointCache, PortraitModel, Region};
use crate::geometry::{Camera, Vec3};
use crate::image::{Image, Mask};
use crate::scene_synth::FrameRecord;
use crate::upsampler::UpsamplerCache;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub sample_count: usize,
    pub near: f64,
    pub far: f64,
    pub guide_halfwidth: f64,
    /// Use the frame's guide depth when present.
    pub use_guide_depth: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            sample_count: 64,
            near: 1.5,
            far: 4.5,
            guide_halfwidth: 0.15,
            use_guide_depth: true,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.near < self.far) || self.near < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= near < far (got {} / {})",
                self.near, self.far
            )));
        }
        if self.sample_count < 2 {
            return Err(Error::InvalidConfig("sample_count must be >= 2".into()));
        }
        if !(self.guide_halfwidth > 0.0) {
            return Err(Error::InvalidConfig("guide_halfwidth must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch {
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
    pub near: f64,
    pub far: f64,
    pub sample_count: usize,
    pub guide_depth: Option<Vec<f64>>,
    pub guide_halfwidth: f64,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near < self.far) {
            return Err(Error::Contract(format!("near {} >= far {}", self.near, self.far)));
        }
        if self.sample_count < 2 {
            return Err(Error::Contract("sample_count must be >= 2".into()));
        }
        if self.directions.len() != self.origins.len() {
            return Err(Error::DimMismatch {
                what: "ray directions",
                expected: self.origins.len(),
                got: self.directions.len(),
            });
        }
        if let Some(g) = &self.guide_depth {
            if g.len() != self.origins.len() {
                return Err(Error::DimMismatch {
                    what: "ray guide depth",
                    expected: self.origins.len(),
                    got: g.len(),
                });
            }
        }
        for d in &self.directions {
            let n = crate::geometry::norm(*d);
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!("ray direction norm {n}")));
            }
        }
        Ok(())
    }
}

/// Sample distances and quadrature intervals, one row per ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub t: Array2<f64>,
    pub delta: Array2<f64>,
}

/// Samples `sample_count` distances per ray; stratified when `rng` is
/// given, a uniform grid otherwise.
pub fn sample_along_rays(batch: &RayBatch, mut rng: Option<&mut dyn RngCore>) -> Result<RaySamples> {
    batch.validate()?;
    let n = batch.sample_count;
    let mut t = Array2::zeros((batch.len(), n));
    let mut delta = Array2::zeros((batch.len(), n));
    for r in 0..batch.len() {
        let (mut lo, mut hi) = (batch.near, batch.far);
        if let Some(g) = &batch.guide_depth {
            let d = g[r];
            if d > 0.0 {
                let a = (d - batch.guide_halfwidth).max(batch.near);
                let b = (d + batch.guide_halfwidth).min(batch.far);
                if a < b {
                    (lo, hi) = (a, b);
                }
            }
        }
        let step = (hi - lo) / n as f64;
        for i in 0..n {
            let u = match rng.as_deref_mut() {
                Some(rng) => rng.random::<f64>(),
                None => 0.0,
            };
            t[[r, i]] = lo + (i as f64 + u) * step;
        }
        for i in 0..n - 1 {
            delta[[r, i]] = t[[r, i + 1]] - t[[r, i]];
        }
        delta[[r, n - 1]] = batch.far - t[[r, n - 1]];
    }
    Ok(RaySamples { t, delta })
}

/// Composited feature, opacity and per-sample weights of one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    pub feature: Vec<f64>,
    pub opacity: f64,
    pub weights: Vec<f64>,
}

/// `w_i = T_i (1 − exp(−σ_i δ_i))`, `T_i = exp(−Σ_{j<i} σ_j δ_j)`.
pub fn volume_render(sigma: &[f64], features: ArrayView2<f64>, delta: &[f64]) -> Result<VolumeSample> {
    if features.nrows() != sigma.len() {
        return Err(Error::DimMismatch {
            what: "per-sample features",
            expected: sigma.len(),
            got: features.nrows(),
        });
    }
    if delta.len() != sigma.len() {
        return Err(Error::DimMismatch {
            what: "sample intervals",
            expected: sigma.len(),
            got: delta.len(),
        });
    }
    if let Some(i) = sigma.iter().position(|s| !(*s >= 0.0)) {
        return Err(Error::Contract(format!(
            "density at sample {i} is {} (must be >= 0)",
            sigma[i]
        )));
    }
    let weights = weights(sigma, delta);
    let mut feature = vec![0.0; features.ncols()];
    for (w, f) in weights.iter().zip(features.outer_iter()) {
        for (acc, v) in feature.iter_mut().zip(f.iter()) {
            *acc += w * v;
        }
    }
    let opacity = weights.iter().sum::<f64>().clamp(0.0, 1.0);
    Ok(VolumeSample {
        feature,
        opacity,
        weights,
    })
}

fn weights(sigma: &[f64], delta: &[f64]) -> Vec<f64> {
    let mut acc = 0.0f64;
    sigma
        .iter()
        .zip(delta)
        .map(|(&s, &d)| {
            let tau = s * d;
            let w = (-acc).exp() * -(-tau).exp_m1();
            acc += tau;
            w
        })
        .collect()
}

/// Gradients of `⟨g, feature⟩ + g_a·opacity` w.r.t. σ and per-sample features.
pub fn volume_render_backward(
    sigma: &[f64],
    features: ArrayView2<f64>,
    delta: &[f64],
    weights: &[f64],
    d_feature: &[f64],
    d_opacity: f64,
) -> (Vec<f64>, Array2<f64>) {
    let n = sigma.len();
    let s: Vec<f64> = features
        .outer_iter()
        .map(|f| f.iter().zip(d_feature).map(|(a, b)| a * b).sum::<f64>() + d_opacity)
        .collect();
    let mut d_sigma = vec![0.0; n];
    // suffix = Σ_{i>k} w_i s_i
    let mut suffix = 0.0;
    let mut optical = 0.0;
    let mut t_next = Vec::with_capacity(n);
    for k in 0..n {
        optical += sigma[k] * delta[k];
        t_next.push((-optical).exp());
    }
    for k in (0..n).rev() {
        d_sigma[k] = delta[k] * (t_next[k] * s[k] - suffix);
        suffix += weights[k] * s[k];
    }
    let mut d_feat = Array2::zeros(features.raw_dim());
    for (k, mut row) in d_feat.outer_iter_mut().enumerate() {
        for (r, g) in row.iter_mut().zip(d_feature) {
            *r = weights[k] * g;
        }
    }
    (d_sigma, d_feat)
}

/// Per-region render: low-resolution features and opacity, upsampled RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub feature_map: FeatureMap,
    pub opacity_map: Vec<f64>,
    pub rgb: Image,
}

/// Both region renders and their composite.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRender {
    pub head: RenderOutput,
    pub torso: RenderOutput,
    pub rgb: Image,
}

/// `I_r = S_head·head + S_torso·torso + (1 − S_head − S_torso)·background`.
pub fn composite(
    head_rgb: &Image,
    torso_rgb: &Image,
    s_head: &Mask,
    s_torso: &Mask,
    background: [f64; 3],
) -> Result<Image> {
    let (w, h) = (head_rgb.width, head_rgb.height);
    for (what, ww, hh) in [
        ("torso_rgb", torso_rgb.width, torso_rgb.height),
        ("s_head", s_head.width, s_head.height),
        ("s_torso", s_torso.width, s_torso.height),
    ] {
        if (ww, hh) != (w, h) {
            return Err(Error::Contract(format!(
                "{what} is {ww}x{hh}, expected {w}x{h}"
            )));
        }
    }
    let overlap = s_head
        .data
        .iter()
        .zip(&s_torso.data)
        .filter(|(a, b)| **a && **b)
        .count();
    if overlap > 0 {
        return Err(Error::MaskOverlap { count: overlap });
    }
    let mut out = Image::new(w, h);
    for p in 0..w * h {
        let src: [f64; 3] = if s_head.data[p] {
            [head_rgb.data[3 * p], head_rgb.data[3 * p + 1], head_rgb.data[3 * p + 2]]
        } else if s_torso.data[p] {
            [torso_rgb.data[3 * p], torso_rgb.data[3 * p + 1], torso_rgb.data[3 * p + 2]]
        } else {
            background
        };
        out.data[3 * p..3 * p + 3].copy_from_slice(&src);
    }
    Ok(out)
}

/// Rays of one region at feature resolution.
struct RegionRays {
    lo_w: usize,
    lo_h: usize,
    /// Low-resolution pixel index of every marched ray.
    active: Vec<usize>,
    batch: RayBatch,
}

fn region_camera(frame: &FrameRecord, region: Region) -> &Camera {
    match region {
        Region::Head => &frame.camera,
        Region::Torso => &frame.torso_camera,
    }
}

pub fn region_mask(frame: &FrameRecord, region: Region) -> Result<Mask> {
    match region {
        Region::Head => frame.masks.head_region(),
        Region::Torso => frame.masks.torso_region(),
    }
}

fn region_rays(
    frame: &FrameRecord,
    region: Region,
    mask: &Mask,
    factor: usize,
    cfg: &RenderConfig,
) -> Result<RegionRays> {
    let cam = region_camera(frame, region);
    let (w, h) = (frame.image_gt.width, frame.image_gt.height);
    if w % factor != 0 || h % factor != 0 {
        return Err(Error::Contract(format!(
            "image {w}x{h} not divisible by upsampling factor {factor}"
        )));
    }
    if (mask.width, mask.height) != (w, h) {
        return Err(Error::SizeMismatch {
            frame: frame.index,
            what: format!("{} mask", region.as_str()),
            want_w: w,
            want_h: h,
            got_w: mask.width,
            got_h: mask.height,
        });
    }
    let lo_cam = Camera {
        pose: cam.pose,
        intrinsics: cam.intrinsics.downscaled(factor),
    };
    let (lo_w, lo_h) = (w / factor, h / factor);
    let depth = if cfg.use_guide_depth {
        frame.guide_depth.as_ref()
    } else {
        None
    };
    let mut active = Vec::new();
    let mut origins = Vec::new();
    let mut directions = Vec::new();
    let mut guide = Vec::new();
    let origin = lo_cam.origin();
    for ly in 0..lo_h {
        for lx in 0..lo_w {
            let mut count = 0usize;
            let mut dsum = 0.0;
            for y in ly * factor..(ly + 1) * factor {
                for x in lx * factor..(lx + 1) * factor {
                    let p = y * w + x;
                    if mask.data[p] {
                        count += 1;
                        if let Some(d) = depth {
                            dsum += f64::from(d[p]);
                        }
                    }
                }
            }
            if count == 0 {
                continue;
            }
            active.push(ly * lo_w + lx);
            origins.push(origin);
            directions.push(lo_cam.ray_dir(lx, ly));
            guide.push(dsum / count as f64);
        }
    }
    Ok(RegionRays {
        lo_w,
        lo_h,
        active,
        batch: RayBatch {
            origins,
            directions,
            near: cfg.near,
            far: cfg.far,
            sample_count: cfg.sample_count,
            guide_depth: depth.map(|_| guide),
            guide_halfwidth: cfg.guide_halfwidth,
        },
    })
}

/// Forward state of one region render kept for backpropagation.
pub struct RegionPass {
    pub region: Region,
    pub output: RenderOutput,
    rays: RegionRays,
    delta: Array2<f64>,
    sigma: Array1<f64>,
    features: Array2<f64>,
    weights: Vec<Vec<f64>>,
    bundle: LatentBundle,
    points: Option<PointCache>,
    upsampler: UpsamplerCache,
}

/// Renders one region of `frame`; stratified sampling when `rng` is given.
pub fn render_region_pass(
    model: &PortraitModel,
    frame: &FrameRecord,
    bundle: &LatentBundle,
    cfg: &RenderConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<RegionPass> {
    let region = model.region;
    let mask = region_mask(frame, region)?;
    let factor = model.upsampler.factor;
    let rays = region_rays(frame, region, &mask, factor, cfg)?;
    let fd = model.field.feature_dim();
    let n_rays = rays.active.len();
    let s = cfg.sample_count;
    let samples = sample_along_rays(&rays.batch, rng)?;

    let mut feature_map = Array2::zeros((rays.lo_w * rays.lo_h, fd));
    let mut opacity_map = vec![0.0; rays.lo_w * rays.lo_h];
    let mut weights = Vec::with_capacity(n_rays);
    let (sigma, features, points) = if n_rays == 0 {
        (Array1::zeros(0), Array2::zeros((0, fd)), None)
    } else {
        let mut x = Array2::zeros((n_rays * s, 3));
        let mut d = Array2::zeros((n_rays * s, 3));
        for r in 0..n_rays {
            let o = rays.batch.origins[r];
            let dir = rays.batch.directions[r];
            for i in 0..s {
                let t = samples.t[[r, i]];
                let row = r * s + i;
                for k in 0..3 {
                    x[[row, k]] = o[k] + t * dir[k];
                    d[[row, k]] = dir[k];
                }
            }
        }
        let (out, cache) = model.eval_points_cached(x.view(), d.view(), bundle)?;
        (out.sigma, out.features, Some(cache))
    };
    for (r, &pix) in rays.active.iter().enumerate() {
        let rows = r * s..(r + 1) * s;
        let sig = sigma.slice(ndarray::s![rows.clone()]);
        let vs = volume_render(
            sig.as_slice().expect("contiguous"),
            features.slice(ndarray::s![rows, ..]),
            samples.delta.row(r).as_slice().expect("contiguous"),
        )?;
        feature_map
            .row_mut(pix)
            .assign(&ndarray::ArrayView1::from(&vs.feature));
        opacity_map[pix] = vs.opacity;
        weights.push(vs.weights);
    }
    let fmap = FeatureMap::new(rays.lo_h, rays.lo_w, feature_map)?;
    let (rgb_map, up_cache) = model.upsampler.forward_cached(&fmap)?;
    let rgb = Image {
        width: rgb_map.width,
        height: rgb_map.height,
        data: rgb_map.data.iter().copied().collect(),
    };
    Ok(RegionPass {
        region,
        output: RenderOutput {
            feature_map: fmap,
            opacity_map,
            rgb,
        },
        rays,
        delta: samples.delta,
        sigma,
        features,
        weights,
        bundle: bundle.clone(),
        points,
        upsampler: up_cache,
    })
}

/// Backpropagates `d_rgb` (interleaved, same layout as the region's RGB)
/// into `grads` and `codes`.
pub fn backward_region(
    model: &PortraitModel,
    pass: &RegionPass,
    d_rgb: &[f64],
    grads: &mut PortraitModel,
    codes: &mut CodeGrads,
) -> Result<()> {
    let npx = pass.output.rgb.width * pass.output.rgb.height;
    if d_rgb.len() != 3 * npx {
        return Err(Error::DimMismatch {
            what: "rgb gradient",
            expected: 3 * npx,
            got: d_rgb.len(),
        });
    }
    let d_rgb = Array2::from_shape_vec((npx, 3), d_rgb.to_vec()).expect("shape checked");
    let d_fmap = model
        .upsampler
        .backward(&pass.upsampler, &d_rgb, &mut grads.upsampler);
    let Some(points) = &pass.points else {
        return Ok(());
    };
    let s = pass.delta.ncols();
    let n = pass.sigma.len();
    let mut d_sigma = Array1::zeros(n);
    let mut d_feat = Array2::zeros((n, pass.features.ncols()));
    for (r, &pix) in pass.rays.active.iter().enumerate() {
        let rows = r * s..(r + 1) * s;
        let g = d_fmap.row(pix).to_vec();
        let (ds, df) = volume_render_backward(
            pass.sigma.slice(ndarray::s![rows.clone()]).as_slice().expect("contiguous"),
            pass.features.slice(ndarray::s![rows.clone(), ..]),
            pass.delta.row(r).as_slice().expect("contiguous"),
            &pass.weights[r],
            &g,
            0.0,
        );
        d_sigma
            .slice_mut(ndarray::s![rows.clone()])
            .assign(&Array1::from(ds));
        d_feat.slice_mut(ndarray::s![rows, ..]).assign(&df);
    }
    model.backward_points(points, &pass.bundle, &d_sigma, d_feat, grads, codes);
    Ok(())
}

pub fn render_region(
    model: &PortraitModel,
    frame: &FrameRecord,
    bundle: &LatentBundle,
    cfg: &RenderConfig,
) -> Result<RenderOutput> {
    Ok(render_region_pass(model, frame, bundle, cfg, None)?.output)
}

/// Deterministic full-frame render (uniform sample grid).
pub fn render_frame(
    frame: &FrameRecord,
    avatar: &Avatar,
    background: [f64; 3],
    cfg: &RenderConfig,
) -> Result<FrameRender> {
    let head = render_region(
        &avatar.head,
        frame,
        &avatar.bundle(Region::Head, &frame.z_exp),
        cfg,
    )?;
    let torso = render_region(
        &avatar.torso,
        frame,
        &avatar.bundle(Region::Torso, &frame.z_exp),
        cfg,
    )?;
    let rgb = composite(
        &head.rgb,
        &torso.rgb,
        &frame.masks.head_region()?,
        &frame.masks.torso_region()?,
        background,
    )?;
    Ok(FrameRender { head, torso, rgb })
}

/// Draws a stratification jitter stream for one region render.
pub fn jitter_rng<R: Rng>(rng: &mut R) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(rng.random())
}
