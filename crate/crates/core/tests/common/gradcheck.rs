//! Central finite-difference checks of the hand-written backward passes.
//! Each check returns the number of compared entries or the first mismatch.

use cosavatar::fields::{Avatar, CodeGrads, Groups, Region};
use cosavatar::image::Image;
use cosavatar::renderer::{backward_region, render_region_pass, RenderConfig};
use cosavatar::scene_synth::FrameRecord;
use cosavatar::training::{total_loss, total_loss_grad, PerceptualConfig, RandomConvExtractor};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{close, randomize, small_scene, tiny_avatar};

pub const EPS: f64 = 1e-6;
pub const REL: f64 = 1e-3;
const FLOOR: f64 = 1e-8;

pub type Check = Result<usize, String>;

fn nudge(avatar: &mut Avatar, groups: Groups, region: Region, k: usize, delta: f64) {
    let mut idx = 0;
    let model = match region {
        Region::Head => &mut avatar.head,
        Region::Torso => &mut avatar.torso,
    };
    model.visit_groups_mut(groups, &mut |_, p| {
        for v in p.iter_mut() {
            if idx == k {
                *v += delta;
            }
            idx += 1;
        }
    });
}

fn central(avatar: &Avatar, loss: &dyn Fn(&Avatar) -> f64, edit: &dyn Fn(&mut Avatar, f64)) -> f64 {
    let mut p = avatar.clone();
    edit(&mut p, EPS);
    let mut q = avatar.clone();
    edit(&mut q, -EPS);
    (loss(&p) - loss(&q)) / (2.0 * EPS)
}

fn points(n: usize, rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<f64>) {
    let x = Array2::from_shape_simple_fn((n, 3), || rng.random_range(-0.8..0.8));
    let mut d: Array2<f64> = Array2::from_shape_simple_fn((n, 3), || rng.random_range(-1.0..1.0));
    for mut row in d.rows_mut() {
        let len: f64 = row.dot(&row).sqrt();
        row /= len;
    }
    (x, d)
}

/// Point-level loss `Σ a·σ + Σ B⊙features` for one region, differentiated
/// w.r.t. the parameters in `groups` and the subject codes.
fn point_gradients(region: Region, groups: Groups, rel: f64, floor: f64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut avatar = tiny_avatar(4, 1);
    randomize(&mut avatar, 0.4, &mut rng);
    let z_exp: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (x, d) = points(6, &mut rng);
    let fd = avatar.model(region).field.feature_dim();
    let a = Array1::from_shape_simple_fn(6, || rng.random_range(-1.0..1.0));
    let b = Array2::from_shape_simple_fn((6, fd), || rng.random_range(-1.0..1.0));
    let loss = |av: &Avatar| {
        let m = av.model(region);
        let out = m.eval_points(x.view(), d.view(), &av.bundle(region, &z_exp)).unwrap();
        (&out.sigma * &a).sum() + (&out.features * &b).sum()
    };
    let m = avatar.model(region);
    let bundle = avatar.bundle(region, &z_exp);
    let (_, cache) = m.eval_points_cached(x.view(), d.view(), &bundle).map_err(|e| e.to_string())?;
    let mut grads = m.zeros_like();
    let mut codes = CodeGrads::zeros(&avatar.dims());
    m.backward_points(&cache, &bundle, &a, b.clone(), &mut grads, &mut codes);
    let mut g = Vec::new();
    grads.visit_groups(groups, &mut |_, _, v| g.extend_from_slice(v));
    let mut n = 0;
    avatar.model(region).visit_groups(groups, &mut |_, _, v| n += v.len());
    if g.len() != n {
        return Err(format!("{} gradients for {n} parameters", g.len()));
    }
    let mut checked = 0;
    for k in (0..n).step_by((n / 60).max(1)) {
        let num = central(&avatar, &loss, &|av, h| nudge(av, groups, region, k, h));
        if !close(num, g[k], rel, floor) {
            return Err(format!("{region:?} param {k}: fd {num} vs {}", g[k]));
        }
        checked += 1;
    }
    for (i, &gv) in codes.z_id.iter().enumerate().step_by(9) {
        let num = central(&avatar, &loss, &|av, h| av.codes.z_id[i] += h);
        if !close(num, gv, rel, floor) {
            return Err(format!("z_id[{i}]: fd {num} vs {gv}"));
        }
        checked += 1;
    }
    for (i, &gv) in codes.z_ill.iter().enumerate() {
        let num = central(&avatar, &loss, &|av, h| av.codes.z_ill[i] += h);
        if !close(num, gv, rel, floor) {
            return Err(format!("z_ill[{i}]: fd {num} vs {gv}"));
        }
        checked += 1;
    }
    Ok(checked)
}

pub fn deform_field() -> Check {
    deform_field_within(REL, FLOOR)
}

pub fn radiance_field() -> Check {
    radiance_field_within(REL, FLOOR)
}

pub fn deform_field_within(rel: f64, floor: f64) -> Check {
    Ok(point_gradients(Region::Head, Groups::DEFORM, rel, floor)? + point_gradients(Region::Torso, Groups::DEFORM, rel, floor)?)
}

pub fn radiance_field_within(rel: f64, floor: f64) -> Check {
    let field = Groups { deform: false, field: true, upsampler: false, codes: false };
    Ok(point_gradients(Region::Head, field, rel, floor)? + point_gradients(Region::Torso, field, rel, floor)?)
}

fn region_loss(avatar: &Avatar, frame: &FrameRecord, region: Region, r: &[f64], cfg: &RenderConfig) -> f64 {
    let b = avatar.bundle(region, &frame.z_exp);
    let pass = render_region_pass(avatar.model(region), frame, &b, cfg, None).unwrap();
    pass.output.rgb.data.iter().zip(r).map(|(a, b)| a * b).sum()
}

/// `⟨r, render⟩` through sampling, volume rendering and upsampling.
fn region_render(groups: Groups, samples: usize) -> Check {
    let ds = small_scene(2);
    let frame = &ds.frames[1];
    let cfg = RenderConfig { sample_count: 6, ..RenderConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut avatar = tiny_avatar(ds.expr_dim(), 2);
    randomize(&mut avatar, 0.3, &mut rng);
    let mut checked = 0;
    for region in [Region::Head, Region::Torso] {
        let r: Vec<f64> = (0..32 * 32 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = avatar.bundle(region, &frame.z_exp);
        let m = avatar.model(region);
        let pass = render_region_pass(m, frame, &b, &cfg, None).map_err(|e| e.to_string())?;
        let mut grads = m.zeros_like();
        let mut codes = CodeGrads::zeros(&avatar.dims());
        backward_region(m, &pass, &r, &mut grads, &mut codes).map_err(|e| e.to_string())?;
        let mut g = Vec::new();
        grads.visit_groups(groups, &mut |_, _, v| g.extend_from_slice(v));
        let loss = |av: &Avatar| region_loss(av, frame, region, &r, &cfg);
        for k in (0..g.len()).step_by((g.len() / samples).max(1)) {
            let num = central(&avatar, &loss, &|av, h| nudge(av, groups, region, k, h));
            if !close(num, g[k], REL, 1e-7) {
                return Err(format!("{region:?} param {k}: fd {num} vs {}", g[k]));
            }
            checked += 1;
        }
        for i in [0, 3, 7] {
            let num = central(&avatar, &loss, &|av, h| av.codes.z_ill[i] += h);
            if !close(num, codes.z_ill[i], REL, 1e-7) {
                return Err(format!("z_ill[{i}]: fd {num} vs {}", codes.z_ill[i]));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

pub fn upsampler() -> Check {
    region_render(Groups { deform: false, field: false, upsampler: true, codes: false }, 30)
}

pub fn full_render() -> Check {
    region_render(Groups::ALL, 40)
}

/// Photometric plus perceptual loss w.r.t. the rendered pixels.
pub fn total_loss_pixels() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = PerceptualConfig::default();
    let ex = RandomConvExtractor::new(&cfg);
    let mut a = Image::new(16, 16);
    let mut b = Image::new(16, 16);
    for v in a.data.iter_mut().chain(b.data.iter_mut()) {
        *v = rng.random_range(0.0..1.0);
    }
    let (_, g) = total_loss_grad(&a, &b, 0.5, &cfg, &ex).map_err(|e| e.to_string())?;
    let loss = |img: &Image| total_loss(img, &b, 0.5, &cfg, &ex).unwrap().total;
    let mut checked = 0;
    for k in (0..a.data.len()).step_by(13) {
        let mut p = a.clone();
        p.data[k] += EPS;
        let mut q = a.clone();
        q.data[k] -= EPS;
        let num = (loss(&p) - loss(&q)) / (2.0 * EPS);
        if !close(num, g[k], REL, FLOOR) {
            return Err(format!("pixel {k}: fd {num} vs {}", g[k]));
        }
        checked += 1;
    }
    Ok(checked)
}
