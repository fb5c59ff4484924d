use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    FrameRecord, Masks, SceneSpec, MASK_BACKGROUND, MASK_FACE, MASK_HAIR, MASK_HEAD, MASK_TORSO,
};
use crate::error::Result;
use crate::geometry::{add, dot, norm, normalize, scale, sub, Camera, Intrinsics, Pose, Vec3};
use crate::image::{from_u8, to_u8, Image, Mask};

const HEAD_RADII: Vec3 = [0.34, 0.44, 0.38];
const HEAD_EXPONENT: f64 = 2.6;
const HEAD_CENTER: Vec3 = [0.0, 0.18, 0.0];
const TORSO_HALF: Vec3 = [0.56, 0.34, 0.24];
const TORSO_CENTER: Vec3 = [0.0, -0.58, -0.05];
const CAMERA_DISTANCE: f64 = 3.0;
const HAIR_LINE: f64 = 0.40;
const FACE_FRONT: f64 = 0.55;
const N_BASIS: usize = 8;
const MARCH_STEP: f64 = 0.004;

/// Which generating surface a ray hit first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    Head,
    Hair,
    Face,
    Torso,
}

/// Analytic render of the generating geometry for one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryRender {
    pub image: Image,
    pub masks: Masks,
    pub depth: Vec<f32>,
}

#[derive(Clone, Debug)]
struct Sinusoid {
    amp: f64,
    omega: f64,
    phase: f64,
}

impl Sinusoid {
    fn draw(rng: &mut ChaCha8Rng, amp: f64, omega: (f64, f64)) -> Self {
        Self {
            amp: amp * rng.random_range(0.5..1.0),
            omega: rng.random_range(omega.0..omega.1),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    fn at(&self, t: f64) -> f64 {
        self.amp * (self.omega * t + self.phase).sin()
    }
}

/// Deterministic generator of geometry, texture and motion for one subject.
#[derive(Clone, Debug)]
pub struct SceneGenerator {
    spec: SceneSpec,
    /// `N_BASIS × expr_dim` map from expression code to radial displacement weights.
    expr_map: Vec<f64>,
    expr_curves: Vec<[Sinusoid; 2]>,
    head_curves: [Sinusoid; 6],
    torso_curves: [Sinusoid; 3],
    skin: Vec3,
    hair: Vec3,
    hair_phase: f64,
    skin_phase: f64,
    shirt: Vec3,
    shirt_phase: [f64; 2],
}

impl SceneGenerator {
    pub fn new(spec: SceneSpec) -> Result<Self> {
        spec.validate()?;
        let mut motion = ChaCha8Rng::seed_from_u64(spec.motion_seed);
        let expr_curves = (0..spec.expr_dim)
            .map(|_| {
                [
                    Sinusoid::draw(&mut motion, 0.5, (0.08, 0.25)),
                    Sinusoid::draw(&mut motion, 0.3, (0.25, 0.45)),
                ]
            })
            .collect();
        let head_curves = [
            Sinusoid::draw(&mut motion, 0.07, (0.05, 0.2)),
            Sinusoid::draw(&mut motion, 0.15, (0.05, 0.2)),
            Sinusoid::draw(&mut motion, 0.05, (0.05, 0.2)),
            Sinusoid::draw(&mut motion, 0.03, (0.05, 0.2)),
            Sinusoid::draw(&mut motion, 0.02, (0.05, 0.2)),
            Sinusoid::draw(&mut motion, 0.02, (0.05, 0.2)),
        ];
        let torso_curves = [
            Sinusoid::draw(&mut motion, 0.05, (0.04, 0.15)),
            Sinusoid::draw(&mut motion, 0.025, (0.04, 0.15)),
            Sinusoid::draw(&mut motion, 0.01, (0.04, 0.15)),
        ];

        let mut head_rng = ChaCha8Rng::seed_from_u64(spec.head_texture_seed);
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        let gain = 0.06 / (spec.expr_dim as f64).sqrt();
        let expr_map = (0..N_BASIS * spec.expr_dim)
            .map(|_| gain * n.sample(&mut head_rng))
            .collect();
        let jitter = |rng: &mut ChaCha8Rng, base: Vec3, amt: f64| -> Vec3 {
            [
                (base[0] + rng.random_range(-amt..amt)).clamp(0.0, 1.0),
                (base[1] + rng.random_range(-amt..amt)).clamp(0.0, 1.0),
                (base[2] + rng.random_range(-amt..amt)).clamp(0.0, 1.0),
            ]
        };
        let skin = jitter(&mut head_rng, [0.86, 0.66, 0.54], 0.05);
        let hair = jitter(&mut head_rng, [0.30, 0.18, 0.10], 0.05);
        let hair_phase = head_rng.random_range(0.0..std::f64::consts::TAU);
        let skin_phase = head_rng.random_range(0.0..std::f64::consts::TAU);

        let mut torso_rng = ChaCha8Rng::seed_from_u64(spec.torso_texture_seed);
        let shirt = jitter(&mut torso_rng, [0.25, 0.45, 0.70], 0.15);
        let shirt_phase = [
            torso_rng.random_range(0.0..std::f64::consts::TAU),
            torso_rng.random_range(0.0..std::f64::consts::TAU),
        ];

        Ok(Self {
            spec,
            expr_map,
            expr_curves,
            head_curves,
            torso_curves,
            skin,
            hair,
            hair_phase,
            skin_phase,
            shirt,
            shirt_phase,
        })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let s = self.spec.image_size as f64;
        // Half-extent of 1.0 scene unit at the camera distance.
        let f = 0.5 * s * CAMERA_DISTANCE;
        Intrinsics {
            width: self.spec.image_size,
            height: self.spec.image_size,
            fx: f,
            fy: f,
            cx: 0.5 * s,
            cy: 0.5 * s,
        }
    }

    /// Camera at `(0, 0, 3)` looking down −z with +y up in the world.
    pub fn world_camera(&self) -> Camera {
        Camera {
            pose: Pose {
                rotation: [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]],
                translation: [0.0, 0.0, CAMERA_DISTANCE],
            },
            intrinsics: self.intrinsics(),
        }
    }

    pub fn z_exp_at(&self, frame: usize) -> Vec<f64> {
        let t = frame as f64;
        let s = self.spec.motion_scale;
        self.expr_curves
            .iter()
            .map(|c| s * (c[0].at(t) + c[1].at(t)))
            .collect()
    }

    /// World-from-head transform.
    pub fn head_pose_at(&self, frame: usize) -> Pose {
        let t = frame as f64;
        let s = self.spec.motion_scale;
        let c = &self.head_curves;
        Pose::from_euler(
            s * c[0].at(t),
            s * c[1].at(t),
            s * c[2].at(t),
            add(HEAD_CENTER, [s * c[3].at(t), s * c[4].at(t), s * c[5].at(t)]),
        )
    }

    /// World-from-torso transform.
    pub fn torso_pose_at(&self, frame: usize) -> Pose {
        let t = frame as f64;
        let s = self.spec.motion_scale;
        let c = &self.torso_curves;
        Pose::from_euler(
            0.0,
            s * c[0].at(t),
            0.0,
            add(TORSO_CENTER, [s * c[1].at(t), s * c[2].at(t), 0.0]),
        )
    }

    fn displacement_weights(&self, z_exp: &[f64]) -> [f64; N_BASIS] {
        let d = self.spec.expr_dim;
        let mut e = [0.0; N_BASIS];
        for (k, ek) in e.iter_mut().enumerate() {
            *ek = (0..d).map(|j| self.expr_map[k * d + j] * z_exp[j]).sum();
        }
        e
    }

    /// Head radius along unit direction `u` under displacement weights `e`.
    fn head_radius(u: Vec3, e: &[f64; N_BASIS]) -> f64 {
        let n = HEAD_EXPONENT;
        let sq = ((u[0] / HEAD_RADII[0]).abs().powf(n)
            + (u[1] / HEAD_RADII[1]).abs().powf(n)
            + (u[2] / HEAD_RADII[2]).abs().powf(n))
        .powf(-1.0 / n);
        let basis = head_basis(u);
        let disp: f64 = basis.iter().zip(e).map(|(b, w)| b * w).sum();
        sq * (1.0 + disp)
    }

    /// Signed radial residual `|p| − r(p̂)` of the head surface (negative inside).
    pub fn head_residual(&self, p: Vec3, z_exp: &[f64]) -> f64 {
        let e = self.displacement_weights(z_exp);
        head_residual(p, &e)
    }

    /// Chebyshev residual of the torso box (negative inside).
    pub fn torso_residual(p: Vec3) -> f64 {
        (0..3)
            .map(|i| p[i].abs() - TORSO_HALF[i])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn classify_head(u: Vec3) -> Surface {
        if u[1] > HAIR_LINE {
            Surface::Hair
        } else if u[2] > FACE_FRONT {
            Surface::Face
        } else {
            Surface::Head
        }
    }

    fn head_albedo(&self, u: Vec3, region: Surface, e: &[f64; N_BASIS]) -> Vec3 {
        let az = u[0].atan2(u[2]);
        match region {
            Surface::Hair => scale(self.hair, 1.0 + 0.15 * (7.0 * az + self.hair_phase).sin()),
            Surface::Face => {
                let mut c = scale(self.skin, 1.0 + 0.04 * (3.0 * u[0] + self.skin_phase).sin());
                let eye = |cx: f64| {
                    let d = sub(u, normalize([cx, 0.12, 0.93]));
                    (-dot(d, d) / 0.012).exp()
                };
                let eyes = eye(-0.33) + eye(0.33);
                c = lerp(c, [0.12, 0.10, 0.10], eyes.min(1.0));
                let m = sub(u, normalize([0.0, -0.42, 0.9]));
                let openness = (0.5 + 6.0 * e[N_BASIS - 1]).clamp(0.0, 1.0);
                let mouth = (-dot(m, m) / 0.015).exp() * (0.35 + 0.65 * openness);
                lerp(c, [0.62, 0.18, 0.20], mouth.min(1.0))
            }
            _ => scale(self.skin, 0.9 + 0.05 * (2.0 * u[1] + self.skin_phase).cos()),
        }
    }

    fn torso_albedo(&self, p: Vec3, normal: Vec3) -> Vec3 {
        let front = normal[2] > 0.5;
        let pattern = 1.0
            + 0.12
                * (5.0 * p[0] + self.shirt_phase[0]).sin()
                * (4.0 * p[1] + self.shirt_phase[1]).cos();
        let mut c = scale(self.shirt, pattern);
        if front && p[1] > TORSO_HALF[1] - 0.08 {
            c = scale(c, 0.55);
        }
        if !front {
            c = scale(c, 0.85);
        }
        c
    }

    fn intersect_head(&self, origin: Vec3, dir: Vec3, e: &[f64; N_BASIS]) -> Option<f64> {
        let bound = HEAD_RADII.iter().cloned().fold(0.0, f64::max) * 1.35;
        let b = dot(origin, dir);
        let c = dot(origin, origin) - bound * bound;
        let disc = b * b - c;
        if disc <= 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        let (t0, t1) = ((-b - sq).max(0.0), -b + sq);
        if t1 <= t0 {
            return None;
        }
        let at = |t: f64| head_residual(add(origin, scale(dir, t)), e);
        let steps = ((t1 - t0) / MARCH_STEP).ceil() as usize;
        let mut prev_t = t0;
        if at(t0) < 0.0 {
            return Some(t0);
        }
        for k in 1..=steps {
            let t = (t0 + k as f64 * MARCH_STEP).min(t1);
            let v = at(t);
            if v < 0.0 {
                let (mut lo, mut hi) = (prev_t, t);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if at(mid) < 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                return Some(0.5 * (lo + hi));
            }
            prev_t = t;
        }
        None
    }

    fn intersect_torso(origin: Vec3, dir: Vec3) -> Option<(f64, Vec3)> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let mut axis = 0;
        let mut sign = 1.0;
        for i in 0..3 {
            if dir[i].abs() < 1e-15 {
                if origin[i].abs() > TORSO_HALF[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let mut ta = (-TORSO_HALF[i] - origin[i]) * inv;
            let mut tb = (TORSO_HALF[i] - origin[i]) * inv;
            let mut s = -1.0;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
                s = 1.0;
            }
            if ta > t_near {
                t_near = ta;
                axis = i;
                sign = s;
            }
            t_far = t_far.min(tb);
        }
        if t_near > t_far || t_near <= 0.0 {
            return None;
        }
        let mut n = [0.0; 3];
        n[axis] = sign;
        Some((t_near, n))
    }

    /// Renders the generating geometry at one configuration.
    pub fn render_geometry(&self, z_exp: &[f64], head_pose: &Pose, torso_pose: &Pose) -> GeometryRender {
        let size = self.spec.image_size;
        let cam = self.world_camera();
        let head_cam = cam.in_frame(&head_pose.inverse());
        let torso_cam = cam.in_frame(&torso_pose.inverse());
        let e = self.displacement_weights(z_exp);
        let light = normalize([0.35, 0.55, 0.75]);
        let bg = self.spec.background_color;

        let mut image = Image::new(size, size);
        let mut depth = vec![0.0f32; size * size];
        let mut m_head = Mask::new(size, size);
        let mut m_hair = Mask::new(size, size);
        let mut m_face = Mask::new(size, size);
        let mut m_torso = Mask::new(size, size);
        let mut m_bg = Mask::new(size, size);

        for y in 0..size {
            for x in 0..size {
                let p = y * size + x;
                let hd = head_cam.ray_dir(x, y);
                let td = torso_cam.ray_dir(x, y);
                let head_hit = self.intersect_head(head_cam.origin(), hd, &e);
                let torso_hit = Self::intersect_torso(torso_cam.origin(), td);
                let head_first = match (head_hit, torso_hit) {
                    (Some(th), Some((tt, _))) => th <= tt,
                    (Some(_), None) => true,
                    _ => false,
                };
                let rgb = if head_first {
                    let t = head_hit.expect("head hit");
                    let q = add(head_cam.origin(), scale(hd, t));
                    let u = normalize(q);
                    let region = Self::classify_head(u);
                    let n = head_normal(q, &e);
                    let shade = 0.5 + 0.5 * dot(n, light).max(0.0);
                    depth[p] = t as f32;
                    match region {
                        Surface::Hair => m_hair.data[p] = true,
                        Surface::Face => m_face.data[p] = true,
                        _ => m_head.data[p] = true,
                    }
                    scale(self.head_albedo(u, region, &e), shade)
                } else if let Some((t, n)) = torso_hit {
                    let q = add(torso_cam.origin(), scale(td, t));
                    let shade = 0.5 + 0.5 * dot(n, light).max(0.0);
                    depth[p] = t as f32;
                    m_torso.data[p] = true;
                    scale(self.torso_albedo(q, n), shade)
                } else {
                    m_bg.data[p] = true;
                    bg
                };
                image.set_pixel(
                    x,
                    y,
                    [
                        from_u8(to_u8(rgb[0])),
                        from_u8(to_u8(rgb[1])),
                        from_u8(to_u8(rgb[2])),
                    ],
                );
            }
        }

        let mut masks = Masks::new();
        masks.insert(MASK_HEAD, m_head);
        masks.insert(MASK_HAIR, m_hair);
        masks.insert(MASK_FACE, m_face);
        masks.insert(MASK_TORSO, m_torso);
        masks.insert(MASK_BACKGROUND, m_bg);
        GeometryRender {
            image,
            masks,
            depth,
        }
    }

    /// Builds a complete frame record for the given configuration.
    pub fn frame(&self, index: usize, z_exp: Vec<f64>, head_pose: Pose, torso_pose: Pose) -> Result<FrameRecord> {
        if z_exp.len() != self.spec.expr_dim {
            return Err(crate::error::Error::DimMismatch {
                what: "z_exp",
                expected: self.spec.expr_dim,
                got: z_exp.len(),
            });
        }
        let g = self.render_geometry(&z_exp, &head_pose, &torso_pose);
        let cam = self.world_camera();
        Ok(FrameRecord {
            index,
            camera: cam.in_frame(&head_pose.inverse()),
            torso_camera: cam.in_frame(&torso_pose.inverse()),
            head_pose,
            torso_pose,
            z_exp,
            edit_target: g.image.clone(),
            image_gt: g.image,
            masks: g.masks,
            guide_depth: Some(g.depth),
        })
    }
}

fn head_basis(u: Vec3) -> [f64; N_BASIS] {
    let m = sub(u, normalize([0.0, -0.42, 0.9]));
    [
        u[0],
        u[1],
        u[2],
        u[0] * u[1],
        u[1] * u[2],
        u[0] * u[2],
        u[0] * u[0] - u[1] * u[1],
        -1.5 * (-dot(m, m) / 0.03).exp(),
    ]
}

fn head_residual(p: Vec3, e: &[f64; N_BASIS]) -> f64 {
    let r = norm(p);
    if r == 0.0 {
        return -1.0;
    }
    r - SceneGenerator::head_radius(scale(p, 1.0 / r), e)
}

fn head_normal(p: Vec3, e: &[f64; N_BASIS]) -> Vec3 {
    let h = 1e-5;
    let mut g = [0.0; 3];
    for i in 0..3 {
        let mut a = p;
        let mut b = p;
        a[i] += h;
        b[i] -= h;
        g[i] = (head_residual(a, e) - head_residual(b, e)) / (2.0 * h);
    }
    normalize(g)
}

fn lerp(a: Vec3, b: Vec3, t: f64) -> Vec3 {
    add(scale(a, 1.0 - t), scale(b, t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen() -> SceneGenerator {
        SceneGenerator::new(SceneSpec {
            image_size: 64,
            ..SceneSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn masks_partition_every_pixel() {
        let g = gen();
        for i in [0, 5, 13] {
            let r = g.render_geometry(&g.z_exp_at(i), &g.head_pose_at(i), &g.torso_pose_at(i));
            for p in 0..64 * 64 {
                let hits: usize = r.masks.iter().filter(|(_, m)| m.data[p]).count();
                assert_eq!(hits, 1, "pixel {p} of frame {i}");
            }
            for name in super::super::MASK_NAMES {
                assert!(r.masks.get(name).unwrap().count() > 0, "{name} empty");
            }
        }
    }

    #[test]
    fn guide_depth_lies_on_the_generating_surface() {
        let g = gen();
        let (z, hp, tp) = (g.z_exp_at(3), g.head_pose_at(3), g.torso_pose_at(3));
        let r = g.render_geometry(&z, &hp, &tp);
        let cam = g.world_camera();
        let head_cam = cam.in_frame(&hp.inverse());
        let torso_cam = cam.in_frame(&tp.inverse());
        let head = r.masks.head_region().unwrap();
        let torso = r.masks.torso_region().unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let p = y * 64 + x;
                let t = r.depth[p] as f64;
                if head.data[p] {
                    let q = add(head_cam.origin(), scale(head_cam.ray_dir(x, y), t));
                    assert!(g.head_residual(q, &z).abs() < 1e-5);
                } else if torso.data[p] {
                    let q = add(torso_cam.origin(), scale(torso_cam.ray_dir(x, y), t));
                    assert!(SceneGenerator::torso_residual(q).abs() < 1e-5);
                } else {
                    assert_eq!(r.depth[p], 0.0);
                }
            }
        }
    }

    #[test]
    fn expression_changes_head_silhouette_smoothly() {
        let g = gen();
        let hp = g.head_pose_at(0);
        let tp = g.torso_pose_at(0);
        let z0 = vec![0.0; 8];
        let mut z1 = z0.clone();
        z1[0] = 1.0;
        let a = g.render_geometry(&z0, &hp, &tp);
        let b = g.render_geometry(&z1, &hp, &tp);
        assert_ne!(a.depth, b.depth);
        // Small code perturbation moves the surface only slightly.
        let mut zs = z0.clone();
        zs[0] = 1e-3;
        let u = normalize([0.2, 0.1, 0.9]);
        let r0 = SceneGenerator::head_radius(u, &g.displacement_weights(&z0));
        let r1 = SceneGenerator::head_radius(u, &g.displacement_weights(&zs));
        assert!((r1 - r0).abs() < 1e-3 * 0.1);
    }
}
