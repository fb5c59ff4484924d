//! Re-rendering an avatar under another sequence's expressions and poses.

use crate::error::{Error, Result};
use crate::fields::Avatar;
use crate::geometry::{Pose, Vec3};
use crate::image::Image;
use crate::renderer::{render_frame, RenderConfig};
use crate::scene_synth::{CodesRecord, SceneGenerator};

pub const RIGID_TOLERANCE: f64 = 1e-6;

/// Renders one frame per reference entry. Masks, cameras and guide depth
/// come from `generator` evaluated at the substituted codes; identity and
/// illumination codes and all weights are those of `avatar`.
pub fn transfer(
    avatar: &Avatar,
    generator: &SceneGenerator,
    render: &RenderConfig,
    reference: &[CodesRecord],
) -> Result<Vec<Image>> {
    if reference.is_empty() {
        return Err(Error::Empty("reference sequence"));
    }
    let expr = avatar.dims().expr;
    reference
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if r.z_exp.len() != expr {
                return Err(Error::DimMismatch {
                    what: "reference z_exp",
                    expected: expr,
                    got: r.z_exp.len(),
                });
            }
            let frame = generator.frame(i, r.z_exp.clone(), r.head_pose, r.torso_pose)?;
            Ok(render_frame(&frame, avatar, generator.spec().background_color, render)?.rgb)
        })
        .collect()
}

/// The driving signals of frames `0..n` of a generated subject.
pub fn sequence_codes(generator: &SceneGenerator, n: usize) -> Vec<CodesRecord> {
    (0..n)
        .map(|i| CodesRecord {
            z_exp: generator.z_exp_at(i),
            head_pose: generator.head_pose_at(i),
            torso_pose: generator.torso_pose_at(i),
        })
        .collect()
}

/// Applies the rigid neck transform `(R, t)` on top of `base_pose`
/// (`p ↦ R(base(p)) + t`).
pub fn torso_camera_refine(neck_rotation: [[f64; 3]; 3], neck_translation: Vec3, base_pose: &Pose) -> Result<Pose> {
    let neck = Pose {
        rotation: neck_rotation,
        translation: neck_translation,
    };
    neck.check_rigid(RIGID_TOLERANCE)?;
    base_pose.check_rigid(RIGID_TOLERANCE)?;
    Ok(neck.compose(base_pose))
}

/// Adjusts every entry's torso pose by the matching neck transform.
pub fn refine_reference(reference: &[CodesRecord], neck: &[Pose]) -> Result<Vec<CodesRecord>> {
    if neck.len() != reference.len() {
        return Err(Error::DimMismatch {
            what: "neck transforms",
            expected: reference.len(),
            got: neck.len(),
        });
    }
    reference
        .iter()
        .zip(neck)
        .map(|(r, n)| {
            Ok(CodesRecord {
                torso_pose: torso_camera_refine(n.rotation, n.translation, &r.torso_pose)?,
                ..r.clone()
            })
        })
        .collect()
}
