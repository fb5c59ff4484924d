//! Procedural portrait sequences with exact ground truth.
//!
//! A textured, expression-displaced superquadric head sits above a textured
//! box torso. Each frame carries the head pose and torso pose (expressed as
//! per-region cameras), the expression code, semantic masks and per-pixel
//! ray depth, all computed analytically from the generating geometry.

mod generator;
mod io;
mod validate;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Pose};
use crate::image::{Image, Mask};

pub use generator::{GeometryRender, SceneGenerator, Surface};
pub use io::{load_codes, load_dataset, save_dataset, CodesRecord, DATASET_FORMAT_VERSION};
pub use validate::{validate_dataset, Violation};

pub const MASK_HEAD: &str = "head";
pub const MASK_HAIR: &str = "hair";
pub const MASK_FACE: &str = "face";
pub const MASK_TORSO: &str = "torso";
pub const MASK_BACKGROUND: &str = "background";
pub const MASK_NAMES: [&str; 5] = [MASK_HEAD, MASK_HAIR, MASK_FACE, MASK_TORSO, MASK_BACKGROUND];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub n_frames: usize,
    pub image_size: usize,
    pub expr_dim: usize,
    pub motion_seed: u64,
    pub head_texture_seed: u64,
    pub torso_texture_seed: u64,
    pub background_color: [f64; 3],
    /// Scales pose and expression motion; 0 gives a static scene.
    #[serde(default = "one")]
    pub motion_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_frames: 20,
            image_size: 64,
            expr_dim: 8,
            motion_seed: 0,
            head_texture_seed: 1,
            torso_texture_seed: 2,
            background_color: [0.92, 0.92, 0.95],
            motion_scale: 1.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_frames < 2 {
            errs.push(format!("n_frames must be >= 2 (got {})", self.n_frames));
        }
        if self.image_size < 32 || !self.image_size.is_power_of_two() {
            errs.push(format!(
                "image_size must be a power of two >= 32 (got {})",
                self.image_size
            ));
        }
        if self.expr_dim < 1 {
            errs.push("expr_dim must be >= 1".to_string());
        }
        if !self
            .background_color
            .iter()
            .all(|c| c.is_finite() && (0.0..=1.0).contains(c))
        {
            errs.push(format!(
                "background_color must lie in [0,1]^3 (got {:?})",
                self.background_color
            ));
        }
        if !self.motion_scale.is_finite() || self.motion_scale < 0.0 {
            errs.push(format!(
                "motion_scale must be finite and >= 0 (got {})",
                self.motion_scale
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(errs))
        }
    }
}

/// Named binary masks of one frame.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Masks {
    map: BTreeMap<String, Mask>,
}

impl Masks {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mask: Mask) {
        self.map.insert(name.into(), mask);
    }

    pub fn get(&self, name: &str) -> Option<&Mask> {
        self.map.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Mask> {
        self.get(name).ok_or_else(|| Error::MissingMask(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mask)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    /// Pixels rendered by the head model: head ∪ hair ∪ face.
    pub fn head_region(&self) -> Result<Mask> {
        let head = self.require(MASK_HEAD)?;
        Ok(head
            .union(self.require(MASK_HAIR)?)
            .union(self.require(MASK_FACE)?))
    }

    pub fn torso_region(&self) -> Result<Mask> {
        self.require(MASK_TORSO).cloned()
    }
}

/// One frame of a portrait sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    /// Camera expressed in the head's canonical frame (head pose as extrinsics).
    pub camera: Camera,
    /// Camera expressed in the torso's frame.
    pub torso_camera: Camera,
    pub head_pose: Pose,
    pub torso_pose: Pose,
    pub z_exp: Vec<f64>,
    pub image_gt: Image,
    pub edit_target: Image,
    pub masks: Masks,
    /// Ray depth per pixel (0 on background).
    pub guide_depth: Option<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    /// Fixed world camera; per-region cameras derive from it and the poses.
    pub world_camera: Camera,
    pub frames: Vec<FrameRecord>,
}

impl Dataset {
    pub fn expr_dim(&self) -> usize {
        self.spec.expr_dim
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn background(&self) -> [f64; 3] {
        self.spec.background_color
    }

    /// Restores every edit target to its original image.
    pub fn reset_edits(&mut self) {
        for f in &mut self.frames {
            f.edit_target = f.image_gt.clone();
        }
    }
}

/// Generates a deterministic sequence from `spec`.
pub fn synth_sequence(spec: &SceneSpec) -> Result<Dataset> {
    spec.validate()?;
    let generator = SceneGenerator::new(spec.clone())?;
    let frames = (0..spec.n_frames)
        .map(|i| {
            generator.frame(
                i,
                generator.z_exp_at(i),
                generator.head_pose_at(i),
                generator.torso_pose_at(i),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        world_camera: generator.world_camera(),
        frames,
    })
}
