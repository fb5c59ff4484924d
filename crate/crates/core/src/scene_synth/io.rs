//! Dataset directory format.
//!
//! ```text
//! manifest.json            spec, expr_dim, intrinsics, world camera, mask names
//! frames/NNNNN.png         ground-truth RGB, 8-bit
//! masks/NNNNN_<name>.png   binary masks
//! depth/NNNNN.bin          row-major little-endian f32 ray depth
//! codes/NNNNN.json         z_exp, head pose, torso pose
//! edits/NNNNN.bin          row-major little-endian f64 RGB edit target
//!                          (only when it differs from the ground truth)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, FrameRecord, Masks, SceneSpec};
use crate::error::{Error, Result};
use crate::geometry::{Camera, Intrinsics, Pose};
use crate::image::{Image, Mask};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    spec: SceneSpec,
    expr_dim: usize,
    intrinsics: Intrinsics,
    world_camera: Camera,
    n_frames: usize,
    mask_names: Vec<String>,
}

/// Per-frame driving signals, shared with reference sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodesRecord {
    pub z_exp: Vec<f64>,
    pub head_pose: Pose,
    pub torso_pose: Pose,
}

fn frame_path(root: &Path, dir: &str, i: usize, suffix: &str) -> PathBuf {
    root.join(dir).join(format!("{i:05}{suffix}"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    for dir in ["frames", "masks", "depth", "codes", "edits"] {
        let p = root.join(dir);
        fs::create_dir_all(&p).map_err(|e| Error::io(format!("create {}", p.display()), e))?;
    }
    let mask_names: Vec<String> = dataset
        .frames
        .first()
        .map(|f| f.masks.names().map(str::to_string).collect())
        .unwrap_or_default();
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        spec: dataset.spec.clone(),
        expr_dim: dataset.spec.expr_dim,
        intrinsics: dataset.world_camera.intrinsics,
        world_camera: dataset.world_camera,
        n_frames: dataset.frames.len(),
        mask_names,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
        context: "manifest".into(),
        source: e,
    })?;
    write_file(&root.join("manifest.json"), text.as_bytes())?;

    for (i, f) in dataset.frames.iter().enumerate() {
        f.image_gt.save_png(&frame_path(root, "frames", i, ".png"))?;
        for (name, m) in f.masks.iter() {
            m.save_png(&frame_path(root, "masks", i, &format!("_{name}.png")))?;
        }
        if let Some(depth) = &f.guide_depth {
            let bytes: Vec<u8> = depth.iter().flat_map(|v| v.to_le_bytes()).collect();
            write_file(&frame_path(root, "depth", i, ".bin"), &bytes)?;
        }
        let codes = CodesRecord {
            z_exp: f.z_exp.clone(),
            head_pose: f.head_pose,
            torso_pose: f.torso_pose,
        };
        let text = serde_json::to_string_pretty(&codes).map_err(|e| Error::Json {
            context: format!("codes of frame {i}"),
            source: e,
        })?;
        write_file(&frame_path(root, "codes", i, ".json"), text.as_bytes())?;
        let edit = frame_path(root, "edits", i, ".bin");
        if f.edit_target != f.image_gt {
            let bytes: Vec<u8> = f.edit_target.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            write_file(&edit, &bytes)?;
        } else if edit.exists() {
            fs::remove_file(&edit).map_err(|e| Error::io(format!("remove {}", edit.display()), e))?;
        }
    }
    Ok(())
}

fn read_required(path: &Path, frame: usize) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFrameFile {
            frame,
            path: path.to_path_buf(),
        });
    }
    fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))
}

fn check_size(frame: usize, what: &str, spec: &SceneSpec, w: usize, h: usize) -> Result<()> {
    let s = spec.image_size;
    if w != s || h != s {
        return Err(Error::SizeMismatch {
            frame,
            what: what.to_string(),
            want_w: s,
            want_h: s,
            got_w: w,
            got_h: h,
        });
    }
    Ok(())
}

/// Reads per-frame codes from a `codes/` directory (dataset or reference sequence).
pub fn load_codes(root: &Path, frame: usize) -> Result<CodesRecord> {
    let path = frame_path(root, "codes", frame, ".json");
    let bytes = read_required(&path, frame)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::MalformedManifest {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::MalformedManifest {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    let malformed = |reason: String| Error::MalformedManifest {
        path: manifest_path.clone(),
        reason,
    };
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(malformed(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    if manifest.expr_dim != manifest.spec.expr_dim {
        return Err(malformed(format!(
            "expr_dim {} disagrees with spec.expr_dim {}",
            manifest.expr_dim, manifest.spec.expr_dim
        )));
    }
    if manifest.n_frames != manifest.spec.n_frames {
        return Err(malformed(format!(
            "n_frames {} disagrees with spec.n_frames {}",
            manifest.n_frames, manifest.spec.n_frames
        )));
    }
    manifest.spec.validate()?;
    let spec = manifest.spec;
    let world_camera = manifest.world_camera;
    let npx = spec.image_size * spec.image_size;

    let mut frames = Vec::with_capacity(manifest.n_frames);
    for i in 0..manifest.n_frames {
        let img_path = frame_path(root, "frames", i, ".png");
        if !img_path.exists() {
            return Err(Error::MissingFrameFile {
                frame: i,
                path: img_path,
            });
        }
        let image_gt = Image::load_png(&img_path)?;
        check_size(i, "image", &spec, image_gt.width, image_gt.height)?;

        let mut masks = Masks::new();
        for name in &manifest.mask_names {
            let p = frame_path(root, "masks", i, &format!("_{name}.png"));
            if !p.exists() {
                return Err(Error::MissingFrameFile { frame: i, path: p });
            }
            let m = Mask::load_png(&p)?;
            check_size(i, &format!("mask `{name}`"), &spec, m.width, m.height)?;
            masks.insert(name.clone(), m);
        }

        let codes = load_codes(root, i)?;
        if codes.z_exp.len() != spec.expr_dim {
            return Err(Error::FrameDimMismatch {
                frame: i,
                field: "z_exp",
                expected: spec.expr_dim,
                got: codes.z_exp.len(),
            });
        }

        let depth_path = frame_path(root, "depth", i, ".bin");
        let guide_depth = if depth_path.exists() {
            let bytes = read_required(&depth_path, i)?;
            if bytes.len() != npx * 4 {
                return Err(Error::FrameDimMismatch {
                    frame: i,
                    field: "guide_depth",
                    expected: npx,
                    got: bytes.len() / 4,
                });
            }
            Some(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            )
        } else {
            None
        };

        let edit_path = frame_path(root, "edits", i, ".bin");
        let edit_target = if edit_path.exists() {
            let bytes = read_required(&edit_path, i)?;
            if bytes.len() != npx * 3 * 8 {
                return Err(Error::FrameDimMismatch {
                    frame: i,
                    field: "edit_target",
                    expected: npx * 3,
                    got: bytes.len() / 8,
                });
            }
            Image {
                width: spec.image_size,
                height: spec.image_size,
                data: bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            }
        } else {
            image_gt.clone()
        };

        frames.push(FrameRecord {
            index: i,
            camera: world_camera.in_frame(&codes.head_pose.inverse()),
            torso_camera: world_camera.in_frame(&codes.torso_pose.inverse()),
            head_pose: codes.head_pose,
            torso_pose: codes.torso_pose,
            z_exp: codes.z_exp,
            image_gt,
            edit_target,
            masks,
            guide_depth,
        });
    }
    Ok(Dataset {
        spec,
        world_camera,
        frames,
    })
}
