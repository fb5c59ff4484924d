use std::fmt;

use super::{Dataset, MASK_BACKGROUND, MASK_HAIR, MASK_HEAD, MASK_FACE, MASK_TORSO};

/// One broken dataset invariant.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub frame: Option<usize>,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.frame {
            Some(i) => write!(f, "frame {i}: {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

/// Lists every invariant violation; an empty report means the dataset is valid.
pub fn validate_dataset(dataset: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |frame: Option<usize>, field: &str, message: String| {
        out.push(Violation {
            frame,
            field: field.to_string(),
            message,
        })
    };
    if let Err(e) = dataset.spec.validate() {
        push(None, "spec", e.to_string());
    }
    if dataset.frames.len() != dataset.spec.n_frames {
        push(
            None,
            "frames",
            format!(
                "{} frames present, spec declares {}",
                dataset.frames.len(),
                dataset.spec.n_frames
            ),
        );
    }
    let size = dataset.spec.image_size;
    let npx = size * size;

    for (i, f) in dataset.frames.iter().enumerate() {
        let fr = Some(i);
        if f.z_exp.len() != dataset.spec.expr_dim {
            push(
                fr,
                "z_exp",
                format!("{} entries, expected {}", f.z_exp.len(), dataset.spec.expr_dim),
            );
        }
        if let Some(k) = f.z_exp.iter().position(|v| !v.is_finite()) {
            push(fr, "z_exp", format!("non-finite entry at index {k}"));
        }
        for (name, img) in [("image_gt", &f.image_gt), ("edit_target", &f.edit_target)] {
            if img.width != size || img.height != size {
                push(
                    fr,
                    name,
                    format!("{}x{}, expected {size}x{size}", img.width, img.height),
                );
            } else if !img.is_finite() {
                push(fr, name, "non-finite pixel values".into());
            } else if img.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                push(fr, name, "values outside [0,1]".into());
            }
        }

        let mut sized = true;
        for name in [MASK_HEAD, MASK_HAIR, MASK_FACE, MASK_TORSO, MASK_BACKGROUND] {
            match f.masks.get(name) {
                None => {
                    push(fr, "masks", format!("missing mask `{name}`"));
                    sized = false;
                }
                Some(m) if m.width != size || m.height != size => {
                    push(fr, "masks", format!("mask `{name}` is {}x{}", m.width, m.height));
                    sized = false;
                }
                _ => {}
            }
        }
        if !sized {
            continue;
        }
        let masks: Vec<(&str, &[bool])> = f.masks.iter().map(|(n, m)| (n, m.data.as_slice())).collect();
        let mut overlaps = std::collections::BTreeMap::<(String, String), usize>::new();
        let mut gaps = 0usize;
        for p in 0..npx {
            let on: Vec<&str> = masks.iter().filter(|(_, d)| d[p]).map(|(n, _)| *n).collect();
            if on.is_empty() {
                gaps += 1;
            }
            for a in 0..on.len() {
                for b in a + 1..on.len() {
                    *overlaps.entry((on[a].to_string(), on[b].to_string())).or_default() += 1;
                }
            }
        }
        for ((a, b), n) in overlaps {
            push(
                fr,
                "masks",
                format!("masks `{a}` and `{b}` are not disjoint ({n} shared pixels)"),
            );
        }
        if gaps > 0 {
            push(fr, "masks", format!("{gaps} pixels covered by no mask"));
        }

        if let Some(depth) = &f.guide_depth {
            if depth.len() != npx {
                push(fr, "guide_depth", format!("{} entries, expected {npx}", depth.len()));
            } else {
                if depth.iter().any(|v| !v.is_finite()) {
                    push(fr, "guide_depth", "non-finite depth".into());
                }
                let fg = f.masks.get(MASK_BACKGROUND).map(|m| m.complement());
                if let Some(fg) = fg {
                    let bad = (0..npx).filter(|&p| fg.data[p] && !(depth[p] > 0.0)).count();
                    if bad > 0 {
                        push(
                            fr,
                            "guide_depth",
                            format!("{bad} foreground pixels without positive depth"),
                        );
                    }
                }
            }
        }
        let pose_ok = f.head_pose.check_rigid(1e-6).is_ok() && f.torso_pose.check_rigid(1e-6).is_ok();
        if !pose_ok {
            push(fr, "pose", "not a rigid transform".into());
        }
    }
    out
}
