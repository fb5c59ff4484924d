//! Iterative dataset update: alternate between re-editing one stored frame
//! with the instruction editor and optimizing the avatar on the current
//! edit targets.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::editor::{default_lexicon, ddim_edit, Denoiser, EditConfig, FrameContext, LatentCodec, NoiseSchedule, TargetTransform};
use crate::error::{Error, Result};
use crate::fields::{Avatar, Groups};
use crate::image::{masked_mae, Image, Mask};
use crate::log::JsonLog;
use crate::renderer::{render_frame, RenderConfig};
use crate::scene_synth::{save_dataset, Dataset, Masks};
use crate::training::{LossValue, PerceptualConfig, TrainSchedule, Trainer};

/// Ordered keyword → mask-name table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionRouting {
    pub lexicon: Vec<(String, String)>,
}

impl Default for RegionRouting {
    fn default() -> Self {
        Self {
            lexicon: default_lexicon(),
        }
    }
}

impl RegionRouting {
    pub fn from_config(cfg: &EditConfig) -> Self {
        Self {
            lexicon: cfg.region_lexicon.clone(),
        }
    }

    /// Mask names that do not exist in `masks`.
    pub fn missing_masks(&self, masks: &Masks) -> Vec<String> {
        self.lexicon
            .iter()
            .filter(|(_, m)| masks.get(m).is_none())
            .map(|(_, m)| m.clone())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EditRegion {
    /// No keyword matched; the edit applies to the whole frame.
    Global,
    Mask(Mask),
}

impl EditRegion {
    pub fn is_global(&self) -> bool {
        matches!(self, EditRegion::Global)
    }

    pub fn mask(&self) -> Option<&Mask> {
        match self {
            EditRegion::Global => None,
            EditRegion::Mask(m) => Some(m),
        }
    }
}

pub fn select_region(instruction: &str, routing: &RegionRouting, masks: &Masks) -> Result<EditRegion> {
    let text = instruction.to_lowercase();
    let mut out: Option<Mask> = None;
    let mut used: Vec<&str> = Vec::new();
    for (key, name) in &routing.lexicon {
        if !text.contains(&key.to_lowercase()) || used.contains(&name.as_str()) {
            continue;
        }
        let m = masks
            .get(name)
            .ok_or_else(|| Error::MissingMask(name.clone()))?;
        used.push(name);
        out = Some(match out {
            None => m.clone(),
            Some(acc) => acc.union(m),
        });
    }
    Ok(out.map_or(EditRegion::Global, EditRegion::Mask))
}

/// `S⊙edited + (1−S)⊙original`, a per-pixel select so untouched pixels are
/// bit-equal to `original`.
pub fn blend(edited: &Image, original: &Image, region: &EditRegion) -> Result<Image> {
    if !edited.same_size(original) {
        return Err(Error::Contract(format!(
            "blend: edited {}x{} vs original {}x{}",
            edited.width, edited.height, original.width, original.height
        )));
    }
    let mask = match region {
        EditRegion::Global => return Ok(edited.clone()),
        EditRegion::Mask(m) => m,
    };
    if mask.width != edited.width || mask.height != edited.height {
        return Err(Error::Contract(format!(
            "blend: mask {}x{} vs image {}x{}",
            mask.width, mask.height, edited.width, edited.height
        )));
    }
    let mut out = original.clone();
    for (p, &inside) in mask.data.iter().enumerate() {
        if inside {
            out.data[3 * p..3 * p + 3].copy_from_slice(&edited.data[3 * p..3 * p + 3]);
        }
    }
    Ok(out)
}

/// Mutable state of the dataset-update loop.
pub struct DUState {
    pub dataset: Dataset,
    pub update_cursor: usize,
    pub nerf_iters_since_update: usize,
    pub total_iters: usize,
    pub rng: ChaCha8Rng,
    pub edit_config: EditConfig,
    pub routing: RegionRouting,
    pub update_period: usize,
    pub edit_events: usize,
}

impl DUState {
    pub fn new(dataset: Dataset, edit_config: EditConfig, update_period: usize, seed: u64) -> Result<Self> {
        edit_config.validate()?;
        if update_period == 0 {
            return Err(Error::InvalidConfig("update_period must be >= 1".into()));
        }
        if dataset.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let routing = RegionRouting::from_config(&edit_config);
        for f in &dataset.frames {
            if let Some(m) = routing.missing_masks(&f.masks).into_iter().next() {
                return Err(Error::MissingMask(m));
            }
        }
        Ok(Self {
            dataset,
            update_cursor: 0,
            nerf_iters_since_update: 0,
            total_iters: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            edit_config,
            routing,
            update_period,
            edit_events: 0,
        })
    }
}

/// The editor and its latent space.
pub struct EditBackend<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub codec: &'a dyn LatentCodec,
    pub schedule: NoiseSchedule,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DUStepResult {
    pub frame: usize,
    pub edited_frame: Option<usize>,
    pub loss: LossValue,
}

/// Re-edits `frame[update_cursor]` from the current render, conditioned on
/// the original image, and stores the blended result.
pub fn edit_frame(state: &mut DUState, avatar: &Avatar, render: &RenderConfig, backend: &EditBackend<'_>) -> Result<usize> {
    let idx = state.update_cursor;
    let frame = &state.dataset.frames[idx];
    let rendered = render_frame(frame, avatar, state.dataset.background(), render)?.rgb;
    let edited = ddim_edit(
        &frame.image_gt,
        &rendered,
        &state.edit_config,
        backend.denoiser,
        backend.codec,
        &backend.schedule,
        FrameContext {
            index: idx,
            masks: Some(&frame.masks),
        },
        &mut state.rng,
    )?;
    let region = select_region(&state.edit_config.instruction, &state.routing, &frame.masks)?;
    let blended = blend(&edited, &frame.image_gt, &region)?;
    state.dataset.frames[idx].edit_target = blended;
    state.update_cursor = (idx + 1) % state.dataset.len();
    state.edit_events += 1;
    Ok(idx)
}

/// One loop iteration: an edit event when the period is reached, then one
/// optimization step on a random frame's current edit target.
pub fn du_step(
    state: &mut DUState,
    avatar: &mut Avatar,
    trainer: &mut Trainer,
    backend: &EditBackend<'_>,
) -> Result<DUStepResult> {
    state.nerf_iters_since_update += 1;
    let mut edited_frame = None;
    if state.nerf_iters_since_update >= state.update_period {
        let render = trainer.render;
        edited_frame = Some(edit_frame(state, avatar, &render, backend)?);
        state.nerf_iters_since_update = 0;
    }
    let fi = state.rng.random_range(0..state.dataset.len());
    let frame = &state.dataset.frames[fi];
    let step = trainer.step(avatar, frame, &frame.edit_target, state.dataset.background())?;
    state.total_iters += 1;
    Ok(DUStepResult {
        frame: fi,
        edited_frame,
        loss: step.loss,
    })
}

/// Render error against reference targets at one evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditEval {
    pub iter: usize,
    /// Mean |render − target| over the whole frame.
    pub error: f64,
    /// Inside the routed region (the whole frame for global edits).
    pub masked_error: f64,
    /// Outside the routed region; `None` for global edits.
    pub unmasked_error: Option<f64>,
    /// Every stored edit target equals the original outside the region.
    pub locality_held: bool,
}

#[derive(Default)]
pub struct EditOptions<'a> {
    pub log: Option<&'a mut JsonLog>,
    /// Produces the reference targets the metric trace is measured against;
    /// the originals are used when `None`.
    pub reference: Option<&'a dyn TargetTransform>,
    /// Write a checkpoint plus the dataset every this many iterations.
    pub snapshot_every: Option<usize>,
    pub snapshot_dir: Option<PathBuf>,
    pub update_period: Option<usize>,
}

pub struct EditReport {
    pub dataset: Dataset,
    pub trace: Vec<EditEval>,
    pub losses: Vec<(usize, LossValue)>,
    pub edit_events: usize,
}

pub const DEFAULT_UPDATE_PERIOD: usize = 10;

fn regions(dataset: &Dataset, cfg: &EditConfig) -> Result<Vec<EditRegion>> {
    let routing = RegionRouting::from_config(cfg);
    dataset
        .frames
        .iter()
        .map(|f| select_region(&cfg.instruction, &routing, &f.masks))
        .collect()
}

/// Every edit target equals its original outside the routed region.
pub fn locality_holds(dataset: &Dataset, regions: &[EditRegion]) -> bool {
    dataset.frames.iter().zip(regions).all(|(f, r)| match r {
        EditRegion::Global => true,
        EditRegion::Mask(m) => m.data.iter().enumerate().all(|(p, &inside)| {
            inside || f.edit_target.data[3 * p..3 * p + 3] == f.image_gt.data[3 * p..3 * p + 3]
        }),
    })
}

fn evaluate(
    iter: usize,
    dataset: &Dataset,
    avatar: &Avatar,
    render: &RenderConfig,
    targets: &[Image],
    regions: &[EditRegion],
) -> Result<EditEval> {
    let n = dataset.len() as f64;
    let (mut all, mut inside, mut outside) = (0.0, 0.0, 0.0);
    for ((f, t), r) in dataset.frames.iter().zip(targets).zip(regions) {
        let out = render_frame(f, avatar, dataset.background(), render)?.rgb;
        all += masked_mae(&out, t, None);
        match r {
            EditRegion::Global => inside += masked_mae(&out, t, None),
            EditRegion::Mask(m) => {
                inside += masked_mae(&out, t, Some(m));
                outside += masked_mae(&out, t, Some(&m.complement()));
            }
        }
    }
    let global = regions.iter().all(EditRegion::is_global);
    Ok(EditEval {
        iter,
        error: all / n,
        masked_error: inside / n,
        unmasked_error: (!global).then_some(outside / n),
        locality_held: locality_holds(dataset, regions),
    })
}

fn snapshot(dir: &std::path::Path, iter: usize, avatar: &Avatar, render: &RenderConfig, dataset: &Dataset) -> Result<()> {
    let ck = Checkpoint {
        stage: Stage::Edit,
        avatar: avatar.clone(),
        render: *render,
        metadata: [("iter".to_string(), serde_json::json!(iter))].into_iter().collect(),
    };
    ck.save(&dir.join(format!("edit_iter{iter:06}.ckpt")))?;
    save_dataset(dataset, &dir.join(format!("edit_iter{iter:06}_data")))
}

/// Runs the dataset-update loop, optimizing only the radiance fields and
/// upsamplers. Deformation networks, the torso latent and subject codes stay
/// bit-identical.
#[allow(clippy::too_many_arguments)]
pub fn edit_sequence(
    dataset: Dataset,
    avatar: &mut Avatar,
    edit_config: &EditConfig,
    schedule: &TrainSchedule,
    render: &RenderConfig,
    perceptual: &PerceptualConfig,
    backend: &EditBackend<'_>,
    mut opts: EditOptions<'_>,
) -> Result<EditReport> {
    let period = opts.update_period.unwrap_or(DEFAULT_UPDATE_PERIOD);
    let mut state = DUState::new(dataset, edit_config.clone(), period, schedule.seed)?;
    let mut trainer = Trainer::new(schedule, *render, perceptual.clone())?;
    let regions = regions(&state.dataset, edit_config)?;
    let targets = state
        .dataset
        .frames
        .iter()
        .map(|f| match opts.reference {
            Some(t) => t.apply(&f.image_gt, &edit_config.instruction, Some(&f.masks)),
            None => Ok(f.image_gt.clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    let previous = avatar.trainable;
    avatar.trainable = Groups::APPEARANCE;
    let mut trace = vec![evaluate(0, &state.dataset, avatar, render, &targets, &regions)?];
    let mut losses = Vec::with_capacity(schedule.total_iters);
    let result = (|| -> Result<()> {
        for it in 0..schedule.total_iters {
            let step = du_step(&mut state, avatar, &mut trainer, backend)?;
            losses.push((it, step.loss));
            let done = it + 1;
            let mut rec = serde_json::json!({
                "stage": "edit",
                "iter": done,
                "frame": step.frame,
                "edited_frame": step.edited_frame,
                "loss": step.loss.total,
                "loss_photometric": step.loss.photometric,
                "loss_perceptual": step.loss.perceptual,
            });
            if done % schedule.eval_every == 0 || done == schedule.total_iters {
                let e = evaluate(done, &state.dataset, avatar, render, &targets, &regions)?;
                rec["error"] = serde_json::json!(e.error);
                rec["masked_error"] = serde_json::json!(e.masked_error);
                rec["unmasked_error"] = serde_json::json!(e.unmasked_error);
                rec["locality_held"] = serde_json::json!(e.locality_held);
                trace.push(e);
            }
            if let (Some(every), Some(dir)) = (opts.snapshot_every, opts.snapshot_dir.as_deref()) {
                if every > 0 && done % every == 0 {
                    snapshot(dir, done, avatar, render, &state.dataset)?;
                }
            }
            if let Some(log) = opts.log.as_deref_mut() {
                log.record(&rec)?;
            }
        }
        Ok(())
    })();
    avatar.trainable = previous;
    result?;
    Ok(EditReport {
        edit_events: state.edit_events,
        dataset: state.dataset,
        trace,
        losses,
    })
}
