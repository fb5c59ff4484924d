//! Losses and the reconstruction / fine-tuning optimization loop.

use std::path::PathBuf;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::conv::{relu_backward, Conv2d, FeatureMap};
use crate::error::{Error, Result};
use crate::fields::{Avatar, CodeGrads, Groups, Region};
use crate::image::{psnr, Image};
use crate::log::JsonLog;
use crate::nn::{relu, Adam};
use crate::renderer::{
    backward_region, composite, render_frame, render_region_pass, RenderConfig,
};
use crate::scene_synth::{Dataset, FrameRecord};

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if !a.same_size(b) {
        return Err(Error::Contract(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Mean squared error over pixels and channels.
pub fn photometric_loss(rendered: &Image, target: &Image) -> Result<f64> {
    check_same(rendered, target)?;
    Ok(crate::image::mse(rendered, target))
}

fn photometric_grad(rendered: &Image, target: &Image) -> Vec<f64> {
    let n = rendered.data.len() as f64;
    rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| 2.0 * (a - b) / n)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptualConfig {
    /// One weight per extractor level.
    pub layer_weights: Vec<f64>,
    /// Output channels of each strided level.
    pub channels: Vec<usize>,
    pub seed: u64,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            layer_weights: vec![1.0; 3],
            channels: vec![8, 16, 32],
            seed: 17,
        }
    }
}

impl PerceptualConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_weights.is_empty() || self.layer_weights.len() != self.channels.len() {
            return Err(Error::InvalidConfig(format!(
                "perceptual: need one weight per level (weights {}, levels {})",
                self.layer_weights.len(),
                self.channels.len()
            )));
        }
        if self.layer_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidConfig(
                "perceptual: layer weights must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Multi-level feature extractor used by the perceptual loss.
pub trait FeatureExtractor {
    fn levels(&self) -> usize;
    fn extract(&self, image: &Image) -> Result<Vec<FeatureMap>>;
    /// Gradient w.r.t. the image of `Σ_l ⟨d_levels[l], φ_l(image)⟩`.
    fn backward(&self, image: &Image, d_levels: &[Array2<f64>]) -> Result<Vec<f64>>;
}

/// Fixed random strided conv stack (stride 2, ReLU after each level).
#[derive(Clone, Debug, PartialEq)]
pub struct RandomConvExtractor {
    pub convs: Vec<Conv2d>,
}

impl RandomConvExtractor {
    pub fn new(cfg: &PerceptualConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut c_in = 3;
        let convs = cfg
            .channels
            .iter()
            .map(|&c| {
                let conv = Conv2d::new(c_in, c, 2, &mut rng);
                c_in = c;
                conv
            })
            .collect();
        Self { convs }
    }
}

fn image_map(image: &Image) -> FeatureMap {
    FeatureMap {
        height: image.height,
        width: image.width,
        data: Array2::from_shape_vec((image.width * image.height, 3), image.data.clone())
            .expect("interleaved rgb"),
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn levels(&self) -> usize {
        self.convs.len()
    }

    fn extract(&self, image: &Image) -> Result<Vec<FeatureMap>> {
        let mut x = image_map(image);
        let mut out = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let mut y = conv.forward(&x)?;
            y.data.mapv_inplace(relu);
            out.push(y.clone());
            x = y;
        }
        Ok(out)
    }

    fn backward(&self, image: &Image, d_levels: &[Array2<f64>]) -> Result<Vec<f64>> {
        let mut x = image_map(image);
        let mut caches = Vec::new();
        let mut acts = Vec::new();
        for conv in &self.convs {
            let (mut y, c) = conv.forward_cached(&x)?;
            y.data.mapv_inplace(relu);
            caches.push(c);
            acts.push(y.data.clone());
            x = y;
        }
        let mut d: Option<Array2<f64>> = None;
        for l in (0..self.convs.len()).rev() {
            let mut g = d_levels[l].clone();
            if let Some(prev) = d.take() {
                g += &prev;
            }
            relu_backward(&mut g, &acts[l]);
            let mut scratch = self.convs[l].zeros_like();
            d = Some(self.convs[l].backward(&caches[l], &g, &mut scratch));
        }
        Ok(d.map(|a| a.into_iter().collect()).unwrap_or_default())
    }
}

/// `Σ_l λ_l · mean((φ_l(a) − φ_l(b))²)`.
pub fn perceptual_loss(
    rendered: &Image,
    target: &Image,
    cfg: &PerceptualConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    Ok(perceptual_parts(rendered, target, cfg, extractor)?.0)
}

fn perceptual_parts(
    rendered: &Image,
    target: &Image,
    cfg: &PerceptualConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<(f64, Vec<Array2<f64>>)> {
    check_same(rendered, target)?;
    if cfg.layer_weights.len() != extractor.levels() {
        return Err(Error::DimMismatch {
            what: "perceptual layer weights",
            expected: extractor.levels(),
            got: cfg.layer_weights.len(),
        });
    }
    let fa = extractor.extract(rendered)?;
    let fb = extractor.extract(target)?;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(fa.len());
    for ((a, b), &lambda) in fa.iter().zip(&fb).zip(&cfg.layer_weights) {
        let diff = &a.data - &b.data;
        let n = diff.len() as f64;
        loss += lambda * diff.iter().map(|d| d * d).sum::<f64>() / n;
        grads.push(diff * (2.0 * lambda / n));
    }
    Ok((loss, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub photometric: f64,
    pub perceptual: f64,
    pub total: f64,
}

/// `L = L_photo + α·L_perp`.
pub fn total_loss(
    rendered: &Image,
    target: &Image,
    alpha: f64,
    cfg: &PerceptualConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<LossValue> {
    let photometric = photometric_loss(rendered, target)?;
    let perceptual = if alpha == 0.0 {
        0.0
    } else {
        perceptual_loss(rendered, target, cfg, extractor)?
    };
    Ok(LossValue {
        photometric,
        perceptual,
        total: photometric + alpha * perceptual,
    })
}

/// Loss value and its gradient w.r.t. the rendered image.
pub fn total_loss_grad(
    rendered: &Image,
    target: &Image,
    alpha: f64,
    cfg: &PerceptualConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<(LossValue, Vec<f64>)> {
    let photometric = photometric_loss(rendered, target)?;
    let mut grad = photometric_grad(rendered, target);
    let mut perceptual = 0.0;
    if alpha != 0.0 {
        let (p, d_levels) = perceptual_parts(rendered, target, cfg, extractor)?;
        perceptual = p;
        let g = extractor.backward(rendered, &d_levels)?;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += alpha * b;
        }
    }
    Ok((
        LossValue {
            photometric,
            perceptual,
            total: photometric + alpha * perceptual,
        },
        grad,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub stage: Stage,
    pub total_iters: usize,
    pub learning_rate: f64,
    pub loss_alpha: f64,
    pub eval_every: usize,
    /// Every `holdout_every`-th frame is held out of reconstruction.
    pub holdout_every: usize,
    pub seed: u64,
}

impl TrainSchedule {
    pub fn reconstruct() -> Self {
        Self {
            stage: Stage::Reconstruct,
            total_iters: 5000,
            learning_rate: 1e-4,
            loss_alpha: 0.5,
            eval_every: 500,
            holdout_every: 5,
            seed: 0,
        }
    }

    pub fn edit() -> Self {
        Self {
            stage: Stage::Edit,
            total_iters: 2000,
            eval_every: 200,
            ..Self::reconstruct()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 || self.eval_every == 0 || self.holdout_every < 2 {
            return Err(Error::InvalidConfig(
                "schedule: total_iters, eval_every must be > 0 and holdout_every >= 2".into(),
            ));
        }
        if !(self.learning_rate >= 0.0) || !(self.loss_alpha >= 0.0) {
            return Err(Error::InvalidConfig(
                "schedule: learning_rate and loss_alpha must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Frame indices used for optimization during reconstruction.
    pub fn train_frames(&self, n: usize) -> Vec<usize> {
        (0..n).filter(|i| i % self.holdout_every != self.holdout_every - 1).collect()
    }

    pub fn holdout_frames(&self, n: usize) -> Vec<usize> {
        (0..n).filter(|i| i % self.holdout_every == self.holdout_every - 1).collect()
    }
}

/// Optimizer state plus everything one gradient step needs.
pub struct Trainer {
    pub adam: Adam,
    pub render: RenderConfig,
    pub alpha: f64,
    pub perceptual: PerceptualConfig,
    extractor: RandomConvExtractor,
    pub rng: ChaCha8Rng,
    pub iter: usize,
}

/// Rendered composite and losses of one step.
pub struct StepResult {
    pub rendered: Image,
    pub loss: LossValue,
}

impl Trainer {
    pub fn new(schedule: &TrainSchedule, render: RenderConfig, perceptual: PerceptualConfig) -> Result<Self> {
        schedule.validate()?;
        render.validate()?;
        perceptual.validate()?;
        let extractor = RandomConvExtractor::new(&perceptual);
        Ok(Self {
            adam: Adam::new(schedule.learning_rate),
            render,
            alpha: schedule.loss_alpha,
            perceptual,
            extractor,
            rng: ChaCha8Rng::seed_from_u64(schedule.seed),
            iter: 0,
        })
    }

    pub fn extractor(&self) -> &RandomConvExtractor {
        &self.extractor
    }

    /// Renders `frame` with stratified sampling, computes the loss against
    /// `target`, backpropagates and takes one optimizer step over
    /// `avatar.trainable`.
    pub fn step(
        &mut self,
        avatar: &mut Avatar,
        frame: &FrameRecord,
        target: &Image,
        background: [f64; 3],
    ) -> Result<StepResult> {
        let (rendered, loss, grads) = self.loss_and_grads(avatar, frame, target, background)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iter: self.iter,
                frame: frame.index,
                snapshot: PathBuf::new(),
            });
        }
        self.adam.step(avatar, &grads);
        self.iter += 1;
        Ok(StepResult { rendered, loss })
    }

    /// Forward + backward without updating parameters.
    pub fn loss_and_grads(
        &mut self,
        avatar: &Avatar,
        frame: &FrameRecord,
        target: &Image,
        background: [f64; 3],
    ) -> Result<(Image, LossValue, Avatar)> {
        let mut head_rng = crate::renderer::jitter_rng(&mut self.rng);
        let mut torso_rng = crate::renderer::jitter_rng(&mut self.rng);
        let hb = avatar.bundle(Region::Head, &frame.z_exp);
        let tb = avatar.bundle(Region::Torso, &frame.z_exp);
        let head = render_region_pass(&avatar.head, frame, &hb, &self.render, Some(&mut head_rng))?;
        let torso = render_region_pass(&avatar.torso, frame, &tb, &self.render, Some(&mut torso_rng))?;
        let s_head = frame.masks.head_region()?;
        let s_torso = frame.masks.torso_region()?;
        let rendered = composite(&head.output.rgb, &torso.output.rgb, &s_head, &s_torso, background)?;
        let (loss, d_img) = total_loss_grad(&rendered, target, self.alpha, &self.perceptual, &self.extractor)?;
        let mut grads = avatar.zeros_like();
        let mut codes = CodeGrads::zeros(&avatar.dims());
        let mut d_head = vec![0.0; d_img.len()];
        let mut d_torso = vec![0.0; d_img.len()];
        for p in 0..s_head.data.len() {
            let dst = if s_head.data[p] {
                &mut d_head
            } else if s_torso.data[p] {
                &mut d_torso
            } else {
                continue;
            };
            dst[3 * p..3 * p + 3].copy_from_slice(&d_img[3 * p..3 * p + 3]);
        }
        backward_region(&avatar.head, &head, &d_head, &mut grads.head, &mut codes)?;
        backward_region(&avatar.torso, &torso, &d_torso, &mut grads.torso, &mut codes)?;
        grads.add_code_grads(&codes);
        Ok((rendered, loss, grads))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// `(iteration, loss)` at every iteration.
    pub losses: Vec<(usize, LossValue)>,
    /// `(iteration, mean held-out PSNR)` at every evaluation.
    pub evals: Vec<(usize, f64)>,
    pub final_psnr: f64,
}

/// Mean PSNR of deterministic renders against ground truth.
pub fn holdout_psnr(dataset: &Dataset, avatar: &Avatar, frames: &[usize], render: &RenderConfig) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::Empty("held-out frames"));
    }
    let mut sum = 0.0;
    for &i in frames {
        let f = &dataset.frames[i];
        let r = render_frame(f, avatar, dataset.background(), render)?;
        sum += psnr(&r.rgb, &f.image_gt);
    }
    Ok(sum / frames.len() as f64)
}

/// Options that do not affect the numerical result.
#[derive(Default)]
pub struct FitOptions<'a> {
    pub log: Option<&'a mut JsonLog>,
    /// Where to write a checkpoint if the loss becomes non-finite.
    pub snapshot_dir: Option<PathBuf>,
}

/// Fits both region models to the dataset's ground-truth frames.
pub fn fit_reconstruction(
    dataset: &Dataset,
    avatar: &mut Avatar,
    schedule: &TrainSchedule,
    render: &RenderConfig,
    perceptual: &PerceptualConfig,
    mut opts: FitOptions<'_>,
) -> Result<FitReport> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut trainer = Trainer::new(schedule, *render, perceptual.clone())?;
    avatar.trainable = Groups::ALL;
    let train = schedule.train_frames(dataset.len());
    let holdout = schedule.holdout_frames(dataset.len());
    let holdout = if holdout.is_empty() { train.clone() } else { holdout };
    let mut report = FitReport::default();
    for it in 0..schedule.total_iters {
        let fi = train[trainer.rng.random_range(0..train.len())];
        let frame = &dataset.frames[fi];
        let step = match trainer.step(avatar, frame, &frame.image_gt, dataset.background()) {
            Err(Error::NonFiniteLoss { iter, frame, .. }) => {
                let dir = opts.snapshot_dir.clone().unwrap_or_else(std::env::temp_dir);
                let path = dir.join(format!("nonfinite_iter{iter:06}.ckpt"));
                let ck = Checkpoint {
                    stage: Stage::Reconstruct,
                    avatar: avatar.clone(),
                    render: *render,
                    metadata: Default::default(),
                };
                ck.save(&path)?;
                return Err(Error::NonFiniteLoss {
                    iter,
                    frame,
                    snapshot: path,
                });
            }
            other => other?,
        };
        report.losses.push((it, step.loss));
        let done = it + 1;
        let mut rec = serde_json::json!({
            "stage": "reconstruct",
            "iter": done,
            "frame": fi,
            "loss": step.loss.total,
            "loss_photometric": step.loss.photometric,
            "loss_perceptual": step.loss.perceptual,
        });
        if done % schedule.eval_every == 0 || done == schedule.total_iters {
            let p = holdout_psnr(dataset, avatar, &holdout, render)?;
            report.evals.push((done, p));
            rec["holdout_psnr"] = serde_json::json!(p);
        }
        if let Some(log) = opts.log.as_deref_mut() {
            log.record(&rec)?;
        }
    }
    report.final_psnr = report.evals.last().map(|e| e.1).unwrap_or(f64::NAN);
    Ok(report)
}
