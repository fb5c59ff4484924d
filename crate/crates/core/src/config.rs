//! Run configuration: one TOML document with per-stage sections, merged
//! over defaults and adjusted with dotted `key=value` overrides.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Stage;
use crate::editor::EditConfig;
use crate::error::{Error, Result};
use crate::fields::ModelConfig;
use crate::renderer::RenderConfig;
use crate::scene_synth::SceneSpec;
use crate::training::{PerceptualConfig, TrainSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructSection {
    pub total_iters: usize,
    pub learning_rate: f64,
    pub loss_alpha: f64,
    pub eval_every: usize,
    pub holdout_every: usize,
}

impl Default for ReconstructSection {
    fn default() -> Self {
        let s = TrainSchedule::reconstruct();
        Self {
            total_iters: s.total_iters,
            learning_rate: s.learning_rate,
            loss_alpha: s.loss_alpha,
            eval_every: s.eval_every,
            holdout_every: s.holdout_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditSection {
    pub total_iters: usize,
    pub learning_rate: f64,
    pub loss_alpha: f64,
    pub eval_every: usize,
    /// Optimization iterations between two frame edits.
    pub update_period: usize,
    /// Checkpoint + dataset snapshot interval; 0 disables snapshots.
    pub snapshot_every: usize,
    pub editor: EditConfig,
}

impl Default for EditSection {
    fn default() -> Self {
        let s = TrainSchedule::edit();
        Self {
            total_iters: s.total_iters,
            learning_rate: s.learning_rate,
            loss_alpha: s.loss_alpha,
            eval_every: s.eval_every,
            update_period: crate::du_loop::DEFAULT_UPDATE_PERIOD,
            snapshot_every: 0,
            editor: EditConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderSection {
    pub dim: usize,
    pub seed: u64,
}

impl Default for EmbedderSection {
    fn default() -> Self {
        Self { dim: 64, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Drives model initialization and every stochastic stage.
    pub seed: u64,
    pub scene: SceneSpec,
    pub model: ModelConfig,
    pub render: RenderConfig,
    pub perceptual: PerceptualConfig,
    pub reconstruct: ReconstructSection,
    pub edit: EditSection,
    pub embedder: EmbedderSection,
}

fn merge(base: &mut toml::Table, over: &toml::Table, path: &str, errs: &mut Vec<String>) {
    for (k, v) in over {
        let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match (base.get_mut(k), v) {
            (None, _) => errs.push(format!("unknown key `{key}`")),
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o, &key, errs),
            (Some(toml::Value::Table(_)), _) => errs.push(format!("`{key}` must be a table")),
            (Some(slot), _) => *slot = v.clone(),
        }
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Turns `a.b.c=value` into a nested table; `value` is read as a TOML
/// literal, falling back to a bare string.
pub fn parse_override(kv: &str) -> Result<toml::Table> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override `{kv}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidConfig(format!("override key `{key}` is malformed")));
    }
    let mut value = parse_literal(raw.trim());
    for p in parts.iter().skip(1).rev() {
        let mut t = toml::Table::new();
        t.insert(p.to_string(), value);
        value = toml::Value::Table(t);
    }
    let mut root = toml::Table::new();
    root.insert(parts[0].to_string(), value);
    Ok(root)
}

fn promote_ints(base: &toml::Table, over: &mut toml::Table) {
    for (k, v) in over.iter_mut() {
        if let (Some(toml::Value::Float(_)), toml::Value::Integer(i)) = (base.get(k), &*v) {
            *v = toml::Value::Float(*i as f64);
            continue;
        }
        match (base.get(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => promote_ints(b, o),
            (Some(toml::Value::Array(b)), toml::Value::Array(o)) => {
                if matches!(b.first(), Some(toml::Value::Float(_))) {
                    for x in o.iter_mut() {
                        if let toml::Value::Integer(i) = x {
                            *x = toml::Value::Float(*i as f64);
                        }
                    }
                }
            }
            _ => {}
        }
    }
}

impl RunConfig {
    /// Defaults, then `document` (TOML text), then each override in order.
    pub fn resolve(document: Option<&str>, overrides: &[String]) -> Result<Self> {
        let defaults = toml::Table::try_from(RunConfig::default())
            .map_err(|e| Error::InvalidConfig(format!("serializing defaults: {e}")))?;
        let mut table = defaults.clone();
        let mut errs = Vec::new();
        let mut layers = Vec::new();
        if let Some(doc) = document {
            layers.push(
                toml::from_str::<toml::Table>(doc)
                    .map_err(|e| Error::InvalidConfig(format!("config is not valid TOML: {e}")))?,
            );
        }
        for kv in overrides {
            layers.push(parse_override(kv)?);
        }
        for mut layer in layers {
            promote_ints(&defaults, &mut layer);
            merge(&mut table, &layer, "", &mut errs);
        }
        if !errs.is_empty() {
            return Err(Error::InvalidConfig(errs.join("; ")));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut check = |section: &str, r: Result<()>| match r {
            Ok(()) => {}
            Err(Error::InvalidSpec(v)) => errs.extend(v.into_iter().map(|m| format!("{section}: {m}"))),
            Err(e) => errs.push(format!("{section}: {e}")),
        };
        check("scene", self.scene.validate());
        check("render", self.render.validate());
        check("perceptual", self.perceptual.validate());
        check("model", self.model.encoding.validate());
        check("reconstruct", self.reconstruct_schedule().validate());
        check("edit", self.edit_schedule().validate());
        check("edit.editor", self.edit.editor.validate());
        if self.edit.update_period == 0 {
            errs.push("edit: update_period must be >= 1".into());
        }
        if self.embedder.dim == 0 {
            errs.push("embedder: dim must be >= 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs.join("; ")))
        }
    }

    pub fn reconstruct_schedule(&self) -> TrainSchedule {
        let r = &self.reconstruct;
        TrainSchedule {
            stage: Stage::Reconstruct,
            total_iters: r.total_iters,
            learning_rate: r.learning_rate,
            loss_alpha: r.loss_alpha,
            eval_every: r.eval_every,
            holdout_every: r.holdout_every,
            seed: self.seed,
        }
    }

    pub fn edit_schedule(&self) -> TrainSchedule {
        let e = &self.edit;
        TrainSchedule {
            stage: Stage::Edit,
            total_iters: e.total_iters,
            learning_rate: e.learning_rate,
            loss_alpha: e.loss_alpha,
            eval_every: e.eval_every,
            holdout_every: self.reconstruct.holdout_every,
            seed: self.seed.wrapping_add(1),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(format!("serializing config: {e}")))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}
