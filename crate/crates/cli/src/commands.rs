use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use cosavatar::checkpoint::{Checkpoint, Stage};
use cosavatar::config::RunConfig;
use cosavatar::driving::transfer;
use cosavatar::du_loop::{edit_sequence, EditBackend, EditOptions, RegionRouting};
use cosavatar::editor::{Denoiser, ExternalDenoiser, HueShift, IdentityCodec, NoiseSchedule, ToyDenoiser};
use cosavatar::fields::Avatar;
use cosavatar::image::{psnr, Image};
use cosavatar::log::JsonLog;
use cosavatar::metrics::{evaluate_sequence, RandomProjectionEmbedder};
use cosavatar::renderer::render_frame;
use cosavatar::scene_synth::{load_codes, load_dataset, save_dataset, synth_sequence, Dataset, SceneGenerator, SceneSpec};
use cosavatar::training::{fit_reconstruction, FitOptions};
use cosavatar::{Error, Result};

use crate::{Cli, Command, EditorKind};

pub const RECONSTRUCT_CKPT: &str = "reconstruct.ckpt";
pub const EDIT_CKPT: &str = "edit.ckpt";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path.display().to_string(), e)
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("json value serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let doc = match &cli.config {
        Some(p) => Some(fs::read_to_string(p).map_err(io_err(p))?),
        None => None,
    };
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    RunConfig::resolve(doc.as_deref(), &overrides)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth => "synth",
        Command::Fit { .. } => "fit",
        Command::Edit { .. } => "edit",
        Command::Drive { .. } => "drive",
        Command::Eval { .. } => "eval",
        Command::Render { .. } => "render",
    }
}

/// Writes the resolved config and a manifest describing this run.
fn write_manifest(cli: &Cli, cfg: &RunConfig, inputs: Value, outputs: Value) -> Result<()> {
    let toml = cfg.to_toml()?;
    fs::write(cli.out.join("config.toml"), &toml).map_err(io_err(&cli.out))?;
    write_json(
        &cli.out.join("run_manifest.json"),
        &json!({
            "command": command_name(&cli.command),
            "code_version": env!("CARGO_PKG_VERSION"),
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "editor": format!("{:?}", cli.editor).to_lowercase(),
            "config_file": "config.toml",
            "inputs": inputs,
            "outputs": outputs,
        }),
    )
}

pub fn run(cli: &Cli) -> Result<Value> {
    let cfg = load_config(cli)?;
    fs::create_dir_all(&cli.out).map_err(io_err(&cli.out))?;
    let (inputs, outputs) = match &cli.command {
        Command::Synth => synth(cli, &cfg)?,
        Command::Fit { data } => fit(cli, &cfg, data)?,
        Command::Edit {
            data,
            checkpoint,
            instruction,
        } => edit(cli, &cfg, data, checkpoint.as_deref(), instruction.as_deref())?,
        Command::Drive { checkpoint, reference } => drive(cli, checkpoint, reference)?,
        Command::Eval { frames, prompt } => eval(cli, &cfg, frames, prompt.as_deref())?,
        Command::Render {
            checkpoint,
            data,
            frames,
        } => render(cli, checkpoint, data.as_deref(), frames)?,
    };
    write_manifest(cli, &cfg, inputs, outputs.clone())?;
    Ok(outputs)
}

fn synth(cli: &Cli, cfg: &RunConfig) -> Result<(Value, Value)> {
    let ds = synth_sequence(&cfg.scene)?;
    save_dataset(&ds, &cli.out)?;
    Ok((json!({}), json!({"dataset": cli.out, "frames": ds.len()})))
}

fn fit(cli: &Cli, cfg: &RunConfig, data: &Path) -> Result<(Value, Value)> {
    let ds = load_dataset(data)?;
    let mut avatar = Avatar::new(&cfg.model, ds.expr_dim(), cfg.seed)?;
    let schedule = cfg.reconstruct_schedule();
    let log_path = cli.out.join("fit_log.jsonl");
    let mut log = JsonLog::create(&log_path)?;
    let report = fit_reconstruction(
        &ds,
        &mut avatar,
        &schedule,
        &cfg.render,
        &cfg.perceptual,
        FitOptions {
            log: Some(&mut log),
            snapshot_dir: Some(cli.out.clone()),
        },
    )?;
    log.flush()?;
    let ck = Checkpoint {
        stage: Stage::Reconstruct,
        avatar,
        render: cfg.render,
        metadata: [
            ("scene".to_string(), json!(ds.spec)),
            ("config_hash".to_string(), json!(cfg.hash())),
            ("seed".to_string(), json!(cfg.seed)),
            ("holdout_frames".to_string(), json!(schedule.holdout_frames(ds.len()))),
            ("holdout_psnr".to_string(), json!(report.final_psnr)),
        ]
        .into_iter()
        .collect(),
    };
    let path = cli.out.join(RECONSTRUCT_CKPT);
    ck.save(&path)?;
    Ok((
        json!({"data": data}),
        json!({"checkpoint": path, "log": log_path, "holdout_psnr": report.final_psnr}),
    ))
}

fn require_stage(path: &Path, want: Stage, hint: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::StageOrder(format!(
            "no checkpoint at {}; {hint}",
            path.display()
        )));
    }
    let ck = Checkpoint::load(path)?;
    if ck.stage != want {
        return Err(Error::StageOrder(format!(
            "{} holds a `{}` checkpoint, expected `{}`; {hint}",
            path.display(),
            ck.stage.as_str(),
            want.as_str()
        )));
    }
    Ok(ck)
}

fn save_frames(dir: &Path, frames: &[Image]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let p = dir.join(format!("{i:05}.png"));
            f.save_png(&p)?;
            Ok(p)
        })
        .collect()
}

fn edit(
    cli: &Cli,
    cfg: &RunConfig,
    data: &Path,
    checkpoint: Option<&Path>,
    instruction: Option<&str>,
) -> Result<(Value, Value)> {
    let ck_path = checkpoint.map_or_else(|| cli.out.join(RECONSTRUCT_CKPT), Path::to_path_buf);
    let ck = require_stage(&ck_path, Stage::Reconstruct, "run `fit` before `edit`")?;
    let ds = load_dataset(data)?;
    let mut edit_cfg = cfg.edit.editor.clone();
    if let Some(text) = instruction {
        edit_cfg.instruction = text.to_string();
    }
    if edit_cfg.instruction.trim().is_empty() {
        return Err(Error::InvalidConfig("edit needs an instruction".into()));
    }
    let routing = RegionRouting::from_config(&edit_cfg);
    let shift = HueShift::new(routing.clone());
    let toy;
    let external;
    let denoiser: &dyn Denoiser = match cli.editor {
        EditorKind::Toy => {
            toy = ToyDenoiser::new(Box::new(HueShift::new(routing)));
            &toy
        }
        EditorKind::External => {
            external = ExternalDenoiser::from_env()?;
            &external
        }
    };
    let backend = EditBackend {
        denoiser,
        codec: &IdentityCodec,
        schedule: NoiseSchedule::default(),
    };
    let mut avatar = ck.avatar;
    let log_path = cli.out.join("edit_log.jsonl");
    let mut log = JsonLog::create(&log_path)?;
    let snapshot_dir = cli.out.join("snapshots");
    if cfg.edit.snapshot_every > 0 {
        fs::create_dir_all(&snapshot_dir).map_err(io_err(&snapshot_dir))?;
    }
    let report = edit_sequence(
        ds,
        &mut avatar,
        &edit_cfg,
        &cfg.edit_schedule(),
        &cfg.render,
        &cfg.perceptual,
        &backend,
        EditOptions {
            log: Some(&mut log),
            reference: (cli.editor == EditorKind::Toy).then_some(&shift as _),
            snapshot_every: (cfg.edit.snapshot_every > 0).then_some(cfg.edit.snapshot_every),
            snapshot_dir: Some(snapshot_dir),
            update_period: Some(cfg.edit.update_period),
        },
    )?;
    log.flush()?;
    let renders = report
        .dataset
        .frames
        .iter()
        .map(|f| Ok(render_frame(f, &avatar, report.dataset.background(), &cfg.render)?.rgb))
        .collect::<Result<Vec<_>>>()?;
    let mut metadata = ck.metadata;
    metadata.insert("instruction".into(), json!(edit_cfg.instruction));
    metadata.insert("edit_config_hash".into(), json!(cfg.hash()));
    let out_ck = Checkpoint {
        stage: Stage::Edit,
        avatar,
        render: cfg.render,
        metadata,
    };
    let path = cli.out.join(EDIT_CKPT);
    out_ck.save(&path)?;
    let ds_dir = cli.out.join("edited_dataset");
    save_dataset(&report.dataset, &ds_dir)?;
    save_frames(&cli.out.join("frames"), &renders)?;
    write_json(&cli.out.join("edit_trace.json"), &json!(report.trace))?;
    Ok((
        json!({"data": data, "checkpoint": ck_path}),
        json!({
            "checkpoint": path,
            "dataset": ds_dir,
            "frames": cli.out.join("frames"),
            "log": log_path,
            "edit_events": report.edit_events,
            "final": report.trace.last(),
        }),
    ))
}

fn scene_of(ck: &Checkpoint) -> Result<SceneSpec> {
    let v = ck
        .metadata
        .get("scene")
        .ok_or_else(|| Error::Checkpoint("checkpoint does not record its scene".into()))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Json {
        context: "checkpoint scene".into(),
        source: e,
    })
}

fn drive(cli: &Cli, checkpoint: &Path, reference: &Path) -> Result<(Value, Value)> {
    let ck = Checkpoint::load(checkpoint)?;
    let generator = SceneGenerator::new(scene_of(&ck)?)?;
    let mut codes = Vec::new();
    while reference.join("codes").join(format!("{:05}.json", codes.len())).exists() {
        codes.push(load_codes(reference, codes.len())?);
    }
    let frames = transfer(&ck.avatar, &generator, &ck.render, &codes)?;
    let dir = cli.out.join("frames");
    save_frames(&dir, &frames)?;
    Ok((
        json!({"checkpoint": checkpoint, "reference": reference}),
        json!({"frames": dir, "count": frames.len()}),
    ))
}

fn eval(cli: &Cli, cfg: &RunConfig, frames_dir: &Path, prompt: Option<&str>) -> Result<(Value, Value)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(frames_dir)
        .map_err(io_err(frames_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    paths.sort();
    let frames = paths.iter().map(|p| Image::load_png(p)).collect::<Result<Vec<_>>>()?;
    let embedder = RandomProjectionEmbedder::new(cfg.embedder.dim, cfg.embedder.seed);
    let report = evaluate_sequence(&frames, prompt, &embedder)?;
    let path = cli.out.join("metrics.json");
    write_json(&path, &json!(report))?;
    Ok((json!({"frames": frames_dir, "prompt": prompt}), json!(report)))
}

fn render(cli: &Cli, checkpoint: &Path, data: Option<&Path>, frames: &[usize]) -> Result<(Value, Value)> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds: Dataset = match data {
        Some(d) => load_dataset(d)?,
        None => synth_sequence(&scene_of(&ck)?)?,
    };
    let idx: Vec<usize> = if frames.is_empty() { (0..ds.len()).collect() } else { frames.to_vec() };
    let dir = cli.out.join("frames");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut per_frame = Vec::new();
    let mut sum = 0.0;
    for &i in &idx {
        let f = ds
            .frames
            .get(i)
            .ok_or_else(|| Error::OutOfRange(format!("frame {i} of {}", ds.len())))?;
        let img = render_frame(f, &ck.avatar, ds.background(), &ck.render)?.rgb;
        img.save_png(&dir.join(format!("{i:05}.png")))?;
        let p = psnr(&img, &f.image_gt);
        sum += p;
        per_frame.push(json!({"frame": i, "psnr": p}));
    }
    let mean = sum / idx.len().max(1) as f64;
    let out = json!({"frames": dir, "psnr": per_frame, "mean_psnr": mean});
    write_json(&cli.out.join("render_report.json"), &out)?;
    Ok((json!({"checkpoint": checkpoint, "data": data}), out))
}
