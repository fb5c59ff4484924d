use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "cosavatar", version, about = "Fit, edit, drive and evaluate portrait avatars")]
pub struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = EditorKind::Toy)]
    pub editor: EditorKind,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Dotted config override, e.g. `--set render.sample_count=32`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EditorKind {
    Toy,
    External,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic portrait sequence into the output directory.
    Synth,
    /// Reconstruct an avatar from a dataset.
    Fit {
        #[arg(long)]
        data: PathBuf,
    },
    /// Edit a reconstructed avatar with a text instruction.
    Edit {
        #[arg(long)]
        data: PathBuf,
        /// Defaults to `<out>/reconstruct.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        instruction: Option<String>,
    },
    /// Render under another sequence's expressions and poses.
    Drive {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding `codes/NNNNN.json` records.
        #[arg(long)]
        reference: PathBuf,
    },
    /// Temporal consistency and text alignment of a PNG sequence.
    Eval {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        prompt: Option<String>,
    },
    /// Render frames of the fitted scene.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset to take frames and ground truth from; regenerated from
        /// the checkpoint's scene when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated frame indices; all frames when omitted.
        #[arg(long, value_delimiter = ',')]
        frames: Vec<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = serde_json::json!({"error": {"kind": "usage", "message": e.to_string().trim()}});
            eprintln!("{msg}");
            return ExitCode::from(2);
        }
    };
    match commands::run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = serde_json::json!({"error": {"kind": e.kind(), "message": e.to_string()}});
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}
