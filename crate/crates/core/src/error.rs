use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid scene spec: {}", .0.join("; "))]
    InvalidSpec(Vec<String>),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("frame {frame}: missing file {}", .path.display())]
    MissingFrameFile { frame: usize, path: PathBuf },

    #[error("malformed manifest {}: {reason}", .path.display())]
    MalformedManifest { path: PathBuf, reason: String },

    #[error("frame {frame}: {what} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    SizeMismatch {
        frame: usize,
        what: String,
        want_w: usize,
        want_h: usize,
        got_w: usize,
        got_h: usize,
    },

    #[error("frame {frame}: {field} has {got} entries, manifest expects {expected}")]
    FrameDimMismatch {
        frame: usize,
        field: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("head and torso masks overlap at {count} pixel(s)")]
    MaskOverlap { count: usize },

    #[error("routed mask `{0}` is not present in the frame")]
    MissingMask(String),

    #[error("transform is not rigid: {0}")]
    NonRigid(String),

    #[error("empty sequence: {0}")]
    Empty(&'static str),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("stage order: {0}")]
    StageOrder(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("editor failed on frame {frame} at step {step}: {source}")]
    Editor {
        frame: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("denoiser protocol: {0}")]
    Protocol(String),

    #[error("non-finite loss at iteration {iter} (frame {frame}); snapshot at {}", .snapshot.display())]
    NonFiniteLoss {
        iter: usize,
        frame: usize,
        snapshot: PathBuf,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("png {context}: {message}")]
    Png { context: String, message: String },

    #[error("json {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Short machine-readable tag for CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimMismatch { .. } | Error::FrameDimMismatch { .. } => "dim_mismatch",
            Error::InvalidSpec(_) => "invalid_spec",
            Error::InvalidConfig(_) => "invalid_config",
            Error::MissingFrameFile { .. } => "missing_file",
            Error::MalformedManifest { .. } => "malformed_manifest",
            Error::SizeMismatch { .. } => "size_mismatch",
            Error::Contract(_) => "contract",
            Error::MaskOverlap { .. } => "mask_overlap",
            Error::MissingMask(_) => "missing_mask",
            Error::NonRigid(_) => "non_rigid",
            Error::Empty(_) => "empty",
            Error::OutOfRange(_) => "out_of_range",
            Error::StageOrder(_) => "stage_order",
            Error::Checkpoint(_) => "checkpoint",
            Error::Editor { .. } => "editor",
            Error::Protocol(_) => "protocol",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Io { .. } => "io",
            Error::Png { .. } => "png",
            Error::Json { .. } => "json",
        }
    }
}
