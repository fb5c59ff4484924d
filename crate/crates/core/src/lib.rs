//! Expression-conditioned head and torso radiance fields, feature volume
//! rendering, and instruction-driven iterative dataset editing for
//! animatable portrait sequences.

pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod driving;
pub mod du_loop;
pub mod editor;
pub mod error;
pub mod fields;
pub mod geometry;
pub mod image;
pub mod log;
pub mod metrics;
pub mod nn;
pub mod renderer;
pub mod scene_synth;
pub mod training;
pub mod upsampler;

pub use error::{Error, Result};
