#![allow(dead_code)]

pub mod gradcheck;

use cosavatar::fields::{Avatar, FieldNetSpec, ModelConfig};
use cosavatar::renderer::RenderConfig;
use cosavatar::scene_synth::{synth_sequence, Dataset, SceneSpec};
use cosavatar::upsampler::UpsamplerSpec;
use rand::Rng;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        net: FieldNetSpec {
            trunk_layers: 2,
            trunk_width: 12,
            head_layers: 2,
            head_width: 10,
            feature_dim: 4,
            deform_layers: 3,
            deform_width: 8,
        },
        upsampler: UpsamplerSpec { channels: 4, factor: 4 },
        ..ModelConfig::default()
    }
}

pub fn tiny_avatar(expr: usize, seed: u64) -> Avatar {
    Avatar::new(&tiny_config(), expr, seed).unwrap()
}

pub fn small_scene(n: usize) -> Dataset {
    synth_sequence(&SceneSpec {
        n_frames: n,
        image_size: 32,
        ..SceneSpec::default()
    })
    .unwrap()
}

pub fn fast_render() -> RenderConfig {
    RenderConfig {
        sample_count: 8,
        ..RenderConfig::default()
    }
}

/// Fills every parameter with `U(-a, a)` so no layer sits at its zero init.
pub fn randomize<R: Rng>(avatar: &mut Avatar, a: f64, rng: &mut R) {
    use cosavatar::nn::Parameters;
    avatar.visit_mut("", &mut |_, p| {
        for v in p.iter_mut() {
            *v = rng.random_range(-a..a);
        }
    });
}

/// `|fd − g| ≤ rel·max(|fd|, |g|) + floor`.
pub fn close(fd: f64, g: f64, rel: f64, floor: f64) -> bool {
    (fd - g).abs() <= rel * fd.abs().max(g.abs()) + floor
}
