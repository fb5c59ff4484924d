//! Temporal consistency and text alignment of rendered sequences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{mse, Image};

/// Maps images and text into a shared space of unit vectors.
pub trait Embedder {
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            what: "embedding",
            expected: a.len(),
            got: b.len(),
        });
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(d.clamp(-1.0, 1.0))
}

/// Mean over consecutive pairs of the per-pixel mean squared error.
pub fn pixel_mse_consistency(frames: &[Image]) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::Empty("pixel-MSE consistency needs at least two frames"));
    }
    let mut sum = 0.0;
    for (i, w) in frames.windows(2).enumerate() {
        if !w[0].same_size(&w[1]) {
            return Err(Error::SizeMismatch {
                frame: i + 1,
                what: "frame".into(),
                want_w: w[0].width,
                want_h: w[0].height,
                got_w: w[1].width,
                got_h: w[1].height,
            });
        }
        sum += mse(&w[0], &w[1]);
    }
    Ok(sum / (frames.len() - 1) as f64)
}

/// Mean cosine similarity of consecutive frame embeddings.
pub fn temporal_embedding_consistency(frames: &[Image], embedder: &dyn Embedder) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::Empty("temporal consistency needs at least two frames"));
    }
    let emb = frames
        .iter()
        .map(|f| embedder.embed_image(f))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = 0.0;
    for w in emb.windows(2) {
        sum += cosine(&w[0], &w[1])?;
    }
    Ok(sum / (emb.len() - 1) as f64)
}

/// Mean cosine similarity between each frame and the prompt.
pub fn text_alignment(frames: &[Image], prompt: &str, embedder: &dyn Embedder) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::Empty("text alignment needs at least one frame"));
    }
    let t = embedder.embed_text(prompt)?;
    let mut sum = 0.0;
    for f in frames {
        sum += cosine(&embedder.embed_image(f)?, &t)?;
    }
    Ok(sum / frames.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: usize,
    pub pixel_mse: f64,
    pub tem_con: f64,
    pub clip_text: Option<f64>,
}

pub fn evaluate_sequence(frames: &[Image], prompt: Option<&str>, embedder: &dyn Embedder) -> Result<MetricsReport> {
    Ok(MetricsReport {
        frames: frames.len(),
        pixel_mse: pixel_mse_consistency(frames)?,
        tem_con: temporal_embedding_consistency(frames, embedder)?,
        clip_text: prompt.map(|p| text_alignment(frames, p, embedder)).transpose()?,
    })
}

const GRID: usize = 16;

/// Seeded Gaussian random projections of a box-filtered 16×16 thumbnail
/// (images) and of hashed word counts (text).
#[derive(Clone, Debug)]
pub struct RandomProjectionEmbedder {
    dim: usize,
    image_proj: Vec<f64>,
    text_proj: Vec<f64>,
    vocab: usize,
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 && n.is_finite() {
        v.iter_mut().for_each(|x| *x /= n);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
        v[0] = 1.0;
    }
    v
}

fn project(m: &[f64], x: &[f64], dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|r| m[r * x.len()..(r + 1) * x.len()].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

impl RandomProjectionEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let dim = dim.max(1);
        let vocab = 256;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let image_proj = draw(dim * GRID * GRID * 3);
        let text_proj = draw(dim * vocab);
        Self {
            dim,
            image_proj,
            text_proj,
            vocab,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn thumbnail(image: &Image) -> Vec<f64> {
        let mut out = vec![0.0; GRID * GRID * 3];
        for gy in 0..GRID {
            let (y0, y1) = (gy * image.height / GRID, ((gy + 1) * image.height / GRID).max(gy * image.height / GRID + 1));
            for gx in 0..GRID {
                let (x0, x1) = (gx * image.width / GRID, ((gx + 1) * image.width / GRID).max(gx * image.width / GRID + 1));
                let mut acc = [0.0; 3];
                let mut n = 0.0;
                for y in y0..y1.min(image.height) {
                    for x in x0..x1.min(image.width) {
                        let p = image.pixel(x, y);
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                        n += 1.0;
                    }
                }
                for c in 0..3 {
                    out[(gy * GRID + gx) * 3 + c] = acc[c] / n - 0.5;
                }
            }
        }
        out
    }
}

impl Default for RandomProjectionEmbedder {
    fn default() -> Self {
        Self::new(64, 0)
    }
}

impl Embedder for RandomProjectionEmbedder {
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        if image.pixel_count() == 0 {
            return Err(Error::Empty("image"));
        }
        Ok(unit(project(&self.image_proj, &Self::thumbnail(image), self.dim)))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut counts = vec![0.0; self.vocab];
        for word in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            let mut h: u64 = 0xcbf29ce484222325;
            for b in word.to_lowercase().bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x100000001b3);
            }
            counts[(h % self.vocab as u64) as usize] += 1.0;
        }
        Ok(unit(project(&self.text_proj, &counts, self.dim)))
    }
}
