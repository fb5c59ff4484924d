//! Convolutional upsampler from a low-resolution feature map to RGB.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{relu_backward, upsample2, upsample2_backward, Conv2d, ConvCache, FeatureMap};
use crate::error::{Error, Result};
use crate::nn::{relu, sigmoid, Parameters};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpsamplerSpec {
    pub channels: usize,
    /// Power of two; each doubling adds one upsample + conv block.
    pub factor: usize,
}

impl Default for UpsamplerSpec {
    fn default() -> Self {
        Self {
            channels: 32,
            factor: 4,
        }
    }
}

/// `conv → ReLU`, then per doubling `×2 → conv → ReLU`, then `conv → sigmoid`.
#[derive(Clone, Debug, PartialEq)]
pub struct Upsampler {
    pub convs: Vec<Conv2d>,
    pub factor: usize,
}

pub struct UpsamplerCache {
    convs: Vec<ConvCache>,
    /// Post-ReLU output of every hidden conv.
    acts: Vec<FeatureMap>,
    rgb: Array2<f64>,
}

impl Upsampler {
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, spec: &UpsamplerSpec, rng: &mut R) -> Result<Self> {
        if !spec.factor.is_power_of_two() || spec.channels == 0 {
            return Err(Error::InvalidConfig(format!(
                "upsampler factor must be a power of two and channels >= 1 (got {} / {})",
                spec.factor, spec.channels
            )));
        }
        let doublings = spec.factor.trailing_zeros() as usize;
        let mut convs = vec![Conv2d::new(feature_dim, spec.channels, 1, rng)];
        for _ in 0..doublings {
            convs.push(Conv2d::new(spec.channels, spec.channels, 1, rng));
        }
        let mut out = Conv2d::new(spec.channels, 3, 1, rng);
        out.kernel.w.fill(0.0);
        out.kernel.b.fill(0.0);
        convs.push(out);
        Ok(Self {
            convs,
            factor: spec.factor,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.convs[0].c_in
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &FeatureMap) -> Result<(FeatureMap, UpsamplerCache)> {
        let n = self.convs.len();
        let mut caches = Vec::with_capacity(n);
        let mut acts = Vec::with_capacity(n - 1);
        let (mut h, c0) = self.convs[0].forward_cached(x)?;
        caches.push(c0);
        h.data.mapv_inplace(relu);
        for conv in &self.convs[1..n - 1] {
            let up = upsample2(&h);
            acts.push(h);
            let (mut next, c) = conv.forward_cached(&up)?;
            caches.push(c);
            next.data.mapv_inplace(relu);
            h = next;
        }
        let (mut out, c) = self.convs[n - 1].forward_cached(&h)?;
        acts.push(h);
        caches.push(c);
        out.data.mapv_inplace(sigmoid);
        let rgb = out.data.clone();
        Ok((
            out,
            UpsamplerCache {
                convs: caches,
                acts,
                rgb,
            },
        ))
    }

    /// Accumulates into `grads`; returns the gradient w.r.t. the input features.
    pub fn backward(&self, cache: &UpsamplerCache, d_rgb: &Array2<f64>, grads: &mut Upsampler) -> Array2<f64> {
        let n = self.convs.len();
        let mut d = d_rgb * &cache.rgb.mapv(|s| s * (1.0 - s));
        d = self.convs[n - 1].backward(&cache.convs[n - 1], &d, &mut grads.convs[n - 1]);
        for i in (1..n - 1).rev() {
            relu_backward(&mut d, &cache.acts[i].data);
            let du = self.convs[i].backward(&cache.convs[i], &d, &mut grads.convs[i]);
            let prev = &cache.acts[i - 1];
            d = upsample2_backward(du.view(), prev.height, prev.width);
        }
        relu_backward(&mut d, &cache.acts[0].data);
        self.convs[0].backward(&cache.convs[0], &d, &mut grads.convs[0])
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            convs: self.convs.iter().map(Conv2d::zeros_like).collect(),
            factor: self.factor,
        }
    }
}

impl Parameters for Upsampler {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("{prefix}.{i}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&format!("{prefix}.{i}"), f);
        }
    }
}
