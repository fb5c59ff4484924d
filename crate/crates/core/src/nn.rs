//! Dense layers with hand-written reverse-mode gradients.
//!
//! Every network in the crate is a stack of [`Linear`] layers with ReLU
//! between them. The first layer of an [`Mlp`] optionally accepts a
//! *shared code*: a vector that is identical for every row of the batch
//! (identity, expression and illumination codes, deformation latents).
//! The code's contribution is folded into the bias so it is computed once
//! per batch instead of once per point.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Visitor over named parameter tensors, in a fixed order.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, v| n += v.len());
        n
    }

    /// Flattened copy of all parameters in visiting order.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit("", &mut |_, _, v| out.extend_from_slice(v));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    /// He-normal weights, zero bias.
    pub fn he<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        Self::normal(fan_in, fan_out, std, rng)
    }

    pub fn normal<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        let w = Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng));
        Self {
            w,
            b: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.ncols()
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(
            &format!("{prefix}.w"),
            self.w.shape(),
            self.w.as_slice().expect("standard layout"),
        );
        f(
            &format!("{prefix}.b"),
            self.b.shape(),
            self.b.as_slice().expect("standard layout"),
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(
            &format!("{prefix}.w"),
            self.w.as_slice_mut().expect("standard layout"),
        );
        f(
            &format!("{prefix}.b"),
            self.b.as_slice_mut().expect("standard layout"),
        );
    }
}

/// Multi-layer perceptron: ReLU on hidden layers, linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    /// Width of the per-row input; the first layer has
    /// `point_dim + code_dim` rows with the code rows last.
    pub point_dim: usize,
    pub code_dim: usize,
}

/// Forward activations retained for the backward pass.
#[derive(Debug)]
pub struct MlpCache {
    /// Input to each layer (layer 0: the per-row input only).
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    /// `widths` lists the output width of every layer, the last entry being
    /// the network output.
    pub fn new<R: Rng + ?Sized>(
        point_dim: usize,
        code_dim: usize,
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        assert!(!widths.is_empty());
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = point_dim + code_dim;
        for &w in widths {
            layers.push(Linear::he(fan_in, w, rng));
            fan_in = w;
        }
        Self {
            layers,
            point_dim,
            code_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(Linear::fan_out).unwrap_or(0)
    }

    pub fn zero_output_layer(&mut self) {
        if let Some(last) = self.layers.last_mut() {
            last.w.fill(0.0);
            last.b.fill(0.0);
        }
    }

    /// Gradient container with the same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.fan_in(), l.fan_out()))
                .collect(),
            point_dim: self.point_dim,
            code_dim: self.code_dim,
        }
    }

    fn check(&self, x: &ArrayView2<f64>, code: &[f64]) -> Result<()> {
        if x.ncols() != self.point_dim {
            return Err(Error::DimMismatch {
                what: "mlp input",
                expected: self.point_dim,
                got: x.ncols(),
            });
        }
        if code.len() != self.code_dim {
            return Err(Error::DimMismatch {
                what: "mlp code",
                expected: self.code_dim,
                got: code.len(),
            });
        }
        Ok(())
    }

    fn first_bias(&self, code: &[f64]) -> Array1<f64> {
        let first = &self.layers[0];
        let mut bias = first.b.clone();
        if self.code_dim > 0 {
            let wc = first.w.slice(s![self.point_dim.., ..]);
            bias += &ArrayView1::from(code).dot(&wc);
        }
        bias
    }

    pub fn forward(&self, x: ArrayView2<f64>, code: &[f64]) -> Result<Array2<f64>> {
        self.check(&x, code)?;
        let first = &self.layers[0];
        let mut h = x.dot(&first.w.slice(s![..self.point_dim, ..])) + &self.first_bias(code);
        for layer in &self.layers[1..] {
            h.mapv_inplace(relu);
            h = h.dot(&layer.w) + &layer.b;
        }
        Ok(h)
    }

    pub fn forward_cached(
        &self,
        x: ArrayView2<f64>,
        code: &[f64],
    ) -> Result<(Array2<f64>, MlpCache)> {
        self.check(&x, code)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        inputs.push(x.to_owned());
        let first = &self.layers[0];
        let mut h = x.dot(&first.w.slice(s![..self.point_dim, ..])) + &self.first_bias(code);
        for layer in &self.layers[1..] {
            h.mapv_inplace(relu);
            let next = h.dot(&layer.w) + &layer.b;
            inputs.push(h);
            h = next;
        }
        Ok((h, MlpCache { inputs }))
    }

    /// Accumulates parameter gradients into `grads` and returns
    /// `(d_input, d_code)`. `d_input` is only formed when requested.
    pub fn backward(
        &self,
        cache: &MlpCache,
        code: &[f64],
        d_out: Array2<f64>,
        grads: &mut Mlp,
        want_input_grad: bool,
    ) -> (Option<Array2<f64>>, Vec<f64>) {
        let mut dz = d_out;
        for li in (1..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &cache.inputs[li];
            let g = &mut grads.layers[li];
            ndarray::linalg::general_mat_mul(1.0, &input.t(), &dz, 1.0, &mut g.w);
            g.b += &dz.sum_axis(Axis(0));
            let mut dh = dz.dot(&layer.w.t());
            // ReLU: the cached input is post-activation, zero where clamped.
            ndarray::Zip::from(&mut dh)
                .and(input)
                .for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            dz = dh;
        }
        let first = &self.layers[0];
        let g = &mut grads.layers[0];
        let x = &cache.inputs[0];
        let col = dz.sum_axis(Axis(0));
        {
            let mut gw = g.w.slice_mut(s![..self.point_dim, ..]);
            ndarray::linalg::general_mat_mul(1.0, &x.t(), &dz, 1.0, &mut gw);
        }
        let mut d_code = vec![0.0; self.code_dim];
        if self.code_dim > 0 {
            let wc = first.w.slice(s![self.point_dim.., ..]);
            for (k, &c) in code.iter().enumerate() {
                let mut row = g.w.row_mut(self.point_dim + k);
                row.scaled_add(c, &col);
            }
            let dc = wc.dot(&col);
            d_code.copy_from_slice(dc.as_slice().expect("contiguous"));
        }
        g.b += &col;
        let dx = want_input_grad.then(|| dz.dot(&first.w.slice(s![..self.point_dim, ..]).t()));
        (dx, d_code)
    }
}

impl Parameters for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.{i}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.{i}"), f);
        }
    }
}

#[inline]
pub fn relu(v: f64) -> f64 {
    v.max(0.0)
}

#[inline]
pub fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Adam with bias correction; moment buffers follow the parameter visiting order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// `params` and `grads` must visit identically shaped tensors in the same order.
    pub fn step(&mut self, params: &mut dyn Parameters, grads: &dyn Parameters) {
        let flat = grads.flatten();
        if self.m.len() != flat.len() {
            self.m = vec![0.0; flat.len()];
            self.v = vec![0.0; flat.len()];
            self.step = 0;
        }
        self.step += 1;
        if self.lr == 0.0 {
            return;
        }
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let step_size = self.lr / bc1;
        let (m, v, eps) = (&mut self.m, &mut self.v, self.eps);
        let mut idx = 0usize;
        params.visit_mut("", &mut |_, p| {
            for x in p.iter_mut() {
                let g = flat[idx];
                m[idx] = b1 * m[idx] + (1.0 - b1) * g;
                v[idx] = b2 * v[idx] + (1.0 - b2) * g * g;
                let denom = (v[idx] / bc2).sqrt() + eps;
                *x -= step_size * m[idx] / denom;
                idx += 1;
            }
        });
        debug_assert_eq!(idx, flat.len());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(mlp: &Mlp, x: &Array2<f64>, code: &[f64], target: &Array2<f64>) -> f64 {
        let y = mlp.forward(x.view(), code).unwrap();
        (&y - target).mapv(|d| d * d).sum() * 0.5
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mlp = Mlp::new(4, 3, &[6, 5, 2], &mut rng);
        for l in &mut mlp.layers {
            l.b.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        }
        let x = Array2::from_shape_simple_fn((7, 4), || rng.random_range(-1.0..1.0));
        let code = vec![0.4, -0.2, 0.9];
        let target = Array2::from_shape_simple_fn((7, 2), || rng.random_range(-1.0..1.0));

        let (y, cache) = mlp.forward_cached(x.view(), &code).unwrap();
        let mut grads = mlp.zeros_like();
        let (dx, dcode) = mlp.backward(&cache, &code, &y - &target, &mut grads, true);
        let dx = dx.unwrap();

        let h = 1e-6;
        let analytic = grads.flatten();
        let mut idx = 0;
        let base = mlp.clone();
        let n = base.param_count();
        for k in 0..n {
            let mut plus = base.clone();
            let mut minus = base.clone();
            let mut i = 0;
            plus.visit_mut("", &mut |_, p| {
                for v in p.iter_mut() {
                    if i == k {
                        *v += h;
                    }
                    i += 1;
                }
            });
            i = 0;
            minus.visit_mut("", &mut |_, p| {
                for v in p.iter_mut() {
                    if i == k {
                        *v -= h;
                    }
                    i += 1;
                }
            });
            let fd = (loss(&plus, &x, &code, &target) - loss(&minus, &x, &code, &target)) / (2.0 * h);
            assert!((fd - analytic[k]).abs() < 1e-6 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", analytic[k]);
            idx += 1;
        }
        assert_eq!(idx, n);

        for c in 0..code.len() {
            let mut cp = code.clone();
            let mut cm = code.clone();
            cp[c] += h;
            cm[c] -= h;
            let fd = (loss(&mlp, &x, &cp, &target) - loss(&mlp, &x, &cm, &target)) / (2.0 * h);
            assert!((fd - dcode[c]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        for r in 0..x.nrows() {
            for c in 0..x.ncols() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[[r, c]] += h;
                xm[[r, c]] -= h;
                let fd = (loss(&mlp, &xp, &code, &target) - loss(&mlp, &xm, &code, &target)) / (2.0 * h);
                assert!((fd - dx[[r, c]]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(3, 2, &[4, 1], &mut rng);
        let x = Array2::zeros((2, 4));
        assert!(matches!(
            mlp.forward(x.view(), &[0.0, 0.0]),
            Err(Error::DimMismatch { .. })
        ));
        let x = Array2::zeros((2, 3));
        assert!(mlp.forward(x.view(), &[0.0]).is_err());
    }

    #[test]
    fn adam_with_zero_rate_leaves_parameters_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::new(2, 0, &[3, 1], &mut rng);
        let before = mlp.flatten();
        let mut grads = mlp.zeros_like();
        grads.visit_mut("", &mut |_, p| p.iter_mut().for_each(|v| *v = 1.0));
        let mut opt = Adam::new(0.0);
        opt.step(&mut mlp, &grads);
        assert_eq!(before, mlp.flatten());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::new(2, 0, &[3, 1], &mut rng);
        let before = mlp.flatten();
        let mut grads = mlp.zeros_like();
        grads.visit_mut("", &mut |_, p| p.iter_mut().for_each(|v| *v = -2.5));
        let mut opt = Adam::new(0.01);
        opt.step(&mut mlp, &grads);
        for (a, b) in before.iter().zip(mlp.flatten()) {
            assert!((b - a - 0.01).abs() < 1e-9);
        }
    }
}
