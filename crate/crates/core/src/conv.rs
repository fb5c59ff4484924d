//! 3×3 convolutions over `(H·W) × C` feature maps via im2col + GEMM.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Linear, Parameters};

/// Spatial feature map stored row-major, one row per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub data: Array2<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, data: Array2<f64>) -> Result<Self> {
        if data.nrows() != height * width {
            return Err(Error::DimMismatch {
                what: "feature map rows",
                expected: height * width,
                got: data.nrows(),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }
}

/// 3×3 convolution, zero padding 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `(9·c_in) × c_out`, rows ordered `(ky, kx, c)`.
    pub kernel: Linear,
    pub c_in: usize,
    pub stride: usize,
}

pub struct ConvCache {
    cols: Array2<f64>,
    in_h: usize,
    in_w: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            kernel: Linear::he(9 * c_in, c_out, rng),
            c_in,
            stride,
        }
    }

    pub fn c_out(&self) -> usize {
        self.kernel.fan_out()
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }

    fn im2col(&self, x: &FeatureMap) -> Array2<f64> {
        let (ho, wo) = self.out_size(x.height, x.width);
        let c = self.c_in;
        let mut cols = Array2::zeros((ho * wo, 9 * c));
        for oy in 0..ho {
            for ox in 0..wo {
                let mut row = cols.row_mut(oy * wo + ox);
                for ky in 0..3 {
                    let iy = (oy * self.stride + ky) as isize - 1;
                    if iy < 0 || iy >= x.height as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * self.stride + kx) as isize - 1;
                        if ix < 0 || ix >= x.width as isize {
                            continue;
                        }
                        let src = x.data.row(iy as usize * x.width + ix as usize);
                        let base = (ky * 3 + kx) * c;
                        for ch in 0..c {
                            row[base + ch] = src[ch];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, in_h: usize, in_w: usize) -> Array2<f64> {
        let (ho, wo) = self.out_size(in_h, in_w);
        let c = self.c_in;
        let mut dx = Array2::zeros((in_h * in_w, c));
        for oy in 0..ho {
            for ox in 0..wo {
                let row = dcols.row(oy * wo + ox);
                for ky in 0..3 {
                    let iy = (oy * self.stride + ky) as isize - 1;
                    if iy < 0 || iy >= in_h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * self.stride + kx) as isize - 1;
                        if ix < 0 || ix >= in_w as isize {
                            continue;
                        }
                        let mut dst = dx.row_mut(iy as usize * in_w + ix as usize);
                        let base = (ky * 3 + kx) * c;
                        for ch in 0..c {
                            dst[ch] += row[base + ch];
                        }
                    }
                }
            }
        }
        dx
    }

    fn check(&self, x: &FeatureMap) -> Result<()> {
        if x.channels() != self.c_in {
            return Err(Error::DimMismatch {
                what: "conv input channels",
                expected: self.c_in,
                got: x.channels(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &FeatureMap) -> Result<(FeatureMap, ConvCache)> {
        self.check(x)?;
        let (ho, wo) = self.out_size(x.height, x.width);
        let cols = self.im2col(x);
        let out = cols.dot(&self.kernel.w) + &self.kernel.b;
        Ok((
            FeatureMap {
                height: ho,
                width: wo,
                data: out,
            },
            ConvCache {
                cols,
                in_h: x.height,
                in_w: x.width,
            },
        ))
    }

    /// Accumulates into `grads`; returns the input gradient.
    pub fn backward(&self, cache: &ConvCache, d_out: &Array2<f64>, grads: &mut Conv2d) -> Array2<f64> {
        ndarray::linalg::general_mat_mul(1.0, &cache.cols.t(), d_out, 1.0, &mut grads.kernel.w);
        grads.kernel.b += &d_out.sum_axis(Axis(0));
        let dcols = d_out.dot(&self.kernel.w.t());
        self.col2im(&dcols, cache.in_h, cache.in_w)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            kernel: Linear::zeros(self.kernel.fan_in(), self.kernel.fan_out()),
            c_in: self.c_in,
            stride: self.stride,
        }
    }
}

impl Parameters for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.kernel.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.kernel.visit_mut(prefix, f);
    }
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(x: &FeatureMap) -> FeatureMap {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut data = Array2::zeros((h * w, x.channels()));
    for y in 0..h {
        for xx in 0..w {
            data.row_mut(y * w + xx)
                .assign(&x.data.row((y / 2) * x.width + xx / 2));
        }
    }
    FeatureMap {
        height: h,
        width: w,
        data,
    }
}

/// Adjoint of [`upsample2`] for an input of size `h × w`.
pub fn upsample2_backward(d_out: ArrayView2<f64>, h: usize, w: usize) -> Array2<f64> {
    let mut dx = Array2::zeros((h * w, d_out.ncols()));
    let w2 = 2 * w;
    for y in 0..2 * h {
        for xx in 0..w2 {
            let mut dst = dx.row_mut((y / 2) * w + xx / 2);
            dst += &d_out.row(y * w2 + xx);
        }
    }
    dx
}

pub(crate) fn relu_backward(d: &mut Array2<f64>, post: &Array2<f64>) {
    ndarray::Zip::from(d).and(post).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}
