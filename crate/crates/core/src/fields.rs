//! Deformation field and conditional feature radiance field.
//!
//! A world point `x` is warped into canonical space by
//! `x̂ = x + D(γ(x), w)`; the conditional field then maps
//! `(γ(x̂), z_id)` through a ReLU trunk to a density and an intermediate
//! feature, and a small head maps `(intermediate, γ(d), z_exp, z_ill)` to
//! the rendered feature vector. Density never sees the view direction or
//! the expression/illumination codes.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::nn::{softplus, sigmoid, Mlp, MlpCache, Parameters};
use crate::upsampler::{Upsampler, UpsamplerSpec};

/// Per-frame conditioning codes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentBundle {
    pub z_id: Vec<f64>,
    pub z_exp: Vec<f64>,
    pub z_ill: Vec<f64>,
    /// Deformation latent: the expression code for the head, a shared
    /// learned vector for the torso.
    pub w: Vec<f64>,
}

impl LatentBundle {
    pub fn is_finite(&self) -> bool {
        [&self.z_id, &self.z_exp, &self.z_ill, &self.w]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub l_pos_deform: usize,
    pub l_pos_field: usize,
    pub l_dir: usize,
    pub include_raw: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            l_pos_deform: 4,
            l_pos_field: 8,
            l_dir: 4,
            include_raw: true,
        }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_pos_deform == 0 || self.l_pos_field == 0 || self.l_dir == 0 {
            return Err(Error::InvalidConfig(
                "encoding frequencies must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Layer counts and widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldNetSpec {
    pub trunk_layers: usize,
    pub trunk_width: usize,
    pub head_layers: usize,
    pub head_width: usize,
    pub feature_dim: usize,
    pub deform_layers: usize,
    pub deform_width: usize,
}

impl Default for FieldNetSpec {
    fn default() -> Self {
        Self {
            trunk_layers: 10,
            trunk_width: 64,
            head_layers: 3,
            head_width: 32,
            feature_dim: 16,
            deform_layers: 4,
            deform_width: 32,
        }
    }
}

impl FieldNetSpec {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.trunk_layers,
            self.trunk_width,
            self.head_layers,
            self.head_width,
            self.feature_dim,
            self.deform_layers,
            self.deform_width,
        ];
        if all.iter().any(|&v| v == 0) {
            return Err(Error::InvalidConfig(
                "network widths and depths must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Head,
    Torso,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::Head => "head",
            Region::Torso => "torso",
        }
    }
}

/// Code dimensions shared by every model of one subject.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeDims {
    pub id: usize,
    pub expr: usize,
    pub ill: usize,
    pub torso_w: usize,
}

impl CodeDims {
    pub fn new(expr: usize) -> Self {
        Self {
            id: 100,
            expr,
            ill: 8,
            torso_w: 32,
        }
    }
}

pub fn encoded_dim(d: usize, levels: usize, include_raw: bool) -> usize {
    d * (usize::from(include_raw) + 2 * levels)
}

/// Fourier features `[v] ++ [sin(2^k π v), cos(2^k π v)]_{k<L}`.
pub fn pos_encode(v: &[f64], levels: usize, include_raw: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_dim(v.len(), levels, include_raw));
    if include_raw {
        out.extend_from_slice(v);
    }
    for k in 0..levels {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        out.extend(v.iter().map(|x| (f * x).sin()));
        out.extend(v.iter().map(|x| (f * x).cos()));
    }
    out
}

/// Row-wise [`pos_encode`] of an `N × d` batch.
pub fn pos_encode_batch(v: ArrayView2<f64>, levels: usize, include_raw: bool) -> Array2<f64> {
    let d = v.ncols();
    let mut out = Array2::zeros((v.nrows(), encoded_dim(d, levels, include_raw)));
    for (row, mut o) in v.outer_iter().zip(out.outer_iter_mut()) {
        let mut c = 0;
        if include_raw {
            for j in 0..d {
                o[c + j] = row[j];
            }
            c += d;
        }
        for k in 0..levels {
            let f = (1u64 << k) as f64 * std::f64::consts::PI;
            for j in 0..d {
                let (s, co) = (f * row[j]).sin_cos();
                o[c + j] = s;
                o[c + d + j] = co;
            }
            c += 2 * d;
        }
    }
    out
}

/// Gradient of a loss w.r.t. the raw input given its gradient w.r.t. the encoding.
pub fn pos_encode_backward(
    v: ArrayView2<f64>,
    d_enc: ArrayView2<f64>,
    levels: usize,
    include_raw: bool,
) -> Array2<f64> {
    let d = v.ncols();
    let mut out = Array2::zeros(v.raw_dim());
    for ((row, g), mut o) in v.outer_iter().zip(d_enc.outer_iter()).zip(out.outer_iter_mut()) {
        let mut c = 0;
        if include_raw {
            for j in 0..d {
                o[j] += g[j];
            }
            c += d;
        }
        for k in 0..levels {
            let f = (1u64 << k) as f64 * std::f64::consts::PI;
            for j in 0..d {
                let (s, co) = (f * row[j]).sin_cos();
                o[j] += f * (co * g[c + j] - s * g[c + d + j]);
            }
            c += 2 * d;
        }
    }
    out
}

/// `D_θ`: predicts a displacement from `(γ(x), w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformField {
    pub mlp: Mlp,
    pub levels: usize,
    pub include_raw: bool,
}

pub struct DeformCache {
    enc: Option<MlpCache>,
}

impl DeformField {
    pub fn new<R: Rng + ?Sized>(
        enc: &EncodingConfig,
        spec: &FieldNetSpec,
        w_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut widths = vec![spec.deform_width; spec.deform_layers.saturating_sub(1)];
        widths.push(3);
        let mut mlp = Mlp::new(
            encoded_dim(3, enc.l_pos_deform, enc.include_raw),
            w_dim,
            &widths,
            rng,
        );
        mlp.zero_output_layer();
        Self {
            mlp,
            levels: enc.l_pos_deform,
            include_raw: enc.include_raw,
        }
    }

    pub fn w_dim(&self) -> usize {
        self.mlp.code_dim
    }

    pub fn forward(&self, x: ArrayView2<f64>, w: &[f64]) -> Result<Array2<f64>> {
        let enc = pos_encode_batch(x, self.levels, self.include_raw);
        self.mlp.forward(enc.view(), w)
    }

    fn forward_cached(&self, x: ArrayView2<f64>, w: &[f64]) -> Result<(Array2<f64>, DeformCache)> {
        let enc = pos_encode_batch(x, self.levels, self.include_raw);
        let (out, cache) = self.mlp.forward_cached(enc.view(), w)?;
        Ok((out, DeformCache { enc: Some(cache) }))
    }

    /// Returns `(d_x, d_w)`; `d_x` only when requested.
    fn backward(
        &self,
        cache: &DeformCache,
        x: ArrayView2<f64>,
        w: &[f64],
        d_out: Array2<f64>,
        grads: &mut DeformField,
        want_x: bool,
    ) -> (Option<Array2<f64>>, Vec<f64>) {
        let mc = cache.enc.as_ref().expect("forward_cached");
        let (d_enc, d_w) = self.mlp.backward(mc, w, d_out, &mut grads.mlp, want_x);
        let d_x = d_enc.map(|g| pos_encode_backward(x, g.view(), self.levels, self.include_raw));
        (d_x, d_w)
    }

    /// Displacement at a single point.
    pub fn deform(&self, x: Vec3, w: &[f64]) -> Result<Vec3> {
        check_finite(&x, "deform input")?;
        let xs = Array2::from_shape_vec((1, 3), x.to_vec()).expect("1x3");
        let out = self.forward(xs.view(), w)?;
        Ok([out[[0, 0]], out[[0, 1]], out[[0, 2]]])
    }

    /// `x̂ = x + D(γ(x), w)`.
    pub fn canonicalize(&self, x: Vec3, w: &[f64]) -> Result<Vec3> {
        let d = self.deform(x, w)?;
        Ok([x[0] + d[0], x[1] + d[1], x[2] + d[2]])
    }

    /// `∂Δx/∂x` at a point; row `i` is the gradient of component `i`.
    pub fn jacobian(&self, x: Vec3, w: &[f64]) -> Result<[[f64; 3]; 3]> {
        let xs = Array2::from_shape_vec((1, 3), x.to_vec()).expect("1x3");
        let (_, cache) = self.forward_cached(xs.view(), w)?;
        let mut jac = [[0.0; 3]; 3];
        for (i, row) in jac.iter_mut().enumerate() {
            let mut seed = Array2::zeros((1, 3));
            seed[[0, i]] = 1.0;
            let mut scratch = self.zeros_like();
            let (dx, _) = self.backward(&cache, xs.view(), w, seed, &mut scratch, true);
            let dx = dx.expect("requested");
            *row = [dx[[0, 0]], dx[[0, 1]], dx[[0, 2]]];
        }
        Ok(jac)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            mlp: self.mlp.zeros_like(),
            levels: self.levels,
            include_raw: self.include_raw,
        }
    }
}

/// `F_θ`: conditional density + feature field in canonical space.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceField {
    pub trunk: Mlp,
    pub head: Mlp,
    pub pos_levels: usize,
    pub dir_levels: usize,
    pub include_raw: bool,
}

pub struct RadianceCache {
    trunk: MlpCache,
    head: MlpCache,
    sigma_raw: Array1<f64>,
    head_code: Vec<f64>,
}

/// Density and feature outputs for a batch of points.
pub struct FieldOutput {
    pub sigma: Array1<f64>,
    pub features: Array2<f64>,
}

impl RadianceField {
    pub fn new<R: Rng + ?Sized>(
        enc: &EncodingConfig,
        spec: &FieldNetSpec,
        dims: &CodeDims,
        rng: &mut R,
    ) -> Self {
        let mut trunk_widths = vec![spec.trunk_width; spec.trunk_layers];
        trunk_widths.push(1 + spec.trunk_width);
        let trunk = Mlp::new(
            encoded_dim(3, enc.l_pos_field, enc.include_raw),
            dims.id,
            &trunk_widths,
            rng,
        );
        let mut head_widths = vec![spec.head_width; spec.head_layers.saturating_sub(1)];
        head_widths.push(spec.feature_dim);
        let head = Mlp::new(
            spec.trunk_width + encoded_dim(3, enc.l_dir, enc.include_raw),
            dims.expr + dims.ill,
            &head_widths,
            rng,
        );
        Self {
            trunk,
            head,
            pos_levels: enc.l_pos_field,
            dir_levels: enc.l_dir,
            include_raw: enc.include_raw,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.head.out_dim()
    }

    fn inter_dim(&self) -> usize {
        self.trunk.out_dim() - 1
    }

    fn head_input(&self, trunk_out: &Array2<f64>, dirs: ArrayView2<f64>) -> Array2<f64> {
        let inter = trunk_out.slice(s![.., 1..]);
        let dir_enc = pos_encode_batch(dirs, self.dir_levels, self.include_raw);
        ndarray::concatenate(Axis(1), &[inter.view(), dir_enc.view()]).expect("same rows")
    }

    fn head_code(z_exp: &[f64], z_ill: &[f64]) -> Vec<f64> {
        let mut c = Vec::with_capacity(z_exp.len() + z_ill.len());
        c.extend_from_slice(z_exp);
        c.extend_from_slice(z_ill);
        c
    }

    /// Density only; never touches the view direction or appearance codes.
    pub fn density(&self, xh: ArrayView2<f64>, z_id: &[f64]) -> Result<Array1<f64>> {
        let enc = pos_encode_batch(xh, self.pos_levels, self.include_raw);
        let out = self.trunk.forward(enc.view(), z_id)?;
        Ok(out.column(0).mapv(softplus))
    }

    pub fn forward(
        &self,
        xh: ArrayView2<f64>,
        dirs: ArrayView2<f64>,
        z_id: &[f64],
        z_exp: &[f64],
        z_ill: &[f64],
    ) -> Result<FieldOutput> {
        let enc = pos_encode_batch(xh, self.pos_levels, self.include_raw);
        let t = self.trunk.forward(enc.view(), z_id)?;
        let hin = self.head_input(&t, dirs);
        let features = self.head.forward(hin.view(), &Self::head_code(z_exp, z_ill))?;
        Ok(FieldOutput {
            sigma: t.column(0).mapv(softplus),
            features,
        })
    }

    fn forward_cached(
        &self,
        xh: ArrayView2<f64>,
        dirs: ArrayView2<f64>,
        z_id: &[f64],
        z_exp: &[f64],
        z_ill: &[f64],
    ) -> Result<(FieldOutput, RadianceCache)> {
        let enc = pos_encode_batch(xh, self.pos_levels, self.include_raw);
        let (t, trunk) = self.trunk.forward_cached(enc.view(), z_id)?;
        let hin = self.head_input(&t, dirs);
        let head_code = Self::head_code(z_exp, z_ill);
        let (features, head) = self.head.forward_cached(hin.view(), &head_code)?;
        let sigma_raw = t.column(0).to_owned();
        Ok((
            FieldOutput {
                sigma: sigma_raw.mapv(softplus),
                features,
            },
            RadianceCache {
                trunk,
                head,
                sigma_raw,
                head_code,
            },
        ))
    }

    /// Returns `(d_xh, d_z_id, d_z_exp, d_z_ill)`.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        cache: &RadianceCache,
        xh: ArrayView2<f64>,
        z_id: &[f64],
        d_sigma: &Array1<f64>,
        d_features: Array2<f64>,
        grads: &mut RadianceField,
        want_x: bool,
    ) -> (Option<Array2<f64>>, Vec<f64>, Vec<f64>) {
        let (d_hin, d_head_code) =
            self.head
                .backward(&cache.head, &cache.head_code, d_features, &mut grads.head, true);
        let d_hin = d_hin.expect("requested");
        let inter = self.inter_dim();
        let mut d_trunk = Array2::zeros((d_hin.nrows(), 1 + inter));
        d_trunk
            .slice_mut(s![.., 1..])
            .assign(&d_hin.slice(s![.., ..inter]));
        for (i, (&g, &raw)) in d_sigma.iter().zip(cache.sigma_raw.iter()).enumerate() {
            d_trunk[[i, 0]] = g * sigmoid(raw);
        }
        let (d_enc, d_id) = self
            .trunk
            .backward(&cache.trunk, z_id, d_trunk, &mut grads.trunk, want_x);
        let d_x = d_enc.map(|g| pos_encode_backward(xh, g.view(), self.pos_levels, self.include_raw));
        (d_x, d_id, d_head_code)
    }

    /// `(σ, F)` at a single canonical point.
    pub fn eval(
        &self,
        xh: Vec3,
        dir: Vec3,
        z_id: &[f64],
        z_exp: &[f64],
        z_ill: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        let n = crate::geometry::norm(dir);
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("view direction norm {n}, expected 1")));
        }
        let x = Array2::from_shape_vec((1, 3), xh.to_vec()).expect("1x3");
        let d = Array2::from_shape_vec((1, 3), dir.to_vec()).expect("1x3");
        let out = self.forward(x.view(), d.view(), z_id, z_exp, z_ill)?;
        Ok((out.sigma[0], out.features.row(0).to_vec()))
    }

    /// `∂σ/∂x̂` at a single canonical point.
    pub fn density_gradient(&self, xh: Vec3, dir: Vec3, z_id: &[f64], z_exp: &[f64], z_ill: &[f64]) -> Result<Vec3> {
        let x = Array2::from_shape_vec((1, 3), xh.to_vec()).expect("1x3");
        let d = Array2::from_shape_vec((1, 3), dir.to_vec()).expect("1x3");
        let (_, cache) = self.forward_cached(x.view(), d.view(), z_id, z_exp, z_ill)?;
        let mut scratch = self.zeros_like();
        let (dx, _, _) = self.backward(
            &cache,
            x.view(),
            z_id,
            &Array1::from_elem(1, 1.0),
            Array2::zeros((1, self.feature_dim())),
            &mut scratch,
            true,
        );
        let dx = dx.expect("requested");
        Ok([dx[[0, 0]], dx[[0, 1]], dx[[0, 2]]])
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            trunk: self.trunk.zeros_like(),
            head: self.head.zeros_like(),
            pos_levels: self.pos_levels,
            dir_levels: self.dir_levels,
            include_raw: self.include_raw,
        }
    }
}

/// Parameter groups, used to freeze parts of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Groups {
    pub deform: bool,
    pub field: bool,
    pub upsampler: bool,
    /// Per-subject identity and illumination embeddings.
    pub codes: bool,
}

impl Groups {
    pub const ALL: Groups = Groups {
        deform: true,
        field: true,
        upsampler: true,
        codes: true,
    };
    /// Radiance field and upsampler only.
    pub const APPEARANCE: Groups = Groups {
        deform: false,
        field: true,
        upsampler: true,
        codes: false,
    };
    pub const DEFORM: Groups = Groups {
        deform: true,
        field: false,
        upsampler: false,
        codes: false,
    };
}

/// One region's deformation field, radiance field and upsampler.
#[derive(Clone, Debug, PartialEq)]
pub struct PortraitModel {
    pub region: Region,
    pub encoding: EncodingConfig,
    pub net_spec: FieldNetSpec,
    pub upsampler_spec: UpsamplerSpec,
    pub dims: CodeDims,
    pub deform: DeformField,
    /// Shared trainable deformation latent (torso only).
    pub latent_w: Option<Vec<f64>>,
    pub field: RadianceField,
    pub upsampler: Upsampler,
}

/// Intermediate values of a batched point evaluation kept for backprop.
pub struct PointCache {
    x: Array2<f64>,
    xh: Array2<f64>,
    deform: DeformCache,
    field: RadianceCache,
}

/// Gradients w.r.t. the per-subject codes that feed a model.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeGrads {
    pub z_id: Vec<f64>,
    pub z_ill: Vec<f64>,
}

impl CodeGrads {
    pub fn zeros(dims: &CodeDims) -> Self {
        Self {
            z_id: vec![0.0; dims.id],
            z_ill: vec![0.0; dims.ill],
        }
    }
}

impl PortraitModel {
    pub fn new<R: Rng + ?Sized>(
        region: Region,
        encoding: EncodingConfig,
        net_spec: FieldNetSpec,
        upsampler_spec: UpsamplerSpec,
        dims: CodeDims,
        rng: &mut R,
    ) -> Result<Self> {
        encoding.validate()?;
        net_spec.validate()?;
        let w_dim = match region {
            Region::Head => dims.expr,
            Region::Torso => dims.torso_w,
        };
        let deform = DeformField::new(&encoding, &net_spec, w_dim, rng);
        let latent_w = match region {
            Region::Head => None,
            Region::Torso => {
                let n = Normal::new(0.0, 0.01).expect("finite");
                Some((0..dims.torso_w).map(|_| n.sample(rng)).collect())
            }
        };
        let field = RadianceField::new(&encoding, &net_spec, &dims, rng);
        let upsampler = Upsampler::new(net_spec.feature_dim, &upsampler_spec, rng)?;
        Ok(Self {
            region,
            encoding,
            net_spec,
            upsampler_spec,
            dims,
            deform,
            latent_w,
            field,
            upsampler,
        })
    }

    /// The deformation latent used for a frame with expression `z_exp`.
    pub fn deform_latent<'a>(&'a self, z_exp: &'a [f64]) -> &'a [f64] {
        match &self.latent_w {
            Some(w) => w,
            None => z_exp,
        }
    }

    pub fn bundle(&self, z_id: &[f64], z_exp: &[f64], z_ill: &[f64]) -> LatentBundle {
        LatentBundle {
            z_id: z_id.to_vec(),
            z_exp: z_exp.to_vec(),
            z_ill: z_ill.to_vec(),
            w: self.deform_latent(z_exp).to_vec(),
        }
    }

    fn check_bundle(&self, b: &LatentBundle) -> Result<()> {
        let checks = [
            ("z_id", self.dims.id, b.z_id.len()),
            ("z_exp", self.dims.expr, b.z_exp.len()),
            ("z_ill", self.dims.ill, b.z_ill.len()),
            ("w", self.deform.w_dim(), b.w.len()),
        ];
        for (what, expected, got) in checks {
            if expected != got {
                return Err(Error::DimMismatch {
                    what,
                    expected,
                    got,
                });
            }
        }
        Ok(())
    }

    /// Density and features at world points seen along directions `dirs`.
    pub fn eval_points(
        &self,
        x: ArrayView2<f64>,
        dirs: ArrayView2<f64>,
        bundle: &LatentBundle,
    ) -> Result<FieldOutput> {
        self.check_bundle(bundle)?;
        let xh = &x + &self.deform.forward(x, &bundle.w)?;
        self.field
            .forward(xh.view(), dirs, &bundle.z_id, &bundle.z_exp, &bundle.z_ill)
    }

    pub fn eval_points_cached(
        &self,
        x: ArrayView2<f64>,
        dirs: ArrayView2<f64>,
        bundle: &LatentBundle,
    ) -> Result<(FieldOutput, PointCache)> {
        self.check_bundle(bundle)?;
        let (delta, deform) = self.deform.forward_cached(x, &bundle.w)?;
        let xh = &x + &delta;
        let (out, field) = self.field.forward_cached(
            xh.view(),
            dirs,
            &bundle.z_id,
            &bundle.z_exp,
            &bundle.z_ill,
        )?;
        Ok((
            out,
            PointCache {
                x: x.to_owned(),
                xh,
                deform,
                field,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` (including the torso
    /// latent) and code gradients into `codes`.
    pub fn backward_points(
        &self,
        cache: &PointCache,
        bundle: &LatentBundle,
        d_sigma: &Array1<f64>,
        d_features: Array2<f64>,
        grads: &mut PortraitModel,
        codes: &mut CodeGrads,
    ) {
        let (d_xh, d_id, d_head_code) = self.field.backward(
            &cache.field,
            cache.xh.view(),
            &bundle.z_id,
            d_sigma,
            d_features,
            &mut grads.field,
            true,
        );
        for (a, b) in codes.z_id.iter_mut().zip(&d_id) {
            *a += b;
        }
        let ill = &d_head_code[self.dims.expr..];
        for (a, b) in codes.z_ill.iter_mut().zip(ill) {
            *a += b;
        }
        let d_xh = d_xh.expect("requested");
        let (_, d_w) = self.deform.backward(
            &cache.deform,
            cache.x.view(),
            &bundle.w,
            d_xh,
            &mut grads.deform,
            false,
        );
        if let Some(gw) = grads.latent_w.as_mut() {
            for (a, b) in gw.iter_mut().zip(&d_w) {
                *a += b;
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            region: self.region,
            encoding: self.encoding,
            net_spec: self.net_spec,
            upsampler_spec: self.upsampler_spec,
            dims: self.dims,
            deform: self.deform.zeros_like(),
            latent_w: self.latent_w.as_ref().map(|w| vec![0.0; w.len()]),
            field: self.field.zeros_like(),
            upsampler: self.upsampler.zeros_like(),
        }
    }

    pub fn visit_groups(&self, groups: Groups, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        let p = self.region.as_str();
        if groups.deform {
            self.deform.mlp.visit(&format!("{p}/deform"), f);
            if let Some(w) = &self.latent_w {
                f(&format!("{p}/latent_w"), &[w.len()], w);
            }
        }
        if groups.field {
            self.field.trunk.visit(&format!("{p}/field/trunk"), f);
            self.field.head.visit(&format!("{p}/field/head"), f);
        }
        if groups.upsampler {
            self.upsampler.visit(&format!("{p}/upsampler"), f);
        }
    }

    pub fn visit_groups_mut(&mut self, groups: Groups, f: &mut dyn FnMut(&str, &mut [f64])) {
        let p = self.region.as_str();
        if groups.deform {
            self.deform.mlp.visit_mut(&format!("{p}/deform"), f);
            if let Some(w) = &mut self.latent_w {
                f(&format!("{p}/latent_w"), w);
            }
        }
        if groups.field {
            self.field.trunk.visit_mut(&format!("{p}/field/trunk"), f);
            self.field.head.visit_mut(&format!("{p}/field/head"), f);
        }
        if groups.upsampler {
            self.upsampler.visit_mut(&format!("{p}/upsampler"), f);
        }
    }

    /// Flattened deformation-side parameters (network and torso latent).
    pub fn deformation_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_groups(Groups::DEFORM, &mut |_, _, v| out.extend_from_slice(v));
        out
    }
}

impl Parameters for PortraitModel {
    fn visit(&self, _prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.visit_groups(Groups::ALL, f);
    }

    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.visit_groups_mut(Groups::ALL, f);
    }
}

/// Trainable per-subject embeddings shared by the head and torso models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectCodes {
    pub z_id: Vec<f64>,
    pub z_ill: Vec<f64>,
}

impl SubjectCodes {
    pub fn new<R: Rng + ?Sized>(dims: &CodeDims, rng: &mut R) -> Self {
        let n = Normal::new(0.0, 0.01).expect("finite");
        Self {
            z_id: (0..dims.id).map(|_| n.sample(rng)).collect(),
            z_ill: (0..dims.ill).map(|_| n.sample(rng)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            z_id: vec![0.0; self.z_id.len()],
            z_ill: vec![0.0; self.z_ill.len()],
        }
    }
}

/// Architecture of both region models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    #[serde(default)]
    pub encoding: EncodingConfig,
    #[serde(default)]
    pub net: FieldNetSpec,
    #[serde(default)]
    pub upsampler: UpsamplerSpec,
}

/// Head model, torso model and the subject codes they share.
#[derive(Clone, Debug, PartialEq)]
pub struct Avatar {
    pub head: PortraitModel,
    pub torso: PortraitModel,
    pub codes: SubjectCodes,
    /// Groups visited through [`Parameters`]; the optimizer only sees these.
    pub trainable: Groups,
}

impl Avatar {
    pub fn new(config: &ModelConfig, expr_dim: usize, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dims = CodeDims::new(expr_dim);
        let head = PortraitModel::new(
            Region::Head,
            config.encoding,
            config.net,
            config.upsampler,
            dims,
            &mut rng,
        )?;
        let torso = PortraitModel::new(
            Region::Torso,
            config.encoding,
            config.net,
            config.upsampler,
            dims,
            &mut rng,
        )?;
        let codes = SubjectCodes::new(&dims, &mut rng);
        Ok(Self {
            head,
            torso,
            codes,
            trainable: Groups::ALL,
        })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            encoding: self.head.encoding,
            net: self.head.net_spec,
            upsampler: self.head.upsampler_spec,
        }
    }

    pub fn dims(&self) -> CodeDims {
        self.head.dims
    }

    pub fn model(&self, region: Region) -> &PortraitModel {
        match region {
            Region::Head => &self.head,
            Region::Torso => &self.torso,
        }
    }

    pub fn bundle(&self, region: Region, z_exp: &[f64]) -> LatentBundle {
        self.model(region)
            .bundle(&self.codes.z_id, z_exp, &self.codes.z_ill)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            head: self.head.zeros_like(),
            torso: self.torso.zeros_like(),
            codes: self.codes.zeros_like(),
            trainable: self.trainable,
        }
    }

    pub fn add_code_grads(&mut self, g: &CodeGrads) {
        for (a, b) in self.codes.z_id.iter_mut().zip(&g.z_id) {
            *a += b;
        }
        for (a, b) in self.codes.z_ill.iter_mut().zip(&g.z_ill) {
            *a += b;
        }
    }

    pub fn visit_groups(&self, groups: Groups, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.head.visit_groups(groups, f);
        self.torso.visit_groups(groups, f);
        if groups.codes {
            f("codes/z_id", &[self.codes.z_id.len()], &self.codes.z_id);
            f("codes/z_ill", &[self.codes.z_ill.len()], &self.codes.z_ill);
        }
    }

    pub fn visit_groups_mut(&mut self, groups: Groups, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.head.visit_groups_mut(groups, f);
        self.torso.visit_groups_mut(groups, f);
        if groups.codes {
            f("codes/z_id", &mut self.codes.z_id);
            f("codes/z_ill", &mut self.codes.z_ill);
        }
    }

    /// Every parameter regardless of [`Avatar::trainable`].
    pub fn all_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_groups(Groups::ALL, &mut |_, _, v| out.extend_from_slice(v));
        out
    }

    /// Deformation networks of both regions plus the torso latent.
    pub fn deformation_params(&self) -> Vec<f64> {
        let mut out = self.head.deformation_params();
        out.extend(self.torso.deformation_params());
        out
    }

    /// SHA-256 hex digest of [`Avatar::deformation_params`].
    pub fn deformation_hash(&self) -> String {
        params_hash(&self.deformation_params())
    }

    /// SHA-256 hex digest of [`Avatar::all_params`].
    pub fn params_hash(&self) -> String {
        params_hash(&self.all_params())
    }

    pub fn is_finite(&self) -> bool {
        self.all_params().iter().all(|v| v.is_finite())
    }
}

fn params_hash(values: &[f64]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Parameters for Avatar {
    fn visit(&self, _prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.visit_groups(self.trainable, f);
    }

    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        let g = self.trainable;
        self.visit_groups_mut(g, f);
    }
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Contract(format!("{what} is not finite")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Parameters;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mini_spec() -> FieldNetSpec {
        FieldNetSpec {
            trunk_layers: 2,
            trunk_width: 8,
            head_layers: 2,
            head_width: 6,
            feature_dim: 4,
            deform_layers: 3,
            deform_width: 16,
        }
    }

    fn mini_dims() -> CodeDims {
        CodeDims {
            id: 5,
            expr: 3,
            ill: 2,
            torso_w: 4,
        }
    }

    fn randomize(model: &mut impl Parameters, rng: &mut ChaCha8Rng, amp: f64) {
        model.visit_mut("", &mut |_, p| {
            for v in p.iter_mut() {
                *v = rng.random_range(-amp..amp);
            }
        });
    }

    #[test]
    fn zero_input_encoding() {
        let e = pos_encode(&[0.0; 3], 8, true);
        assert_eq!(e.len(), 51);
        assert!(e[..3].iter().all(|&v| v == 0.0));
        for k in 0..8 {
            let base = 3 + 6 * k;
            assert!(e[base..base + 3].iter().all(|&v| v == 0.0));
            assert!(e[base + 3..base + 6].iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn encoding_dimension_formula() {
        assert_eq!(pos_encode(&[0.1, 0.2, 0.3], 2, true).len(), 15);
        assert_eq!(encoded_dim(3, 2, true), 15);
        assert_eq!(pos_encode(&[0.1, 0.2], 3, false).len(), 12);
    }

    #[test]
    fn zero_network_deformation_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = DeformField::new(&EncodingConfig::default(), &mini_spec(), 3, &mut rng);
        d.mlp.visit_mut("", &mut |_, p| p.fill(0.0));
        let x = [0.3, -0.2, 0.7];
        let w = [0.5, -1.0, 2.0];
        assert_eq!(d.deform(x, &w).unwrap(), [0.0; 3]);
        assert_eq!(d.canonicalize(x, &w).unwrap(), x);
    }

    #[test]
    fn fresh_deformation_starts_at_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = DeformField::new(&EncodingConfig::default(), &mini_spec(), 3, &mut rng);
        let x = [0.1, 0.2, -0.3];
        assert_eq!(d.canonicalize(x, &[1.0, 0.0, -1.0]).unwrap(), x);
        let jac = d.jacobian(x, &[1.0, 0.0, -1.0]).unwrap();
        assert_eq!(jac, [[0.0; 3]; 3]);
    }

    #[test]
    fn canonicalize_is_point_plus_displacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut d = DeformField::new(&EncodingConfig::default(), &mini_spec(), 3, &mut rng);
        randomize(&mut d.mlp, &mut rng, 0.3);
        let x = [0.4, 0.1, -0.6];
        let w = [0.2, 0.3, -0.1];
        let c = d.canonicalize(x, &w).unwrap();
        let dx = d.deform(x, &w).unwrap();
        for i in 0..3 {
            assert_eq!(c[i], x[i] + dx[i]);
        }
        assert_eq!(d.deform(x, &w).unwrap(), dx);
        assert!(matches!(d.deform(x, &[0.0; 2]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn density_ignores_view_direction_and_appearance_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut f = RadianceField::new(&EncodingConfig::default(), &mini_spec(), &mini_dims(), &mut rng);
        randomize(&mut f.trunk, &mut rng, 0.5);
        let z_id = [0.1, 0.2, 0.3, 0.4, 0.5];
        let x = [0.2, -0.1, 0.3];
        let (s1, f1) = f.eval(x, [0.0, 0.0, 1.0], &z_id, &[0.1, 0.2, 0.3], &[0.0, 1.0]).unwrap();
        let (s2, f2) = f
            .eval(x, crate::geometry::normalize([1.0, 1.0, 0.0]), &z_id, &[-1.0, 2.0, 0.0], &[3.0, -1.0])
            .unwrap();
        assert_eq!(s1.to_bits(), s2.to_bits());
        assert_ne!(f1, f2);
        assert!(f.eval(x, [0.0, 0.0, 2.0], &z_id, &[0.0; 3], &[0.0; 2]).is_err());
    }
}
