//! Visual feature extraction: patch alignment, adaptive aggregation of patch
//! tokens into local features, condition masks over the class token, the
//! orthogonality penalty and the composition embedding of an image.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::autograd::{BatchStats, Graph, Var};
use crate::config::ModelConfig;
use crate::data::RawImageFeatures;
use crate::error::{Error, Result};
use crate::nn::{join, normal_matrix, round_matrix, Linear, ParamMeta, ParamMut, ParamRef, Parameters, Rng};
use crate::tensor::{dot, sigmoid, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and dropout.
    Train,
    /// Running statistics, no dropout; deterministic.
    Eval,
}

/// `Σ_k sigmoid(w·x_k + b) · x_k` over the rows of `patches`.
pub fn faa_forward(weight: &[f64], bias: f64, patches: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; patches.cols()];
    for k in 0..patches.rows() {
        let row = patches.row(k);
        let a = sigmoid(dot(weight, row) + bias);
        for (o, x) in out.iter_mut().zip(row) {
            *o += a * x;
        }
    }
    out
}

/// Element-wise `cls ⊙ mask`.
pub fn condition_mask_forward(mask: &[f64], cls: &[f64]) -> Vec<f64> {
    mask.iter().zip(cls).map(|(c, f)| c * f).collect()
}

/// `‖F Fᵀ − I‖_F`.
pub fn orthogonal_penalty(f: &Matrix) -> f64 {
    let mut gram = f.matmul_nt(f);
    for i in 0..gram.rows() {
        gram.set(i, i, gram.get(i, i) - 1.0);
    }
    gram.frobenius_norm()
}

/// Differentiable [`orthogonal_penalty`], `1 × 1`.
pub fn orthogonal_penalty_var(g: &mut Graph<'_>, f: Var) -> Var {
    let gram = g.matmul_nt(f, f);
    let n = g.value(gram).rows();
    let neg_eye = Matrix::identity(n).map(|x| -x);
    let centered = g.add_const(gram, &neg_eye);
    g.frobenius_norm(centered)
}

/// Batch normalization with running statistics for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
    pub running_mean: Matrix,
    pub running_var: Matrix,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Matrix::filled(1, width, 1.0),
            beta: Matrix::zeros(1, width),
            running_mean: Matrix::zeros(1, width),
            running_var: Matrix::filled(1, width, 1.0),
        }
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var, mode: Mode, eps: f64) -> (Var, Option<BatchStats>) {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm(x, gamma, beta, eps);
                (y, Some(stats))
            }
            Mode::Eval => {
                let shift = g.constant(self.running_mean.map(|m| -m));
                let inv = g.constant(self.running_var.map(|v| 1.0 / libm::sqrt(v + eps)));
                let y = g.add_row(x, shift);
                let y = g.mul_row(y, inv);
                let y = g.mul_row(y, gamma);
                (g.add_row(y, beta), None)
            }
        }
    }

    /// Exponential moving average update; the running variance is unbiased.
    pub fn update_running(&mut self, stats: &BatchStats, momentum: f64) {
        let correction = if stats.batch > 1 { stats.batch as f64 / (stats.batch - 1) as f64 } else { 1.0 };
        for (r, m) in self.running_mean.as_mut_slice().iter_mut().zip(&stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, v) in self.running_var.as_mut_slice().iter_mut().zip(&stats.var) {
            *r = (1.0 - momentum) * *r + momentum * v * correction;
        }
        self.running_mean = round_matrix(self.running_mean.clone());
        self.running_var = round_matrix(self.running_var.clone());
    }
}

impl Parameters for BatchNorm {
    fn params<'p>(&'p self, prefix: &str, out: &mut Vec<ParamRef<'p>>) {
        out.push(ParamRef { name: join(prefix, "gamma"), meta: ParamMeta::NO_DECAY, value: &self.gamma });
        out.push(ParamRef { name: join(prefix, "beta"), meta: ParamMeta::NO_DECAY, value: &self.beta });
    }

    fn params_mut<'p>(&'p mut self, prefix: &str, out: &mut Vec<ParamMut<'p>>) {
        out.push(ParamMut { name: join(prefix, "gamma"), meta: ParamMeta::NO_DECAY, value: &mut self.gamma });
        out.push(ParamMut { name: join(prefix, "beta"), meta: ParamMeta::NO_DECAY, value: &mut self.beta });
    }
}

/// Per-image feature nodes.
#[derive(Clone, Copy, Debug)]
pub struct ImageVars {
    /// `p × d` (one row when aggregation is ablated).
    pub local: Var,
    /// `q × d` (one row when masks are ablated).
    pub global: Var,
    /// `[local; global]`.
    pub stacked: Var,
}

/// Plain values of one image's features.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatureBundle {
    pub local: Matrix,
    pub global: Matrix,
    pub stacked: Matrix,
    pub comp: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorParams {
    pub patch_align: Linear,
    /// `d × p` per-patch scoring weights, one column per aggregation module.
    pub faa_weight: Option<Matrix>,
    /// `1 × p`
    pub faa_bias: Option<Matrix>,
    /// `q × d`
    pub masks: Option<Matrix>,
    pub norm: BatchNorm,
    pub embed: Linear,
    dropout: f64,
    bn_eps: f64,
}

impl ExtractorParams {
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Self {
        let d = config.feature_dim;
        let patch_align = Linear::init(config.patch_dim, d, rng);
        let (faa_weight, faa_bias) = if config.ablations.faa {
            let w = normal_matrix(d, config.local_features, 0.0, config.init_std, rng);
            (Some(w), Some(Matrix::zeros(1, config.local_features)))
        } else {
            (None, None)
        };
        let masks =
            config.ablations.condition_masks.then(|| normal_matrix(config.global_features, d, 1.0, config.init_std, rng));
        Self {
            patch_align,
            faa_weight,
            faa_bias,
            masks,
            norm: BatchNorm::new(2 * d),
            embed: Linear::init(2 * d, config.comp_dim, rng),
            dropout: config.dropout,
            bn_eps: config.batch_norm_eps,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.patch_align.output_dim()
    }

    fn check(&self, raw: &RawImageFeatures) -> Result<()> {
        let d = self.feature_dim();
        if raw.cls.len() != d || raw.patches.cols() != self.patch_align.input_dim() || raw.patches.rows() == 0 {
            return Err(Error::Config(format!(
                "image features have cls {} / patches {:?}; the model expects cls {d} and {} patch columns",
                raw.cls.len(),
                raw.patches.shape(),
                self.patch_align.input_dim()
            )));
        }
        Ok(())
    }

    /// Local, global and stacked features for every image.
    pub fn forward_images<'a>(&'a self, g: &mut Graph<'a>, images: &[&RawImageFeatures]) -> Result<Vec<ImageVars>> {
        for raw in images {
            self.check(raw)?;
        }
        let n = images.first().map_or(0, |r| r.patches.rows());
        if images.iter().any(|r| r.patches.rows() != n) {
            return Err(Error::Config("images in a batch must have the same patch count".into()));
        }
        let mut data = Vec::with_capacity(images.len() * n * self.patch_align.input_dim());
        for raw in images {
            data.extend_from_slice(raw.patches.as_slice());
        }
        let patches = g.constant(Matrix::from_vec(images.len() * n, self.patch_align.input_dim(), data));
        let aligned = self.patch_align.forward(g, patches);
        let agg = match (&self.faa_weight, &self.faa_bias) {
            (Some(w), Some(b)) => {
                let w = g.param(w);
                let b = g.param(b);
                let s = g.matmul(aligned, w);
                let s = g.add_row(s, b);
                Some(g.sigmoid(s))
            }
            _ => None,
        };
        let masks = self.masks.as_ref().map(|m| g.param(m));
        let mut out = Vec::with_capacity(images.len());
        for (i, raw) in images.iter().enumerate() {
            let rows = g.slice_rows(aligned, i * n, n);
            let local = match agg {
                Some(agg) => {
                    let a = g.slice_rows(agg, i * n, n);
                    g.matmul_tn(a, rows)
                }
                None => g.mean_rows(rows),
            };
            let cls = g.constant(Matrix::row_vector(raw.cls.clone()));
            let global = match masks {
                Some(m) => g.mul_row(m, cls),
                None => cls,
            };
            let stacked = g.concat_rows(&[local, global]);
            out.push(ImageVars { local, global, stacked });
        }
        Ok(out)
    }

    /// Composition embeddings, one row per image: pooled global and local
    /// means, normalization, rectifier, dropout (training only), affine map.
    pub fn embed_images<'a>(
        &'a self,
        g: &mut Graph<'a>,
        images: &[ImageVars],
        mode: Mode,
        rng: Option<&mut Rng>,
    ) -> (Var, Option<BatchStats>) {
        let pooled: Vec<Var> = images
            .iter()
            .map(|iv| {
                let gm = g.mean_rows(iv.global);
                let lm = g.mean_rows(iv.local);
                g.concat_cols(&[gm, lm])
            })
            .collect();
        let x = g.concat_rows(&pooled);
        let (x, stats) = self.norm.forward(g, x, mode, self.bn_eps);
        let mut x = g.relu(x);
        if mode == Mode::Train && self.dropout > 0.0 {
            if let Some(rng) = rng {
                let keep = 1.0 - self.dropout;
                let (r, c) = g.value(x).shape();
                let mask = Matrix::from_fn(r, c, |_, _| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
                x = g.mul_const(x, mask);
            }
        }
        (self.embed.forward(g, x), stats)
    }

    /// Evaluation-mode features and composition embedding of one image.
    pub fn extract(&self, raw: &RawImageFeatures) -> Result<VisualFeatureBundle> {
        let mut g = Graph::new();
        let iv = self.forward_images(&mut g, &[raw])?;
        let (comp, _) = self.embed_images(&mut g, &iv, Mode::Eval, None);
        Ok(VisualFeatureBundle {
            local: g.value(iv[0].local).clone(),
            global: g.value(iv[0].global).clone(),
            stacked: g.value(iv[0].stacked).clone(),
            comp: g.value(comp).as_slice().to_vec(),
        })
    }

    /// Evaluation-mode composition embeddings for many images, `count × D_c`.
    pub fn embed_batch(&self, images: &[&RawImageFeatures]) -> Result<Matrix> {
        let mut g = Graph::new();
        let iv = self.forward_images(&mut g, images)?;
        let (comp, _) = self.embed_images(&mut g, &iv, Mode::Eval, None);
        Ok(g.value(comp).clone())
    }

    /// Aggregation weights `n × p` of one image; `None` when ablated.
    pub fn aggregation_weights(&self, raw: &RawImageFeatures) -> Result<Option<Matrix>> {
        self.check(raw)?;
        let (Some(w), Some(b)) = (&self.faa_weight, &self.faa_bias) else { return Ok(None) };
        let aligned = self.patch_align.apply(&raw.patches);
        let mut s = aligned.matmul(w);
        for i in 0..s.rows() {
            for (x, bb) in s.row_mut(i).iter_mut().zip(b.as_slice()) {
                *x = sigmoid(*x + bb);
            }
        }
        Ok(Some(s))
    }
}

impl Parameters for ExtractorParams {
    fn params<'p>(&'p self, prefix: &str, out: &mut Vec<ParamRef<'p>>) {
        self.patch_align.params(&join(prefix, "patch_align"), out);
        if let (Some(w), Some(b)) = (&self.faa_weight, &self.faa_bias) {
            out.push(ParamRef { name: join(prefix, "faa.weight"), meta: ParamMeta::MAIN, value: w });
            out.push(ParamRef { name: join(prefix, "faa.bias"), meta: ParamMeta::MAIN, value: b });
        }
        if let Some(m) = &self.masks {
            out.push(ParamRef { name: join(prefix, "masks"), meta: ParamMeta::MAIN, value: m });
        }
        self.norm.params(&join(prefix, "norm"), out);
        self.embed.params(&join(prefix, "embed"), out);
    }

    fn params_mut<'p>(&'p mut self, prefix: &str, out: &mut Vec<ParamMut<'p>>) {
        self.patch_align.params_mut(&join(prefix, "patch_align"), out);
        if let (Some(w), Some(b)) = (&mut self.faa_weight, &mut self.faa_bias) {
            out.push(ParamMut { name: join(prefix, "faa.weight"), meta: ParamMeta::MAIN, value: w });
            out.push(ParamMut { name: join(prefix, "faa.bias"), meta: ParamMeta::MAIN, value: b });
        }
        if let Some(m) = &mut self.masks {
            out.push(ParamMut { name: join(prefix, "masks"), meta: ParamMeta::MAIN, value: m });
        }
        self.norm.params_mut(&join(prefix, "norm"), out);
        self.embed.params_mut(&join(prefix, "embed"), out);
    }
}
