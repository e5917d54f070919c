//! End-to-end network: convolutional encoder → multi-scale aggregation to
//! `F₀` → L cascaded [`hbis`](crate::hbis) layers starting from a learned
//! embedding table `CE₀` → class-embedding head.

mod checkpoint;

pub use checkpoint::{peek_dtype, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hbis::{hbis_forward, HbisOutput, HbisParams, TopKConfig};
use crate::layers::{uniform_tensor, Linear};
use crate::rng::SplitMix64;
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_categories: usize,
    pub c_feat: usize,
    pub c_class: usize,
    pub hbis_layers: usize,
    /// Output channels of each encoder stage.
    pub encoder_widths: Vec<usize>,
    /// Total encoder stride; a power of two.
    pub downsample: usize,
    pub topk_ratio: f64,
    pub topk_eps: f64,
    /// Training image side length.
    pub image_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_categories: 4,
            c_feat: 32,
            c_class: 32,
            hbis_layers: 2,
            encoder_widths: vec![32, 64, 32],
            downsample: 4,
            topk_ratio: 0.02,
            topk_eps: 1e-6,
            image_size: 64,
        }
    }
}

impl ModelConfig {
    /// Every violated constraint, as `field: reason` strings.
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.num_categories < 2 || self.num_categories > 256 {
            errs.push(format!("num_categories: {} outside 2..=256", self.num_categories));
        }
        if self.c_feat < 4 {
            errs.push(format!("c_feat: {} < 4", self.c_feat));
        }
        if self.c_class < 4 {
            errs.push(format!("c_class: {} < 4", self.c_class));
        }
        if !self.downsample.is_power_of_two() {
            errs.push(format!("downsample: {} is not a power of two", self.downsample));
        } else if self.strided_stages() > self.encoder_widths.len() {
            errs.push(format!(
                "encoder_widths: {} stages cannot reach downsample {}",
                self.encoder_widths.len(),
                self.downsample
            ));
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            errs.push("encoder_widths: need at least one stage, all widths positive".into());
        }
        if let Err(e) = self.topk().validate() {
            errs.push(format!("topk_ratio/topk_eps: {e}"));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.downsample.max(1)) {
            errs.push(format!(
                "image_size: {} not a positive multiple of downsample {}",
                self.image_size, self.downsample
            ));
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn topk(&self) -> TopKConfig {
        TopKConfig {
            ratio: self.topk_ratio,
            eps: self.topk_eps,
        }
    }

    fn strided_stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    /// Stride of each encoder stage: 2 for the first `log₂(downsample)`
    /// stages, 1 afterwards.
    pub fn stage_strides(&self) -> Vec<usize> {
        (0..self.encoder_widths.len())
            .map(|i| if i < self.strided_stages() { 2 } else { 1 })
            .collect()
    }
}

/// 2-D convolution weights `[O, C, k, k]` and bias `[O]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<P> {
    pub weight: P,
    pub bias: P,
}

impl<P> ConvLayer<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ConvLayer<Q> {
        ConvLayer {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<T: Scalar> ConvLayer<Tensor<T>> {
    fn init(out_c: usize, in_c: usize, k: usize, rng: &mut SplitMix64) -> Self {
        let fan_in = in_c * k * k;
        Self {
            weight: uniform_tensor(&[out_c, in_c, k, k], (6.0 / fan_in as f64).sqrt(), rng),
            bias: Tensor::zeros([out_c]),
        }
    }
}

impl ConvLayer<Var> {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, stride: usize) -> Result<Var> {
        let k = g.shape(self.weight)[2];
        let y = g.conv2d(x, self.weight, stride, k / 2)?;
        let out_c = g.shape(self.bias)[0];
        let bias = g.reshape(self.bias, [out_c, 1, 1])?;
        g.add(y, bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<P> {
    /// 3×3 convolution + ReLU per stage.
    pub stages: Vec<ConvLayer<P>>,
    /// 1×1 projection of each stage output to `C_feat`.
    pub projections: Vec<ConvLayer<P>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    pub encoder: EncoderParams<P>,
    /// `CE₀: [N, C_class]`, shared by every image.
    pub embeddings: P,
    pub layers: Vec<HbisParams<P>>,
    /// `C_class → C_feat` projection used by the output head.
    pub head: Linear<P>,
}

impl<P> ModelParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ModelParams<Q> {
        ModelParams {
            encoder: EncoderParams {
                stages: self.encoder.stages.iter().map(|c| c.map(f)).collect(),
                projections: self.encoder.projections.iter().map(|c| c.map(f)).collect(),
            },
            embeddings: f(&self.embeddings),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            head: self.head.map(f),
        }
    }

    /// Visits every array in checkpoint order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a P)) {
        for (i, c) in self.encoder.stages.iter().enumerate() {
            c.visit(&format!("encoder.stage{i}"), f);
        }
        for (i, c) in self.encoder.projections.iter().enumerate() {
            c.visit(&format!("encoder.proj{i}"), f);
        }
        f("embeddings".into(), &self.embeddings);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("hbis{i}"), f);
        }
        self.head.visit("head", f);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut P)) {
        for (i, c) in self.encoder.stages.iter_mut().enumerate() {
            c.visit_mut(&format!("encoder.stage{i}"), f);
        }
        for (i, c) in self.encoder.projections.iter_mut().enumerate() {
            c.visit_mut(&format!("encoder.proj{i}"), f);
        }
        f("embeddings".into(), &mut self.embeddings);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("hbis{i}"), f);
        }
        self.head.visit_mut("head", f);
    }

    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.visit(&mut |name, p| out.push((name, p)));
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        self.visit_mut(&mut |_, p| out.push(p));
        out
    }
}

impl<T: Scalar> ModelParams<Tensor<T>> {
    /// Deterministic initialization from `(config, seed)`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SplitMix64::stream(seed, 0x5eed);
        let mut stages = Vec::new();
        let mut projections = Vec::new();
        let mut in_c = 3;
        for &w in &cfg.encoder_widths {
            stages.push(ConvLayer::init(w, in_c, 3, &mut rng));
            in_c = w;
        }
        for &w in &cfg.encoder_widths {
            projections.push(ConvLayer::init(cfg.c_feat, w, 1, &mut rng));
        }
        let embeddings = uniform_tensor(&[cfg.num_categories, cfg.c_class], 1.0, &mut rng);
        let layers = (0..cfg.hbis_layers)
            .map(|_| HbisParams::init(cfg.c_feat, cfg.c_class, &mut rng))
            .collect();
        let head = Linear::init(cfg.c_class, cfg.c_feat, &mut rng);
        Ok(Self {
            encoder: EncoderParams { stages, projections },
            embeddings,
            layers,
            head,
        })
    }

    pub fn bind(&self, g: &mut Graph<T>) -> ModelParams<Var> {
        self.map(&mut |t| g.param(t.clone()))
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuilds parameters from named arrays, checking every name and shape
    /// against what `cfg` requires.
    pub fn from_named(cfg: &ModelConfig, arrays: &[(String, Tensor<T>)]) -> Result<Self> {
        let mut params = Self::init(cfg, 0)?;
        let mut expected = 0;
        let mut failure = None;
        params.visit_mut(&mut |name, slot| {
            expected += 1;
            if failure.is_some() {
                return;
            }
            match arrays.iter().find(|(n, _)| *n == name) {
                None => failure = Some(format!("array '{name}' missing")),
                Some((_, t)) if t.shape() != slot.shape() => {
                    failure = Some(format!(
                        "array '{name}' has shape {:?}, config needs {:?}",
                        t.shape(),
                        slot.shape()
                    ))
                }
                Some((_, t)) => *slot = t.clone(),
            }
        });
        if let Some(msg) = failure {
            return Err(Error::Checkpoint(msg));
        }
        if arrays.len() != expected {
            let known: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
            let extra = arrays
                .iter()
                .find(|(n, _)| !known.contains(n))
                .map(|(n, _)| n.clone())
                .unwrap_or_default();
            return Err(Error::Checkpoint(format!("unexpected array '{extra}'")));
        }
        Ok(params)
    }
}

/// Per-layer maps stacked over the batch.
#[derive(Clone, Debug)]
pub struct LayerMaps {
    /// Raw scores `[B, N, H', W']`.
    pub scores: Var,
    /// Sigmoid heatmap `[B, N, H', W']`.
    pub heatmap: Var,
    /// Embeddings after the layer, `[B, N, C_class]`.
    pub embeddings: Var,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[B, C_feat, H', W']`
    pub features0: Var,
    /// Head logits at feature resolution, `[B, N, H', W']`.
    pub logits: Var,
    /// Logits upsampled to input resolution, `[B, N, H, W]`.
    pub logits_full: Var,
    /// Softmax of `logits_full` over categories.
    pub probs: Var,
    pub layers: Vec<LayerMaps>,
    /// Raw per-image layer outputs, indexed `[layer][image]`.
    pub details: Vec<Vec<HbisOutput>>,
}

/// Multi-scale encoder producing `F₀: [B, C_feat, H/d, W/d]`.
pub fn encoder_forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    images: Var,
) -> Result<Var> {
    let shape = g.shape(images).to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::invalid(
            "encoder",
            format!("images must be [B, 3, H, W], got {shape:?}"),
        ));
    }
    if !shape[2].is_multiple_of(cfg.downsample) || !shape[3].is_multiple_of(cfg.downsample) {
        return Err(Error::invalid(
            "encoder",
            format!("extents {}×{} not divisible by {}", shape[2], shape[3], cfg.downsample),
        ));
    }
    let mut x = images;
    let mut scale = 1;
    let mut fused: Option<Var> = None;
    for ((stage, proj), stride) in params
        .encoder
        .stages
        .iter()
        .zip(&params.encoder.projections)
        .zip(cfg.stage_strides())
    {
        let pre = stage.forward(g, x, stride)?;
        x = g.relu(pre);
        scale *= stride;
        // maps finer than the target grid are subsampled by the projection
        let proj_stride = cfg.downsample / scale;
        let mut p = proj.forward(g, x, proj_stride.max(1))?;
        if scale > cfg.downsample {
            p = g.upsample_nearest(p, scale / cfg.downsample)?;
        }
        fused = Some(match fused {
            None => p,
            Some(acc) => g.add(acc, p)?,
        });
    }
    fused.ok_or_else(|| Error::invalid("encoder", "no stages"))
}

/// Runs the HBIS cascade on one image. `features: [P, C_feat]`.
pub fn decode_image<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    embeddings: Var,
    layers: &[HbisParams<Var>],
    topk: &TopKConfig,
) -> Result<(Var, Var, Vec<HbisOutput>)> {
    let (mut f, mut ce) = (features, embeddings);
    let mut outputs = Vec::with_capacity(layers.len());
    for layer in layers {
        let out = hbis_forward(g, f, ce, layer, topk)?;
        f = out.features;
        ce = out.embeddings;
        outputs.push(out);
    }
    Ok((f, ce, outputs))
}

/// `Z(p, n) = F(p) · (W_h·CE_n + b_h)`, shape `[P, N]`.
pub fn output_head<T: Scalar>(g: &mut Graph<T>, features: Var, embeddings: Var, head: &Linear<Var>) -> Result<Var> {
    let keys = head.forward(g, embeddings)?;
    let keys_t = g.transpose(keys)?;
    g.matmul(features, keys_t)
}

/// `[P, N]` pixel-major map → `[N, h, w]` category planes.
fn to_planes<T: Scalar>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let n = g.shape(x)[1];
    let t = g.transpose(x)?;
    g.reshape(t, [n, h, w])
}

pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    images: Var,
) -> Result<ModelOutput> {
    let features0 = encoder_forward(g, params, cfg, images)?;
    let fs = g.shape(features0).to_vec();
    let (batch, c_feat, h, w) = (fs[0], fs[1], fs[2], fs[3]);
    // [B, C, h, w] → [B, h·w, C]
    let nhwc = g.permute(features0, &[0, 2, 3, 1])?;
    let pixels = g.reshape(nhwc, [batch, h * w, c_feat])?;
    let topk = cfg.topk();

    let mut logits = Vec::with_capacity(batch);
    let mut details: Vec<Vec<HbisOutput>> = vec![Vec::with_capacity(batch); cfg.hbis_layers];
    for b in 0..batch {
        let f = g.select(pixels, b)?;
        let (f_last, ce_last, outs) = decode_image(g, f, params.embeddings, &params.layers, &topk)?;
        let z = output_head(g, f_last, ce_last, &params.head)?;
        logits.push(to_planes(g, z, h, w)?);
        for (l, out) in outs.into_iter().enumerate() {
            details[l].push(out);
        }
    }
    let logits = g.stack(&logits)?;
    let logits_full = g.upsample_nearest(logits, cfg.downsample)?;
    let probs = g.softmax(logits_full, 1)?;

    let mut layers = Vec::with_capacity(cfg.hbis_layers);
    for per_image in &details {
        let mut scores = Vec::with_capacity(batch);
        let mut heat = Vec::with_capacity(batch);
        let mut emb = Vec::with_capacity(batch);
        for out in per_image {
            scores.push(to_planes(g, out.heatmap.scores, h, w)?);
            heat.push(to_planes(g, out.heatmap.probs, h, w)?);
            emb.push(out.embeddings);
        }
        layers.push(LayerMaps {
            scores: g.stack(&scores)?,
            heatmap: g.stack(&heat)?,
            embeddings: g.stack(&emb)?,
        });
    }
    Ok(ModelOutput {
        features0,
        logits,
        logits_full,
        probs,
        layers,
        details,
    })
}

/// Per-pixel argmax over the category axis of `probs: [B, N, H, W]`; ties go
/// to the lowest category.
pub fn predict<T: Scalar>(probs: &Tensor<T>) -> Vec<u8> {
    let s = probs.shape();
    let (batch, n, plane) = (s[0], s[1], s[2] * s[3]);
    let data = probs.data();
    let mut out = Vec::with_capacity(batch * plane);
    for b in 0..batch {
        for p in 0..plane {
            let mut best = 0;
            let mut best_v = data[b * n * plane + p];
            for c in 1..n {
                let v = data[(b * n + c) * plane + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.push(best as u8);
        }
    }
    out
}
