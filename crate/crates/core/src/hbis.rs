//! Heatmap-driven bidirectional interaction between pixel features and
//! class embeddings.
//!
//! One layer takes per-image features `F: [P, C_feat]` (P = H'·W' pixels,
//! row-major) and embeddings `CE: [N, C_class]` and returns refined versions
//! of both plus the class heatmap that mediated the exchange:
//!
//! 1. heatmap: `S = F · (CE·W_q + b_q)ᵀ`, `H = σ(S)`;
//! 2. feature → embedding: for each category keep the K strongest pixels of
//!    its heatmap channel, normalize their weights, pool their projected
//!    features into a context vector, and blend it into the embedding
//!    through a learned sigmoid gate;
//! 3. embedding → feature: the updated embeddings produce per-category
//!    channel scale `γ = 1 + tanh(·)` and shift `β`; each pixel mixes the
//!    modulated copies with softmax-over-categories weights of `S` and blends
//!    the result with its input through `sigmoid(α)`.
//!
//! The heatmap is computed once per layer from the incoming embeddings and
//! shared by both directions. Top-K selection is a constant of the backward
//! pass; gradients flow through the selected values only.

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::rng::SplitMix64;
use crate::tensor::{topk_indices, Graph, Scalar, Tensor, Var};

/// Region selection settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TopKConfig {
    /// Fraction of pixels kept per category, in `(0, 1]`.
    pub ratio: f64,
    /// Guard added to the region sum before normalizing.
    pub eps: f64,
}

impl Default for TopKConfig {
    fn default() -> Self {
        Self { ratio: 0.02, eps: 1e-6 }
    }
}

impl TopKConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::invalid("topk", format!("ratio {} outside (0, 1]", self.ratio)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("topk", format!("eps {} must be positive", self.eps)));
        }
        Ok(())
    }

    /// `K = max(1, round(ratio · pixels))`, never more than `pixels`.
    pub fn region_size(&self, pixels: usize) -> usize {
        ((self.ratio * pixels as f64).round() as usize).clamp(1, pixels.max(1))
    }
}

/// Effective blend weight at initialization.
pub const INITIAL_BLEND: f64 = 0.9;

/// Learnable parameters of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HbisParams<P> {
    /// `C_class → C_feat`, turns embeddings into heatmap queries.
    pub query: Linear<P>,
    /// `C_feat → C_class`, projects pooled pixel features.
    pub context: Linear<P>,
    /// `2·C_class → 1`, shared across categories.
    pub gate: Linear<P>,
    /// `C_class → C_feat`, pre-activation of γ.
    pub scale: Linear<P>,
    /// `C_class → C_feat`, β.
    pub shift: Linear<P>,
    /// Unconstrained residual blend, shape `[1]`; used as `sigmoid(alpha)`.
    pub alpha: P,
}

impl<P> HbisParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> HbisParams<Q> {
        HbisParams {
            query: self.query.map(f),
            context: self.context.map(f),
            gate: self.gate.map(f),
            scale: self.scale.map(f),
            shift: self.shift.map(f),
            alpha: f(&self.alpha),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        self.query.visit(&format!("{prefix}.query"), f);
        self.context.visit(&format!("{prefix}.context"), f);
        self.gate.visit(&format!("{prefix}.gate"), f);
        self.scale.visit(&format!("{prefix}.scale"), f);
        self.shift.visit(&format!("{prefix}.shift"), f);
        f(format!("{prefix}.alpha"), &self.alpha);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        self.query.visit_mut(&format!("{prefix}.query"), f);
        self.context.visit_mut(&format!("{prefix}.context"), f);
        self.gate.visit_mut(&format!("{prefix}.gate"), f);
        self.scale.visit_mut(&format!("{prefix}.scale"), f);
        self.shift.visit_mut(&format!("{prefix}.shift"), f);
        f(format!("{prefix}.alpha"), &mut self.alpha);
    }
}

impl<T: Scalar> HbisParams<Tensor<T>> {
    pub fn init(c_feat: usize, c_class: usize, rng: &mut SplitMix64) -> Self {
        Self {
            query: Linear::init(c_class, c_feat, rng),
            context: Linear::init(c_feat, c_class, rng),
            gate: Linear::init(2 * c_class, 1, rng),
            scale: Linear::init(c_class, c_feat, rng),
            shift: Linear::init(c_class, c_feat, rng),
            alpha: Tensor::scalar(T::from_f64_lossy(logit(INITIAL_BLEND))),
        }
    }

    pub fn c_feat(&self) -> usize {
        self.query.out_features()
    }

    pub fn c_class(&self) -> usize {
        self.query.in_features()
    }
}

pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Raw scores and their sigmoid, both `[P, N]`.
#[derive(Clone, Copy, Debug)]
pub struct Heatmap {
    pub scores: Var,
    pub probs: Var,
}

/// `S(p, n) = F(p) · (W_q·CE_n + b_q)`, `H = σ(S)`.
pub fn generate_heatmap<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    embeddings: Var,
    query: &Linear<Var>,
) -> Result<Heatmap> {
    let (fs, qs) = (g.shape(features), g.shape(query.weight));
    if fs.len() != 2 || qs.len() != 2 || fs[1] != qs[1] {
        return Err(Error::ShapeMismatch {
            op: "generate_heatmap",
            lhs: fs.to_vec(),
            rhs: qs.to_vec(),
        });
    }
    let queries = query.forward(g, embeddings)?;
    let queries_t = g.transpose(queries)?;
    let scores = g.matmul(features, queries_t)?;
    let probs = g.sigmoid(scores);
    Ok(Heatmap { scores, probs })
}

/// Flat pixel indices of the K strongest responses of one heatmap channel,
/// strongest first, lower index first among ties.
pub fn select_region<T: Scalar>(channel: &[T], cfg: &TopKConfig) -> Result<Vec<usize>> {
    if channel.is_empty() {
        return Err(Error::invalid("select_region", "empty channel"));
    }
    topk_indices(channel, cfg.region_size(channel.len()))
}

/// Weights `H(p) / (Σ_Ω H + ε)` for the pixels of `region`, as `[K, 1]` in
/// region order. Pixels outside the region implicitly weigh zero.
pub fn normalize_region<T: Scalar>(g: &mut Graph<T>, channel: Var, region: &[usize], eps: f64) -> Result<Var> {
    let pixels = g.value(channel).len();
    let column = g.reshape(channel, [pixels, 1])?;
    let selected = g.gather_rows(column, region)?;
    let total = g.sum_all(selected);
    let denom = g.add_scalar(total, T::from_f64_lossy(eps));
    g.div(selected, denom)
}

/// `C_n = Σ_{p∈Ω} w_p · (W_c·F(p) + b_c)`, shape `[1, C_class]`.
pub fn pool_context<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    weights: Var,
    region: &[usize],
    context: &Linear<Var>,
) -> Result<Var> {
    let rows = g.gather_rows(features, region)?;
    let projected = context.forward(g, rows)?;
    let weights_t = g.transpose(weights)?;
    g.matmul(weights_t, projected)
}

/// `G = σ(W_g·[CE ∥ C] + b_g)`, shape `[N, 1]`.
pub fn gate_values<T: Scalar>(g: &mut Graph<T>, previous: Var, context: Var, gate: &Linear<Var>) -> Result<Var> {
    let joined = g.concat(&[previous, context], 1)?;
    let logits = gate.forward(g, joined)?;
    Ok(g.sigmoid(logits))
}

/// Row-wise convex blend `(1 − G)·CE + G·C`.
pub fn blend_embeddings<T: Scalar>(g: &mut Graph<T>, previous: Var, context: Var, gate: Var) -> Result<Var> {
    let keep = g.affine(gate, -T::one(), T::one());
    let kept = g.mul(previous, keep)?;
    let absorbed = g.mul(context, gate)?;
    g.add(kept, absorbed)
}

/// Gated embedding update. Returns `(CE_new, G)`.
pub fn gated_update<T: Scalar>(
    g: &mut Graph<T>,
    previous: Var,
    context: Var,
    gate: &Linear<Var>,
) -> Result<(Var, Var)> {
    let (ps, cs) = (g.shape(previous), g.shape(context));
    if ps != cs {
        return Err(Error::ShapeMismatch {
            op: "gated_update",
            lhs: ps.to_vec(),
            rhs: cs.to_vec(),
        });
    }
    let gate_v = gate_values(g, previous, context, gate)?;
    let updated = blend_embeddings(g, previous, context, gate_v)?;
    Ok((updated, gate_v))
}

/// Per-category channel scale `γ = 1 + tanh(W_γ·CE + b_γ)` and shift
/// `β = W_β·CE + b_β`, both `[N, C_feat]`.
pub fn affine_params<T: Scalar>(
    g: &mut Graph<T>,
    embeddings: Var,
    scale: &Linear<Var>,
    shift: &Linear<Var>,
) -> Result<(Var, Var)> {
    let pre = scale.forward(g, embeddings)?;
    let squashed = g.tanh(pre);
    let gamma = g.add_scalar(squashed, T::one());
    let beta = shift.forward(g, embeddings)?;
    Ok((gamma, beta))
}

/// `F_l = a·F + (1 − a)·Σ_n softmax_n(S)·(γ_n ⊙ F + β_n)` with
/// `a = sigmoid(alpha)`.
///
/// The category sum is evaluated as `F ⊙ (W·γ) + W·β` where `W` holds the
/// per-pixel softmax weights, which is the same expression regrouped.
pub fn modulate_and_fuse<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    gamma: Var,
    beta: Var,
    scores: Var,
    alpha: Var,
) -> Result<Var> {
    let weights = g.softmax(scores, 1)?;
    let mixed_scale = g.matmul(weights, gamma)?;
    let mixed_shift = g.matmul(weights, beta)?;
    let scaled = g.mul(features, mixed_scale)?;
    let fused = g.add(scaled, mixed_shift)?;
    let blend = g.sigmoid(alpha);
    let complement = g.affine(blend, -T::one(), T::one());
    let residual = g.mul(features, blend)?;
    let update = g.mul(fused, complement)?;
    g.add(residual, update)
}

/// Everything one layer produces.
#[derive(Clone, Debug)]
pub struct HbisOutput {
    /// `[P, C_feat]`
    pub features: Var,
    /// `[N, C_class]`
    pub embeddings: Var,
    pub heatmap: Heatmap,
    /// Pooled context vectors, `[N, C_class]`.
    pub context: Var,
    /// `[N, 1]`
    pub gate: Var,
    pub gamma: Var,
    pub beta: Var,
    /// Selected pixel indices per category.
    pub regions: Vec<Vec<usize>>,
}

pub fn hbis_forward<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    embeddings: Var,
    params: &HbisParams<Var>,
    cfg: &TopKConfig,
) -> Result<HbisOutput> {
    let es = g.shape(embeddings).to_vec();
    if es.len() != 2 || es[0] < 2 {
        return Err(Error::invalid(
            "hbis_forward",
            format!("embeddings must be [N ≥ 2, C_class], got {es:?}"),
        ));
    }
    let heatmap = generate_heatmap(g, features, embeddings, &params.query)?;
    let channels = g.transpose(heatmap.probs)?;
    let mut contexts = Vec::with_capacity(es[0]);
    let mut regions = Vec::with_capacity(es[0]);
    for n in 0..es[0] {
        let channel = g.select(channels, n)?;
        let region = select_region(g.value(channel).data(), cfg)?;
        let weights = normalize_region(g, channel, &region, cfg.eps)?;
        contexts.push(pool_context(g, features, weights, &region, &params.context)?);
        regions.push(region);
    }
    let context = g.concat(&contexts, 0)?;
    let (updated, gate) = gated_update(g, embeddings, context, &params.gate)?;
    let (gamma, beta) = affine_params(g, updated, &params.scale, &params.shift)?;
    let refined = modulate_and_fuse(g, features, gamma, beta, heatmap.scores, params.alpha)?;
    Ok(HbisOutput {
        features: refined,
        embeddings: updated,
        heatmap,
        context,
        gate,
        gamma,
        beta,
        regions,
    })
}
