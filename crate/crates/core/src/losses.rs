//! Training objective: pixel cross-entropy plus soft Dice on the final
//! prediction, the same pair on every layer's upsampled heatmap scores, and
//! a Fisher ratio on the per-layer class embeddings.
//!
//! Label maps are `u8` category indices laid out `[B, H, W]`, matching the
//! `[B, N, H, W]` prediction tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Additive smoothing of the Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the layer-wise heatmap loss.
    pub heatmap: f64,
    /// Weight of the Fisher loss.
    pub fisher: f64,
    /// Denominator guard of the Fisher ratio.
    pub fisher_eps: f64,
    /// Category excluded from cross-entropy, Dice and metrics.
    pub ignore_index: Option<usize>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            heatmap: 0.1,
            fisher: 0.1,
            fisher_eps: 1e-6,
            ignore_index: None,
        }
    }
}

impl LossWeights {
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.heatmap >= 0.0 && self.heatmap.is_finite()) {
            errs.push(format!("lambda_hm: {} must be finite and ≥ 0", self.heatmap));
        }
        if !(self.fisher >= 0.0 && self.fisher.is_finite()) {
            errs.push(format!("lambda_fd: {} must be finite and ≥ 0", self.fisher));
        }
        if !(self.fisher_eps > 0.0) {
            errs.push(format!("fisher_eps: {} must be > 0", self.fisher_eps));
        }
        errs
    }
}

/// One-hot targets and validity mask derived from a label map.
struct Targets<T> {
    /// `[B, N, H, W]`, zero rows at ignored pixels.
    one_hot: Tensor<T>,
    /// `[B, 1, H, W]`
    mask: Tensor<T>,
    /// Scored pixels per category.
    per_category: Vec<usize>,
    scored: usize,
}

fn targets<T: Scalar>(shape: &[usize], labels: &[u8], ignore: Option<usize>) -> Result<Targets<T>> {
    if shape.len() != 4 {
        return Err(Error::invalid("loss", format!("need [B, N, H, W], got {shape:?}")));
    }
    let (batch, n, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    if labels.len() != batch * plane {
        return Err(Error::ShapeMismatch {
            op: "loss labels",
            lhs: shape.to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let mut one_hot = Tensor::zeros(shape.to_vec());
    let mut mask = Tensor::zeros([batch, 1, shape[2], shape[3]]);
    let mut per_category = vec![0; n];
    let mut scored = 0;
    for b in 0..batch {
        for p in 0..plane {
            let label = labels[b * plane + p] as usize;
            if Some(label) == ignore {
                continue;
            }
            if label >= n {
                return Err(Error::LabelOutOfRange { label, categories: n });
            }
            one_hot.data_mut()[(b * n + label) * plane + p] = T::one();
            mask.data_mut()[b * plane + p] = T::one();
            per_category[label] += 1;
            scored += 1;
        }
    }
    Ok(Targets {
        one_hot,
        mask,
        per_category,
        scored,
    })
}

/// Mean over scored pixels of `−log softmax(logits)[label]`.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[u8], ignore: Option<usize>) -> Result<Var> {
    let tg = targets::<T>(g.shape(logits), labels, ignore)?;
    let log_probs = g.log_softmax(logits, 1)?;
    let one_hot = g.constant(tg.one_hot);
    let picked = g.mul(log_probs, one_hot)?;
    let total = g.sum_all(picked);
    let denom = tg.scored.max(1) as f64;
    Ok(g.scale(total, T::from_f64_lossy(-1.0 / denom)))
}

/// Macro soft Dice over all categories:
/// `1 − mean_n (2·Σ p·g + s) / (Σ p + Σ g + s)`.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, probs: Var, labels: &[u8], ignore: Option<usize>) -> Result<Var> {
    let tg = targets::<T>(g.shape(probs), labels, ignore)?;
    let s = T::from_f64_lossy(DICE_SMOOTH);
    let mask = g.constant(tg.mask);
    let one_hot = g.constant(tg.one_hot);
    let truth = g.constant(Tensor::from_fn([tg.per_category.len()], |n| {
        T::from_f64_lossy(tg.per_category[n] as f64)
    }));
    let masked = g.mul(probs, mask)?;
    let overlap = g.mul(masked, one_hot)?;
    let intersection = g.sum(overlap, &[0, 2, 3])?;
    let predicted = g.sum(masked, &[0, 2, 3])?;
    let numerator = g.affine(intersection, T::from_f64_lossy(2.0), s);
    let both = g.add(predicted, truth)?;
    let denominator = g.add_scalar(both, s);
    let ratio = g.div(numerator, denominator)?;
    let mean = g.mean_all(ratio);
    Ok(g.affine(mean, -T::one(), T::one()))
}

/// Cross-entropy plus Dice of one score map `[B, N, h, w]`, upsampled by
/// nearest neighbour to the label resolution.
fn upsampled_segmentation_loss<T: Scalar>(
    g: &mut Graph<T>,
    scores: Var,
    labels: &[u8],
    label_hw: (usize, usize),
    ignore: Option<usize>,
) -> Result<Var> {
    let s = g.shape(scores).to_vec();
    let factor = label_hw.0 / s[2];
    if factor == 0 || s[2] * factor != label_hw.0 || s[3] * factor != label_hw.1 {
        return Err(Error::invalid(
            "heatmap_loss",
            format!(
                "{}×{} scores do not tile {}×{} labels",
                s[2], s[3], label_hw.0, label_hw.1
            ),
        ));
    }
    let up = g.upsample_nearest(scores, factor)?;
    let ce = cross_entropy(g, up, labels, ignore)?;
    let probs = g.softmax(up, 1)?;
    let dice = dice_loss(g, probs, labels, ignore)?;
    g.add(ce, dice)
}

/// Σ over layers of cross-entropy + Dice on upsampled raw scores. Zero for
/// an empty layer list.
pub fn heatmap_loss<T: Scalar>(
    g: &mut Graph<T>,
    score_maps: &[Var],
    labels: &[u8],
    label_hw: (usize, usize),
    ignore: Option<usize>,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &scores in score_maps {
        let term = upsampled_segmentation_loss(g, scores, labels, label_hw, ignore)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(total.unwrap_or_else(|| g.constant(Tensor::scalar(T::zero()))))
}

/// Fisher ratio of one layer's embeddings `[B, N, C]`:
/// `S_w / (S_b + ε)` with `S_w` the mean squared distance of each sample to
/// its category mean and `S_b` the mean squared distance of the category
/// means to their average.
pub fn fisher_layer<T: Scalar>(g: &mut Graph<T>, embeddings: Var, eps: f64) -> Result<Var> {
    let shape = g.shape(embeddings).to_vec();
    if shape.len() != 3 {
        return Err(Error::invalid("fisher_loss", format!("need [B, N, C], got {shape:?}")));
    }
    let (batch, n) = (shape[0], shape[1]);
    // offsets from the first image keep batch-identical embeddings exactly
    // at zero spread
    let reference = g.select(embeddings, 0)?;
    let deltas = g.sub(embeddings, reference)?;
    let mean_delta = g.mean(deltas, &[0])?;
    let spread = g.sub(deltas, mean_delta)?;
    let centers = g.add(reference, mean_delta)?;
    let spread_sq = g.mul(spread, spread)?;
    let within_sum = g.sum_all(spread_sq);
    let within = g.scale(within_sum, T::from_f64_lossy(1.0 / (batch * n) as f64));
    let overall = g.mean(centers, &[0])?;
    let offset = g.sub(centers, overall)?;
    let offset_sq = g.mul(offset, offset)?;
    let between_sum = g.sum_all(offset_sq);
    let between = g.scale(between_sum, T::from_f64_lossy(1.0 / n as f64));
    let denom = g.add_scalar(between, T::from_f64_lossy(eps));
    g.div(within, denom)
}

/// Unweighted sum of [`fisher_layer`] over layers; zero without layers.
pub fn fisher_loss<T: Scalar>(g: &mut Graph<T>, layers: &[Var], eps: f64) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &e in layers {
        let term = fisher_layer(g, e, eps)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(total.unwrap_or_else(|| g.constant(Tensor::scalar(T::zero()))))
}

/// Graph nodes of the objective and its parts.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub main: Var,
    pub heatmap: Var,
    pub fisher: Var,
}

/// Scalar values of [`LossTerms`], for logging.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_total: f64,
    pub l_main: f64,
    pub l_hm: f64,
    pub l_fd: f64,
}

impl LossTerms {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        let v = |x: Var| g.value(x).data()[0].as_f64();
        LossBreakdown {
            l_total: v(self.total),
            l_main: v(self.main),
            l_hm: v(self.heatmap),
            l_fd: v(self.fisher),
        }
    }
}

/// Everything the objective reads from one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs<'a> {
    /// Final logits at label resolution, `[B, N, H, W]`.
    pub logits: Var,
    /// Softmax of `logits` over categories.
    pub probs: Var,
    pub labels: &'a [u8],
    /// Raw heatmap scores per layer, `[B, N, h, w]`.
    pub score_maps: &'a [Var],
    /// Embeddings per layer, `[B, N, C_class]`.
    pub embeddings: &'a [Var],
}

/// `main + λ_hm·heatmap + λ_fd·fisher`, where `main` is cross-entropy plus
/// Dice of the final prediction.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, inputs: LossInputs<'_>, weights: &LossWeights) -> Result<LossTerms> {
    let shape = g.shape(inputs.logits).to_vec();
    let label_hw = (shape[2], shape[3]);
    let ce = cross_entropy(g, inputs.logits, inputs.labels, weights.ignore_index)?;
    let dice = dice_loss(g, inputs.probs, inputs.labels, weights.ignore_index)?;
    let main = g.add(ce, dice)?;
    let heatmap = heatmap_loss(g, inputs.score_maps, inputs.labels, label_hw, weights.ignore_index)?;
    let fisher = fisher_loss(g, inputs.embeddings, weights.fisher_eps)?;
    let weighted_hm = g.scale(heatmap, T::from_f64_lossy(weights.heatmap));
    let weighted_fd = g.scale(fisher, T::from_f64_lossy(weights.fisher));
    let partial = g.add(main, weighted_hm)?;
    let total = g.add(partial, weighted_fd)?;
    Ok(LossTerms {
        total,
        main,
        heatmap,
        fisher,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v).data()[0]
    }

    #[test]
    fn uniform_logits_give_log_n() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::<f64>::full([2, 5, 3, 3], 0.7));
        let labels: Vec<u8> = (0..18).map(|i| (i % 5) as u8).collect();
        let ce = cross_entropy(&mut g, z, &labels, None).unwrap();
        assert!((scalar(&g, ce) - 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn confident_logits_approach_zero() {
        let mut g = Graph::new();
        let labels = vec![0u8, 1, 1, 0];
        let z = Tensor::from_fn([1, 2, 2, 2], |i| {
            let (c, p) = (i / 4, i % 4);
            if labels[p] as usize == c {
                60.0
            } else {
                -60.0
            }
        });
        let z = g.constant(z);
        let ce = cross_entropy(&mut g, z, &labels, None).unwrap();
        assert!(scalar(&g, ce) < 1e-40);
    }

    #[test]
    fn out_of_range_label_is_an_error() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::<f64>::zeros([1, 2, 1, 2]));
        assert!(matches!(
            cross_entropy(&mut g, z, &[0, 2], None),
            Err(Error::LabelOutOfRange { label: 2, .. })
        ));
        // unless it is the ignored index
        assert!(cross_entropy(&mut g, z, &[0, 2], Some(2)).is_ok());
    }

    #[test]
    fn perfect_dice_is_within_smoothing() {
        let mut g = Graph::new();
        let labels = vec![0u8, 1, 2, 2, 1, 0];
        let p = Tensor::from_fn([1, 3, 2, 3], |i| {
            let (c, px) = (i / 6, i % 6);
            if labels[px] as usize == c {
                1.0
            } else {
                0.0
            }
        });
        let p = g.constant(p);
        let d = dice_loss(&mut g, p, &labels, None).unwrap();
        assert!(scalar(&g, d).abs() < 1e-15);
    }

    #[test]
    fn disjoint_category_term() {
        // category 1 predicted on pixel 0, true on pixel 1 → its ratio is s/(1+1+s)
        let mut g = Graph::new();
        let p = g.constant(Tensor::<f64>::from_f64([1, 2, 1, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap());
        let d = dice_loss(&mut g, p, &[0, 1], None).unwrap();
        let term = 1.0 / 3.0;
        assert!((scalar(&g, d) - (1.0 - term)).abs() < 1e-15);
    }

    #[test]
    fn empty_layer_lists_are_zero() {
        let mut g = Graph::<f64>::new();
        let hm = heatmap_loss(&mut g, &[], &[0], (1, 1), None).unwrap();
        let fd = fisher_loss(&mut g, &[], 1e-6).unwrap();
        assert_eq!(scalar(&g, hm), 0.0);
        assert_eq!(scalar(&g, fd), 0.0);
    }

    #[test]
    fn fisher_worked_example() {
        // B = 2, N = 2, C = 1: category 0 ∈ {0, 2}, category 1 ∈ {10, 12}
        let mut g = Graph::new();
        let e = g.constant(Tensor::<f64>::from_f64([2, 2, 1], &[0.0, 10.0, 2.0, 12.0]).unwrap());
        let l = fisher_layer(&mut g, e, 1e-6).unwrap();
        assert_eq!(scalar(&g, l), 1.0 / (25.0 + 1e-6));
    }

    #[test]
    fn fisher_zero_within_scatter() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::<f64>::from_f64([3, 2, 2], &[1.0, 2.0, 5.0, 6.0].repeat(3)).unwrap());
        let l = fisher_layer(&mut g, e, 1e-6).unwrap();
        assert_eq!(scalar(&g, l), 0.0);
    }

    #[test]
    fn fisher_identical_means() {
        // every category has mean 1 → S_b = 0, S_w = 1
        let mut g = Graph::new();
        let e = g.constant(Tensor::<f64>::from_f64([2, 2, 1], &[0.0, 0.0, 2.0, 2.0]).unwrap());
        let l = fisher_layer(&mut g, e, 1e-6).unwrap();
        assert!((scalar(&g, l) - 1.0 / 1e-6).abs() < 1e-6);
    }
}
