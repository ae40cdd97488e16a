//! Block-wise binary cross-entropy, point-wise cross-entropy and the
//! class-reweighted cross-entropy used as an ablation baseline.
//!
//! All losses are recorded on a [`Graph`] as single fused nodes and return a
//! scalar [`LossValue`]. Mean normalization is the default so loss scales do
//! not depend on resolution; [`Normalization::Sum`] exists for the gradient
//! dilution comparisons, where raw per-pixel sums make the arithmetic exact.

use crate::error::{Error, Result};
use crate::label::{BlockLabel, LabelMask, IGNORE};
use crate::tensor::{sc, Graph, Scalar, Tensor, Var};

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Normalization {
    /// Divide by the number of contributing terms (or by the total weight).
    #[default]
    Mean,
    Sum,
}

/// A scalar loss node plus bookkeeping about what it averaged over.
#[derive(Clone, Copy, Debug)]
pub struct LossValue {
    pub var: Var,
    /// Number of terms that contributed (non-ignored pixels or block entries).
    pub count: usize,
    /// Set when every pixel was ignored; the loss is then defined as 0.
    pub all_ignored: bool,
}

impl LossValue {
    pub fn value<T: Scalar>(&self, g: &Graph<T>) -> T {
        g.value(self.var).data()[0]
    }
}

/// Block-wise BCE between predicted probabilities `N×Ĉ×h×w` and one block
/// label per batch item: mean over all `N·Ĉ·h·w` terms of
/// `−[y·ln p + (1−y)·ln(1−p)]`.
pub fn bwbce<T: Scalar>(g: &mut Graph<T>, probs: Var, targets: &[BlockLabel]) -> Result<LossValue> {
    let [n, c, h, w] = g.value(probs).dims4()?;
    if targets.len() != n {
        return Err(Error::shape(format!(
            "bwbce batch axis: {n} predictions, {} block labels",
            targets.len()
        )));
    }
    let mut y = Vec::with_capacity(n * c * h * w);
    for t in targets {
        if (t.channels(), t.height(), t.width()) != (c, h, w) {
            return Err(Error::shape(format!(
                "bwbce: prediction is {c}×{h}×{w} per item, block label is {}×{}×{}",
                t.channels(),
                t.height(),
                t.width()
            )));
        }
        y.extend(t.bits().iter().map(|&b| if b != 0 { T::one() } else { T::zero() }));
    }
    let count = y.len();
    let var = g.binary_cross_entropy(probs, y, vec![T::one(); count], sc(count as f64), sc(PROB_EPS))?;
    Ok(LossValue {
        var,
        count,
        all_ignored: false,
    })
}

/// Element-wise BCE with explicit targets and optional per-element weights
/// (weight 0 excludes an element).
pub fn pointwise_bce<T: Scalar>(
    g: &mut Graph<T>,
    probs: Var,
    targets: &Tensor<T>,
    weights: Option<&Tensor<T>>,
    norm: Normalization,
) -> Result<LossValue> {
    let shape = g.value(probs).shape().to_vec();
    if targets.shape() != shape.as_slice() || weights.is_some_and(|w| w.shape() != shape.as_slice()) {
        return Err(Error::shape(format!(
            "pointwise bce: probabilities {shape:?}, targets {:?}",
            targets.shape()
        )));
    }
    let weights = weights.map_or_else(|| vec![T::one(); targets.len()], |w| w.data().to_vec());
    let count = weights.iter().filter(|&&w| w != T::zero()).count();
    let normalizer = match norm {
        Normalization::Sum => T::one(),
        Normalization::Mean if count == 0 => T::one(),
        Normalization::Mean => weights.iter().copied().sum(),
    };
    let var = g.binary_cross_entropy(probs, targets.data().to_vec(), weights, normalizer, sc(PROB_EPS))?;
    Ok(LossValue {
        var,
        count,
        all_ignored: count == 0,
    })
}

/// Softmax cross-entropy over `N×C×H×W` logits against one mask per batch
/// item, averaged over non-ignored pixels.
pub fn pointwise_ce<T: Scalar>(g: &mut Graph<T>, logits: Var, masks: &[LabelMask]) -> Result<LossValue> {
    pointwise_ce_with(g, logits, masks, Normalization::Mean)
}

pub fn pointwise_ce_with<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    masks: &[LabelMask],
    norm: Normalization,
) -> Result<LossValue> {
    let c = g.value(logits).dims4()?[1];
    weighted_ce(g, logits, masks, &vec![T::one(); c], norm)
}

/// Cross-entropy where each pixel is weighted by its target class's weight.
/// With [`Normalization::Mean`] the result is `Σ w·ℓ / Σ w`.
pub fn reweighted_ce<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    masks: &[LabelMask],
    class_weights: &[T],
    norm: Normalization,
) -> Result<LossValue> {
    let c = g.value(logits).dims4()?[1];
    if class_weights.len() != c {
        return Err(Error::arg(format!(
            "{} class weights for {c} classes",
            class_weights.len()
        )));
    }
    if let Some((i, w)) = class_weights.iter().enumerate().find(|(_, &w)| !(w > T::zero())) {
        return Err(Error::arg(format!("class weight {i} is {w}, must be > 0")));
    }
    weighted_ce(g, logits, masks, class_weights, norm)
}

fn weighted_ce<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    masks: &[LabelMask],
    class_weights: &[T],
    norm: Normalization,
) -> Result<LossValue> {
    let [n, c, h, w] = g.value(logits).dims4()?;
    if masks.len() != n {
        return Err(Error::shape(format!(
            "cross-entropy batch axis: {n} logit maps, {} masks",
            masks.len()
        )));
    }
    let mut targets = Vec::with_capacity(n * h * w);
    let mut weights = Vec::with_capacity(n * h * w);
    for m in masks {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::shape(format!(
                "cross-entropy spatial axes: logits {h}×{w}, mask {}×{}",
                m.height(),
                m.width()
            )));
        }
        for &id in m.ids() {
            if id == IGNORE {
                targets.push(None);
                weights.push(T::zero());
            } else if (id as usize) < c {
                targets.push(Some(id as usize));
                weights.push(class_weights[id as usize]);
            } else {
                return Err(Error::shape(format!("mask id {id} outside {c} logit channels")));
            }
        }
    }
    let count = targets.iter().filter(|t| t.is_some()).count();
    let normalizer = match norm {
        Normalization::Sum => T::one(),
        Normalization::Mean if count == 0 => T::one(),
        Normalization::Mean => weights.iter().copied().sum(),
    };
    let var = g.softmax_cross_entropy(logits, targets, weights, normalizer)?;
    Ok(LossValue {
        var,
        count,
        all_ignored: count == 0,
    })
}
