//! Analytic recovery of private labels from the sign structure of the
//! final dense layer's weight gradient.
//!
//! With cross-entropy, that gradient is `(softmax − onehot) · hᵀ` summed
//! over the batch. Hidden activations after ReLU/average-pooling are
//! nonnegative, so only classes present in the batch can contribute
//! negative entries: a single image is the unique class row with negative
//! row sum, and a batch yields the set of classes whose row minimum is
//! negative. Duplicated labels collapse — the rule recovers the set, never
//! multiplicities.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{GradientPacket, LayerSpec, Model};
use crate::tensor::Tensor;

/// Outcome of single-image label inference. Undecidable is a first-class
/// result: the harness must distinguish granted, inferred and jointly
/// optimized labels, so a guess is never fabricated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SingleLabelResult {
    Class(usize),
    Undecidable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelGuess {
    /// Sorted distinct classes detected in the batch.
    pub labels: Vec<usize>,
    /// True when as many distinct classes were found as batch entries, so
    /// the multiset is fully determined.
    pub unique_label_condition: bool,
    /// Per-class minimum over the final-layer weight-gradient row.
    pub per_class_min: Vec<f64>,
    /// False when the gradient carries no usable sign structure.
    pub decidable: bool,
}

/// The final dense layer's weight gradient `(classes, hidden)`.
fn final_dense_weight_grad<'p>(packet: &'p GradientPacket, model: &Model) -> Result<&'p Tensor> {
    match model.layers.last() {
        Some(LayerSpec::Dense { out_features }) if *out_features == model.classes => {}
        _ => {
            return Err(Error::Config(
                "label inference needs a model ending in a dense classifier".into(),
            ))
        }
    }
    if packet.grads.len() != model.params.len() {
        return Err(Error::Config("packet does not match model parameters".into()));
    }
    let idx = model.params.len() - 2;
    let (name, grad) = &packet.grads[idx];
    if name != &model.params[idx].name || grad.shape().len() != 2 || grad.shape()[0] != model.classes {
        return Err(Error::Config(format!(
            "unexpected final-layer gradient '{}' of shape {:?}",
            name,
            grad.shape()
        )));
    }
    Ok(grad)
}

/// Label of a single private image, from the unique class row with
/// negative row sum.
pub fn infer_single_label(packet: &GradientPacket, model: &Model) -> Result<SingleLabelResult> {
    if packet.batch_size != 1 {
        return Err(Error::Config(format!(
            "single-label inference needs batch size 1, got {}",
            packet.batch_size
        )));
    }
    let grad = final_dense_weight_grad(packet, model)?;
    let hidden = grad.shape()[1];
    let mut negatives = Vec::new();
    for c in 0..model.classes {
        let row_sum: f64 = grad.values()[c * hidden..(c + 1) * hidden].iter().sum();
        if row_sum < 0.0 {
            negatives.push(c);
        }
    }
    Ok(match negatives.as_slice() {
        [only] => SingleLabelResult::Class(*only),
        _ => SingleLabelResult::Undecidable,
    })
}

/// Set of labels present in a batch, from classes whose gradient-row
/// minimum is negative. Multiplicities are unrecoverable whenever labels
/// repeat, and the guess is flagged accordingly.
pub fn infer_batch_labels(packet: &GradientPacket, model: &Model) -> Result<LabelGuess> {
    let grad = final_dense_weight_grad(packet, model)?;
    let hidden = grad.shape()[1];
    let mut per_class_min = Vec::with_capacity(model.classes);
    let mut labels = Vec::new();
    for c in 0..model.classes {
        let m = grad.values()[c * hidden..(c + 1) * hidden]
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if m < 0.0 {
            labels.push(c);
        }
        per_class_min.push(m);
    }
    let decidable = !labels.is_empty();
    let unique_label_condition = decidable && labels.len() == packet.batch_size;
    Ok(LabelGuess {
        labels,
        unique_label_condition,
        per_class_min,
        decidable,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollisionStats {
    pub batch_size: usize,
    pub trials: usize,
    /// Fraction of sampled batches containing at least one repeated label.
    pub duplicate_probability: f64,
    /// Mean over trials of the largest per-class multiplicity.
    pub mean_max_multiplicity: f64,
    /// `histogram[m]` counts (trial, class) pairs where a class appeared
    /// exactly `m` times; index 0 is unused.
    pub histogram: Vec<u64>,
}

/// Sample batches from a labeled dataset and measure how often labels
/// collide — the failure mode of batch label inference.
pub fn label_collision_stats(
    dataset_labels: &[usize],
    batch_size: usize,
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CollisionStats> {
    if batch_size == 0 || batch_size > dataset_labels.len() {
        return Err(Error::Config(format!(
            "batch size {} for dataset of {}",
            batch_size,
            dataset_labels.len()
        )));
    }
    let classes = dataset_labels.iter().copied().max().unwrap_or(0) + 1;
    let mut indices: Vec<usize> = (0..dataset_labels.len()).collect();
    let mut histogram = vec![0u64; batch_size + 1];
    let mut dup_trials = 0usize;
    let mut max_mult_sum = 0usize;
    for _ in 0..trials {
        indices.shuffle(rng);
        let mut counts = vec![0usize; classes];
        for &i in indices.iter().take(batch_size) {
            counts[dataset_labels[i]] += 1;
        }
        let mut max_mult = 0;
        let mut any_dup = false;
        for &c in &counts {
            if c > 0 {
                histogram[c] += 1;
                max_mult = max_mult.max(c);
                if c > 1 {
                    any_dup = true;
                }
            }
        }
        if any_dup {
            dup_trials += 1;
        }
        max_mult_sum += max_mult;
    }
    Ok(CollisionStats {
        batch_size,
        trials,
        duplicate_probability: dup_trials as f64 / trials.max(1) as f64,
        mean_max_multiplicity: max_mult_sum as f64 / trials.max(1) as f64,
        histogram,
    })
}
