//! Zero-shot evaluation and alignment/uniformity probes.

use rayon::prelude::*;

use crate::data::FeatureDataset;
use crate::encoder::{encode_all_classes, ClassVocabulary, FrozenTextEncoder, SoftPrompt};
use crate::error::{PompError, Result};
use crate::numerics::{dot, log_sum_exp_unchecked, squared_distance, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub top1: f64,
    pub top5: f64,
    /// Top-k rate for every requested `k`, in request order.
    pub top_k: Vec<(usize, f64)>,
    /// Top-1 accuracy per class id; classes without images count as 0.
    pub per_class_accuracy: Vec<f64>,
    pub num_images: usize,
}

/// Rank of the true class under descending score, ties to the lower id.
fn true_class_rank(scores: &[f64], label: usize) -> usize {
    let target = scores[label];
    scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > target || (s == target && i < label))
        .count()
}

/// Classifies each image by its highest dot product against `class_features`.
pub fn evaluate_with_features(
    class_features: &Matrix,
    dataset: &FeatureDataset,
    k_list: &[usize],
) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(PompError::EmptyInput("zero-shot evaluation"));
    }
    let n = class_features.rows();
    dataset.check_labels(n)?;
    dataset.check_dim(class_features.cols())?;
    let ranks: Vec<usize> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let x = dataset.feature(i);
            let scores: Vec<f64> = (0..n).map(|c| dot(x, class_features.row(c))).collect();
            true_class_rank(&scores, dataset.labels()[i] as usize)
        })
        .collect();
    let total = ranks.len() as f64;
    let rate = |k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / total;
    let mut hits = vec![0usize; n];
    let mut counts = vec![0usize; n];
    for (&r, &l) in ranks.iter().zip(dataset.labels()) {
        counts[l as usize] += 1;
        if r == 0 {
            hits[l as usize] += 1;
        }
    }
    Ok(EvalResult {
        top1: rate(1),
        top5: rate(5),
        top_k: k_list.iter().map(|&k| (k, rate(k))).collect(),
        per_class_accuracy: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
            .collect(),
        num_images: ranks.len(),
    })
}

/// Synthesizes every class feature with `prompt` and evaluates `dataset`.
/// No margin or temperature enters inference.
pub fn zero_shot_eval(
    prompt: &SoftPrompt,
    encoder: &FrozenTextEncoder,
    vocab: &ClassVocabulary,
    dataset: &FeatureDataset,
    k_list: &[usize],
) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(PompError::EmptyInput("zero-shot evaluation"));
    }
    let features = encode_all_classes(encoder, prompt, vocab)?;
    evaluate_with_features(&features, dataset, k_list)
}

/// Mean of `‖x - w_y‖²` over the dataset.
pub fn alignment_loss(dataset: &FeatureDataset, class_features: &Matrix) -> Result<f64> {
    if dataset.is_empty() {
        return Err(PompError::EmptyInput("alignment_loss"));
    }
    dataset.check_labels(class_features.rows())?;
    dataset.check_dim(class_features.cols())?;
    let total: f64 = (0..dataset.len())
        .map(|i| squared_distance(dataset.feature(i), class_features.row(dataset.labels()[i] as usize)))
        .sum();
    Ok(total / dataset.len() as f64)
}

/// `log` of the mean over ordered pairs `i ≠ j` of `exp(-2‖w_i - w_j‖²)`.
pub fn uniformity_loss(class_features: &Matrix) -> Result<f64> {
    let n = class_features.rows();
    if n < 2 {
        return Err(PompError::invalid(format!("uniformity needs at least 2 classes, got {n}")));
    }
    let mut exponents = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                exponents.push(-2.0 * squared_distance(class_features.row(i), class_features.row(j)));
            }
        }
    }
    Ok(log_sum_exp_unchecked(&exponents) - (exponents.len() as f64).ln())
}

/// The full probe bundle written to a metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub eval: EvalResult,
    pub align: f64,
    pub uniform: f64,
}

pub fn probe(
    prompt: &SoftPrompt,
    encoder: &FrozenTextEncoder,
    vocab: &ClassVocabulary,
    dataset: &FeatureDataset,
) -> Result<ProbeReport> {
    let features = encode_all_classes(encoder, prompt, vocab)?;
    Ok(ProbeReport {
        eval: evaluate_with_features(&features, dataset, &[1, 5])?,
        align: alignment_loss(dataset, &features)?,
        uniform: uniformity_loss(&features)?,
    })
}

/// `metric,value` CSV preceded by `#` comment lines.
pub fn metrics_csv(comments: &[(&str, String)], rows: &[(&str, f64)]) -> String {
    let mut out = String::new();
    for (k, v) in comments {
        out.push_str(&format!("# {k}={v}\n"));
    }
    out.push_str("metric,value\n");
    for (k, v) in rows {
        out.push_str(&format!("{k},{v}\n"));
    }
    out
}
