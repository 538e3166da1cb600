//! Sampled-softmax loss with an adaptive negative-logit margin.
//!
//! Over a step's class set the positive logit is `s_y / τ` and every sampled
//! negative gets `s_i / τ + m`, with `m = -ln((K-1)/(N-1))`. At `K = N` the
//! margin vanishes and the loss is the ordinary full-softmax cross-entropy.

use rayon::prelude::*;

use crate::encoder::{encode_class, ClassActivation, ClassVocabulary, FrozenTextEncoder, SoftPrompt};
use crate::error::{PompError, Result};
use crate::numerics::{dot, log_sum_exp_unchecked, stable_softmax_unchecked, Matrix};
use crate::sampling::StepClassSet;

/// Similarities of one image against the `K` classes of a step.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBlock {
    sims: Vec<f64>,
    positive_index: usize,
    tau: f64,
    margin: f64,
}

impl LogitBlock {
    pub fn new(sims: Vec<f64>, positive_index: usize, tau: f64, margin: f64) -> Result<Self> {
        if sims.is_empty() {
            return Err(PompError::EmptyInput("logit block"));
        }
        if positive_index >= sims.len() {
            return Err(PompError::invalid(format!(
                "positive index {positive_index} out of range for {} classes",
                sims.len()
            )));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(PompError::invalid(format!("temperature must be positive, got {tau}")));
        }
        if !(margin >= 0.0 && margin.is_finite()) {
            return Err(PompError::invalid(format!("margin must be non-negative, got {margin}")));
        }
        if let Some(index) = sims.iter().position(|s| !s.is_finite()) {
            return Err(PompError::NonFinite { index });
        }
        Ok(Self {
            sims,
            positive_index,
            tau,
            margin,
        })
    }

    pub fn sims(&self) -> &[f64] {
        &self.sims
    }

    pub fn positive_index(&self) -> usize {
        self.positive_index
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    /// `s_i / τ`, plus the margin on every negative.
    pub fn corrected_logits(&self) -> Vec<f64> {
        self.sims
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let l = s / self.tau;
                if i == self.positive_index {
                    l
                } else {
                    l + self.margin
                }
            })
            .collect()
    }
}

/// Margin for `K` sampled classes out of `N`: `-ln((K-1)/(N-1))`.
pub fn adaptive_margin(k: usize, n: usize) -> Result<f64> {
    if k < 2 {
        return Err(PompError::invalid(format!(
            "adaptive margin needs K >= 2 (at least one negative), got K = {k}"
        )));
    }
    if k > n {
        return Err(PompError::invalid(format!("K = {k} exceeds N = {n}")));
    }
    if k == n {
        return Ok(0.0);
    }
    Ok(-((k - 1) as f64 / (n - 1) as f64).ln())
}

/// Softmax over `s_i / τ` for a margin-free block covering every class.
pub fn full_softmax_prob(block: &LogitBlock) -> Result<Vec<f64>> {
    if block.margin != 0.0 {
        return Err(PompError::invalid(format!(
            "full softmax requires a zero margin, got {}",
            block.margin
        )));
    }
    let logits: Vec<f64> = block.sims.iter().map(|s| s / block.tau).collect();
    Ok(stable_softmax_unchecked(&logits))
}

/// Class probabilities under the margin-corrected logits.
pub fn corrected_probs(block: &LogitBlock) -> Vec<f64> {
    stable_softmax_unchecked(&block.corrected_logits())
}

/// Margin-corrected probability of the positive class.
pub fn corrected_prob(block: &LogitBlock) -> f64 {
    (-step_loss(block)).exp()
}

/// `-ln P̃(y)`.
pub fn step_loss(block: &LogitBlock) -> f64 {
    let logits = block.corrected_logits();
    let loss = log_sum_exp_unchecked(&logits) - logits[block.positive_index];
    loss.max(0.0)
}

/// Whether the positive logit clears every negative by the margin.
pub fn satisfies_margin_boundary(block: &LogitBlock) -> bool {
    let pos = block.sims[block.positive_index] / block.tau;
    block
        .sims
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != block.positive_index)
        .all(|(_, s)| pos >= s / block.tau + block.margin)
}

/// `∂ loss / ∂ s_j = (P̃_j - [j = y]) / τ`.
pub fn similarity_gradient(block: &LogitBlock) -> Vec<f64> {
    let mut g = corrected_probs(block);
    g[block.positive_index] -= 1.0;
    g.iter_mut().for_each(|v| *v /= block.tau);
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptGradient {
    pub grad: Matrix,
    pub loss_value: f64,
}

/// Encodes every class of a step set, keeping activations for the backward pass.
pub fn encode_step_classes(
    enc: &FrozenTextEncoder,
    prompt: &SoftPrompt,
    vocab: &ClassVocabulary,
    class_ids: &[usize],
    parallel: bool,
) -> Result<Vec<ClassActivation>> {
    if parallel {
        class_ids
            .par_iter()
            .map(|&id| encode_class(enc, prompt, vocab, id))
            .collect()
    } else {
        class_ids
            .iter()
            .map(|&id| encode_class(enc, prompt, vocab, id))
            .collect()
    }
}

/// One labelled image inside a step.
#[derive(Debug, Clone, Copy)]
pub struct LabelledImage<'a> {
    pub feature: &'a [f64],
    pub label: usize,
}

/// Mean margin-corrected loss and its prompt gradient over a batch that
/// shares one step set. Each class is encoded once; the upstream gradient on
/// class feature `j` is `Σ_b c_bj x_b`, pushed through one backward pass.
pub fn batch_prompt_gradient(
    enc: &FrozenTextEncoder,
    prompt: &SoftPrompt,
    vocab: &ClassVocabulary,
    step_set: &StepClassSet,
    images: &[LabelledImage<'_>],
    tau: f64,
    margin: f64,
    parallel: bool,
) -> Result<PromptGradient> {
    if images.is_empty() {
        return Err(PompError::EmptyInput("batch_prompt_gradient"));
    }
    let acts = encode_step_classes(enc, prompt, vocab, step_set.class_ids(), parallel)?;
    accumulate_from_activations(enc, prompt, step_set, &acts, images, tau, margin)
}

pub(crate) fn accumulate_from_activations(
    enc: &FrozenTextEncoder,
    prompt: &SoftPrompt,
    step_set: &StepClassSet,
    acts: &[ClassActivation],
    images: &[LabelledImage<'_>],
    tau: f64,
    margin: f64,
) -> Result<PromptGradient> {
    let k = acts.len();
    let d = enc.output_dim();
    let batch = images.len();
    let scale = 1.0 / batch as f64;
    let mut coef = Matrix::zeros(batch, k);
    let mut loss_sum = 0.0;
    for (b, img) in images.iter().enumerate() {
        if img.feature.len() != d {
            return Err(PompError::ShapeMismatch {
                expected: format!("image feature of dim {d}"),
                found: format!("{}", img.feature.len()),
            });
        }
        let pos = step_set.position_of(img.label).ok_or_else(|| {
            PompError::invalid(format!("label {} is not in the step set", img.label))
        })?;
        let sims: Vec<f64> = acts.iter().map(|a| dot(img.feature, a.output.as_slice())).collect();
        let block = LogitBlock::new(sims, pos, tau, margin)?;
        loss_sum += step_loss(&block);
        for (c, g) in coef.row_mut(b).iter_mut().zip(similarity_gradient(&block)) {
            *c = g * scale;
        }
    }
    let mut grad = Matrix::zeros(prompt.len(), prompt.embed_dim());
    let mut upstream = vec![0.0; d];
    for (j, act) in acts.iter().enumerate() {
        upstream.iter_mut().for_each(|u| *u = 0.0);
        for (b, img) in images.iter().enumerate() {
            let c = coef.get(b, j);
            if c != 0.0 {
                for (u, x) in upstream.iter_mut().zip(img.feature) {
                    *u += c * x;
                }
            }
        }
        let g = enc.backward_rows(act, &upstream, prompt.len())?;
        grad.axpy(1.0, &g)?;
    }
    Ok(PromptGradient {
        grad,
        loss_value: loss_sum * scale,
    })
}

/// Margin-corrected loss and prompt gradient for one image, using the step
/// set's adaptive margin.
pub fn prompt_gradient(
    enc: &FrozenTextEncoder,
    prompt: &SoftPrompt,
    vocab: &ClassVocabulary,
    step_set: &StepClassSet,
    image: &[f64],
    label: usize,
    tau: f64,
) -> Result<PromptGradient> {
    prompt_gradient_with_margin(enc, prompt, vocab, step_set, image, label, tau, step_set.margin())
}

/// As [`prompt_gradient`] with an explicit margin (used for margin ablations).
#[allow(clippy::too_many_arguments)]
pub fn prompt_gradient_with_margin(
    enc: &FrozenTextEncoder,
    prompt: &SoftPrompt,
    vocab: &ClassVocabulary,
    step_set: &StepClassSet,
    image: &[f64],
    label: usize,
    tau: f64,
    margin: f64,
) -> Result<PromptGradient> {
    if step_set.position_of(label).is_none() {
        return Err(PompError::invalid(format!("label {label} is not in the step set")));
    }
    let images = [LabelledImage { feature: image, label }];
    batch_prompt_gradient(enc, prompt, vocab, step_set, &images, tau, margin, false)
}

/// Margin-corrected loss of one image, recomputed from scratch (used as the
/// objective for finite differences).
pub fn image_loss(
    enc: &FrozenTextEncoder,
    prompt: &SoftPrompt,
    vocab: &ClassVocabulary,
    class_ids: &[usize],
    positive_index: usize,
    image: &[f64],
    tau: f64,
    margin: f64,
) -> Result<f64> {
    let sims = class_ids
        .iter()
        .map(|&id| Ok(dot(image, encode_class(enc, prompt, vocab, id)?.output.as_slice())))
        .collect::<Result<Vec<f64>>>()?;
    Ok(step_loss(&LogitBlock::new(sims, positive_index, tau, margin)?))
}

/// Uncorrected full-softmax gradient over every class, assembled term by term:
/// `(1/τ) [ -∇(x·w_y) + Σ_i P_i ∇(x·w_i) ]`. Control path for the corrected
/// gradient at `K = N`.
pub fn full_softmax_prompt_gradient(
    enc: &FrozenTextEncoder,
    prompt: &SoftPrompt,
    vocab: &ClassVocabulary,
    image: &[f64],
    label: usize,
    tau: f64,
) -> Result<PromptGradient> {
    let images = [LabelledImage { feature: image, label }];
    full_softmax_batch_gradient(enc, prompt, vocab, &images, tau)
}

/// Batch mean of [`full_softmax_prompt_gradient`]. Classes are encoded once;
/// each `∇(x_b·w_i)` is a separate backward pass.
pub fn full_softmax_batch_gradient(
    enc: &FrozenTextEncoder,
    prompt: &SoftPrompt,
    vocab: &ClassVocabulary,
    images: &[LabelledImage<'_>],
    tau: f64,
) -> Result<PromptGradient> {
    if images.is_empty() {
        return Err(PompError::EmptyInput("full_softmax_batch_gradient"));
    }
    let n = vocab.num_classes();
    let ids: Vec<usize> = (0..n).collect();
    let acts = encode_step_classes(enc, prompt, vocab, &ids, false)?;
    let scale = 1.0 / images.len() as f64;
    let mut grad = Matrix::zeros(prompt.len(), prompt.embed_dim());
    let mut loss_sum = 0.0;
    for img in images {
        if img.label >= n {
            return Err(PompError::UnknownClass(img.label));
        }
        let sims: Vec<f64> = acts.iter().map(|a| dot(img.feature, a.output.as_slice())).collect();
        let block = LogitBlock::new(sims, img.label, tau, 0.0)?;
        let probs = full_softmax_prob(&block)?;
        loss_sum -= probs[img.label].ln();
        for (i, act) in acts.iter().enumerate() {
            let sim_grad = enc.backward_rows(act, img.feature, prompt.len())?;
            let mut weight = probs[i];
            if i == img.label {
                weight -= 1.0;
            }
            grad.axpy(weight * scale / tau, &sim_grad)?;
        }
    }
    Ok(PromptGradient {
        grad,
        loss_value: loss_sum * scale,
    })
}

/// Central differences of `f` at `at`, one entry at a time.
pub fn finite_difference<F>(f: F, at: &Matrix, h: f64) -> Matrix
where
    F: Fn(&Matrix) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut out = Matrix::zeros(at.rows(), at.cols());
    let mut probe = at.clone();
    for idx in 0..at.as_slice().len() {
        let orig = at.as_slice()[idx];
        probe.as_mut_slice()[idx] = orig + h;
        let plus = f(&probe);
        probe.as_mut_slice()[idx] = orig - h;
        let minus = f(&probe);
        probe.as_mut_slice()[idx] = orig;
        out.as_mut_slice()[idx] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Central-difference gradient of a prompt loss.
pub fn finite_difference_gradient<F>(loss_fn: F, prompt: &SoftPrompt, h: f64) -> Matrix
where
    F: Fn(&SoftPrompt) -> f64,
{
    finite_difference(
        |theta| {
            let p = SoftPrompt::from_matrix(theta.clone()).expect("finite probe");
            loss_fn(&p)
        },
        prompt.theta(),
        h,
    )
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let diff: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const E: f64 = std::f64::consts::E;

    fn block(sims: &[f64], pos: usize, tau: f64, m: f64) -> LogitBlock {
        LogitBlock::new(sims.to_vec(), pos, tau, m).unwrap()
    }

    #[test]
    fn full_softmax_examples() {
        assert_eq!(full_softmax_prob(&block(&[0.3, 0.3], 0, 0.07, 0.0)).unwrap(), vec![0.5, 0.5]);
        let p = full_softmax_prob(&block(&[1.0, 0.0], 0, 1.0, 0.0)).unwrap();
        assert!((p[0] - E / (E + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
        let p = full_softmax_prob(&block(&[0.5, 0.4, 0.1], 1, 0.01, 0.0)).unwrap();
        assert!(p[0] >= 0.999);
        assert!(full_softmax_prob(&block(&[0.5, 0.4], 0, 1.0, 0.1)).is_err());
    }

    #[test]
    fn margin_examples() {
        assert_eq!(adaptive_margin(7, 7).unwrap(), 0.0);
        assert!((adaptive_margin(2, 3).unwrap() - 2f64.ln()).abs() < 1e-15);
        let m = adaptive_margin(1000, 21000).unwrap();
        assert!((m - (20999.0f64 / 999.0).ln()).abs() < 1e-15);
        assert!((m - 3.0455).abs() < 1e-4);
        assert!(adaptive_margin(1, 10).is_err());
        assert!(adaptive_margin(11, 10).is_err());
    }

    #[test]
    fn margin_monotonicity() {
        for n in 3..60 {
            for k in 2..n {
                assert!(adaptive_margin(k, n).unwrap() > adaptive_margin(k + 1, n).unwrap());
                assert!(adaptive_margin(k, n + 1).unwrap() > adaptive_margin(k, n).unwrap());
            }
        }
    }

    #[test]
    fn corrected_prob_examples() {
        let b = block(&[0.2, 0.7, -0.1], 1, 0.5, 0.0);
        assert!((corrected_prob(&b) - full_softmax_prob(&b).unwrap()[1]).abs() < 1e-15);
        let b = block(&[1.0, 1.0], 0, 1.0, 2f64.ln());
        assert!((corrected_prob(&b) - 1.0 / 3.0).abs() < 1e-15);
        let mut last = 1.0;
        for i in 0..20 {
            let p = corrected_prob(&block(&[0.4, 0.1, 0.3], 0, 0.1, i as f64 * 0.25));
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn step_loss_examples() {
        assert!(step_loss(&block(&[1.0, -1.0], 0, 0.01, 0.0)) < 1e-80);
        assert!((step_loss(&block(&[0.3, 0.3], 1, 0.07, 0.0)) - 2f64.ln()).abs() < 1e-15);
        let mut last = f64::INFINITY;
        for i in 0..10 {
            let l = step_loss(&block(&[-0.5 + 0.1 * i as f64, 0.2, 0.1], 0, 0.1, 0.5));
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn boundary_examples() {
        assert!(satisfies_margin_boundary(&block(&[0.5, 0.4, 0.1], 0, 1.0, 0.0)));
        assert!(!satisfies_margin_boundary(&block(&[0.5, 0.5], 0, 1.0, 0.1)));
        // s_y/τ = 1.0, s_neg/τ + m = 0.5 + 0.5
        assert!(satisfies_margin_boundary(&block(&[1.0, 0.5], 0, 1.0, 0.5)));
    }

    #[test]
    fn logit_block_validation() {
        assert!(LogitBlock::new(vec![], 0, 1.0, 0.0).is_err());
        assert!(LogitBlock::new(vec![0.0], 1, 1.0, 0.0).is_err());
        assert!(LogitBlock::new(vec![0.0], 0, 0.0, 0.0).is_err());
        assert!(LogitBlock::new(vec![0.0], 0, 1.0, -0.1).is_err());
        assert!(LogitBlock::new(vec![f64::NAN], 0, 1.0, 0.0).is_err());
    }

    #[test]
    fn fd_linear_quadratic_constant() {
        let theta = Matrix::new(2, 3, vec![0.5, -1.0, 2.0, 0.0, 3.0, -0.25]).unwrap();
        let p = SoftPrompt::from_matrix(theta.clone()).unwrap();
        let sum = finite_difference_gradient(|q| q.theta().as_slice().iter().sum(), &p, 1e-5);
        assert!(sum.as_slice().iter().all(|v| (v - 1.0).abs() < 1e-9));
        let quad = finite_difference_gradient(
            |q| q.theta().as_slice().iter().map(|v| v * v).sum::<f64>() / 2.0,
            &p,
            1e-4,
        );
        for (g, t) in quad.as_slice().iter().zip(theta.as_slice()) {
            assert!((g - t).abs() < 1e-8);
        }
        let zero = finite_difference_gradient(|_| 4.2, &p, 1e-3);
        assert!(zero.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn similarity_gradient_matches_difference_quotient() {
        let b = block(&[0.3, -0.2, 0.5, 0.1], 2, 0.2, 0.7);
        let g = similarity_gradient(&b);
        let h = 1e-6;
        for j in 0..4 {
            let mut up = b.sims().to_vec();
            up[j] += h;
            let mut dn = b.sims().to_vec();
            dn[j] -= h;
            let fd = (step_loss(&block(&up, 2, 0.2, 0.7)) - step_loss(&block(&dn, 2, 0.2, 0.7))) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-7, "{j}: {fd} vs {}", g[j]);
        }
    }

    proptest! {
        #[test]
        fn corrected_prob_shift_invariant(
            sims in prop::collection::vec(-1.0f64..1.0, 2..12),
            shift in -5.0f64..5.0,
            tau in 0.01f64..2.0,
            m in 0.0f64..4.0,
        ) {
            let pos = sims.len() / 2;
            let a = corrected_prob(&block(&sims, pos, tau, m));
            let shifted: Vec<f64> = sims.iter().map(|s| s + shift).collect();
            let b = corrected_prob(&block(&shifted, pos, tau, m));
            prop_assert!((a - b).abs() < 1e-9 * a.max(1e-300) + 1e-12);
        }

        #[test]
        fn probability_bounds(
            sims in prop::collection::vec(-1.0f64..1.0, 2..12),
            tau in 0.05f64..2.0,
            m in 0.0f64..4.0,
        ) {
            let b = block(&sims, 0, tau, m);
            let p = corrected_prob(&b);
            prop_assert!(p > 0.0 && p < 1.0);
            prop_assert!(step_loss(&b) >= 0.0);
        }

        #[test]
        fn margin_keeps_negative_ordering(
            sims in prop::collection::vec(-1.0f64..1.0, 3..12),
            tau in 0.01f64..2.0,
            m in 0.0f64..4.0,
        ) {
            let plain = block(&sims, 0, tau, 0.0).corrected_logits();
            let shifted = block(&sims, 0, tau, m).corrected_logits();
            let argmax = |v: &[f64]| (1..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b]).then(b.cmp(&a))).unwrap();
            prop_assert_eq!(argmax(&plain), argmax(&shifted));
        }
    }
}
