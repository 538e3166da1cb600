//! Finite-difference and degeneracy harnesses for the prompt gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::encoder::{
    encode_class, ClassEntry, ClassVocabulary, EncoderKind, FrozenTextEncoder, SoftPrompt,
};
use crate::error::{PompError, Result};
use crate::numerics::{l2_normalize, Matrix, Vector};
use crate::objective::{
    adaptive_margin, corrected_probs, full_softmax_prob, full_softmax_prompt_gradient,
    finite_difference_gradient, image_loss, prompt_gradient, relative_error, LogitBlock,
};
use crate::sampling::{build_step_class_set, ProposalDistribution, StepClassSet};

/// `K` for one cell of the check matrix; `All` means `K = N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KChoice {
    Fixed(usize),
    All,
}

impl std::fmt::Display for KChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KChoice::Fixed(k) => write!(f, "{k}"),
            KChoice::All => f.write_str("N"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub num_classes: usize,
    pub prompt_len: usize,
    pub embed_dim: usize,
    pub output_dim: usize,
    pub tau: f64,
    pub fixtures: usize,
    pub k_values: Vec<KChoice>,
    pub kinds: Vec<EncoderKind>,
    pub h: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Test hook: flips the sign of the positive-class term in the analytic
    /// gradient so the harness can be shown to catch it.
    pub flip_positive_sign: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            prompt_len: 4,
            embed_dim: 8,
            output_dim: 6,
            tau: 0.07,
            fixtures: 20,
            k_values: vec![KChoice::Fixed(2), KChoice::Fixed(5), KChoice::All],
            kinds: vec![EncoderKind::MeanPoolLinear, EncoderKind::MeanPoolTwoLayerTanh],
            h: 1e-5,
            tolerance: 1e-4,
            seed: 7,
            flip_positive_sign: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureOutcome {
    pub kind: EncoderKind,
    pub k: usize,
    pub fixture: usize,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub outcomes: Vec<FixtureOutcome>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.outcomes.iter().map(|o| o.relative_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&FixtureOutcome> {
        self.outcomes
            .iter()
            .filter(|o| !(o.relative_error < self.tolerance))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

/// A self-contained random problem: vocabulary, encoder, prompt and one image.
pub struct GradFixture {
    pub vocab: ClassVocabulary,
    pub encoder: FrozenTextEncoder,
    pub prompt: SoftPrompt,
    pub image: Vec<f64>,
    pub label: usize,
}

pub fn random_fixture(
    kind: EncoderKind,
    n: usize,
    prompt_len: usize,
    e: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GradFixture> {
    let mut table = Vec::new();
    let mut entries = Vec::with_capacity(n);
    let mut next_token = 0u32;
    for c in 0..n {
        let len = rng.random_range(1..=3);
        for _ in 0..len * e {
            table.push(StandardNormal.sample(rng));
        }
        entries.push(ClassEntry {
            class_id: c,
            name: format!("c{c}"),
            token_ids: (next_token..next_token + len as u32).collect(),
            frequency: rng.random_range(1..100),
        });
        next_token += len as u32;
    }
    let vocab = ClassVocabulary::new(entries, Matrix::new(next_token as usize, e, table)?)?;
    let encoder = FrozenTextEncoder::new(kind, rng.random(), e, d)?;
    let normal = Normal::new(0.0, 0.5).expect("valid std");
    let theta = Matrix::new(prompt_len, e, (0..prompt_len * e).map(|_| normal.sample(rng)).collect())?;
    let raw: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let image = l2_normalize(&Vector::new(raw)?)?.to_vec();
    Ok(GradFixture {
        vocab,
        encoder,
        prompt: SoftPrompt::from_matrix(theta)?,
        image,
        label: rng.random_range(0..n),
    })
}

/// Analytic-vs-central-difference relative error on one fixture.
pub fn check_fixture(
    fx: &GradFixture,
    set: &StepClassSet,
    tau: f64,
    h: f64,
    flip_positive_sign: bool,
) -> Result<f64> {
    let mut analytic = prompt_gradient(&fx.encoder, &fx.prompt, &fx.vocab, set, &fx.image, fx.label, tau)?.grad;
    if flip_positive_sign {
        let act = encode_class(&fx.encoder, &fx.prompt, &fx.vocab, fx.label)?;
        let positive = fx.encoder.backward_rows(&act, &fx.image, fx.prompt.len())?;
        analytic.axpy(2.0 / tau, &positive)?;
    }
    let pos = set
        .position_of(fx.label)
        .ok_or_else(|| PompError::invalid("label missing from step set"))?;
    let margin = set.margin();
    let numeric = finite_difference_gradient(
        |p| {
            image_loss(&fx.encoder, p, &fx.vocab, set.class_ids(), pos, &fx.image, tau, margin)
                .unwrap_or(f64::NAN)
        },
        &fx.prompt,
        h,
    );
    Ok(relative_error(&analytic, &numeric))
}

/// Runs every (encoder kind × K × fixture) cell.
pub fn run_grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.fixtures == 0 || cfg.k_values.is_empty() || cfg.kinds.is_empty() {
        return Err(PompError::invalid("grad-check matrix is empty"));
    }
    if !(cfg.h > 0.0) {
        return Err(PompError::invalid(format!("finite-difference step must be positive, got {}", cfg.h)));
    }
    let mut outcomes = Vec::new();
    for (ki, &kind) in cfg.kinds.iter().enumerate() {
        for (kj, &kc) in cfg.k_values.iter().enumerate() {
            let k = match kc {
                KChoice::Fixed(k) => k,
                KChoice::All => cfg.num_classes,
            };
            if k < 2 || k > cfg.num_classes {
                return Err(PompError::invalid(format!("K = {k} outside [2, N = {}]", cfg.num_classes)));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream((ki * 64 + kj) as u64);
            for fixture in 0..cfg.fixtures {
                let fx = random_fixture(kind, cfg.num_classes, cfg.prompt_len, cfg.embed_dim, cfg.output_dim, &mut rng)?;
                let set = build_step_class_set(&[fx.label], k, &ProposalDistribution::Uniform, &fx.vocab, None, &mut rng)?;
                let err = check_fixture(&fx, &set, cfg.tau, cfg.h, cfg.flip_positive_sign)?;
                outcomes.push(FixtureOutcome {
                    kind,
                    k,
                    fixture,
                    relative_error: err,
                });
            }
        }
    }
    Ok(GradCheckReport {
        outcomes,
        tolerance: cfg.tolerance,
    })
}

/// Largest deviations between the corrected and the uncorrected objective
/// at `K = N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegeneracyReport {
    pub fixtures: usize,
    pub max_prob_diff: f64,
    pub max_grad_diff: f64,
}

/// Draws fixtures with `2 ≤ N ≤ max_classes`, both encoder kinds alternating,
/// and compares probabilities and prompt gradients entrywise.
pub fn degeneracy_check(fixtures: usize, max_classes: usize, seed: u64) -> Result<DegeneracyReport> {
    if max_classes < 2 {
        return Err(PompError::invalid("degeneracy check needs N >= 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_prob_diff: f64 = 0.0;
    let mut max_grad_diff: f64 = 0.0;
    for i in 0..fixtures {
        let kind = if i % 2 == 0 {
            EncoderKind::MeanPoolLinear
        } else {
            EncoderKind::MeanPoolTwoLayerTanh
        };
        let n = rng.random_range(2..=max_classes);
        let tau = rng.random_range(0.05..1.0);
        let fx = random_fixture(kind, n, 3, 5, 4, &mut rng)?;
        let set = StepClassSet::new((0..n).collect(), &[fx.label], n)?;
        let margin = adaptive_margin(n, n)?;

        let sims = (0..n)
            .map(|c| {
                let w = encode_class(&fx.encoder, &fx.prompt, &fx.vocab, c)?;
                Ok(crate::numerics::dot(&fx.image, w.output.as_slice()))
            })
            .collect::<Result<Vec<f64>>>()?;
        let corrected = corrected_probs(&LogitBlock::new(sims.clone(), fx.label, tau, margin)?);
        let full = full_softmax_prob(&LogitBlock::new(sims, fx.label, tau, 0.0)?)?;
        for (a, b) in corrected.iter().zip(&full) {
            max_prob_diff = max_prob_diff.max((a - b).abs());
        }

        let pomp = prompt_gradient(&fx.encoder, &fx.prompt, &fx.vocab, &set, &fx.image, fx.label, tau)?;
        let control = full_softmax_prompt_gradient(&fx.encoder, &fx.prompt, &fx.vocab, &fx.image, fx.label, tau)?;
        for (a, b) in pomp.grad.as_slice().iter().zip(control.grad.as_slice()) {
            max_grad_diff = max_grad_diff.max((a - b).abs());
        }
    }
    Ok(DegeneracyReport {
        fixtures,
        max_prob_diff,
        max_grad_diff,
    })
}
