//! Prompt pre-training: SGD with a cosine learning-rate schedule, a freshly
//! sampled class subset per step, checkpoints and the per-step memory model.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::binio::{self, Reader};
use crate::data::FeatureDataset;
use crate::encoder::{
    encode_all_classes, init_prompt, ClassVocabulary, FrozenTextEncoder, SoftPrompt,
};
use crate::error::{PompError, Result};
use crate::numerics::{l2_normalize, meter_snapshot, Matrix, Vector};
use crate::objective::{
    accumulate_from_activations, encode_step_classes, full_softmax_batch_gradient,
    prompt_gradient_with_margin, LabelledImage, PromptGradient,
};
use crate::sampling::{build_step_class_set, DistributionKind, ProposalDistribution};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"POMPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const SHUFFLE_STREAM: u64 = 1;
const SAMPLING_STREAM: u64 = 2;

/// Which loss the step optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossPath {
    /// Margin-corrected loss over a sampled class subset.
    Sampled,
    /// Uncorrected softmax over every class; requires `K = N`.
    FullSoftmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub k: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub tau: f64,
    pub prompt_len: usize,
    pub distribution: DistributionKind,
    /// Temperature of the similarity proposal.
    pub similarity_tau: f64,
    pub margin_override: Option<f64>,
    pub seed: u64,
    pub per_image_sampling: bool,
    pub loss_path: LossPath,
    /// Encode step classes on the rayon pool.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 64,
            batch_size: 32,
            epochs: 20,
            lr0: 0.002,
            tau: 0.07,
            prompt_len: 16,
            distribution: DistributionKind::Uniform,
            similarity_tau: 0.07,
            margin_override: None,
            seed: 42,
            per_image_sampling: false,
            loss_path: LossPath::Sampled,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(PompError::invalid(format!("K must be >= 2, got {}", self.k)));
        }
        if self.batch_size == 0 {
            return Err(PompError::invalid("batch_size must be >= 1"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(PompError::invalid(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.tau > 0.0 && self.tau <= 10.0) {
            return Err(PompError::invalid(format!("tau must be in (0, 10], got {}", self.tau)));
        }
        if !(self.similarity_tau > 0.0 && self.similarity_tau.is_finite()) {
            return Err(PompError::invalid("similarity_tau must be positive"));
        }
        if self.prompt_len == 0 {
            return Err(PompError::invalid("prompt_len must be >= 1"));
        }
        if let Some(m) = self.margin_override {
            if !(m >= 0.0 && m.is_finite()) {
                return Err(PompError::invalid(format!("margin override must be >= 0, got {m}")));
            }
        }
        Ok(())
    }

    /// Stable `key=value` rendering of every field that affects training.
    pub fn canonical_string(&self) -> String {
        let margin = match self.margin_override {
            Some(m) => format!("{m:?}"),
            None => "adaptive".into(),
        };
        let path = match self.loss_path {
            LossPath::Sampled => "sampled",
            LossPath::FullSoftmax => "full",
        };
        format!(
            "k={}\nbatch_size={}\nepochs={}\nlr0={:?}\ntau={:?}\nprompt_len={}\ndistribution={}\n\
             similarity_tau={:?}\nmargin={}\nseed={}\nper_image_sampling={}\nloss_path={}\n",
            self.k,
            self.batch_size,
            self.epochs,
            self.lr0,
            self.tau,
            self.prompt_len,
            self.distribution,
            self.similarity_tau,
            margin,
            self.seed,
            self.per_image_sampling,
            path
        )
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_string().as_bytes()).into()
    }
}

/// `lr0 · (1 + cos(π t / T)) / 2`; `step` is clamped to `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> f64 {
    debug_assert!(total_steps >= 1 && step <= total_steps);
    let total = total_steps.max(1);
    let t = step.min(total) as f64 / total as f64;
    lr0 * (1.0 + (PI * t).cos()) / 2.0
}

/// `Θ ← Θ − lr · grad`.
pub fn sgd_step(prompt: &mut SoftPrompt, grad: &Matrix, lr: f64) -> Result<()> {
    if grad.shape() != prompt.theta().shape() {
        return Err(PompError::ShapeMismatch {
            expected: format!("{:?}", prompt.theta().shape()),
            found: format!("{:?}", grad.shape()),
        });
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(PompError::invalid(format!("learning rate must be >= 0, got {lr}")));
    }
    for (t, g) in prompt.theta_mut().iter_mut().zip(grad.as_slice()) {
        *t -= lr * g;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub prompt: SoftPrompt,
    pub step: u64,
    pub seed: u64,
    /// SHA-256 of the serialized header and payload.
    pub digest: [u8; 32],
}

impl Checkpoint {
    pub fn new(prompt: SoftPrompt, step: u64, seed: u64) -> Result<Self> {
        let mut ckpt = Self {
            prompt,
            step,
            seed,
            digest: [0; 32],
        };
        let body = ckpt.body_bytes()?;
        ckpt.digest = Sha256::digest(&body).into();
        Ok(ckpt)
    }

    fn body_bytes(&self) -> Result<Vec<u8>> {
        let theta = self.prompt.theta();
        let mut out = Vec::with_capacity(40 + theta.as_slice().len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        binio::put_u32(&mut out, CHECKPOINT_VERSION);
        binio::put_u32(&mut out, binio::dim_u32("prompt length", theta.rows())?);
        binio::put_u32(&mut out, binio::dim_u32("embedding dim", theta.cols())?);
        for &v in theta.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        binio::put_u64(&mut out, self.step);
        binio::put_u64(&mut out, self.seed);
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = self.body_bytes()?;
        let digest: [u8; 32] = Sha256::digest(&out).into();
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let theta = r.f64_array(rows * cols)?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let body_end = r.offset();
        let stored: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        r.finish()?;
        let computed: [u8; 32] = Sha256::digest(&bytes[..body_end]).into();
        if computed != stored {
            return Err(PompError::DigestMismatch);
        }
        let prompt = SoftPrompt::from_matrix(Matrix::new(rows, cols, theta)?)?;
        Ok(Self {
            prompt,
            step,
            seed,
            digest: stored,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    binio::write_file(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&binio::read_file(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

/// Everything a step needs besides the prompt and the batch.
pub struct StepContext<'a> {
    pub config: &'a TrainConfig,
    pub vocab: &'a ClassVocabulary,
    pub encoder: &'a FrozenTextEncoder,
    pub proposal: ProposalDistribution,
}

impl<'a> StepContext<'a> {
    pub fn new(
        config: &'a TrainConfig,
        vocab: &'a ClassVocabulary,
        encoder: &'a FrozenTextEncoder,
    ) -> Result<Self> {
        config.validate()?;
        let n = vocab.num_classes();
        if config.k > n {
            return Err(PompError::invalid(format!(
                "K = {} exceeds the number of classes N = {n} (K <= N required)",
                config.k
            )));
        }
        if config.loss_path == LossPath::FullSoftmax && config.k != n {
            return Err(PompError::invalid("the full-softmax control path requires K = N"));
        }
        if encoder.embed_dim() != vocab.embed_dim() {
            return Err(PompError::ShapeMismatch {
                expected: format!("encoder embed dim {}", vocab.embed_dim()),
                found: format!("{}", encoder.embed_dim()),
            });
        }
        let proposal = build_proposal(config, vocab, encoder)?;
        Ok(Self {
            config,
            vocab,
            encoder,
            proposal,
        })
    }

    /// One optimization step on `batch` (row indices into `dataset`). Returns
    /// the mean batch loss.
    pub fn step(
        &self,
        prompt: &mut SoftPrompt,
        dataset: &FeatureDataset,
        batch: &[usize],
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let g = self.gradient(prompt, dataset, batch, rng)?;
        sgd_step(prompt, &g.grad, lr)?;
        Ok(g.loss_value)
    }

    pub fn gradient(
        &self,
        prompt: &SoftPrompt,
        dataset: &FeatureDataset,
        batch: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<PromptGradient> {
        let cfg = self.config;
        // the batch block is materialized like a loader would hand it over
        let block = gather_rows(dataset.features(), batch)?;
        let labels: Vec<usize> = batch.iter().map(|&i| dataset.labels()[i] as usize).collect();
        let images: Vec<LabelledImage<'_>> = labels
            .iter()
            .enumerate()
            .map(|(b, &label)| LabelledImage {
                feature: block.row(b),
                label,
            })
            .collect();

        if cfg.loss_path == LossPath::FullSoftmax {
            return full_softmax_batch_gradient(self.encoder, prompt, self.vocab, &images, cfg.tau);
        }

        if !cfg.per_image_sampling {
            let query = if self.proposal.kind() == DistributionKind::Similarity {
                Some(mean_direction(&block)?)
            } else {
                None
            };
            let set = build_step_class_set(
                &labels,
                cfg.k,
                &self.proposal,
                self.vocab,
                query.as_ref().map(|q| q.as_slice()),
                rng,
            )?;
            let margin = cfg.margin_override.unwrap_or(set.margin());
            let acts = encode_step_classes(
                self.encoder,
                prompt,
                self.vocab,
                set.class_ids(),
                cfg.parallel,
            )?;
            return accumulate_from_activations(
                self.encoder,
                prompt,
                &set,
                &acts,
                &images,
                cfg.tau,
                margin,
            );
        }

        let scale = 1.0 / images.len() as f64;
        let mut grad = Matrix::zeros(prompt.len(), prompt.embed_dim());
        let mut loss = 0.0;
        for img in &images {
            let query = (self.proposal.kind() == DistributionKind::Similarity).then_some(img.feature);
            let set = build_step_class_set(
                &[img.label],
                cfg.k,
                &self.proposal,
                self.vocab,
                query,
                rng,
            )?;
            let margin = cfg.margin_override.unwrap_or(set.margin());
            let g = prompt_gradient_with_margin(
                self.encoder,
                prompt,
                self.vocab,
                &set,
                img.feature,
                img.label,
                cfg.tau,
                margin,
            )?;
            grad.axpy(scale, &g.grad)?;
            loss += scale * g.loss_value;
        }
        Ok(PromptGradient {
            grad,
            loss_value: loss,
        })
    }
}

fn gather_rows(features: &Matrix, rows: &[usize]) -> Result<Matrix> {
    if rows.is_empty() {
        return Err(PompError::EmptyInput("batch"));
    }
    let d = features.cols();
    let mut out = Matrix::zeros(rows.len(), d);
    for (b, &i) in rows.iter().enumerate() {
        if i >= features.rows() {
            return Err(PompError::invalid(format!("batch index {i} out of range")));
        }
        out.row_mut(b).copy_from_slice(features.row(i));
    }
    Ok(out)
}

fn mean_direction(block: &Matrix) -> Result<Vector> {
    l2_normalize(&block.mean_rows())
}

/// Proposal for the configured kind. The similarity proposal uses class
/// features encoded once with an all-zero prompt.
pub fn build_proposal(
    config: &TrainConfig,
    vocab: &ClassVocabulary,
    encoder: &FrozenTextEncoder,
) -> Result<ProposalDistribution> {
    Ok(match config.distribution {
        DistributionKind::Uniform => ProposalDistribution::Uniform,
        DistributionKind::Frequency => ProposalDistribution::Frequency,
        DistributionKind::Similarity => {
            let surrogate = SoftPrompt::zeros(config.prompt_len, vocab.embed_dim());
            let features = encode_all_classes(encoder, &surrogate, vocab)?;
            ProposalDistribution::similarity(features, config.similarity_tau)?
        }
    })
}

pub fn steps_per_epoch(dataset_len: usize, batch_size: usize) -> usize {
    dataset_len.div_ceil(batch_size)
}

fn check_labels(dataset: &FeatureDataset, vocab: &ClassVocabulary) -> Result<()> {
    let n = vocab.num_classes();
    if let Some(&bad) = dataset.labels().iter().find(|&&l| l as usize >= n) {
        return Err(PompError::UnknownClass(bad as usize));
    }
    if dataset.is_empty() {
        return Err(PompError::EmptyInput("training dataset"));
    }
    Ok(())
}

/// Runs `epochs × ⌈|D| / batch_size⌉` steps from a freshly initialized prompt.
pub fn train(
    config: &TrainConfig,
    vocab: &ClassVocabulary,
    encoder: &FrozenTextEncoder,
    dataset: &FeatureDataset,
) -> Result<TrainOutcome> {
    let ctx = StepContext::new(config, vocab, encoder)?;
    check_labels(dataset, vocab)?;
    let mut prompt = init_prompt(config.prompt_len, vocab.embed_dim(), config.seed)?;
    let per_epoch = steps_per_epoch(dataset.len(), config.batch_size);
    let total_steps = (config.epochs * per_epoch) as u64;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(config.seed);
    sample_rng.set_stream(SAMPLING_STREAM);

    let mut log = Vec::with_capacity(config.epochs);
    let mut step: u64 = 0;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for batch in order.chunks(config.batch_size) {
            let lr = cosine_lr(step, total_steps, config.lr0);
            let loss = ctx
                .step(&mut prompt, dataset, batch, lr, &mut sample_rng)
                .map_err(|e| PompError::Training {
                    step,
                    source: Box::new(e),
                })?;
            loss_sum += loss;
            steps += 1;
            step += 1;
        }
        log.push(EpochRecord {
            epoch: epoch + 1,
            mean_loss: loss_sum / steps as f64,
            steps,
        });
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(prompt, step, config.seed)?,
        log,
    })
}

/// Per-step memory under the cost model and as measured.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryReport {
    pub k: usize,
    pub modeled_bytes_per_step: u64,
    pub measured_peak_bytes: u64,
    /// `(M, L_max, e, d)`
    pub encoder_dims: (usize, usize, usize, usize),
}

impl MemoryReport {
    pub fn ratio(&self) -> f64 {
        self.measured_peak_bytes as f64 / self.modeled_bytes_per_step as f64
    }
}

/// Bytes cached per contrasted class: the `(M + L_max) × e` sequence, a
/// `d`-wide hidden feature and the `d`-wide output.
pub fn per_class_activation_bytes(prompt_len: usize, max_tokens: usize, e: usize, d: usize) -> u64 {
    8 * ((prompt_len + max_tokens) * e + 2 * d) as u64
}

/// Batch-side bytes independent of `K`: the `batch × d` image block, the
/// `M × e` gradient accumulator and one `M × e` backward buffer.
pub fn batch_side_bytes(batch_size: usize, prompt_len: usize, e: usize, d: usize) -> u64 {
    8 * (batch_size * d + 2 * prompt_len * e) as u64
}

/// `K · A(M, L_max, e, d) + B(batch, M, e, d)` with `A` from
/// [`per_class_activation_bytes`] and `B` from [`batch_side_bytes`].
pub fn estimate_step_memory(
    k: usize,
    prompt_len: usize,
    max_tokens: usize,
    e: usize,
    d: usize,
    batch_size: usize,
) -> u64 {
    k as u64 * per_class_activation_bytes(prompt_len, max_tokens, e, d)
        + batch_side_bytes(batch_size, prompt_len, e, d)
}

/// Least-squares line through `(xs, ys)`: `(slope, intercept, r²)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(PompError::invalid("linear fit needs at least two paired points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(PompError::invalid("linear fit needs distinct x values"));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok((slope, my - slope * mx, r2))
}

/// Data needed to measure one step.
pub struct MemoryFixture {
    pub vocab: ClassVocabulary,
    pub encoder: FrozenTextEncoder,
    pub dataset: FeatureDataset,
}

/// Runs one single-threaded step under the allocation meter. The caller must
/// have started a fresh window with [`crate::numerics::reset_peak`] (or
/// [`crate::numerics::reset_meter`]).
pub fn measure_step_memory(config: &TrainConfig, fixture: &MemoryFixture) -> Result<MemoryReport> {
    let before = meter_snapshot();
    if before.peak_bytes != before.live_bytes {
        return Err(PompError::MeterNotReset {
            live_bytes: before.live_bytes,
            peak_bytes: before.peak_bytes,
        });
    }
    let mut cfg = config.clone();
    cfg.parallel = false;
    let vocab = &fixture.vocab;
    let dataset = &fixture.dataset;
    let e = vocab.embed_dim();
    let d = fixture.encoder.output_dim();
    let l_max = vocab.max_tokens();
    let modeled = estimate_step_memory(cfg.k, cfg.prompt_len, l_max, e, d, cfg.batch_size);

    // prompt, context and batch order are set up before the measurement window
    let ctx = StepContext::new(&cfg, vocab, &fixture.encoder)?;
    let mut prompt = init_prompt(cfg.prompt_len, e, cfg.seed)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SAMPLING_STREAM);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut shuffle_rng);
    let batch: Vec<usize> = order.into_iter().take(cfg.batch_size).collect();

    crate::numerics::reset_peak();
    let baseline = meter_snapshot().live_bytes;
    ctx.step(&mut prompt, dataset, &batch, cfg.lr0, &mut rng)?;
    let peak = meter_snapshot().peak_bytes;
    Ok(MemoryReport {
        k: cfg.k,
        modeled_bytes_per_step: modeled,
        measured_peak_bytes: peak - baseline,
        encoder_dims: (cfg.prompt_len, l_max, e, d),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_fit_exact_line() {
        let (m, b, r2) = linear_fit(&[1.0, 2.0, 4.0], &[5.0, 7.0, 11.0]).unwrap();
        assert!((m - 2.0).abs() < 1e-12 && (b - 3.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
        assert!(linear_fit(&[1.0], &[1.0]).is_err());
        assert!(linear_fit(&[2.0, 2.0], &[1.0, 3.0]).is_err());
    }

    #[test]
    fn cosine_spot_values() {
        assert_eq!(cosine_lr(0, 100, 0.002), 0.002);
        assert!(cosine_lr(100, 100, 0.002).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.002) - 0.001).abs() < 1e-15);
        let mut last = f64::INFINITY;
        for t in 0..=37 {
            let lr = cosine_lr(t, 37, 1.0);
            assert!(lr <= last);
            last = lr;
        }
    }

    #[test]
    fn sgd_examples() {
        let g = Matrix::new(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut p = SoftPrompt::zeros(2, 2);
        sgd_step(&mut p, &g, 0.0).unwrap();
        assert!(p.theta().as_slice().iter().all(|&v| v == 0.0));
        let mut q = init_prompt(2, 2, 1).unwrap();
        let before = q.clone();
        sgd_step(&mut q, &Matrix::zeros(2, 2), 0.3).unwrap();
        assert_eq!(q, before);
        sgd_step(&mut p, &g, 1.0).unwrap();
        assert_eq!(p.theta().as_slice(), &[-1.0, 2.0, -0.5, -3.0]);
        assert!(sgd_step(&mut p, &Matrix::zeros(1, 2), 1.0).is_err());
        assert!(sgd_step(&mut p, &g, -1.0).is_err());
    }

    #[test]
    fn memory_model_is_linear_in_k() {
        let a = estimate_step_memory(100, 16, 4, 32, 64, 32);
        let b = estimate_step_memory(200, 16, 4, 32, 64, 32);
        let base = batch_side_bytes(32, 16, 32, 64);
        assert_eq!(b - base, 2 * (a - base));
        let small = estimate_step_memory(100, 16, 4, 512, 512, 1);
        let large = estimate_step_memory(1000, 16, 4, 512, 512, 1);
        let r = large as f64 / small as f64;
        assert!((r - 10.0).abs() <= 0.5, "{r}");
        let mut last = 0;
        for k in 2..50 {
            let m = estimate_step_memory(k, 4, 2, 8, 6, 4);
            assert!(m > last);
            last = m;
        }
    }

    #[test]
    fn large_vocabulary_ratio() {
        let full = estimate_step_memory(21000, 16, 16, 512, 512, 32);
        let sampled = estimate_step_memory(1000, 16, 16, 512, 512, 32);
        let r = full as f64 / sampled as f64;
        assert!((r - 21.0).abs() <= 1.0, "{r}");
        // reported: 316.4 GB full vs 15.7 GB sampled
        assert!((r - 316.4 / 15.7).abs() < 1.5);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig { k: 1, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { lr0: 0.0, ..ok.clone() },
            TrainConfig { tau: 0.0, ..ok.clone() },
            TrainConfig { tau: 11.0, ..ok.clone() },
            TrainConfig { margin_override: Some(-0.5), ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        let other = TrainConfig { seed: 7, ..ok.clone() };
        assert_ne!(ok.digest(), other.digest());
        assert_eq!(ok.digest(), TrainConfig::default().digest());
    }

    #[test]
    fn checkpoint_bytes_layout() {
        let prompt = init_prompt(3, 2, 5).unwrap();
        let ckpt = Checkpoint::new(prompt, 17, 5).unwrap();
        let bytes = ckpt.to_bytes().unwrap();
        assert_eq!(bytes.len(), 8 + 12 + 6 * 8 + 16 + 32);
        assert_eq!(&bytes[..8], b"POMPCKPT");
        assert_eq!(&bytes[bytes.len() - 32..], &ckpt.digest);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn checkpoint_errors_are_distinct() {
        let ckpt = Checkpoint::new(init_prompt(2, 2, 1).unwrap(), 3, 1).unwrap();
        let bytes = ckpt.to_bytes().unwrap();
        let mut corrupt = bytes.clone();
        corrupt[25] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&corrupt), Err(PompError::DigestMismatch)));
        let mut magic = bytes.clone();
        magic[..8].copy_from_slice(b"NOTACKPT");
        match Checkpoint::from_bytes(&magic) {
            Err(PompError::BadMagic { found, .. }) => assert_eq!(found, "NOTACKPT"),
            other => panic!("{other:?}"),
        }
        let mut version = bytes.clone();
        version[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&version), Err(PompError::UnsupportedVersion { found: 9, .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..40]), Err(PompError::Truncated { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(PompError::TrailingBytes { .. })));
    }
}
