//! Feature/label files, and a seeded synthetic class universe.
//!
//! The generator gives every class a latent vector `z_c`. Image features are
//! noisy copies of `z_c`; class token embeddings are `z_c` pushed through the
//! transpose of the frozen encoder's first layer, plus a token offset shared
//! by every class and per-token jitter. Text and image features therefore
//! share latent structure, while the shared offset crowds all class features
//! toward one direction until a prompt learns to cancel it.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::binio::{self, Reader};
use crate::encoder::{ClassEntry, ClassVocabulary, EncoderKind, FrozenTextEncoder};
use crate::error::{PompError, Result};
use crate::numerics::{norm, Matrix};

pub const FEATURE_MAGIC: &[u8; 8] = b"POMPFEAT";
pub const LABEL_MAGIC: &[u8; 8] = b"POMPLABL";
pub const FORMAT_VERSION: u32 = 1;

/// Scale applied to `W_fᵀ z_c` in the token embeddings.
const TOKEN_SIGNAL_SCALE: f64 = 0.1;
/// Standard deviation of each entry of the shared token offset.
const TOKEN_OFFSET_STD: f64 = 2.0;
/// Standard deviation of the per-token jitter.
const TOKEN_JITTER_STD: f64 = 0.4;

/// Unit-norm image features with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    features: Matrix,
    labels: Vec<u32>,
}

impl FeatureDataset {
    /// Renormalizes every row; zero rows are rejected.
    pub fn new(mut features: Matrix, labels: Vec<u32>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(PompError::ShapeMismatch {
                expected: format!("{} labels", features.rows()),
                found: format!("{}", labels.len()),
            });
        }
        for r in 0..features.rows() {
            let n = norm(features.row(r));
            if n == 0.0 {
                return Err(PompError::Degenerate("zero image feature"));
            }
            features.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Sorted distinct labels.
    pub fn class_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.labels.iter().map(|&l| l as usize).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Keeps rows whose label is in `class_ids`, relabelling each to its
    /// position in `class_ids`.
    pub fn restrict_to_classes(&self, class_ids: &[usize]) -> Result<FeatureDataset> {
        let max = class_ids.iter().copied().max().unwrap_or(0);
        let mut remap = vec![u32::MAX; max + 1];
        for (new, &old) in class_ids.iter().enumerate() {
            remap[old] = new as u32;
        }
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if let Some(&new) = remap.get(l as usize) {
                if new != u32::MAX {
                    rows.push(self.features.row(i).to_vec());
                    labels.push(new);
                }
            }
        }
        if rows.is_empty() {
            return Err(PompError::EmptyInput("restricted dataset"));
        }
        FeatureDataset::new(Matrix::from_rows(&rows)?, labels)
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        if self.dim() != d {
            return Err(PompError::ShapeMismatch {
                expected: format!("feature dim {d}"),
                found: format!("{}", self.dim()),
            });
        }
        Ok(())
    }

    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= num_classes) {
            Some(&l) => Err(PompError::UnknownClass(l as usize)),
            None => Ok(()),
        }
    }
}

pub fn features_to_bytes(features: &Matrix) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + features.as_slice().len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    binio::put_u32(&mut out, FORMAT_VERSION);
    binio::put_u32(&mut out, binio::dim_u32("count", features.rows())?);
    binio::put_u32(&mut out, binio::dim_u32("dim", features.cols())?);
    for &v in features.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn features_from_bytes(bytes: &[u8]) -> Result<Matrix> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURE_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if count == 0 || dim == 0 {
        return Err(PompError::ShapeMismatch {
            expected: "non-empty feature block".into(),
            found: format!("{count}x{dim} at offset 12"),
        });
    }
    let values = r.f32_array(count * dim)?;
    r.finish()?;
    Matrix::new(count, dim, values.into_iter().map(f64::from).collect())
}

pub fn labels_to_bytes(labels: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + labels.len() * 4);
    out.extend_from_slice(LABEL_MAGIC);
    binio::put_u32(&mut out, FORMAT_VERSION);
    binio::put_u32(&mut out, binio::dim_u32("count", labels.len())?);
    for &l in labels {
        binio::put_u32(&mut out, l);
    }
    Ok(out)
}

pub fn labels_from_bytes(bytes: &[u8]) -> Result<Vec<u32>> {
    let mut r = Reader::new(bytes);
    r.magic(LABEL_MAGIC)?;
    r.version(FORMAT_VERSION)?;
    let count = r.u32()? as usize;
    let labels = r.u32_array(count)?;
    r.finish()?;
    Ok(labels)
}

/// Writes the `POMPFEAT` features to `feature_path` and the `POMPLABL`
/// labels to `label_path`.
pub fn write_features(feature_path: &Path, label_path: &Path, dataset: &FeatureDataset) -> Result<()> {
    binio::write_file(feature_path, &features_to_bytes(dataset.features())?)?;
    binio::write_file(label_path, &labels_to_bytes(dataset.labels())?)
}

pub fn read_features(feature_path: &Path, label_path: &Path) -> Result<FeatureDataset> {
    let features = features_from_bytes(&binio::read_file(feature_path)?)?;
    let labels = labels_from_bytes(&binio::read_file(label_path)?)?;
    FeatureDataset::new(features, labels)
}

/// Restricts `vocab` to the classes present in `dataset` and relabels the
/// dataset to positions in that subset.
pub fn localize(vocab: &ClassVocabulary, dataset: &FeatureDataset) -> Result<(ClassVocabulary, FeatureDataset)> {
    let ids = dataset.class_ids();
    dataset.check_labels(vocab.num_classes())?;
    Ok((vocab.subset(&ids)?, dataset.restrict_to_classes(&ids)?))
}

/// `max(1, round(1000 / (i+1)^s))`.
pub fn zipf_frequencies(n: usize, s: f64) -> Vec<u64> {
    (0..n)
        .map(|i| ((1000.0 / ((i + 1) as f64).powf(s)).round() as u64).max(1))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub d: usize,
    pub e: usize,
    pub tokens_per_class: usize,
    pub shots: usize,
    pub noise_sigma: f64,
    pub zipf_exponent: f64,
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The fixture the acceptance suite runs on.
    pub fn standard() -> Self {
        Self {
            n_classes: 200,
            d: 64,
            e: 32,
            tokens_per_class: 4,
            shots: 16,
            noise_sigma: 0.35,
            zipf_exponent: 1.0,
            heldout_fraction: 0.25,
            seed: 42,
        }
    }

    pub fn heldout_count(&self) -> usize {
        (self.n_classes as f64 * self.heldout_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 4 {
            return Err(PompError::invalid(format!("n_classes must be >= 4, got {}", self.n_classes)));
        }
        if self.shots == 0 || self.d == 0 || self.e == 0 || self.tokens_per_class == 0 {
            return Err(PompError::invalid("shots, d, e and tokens_per_class must be >= 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(PompError::invalid("noise_sigma must be >= 0"));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return Err(PompError::invalid("zipf_exponent must be >= 0"));
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return Err(PompError::invalid("heldout_fraction must be in (0, 1)"));
        }
        let held = self.heldout_count();
        if held < 2 || self.n_classes - held < 2 {
            return Err(PompError::invalid(format!(
                "heldout_fraction {} leaves {} held-out and {} pre-training classes (need >= 2 each)",
                self.heldout_fraction,
                held,
                self.n_classes.saturating_sub(held)
            )));
        }
        Ok(())
    }

    /// Encoder whose first layer the generator's token map is built from.
    pub fn matching_encoder(&self, kind: EncoderKind) -> Result<FrozenTextEncoder> {
        FrozenTextEncoder::new(kind, self.seed, self.e, self.d)
    }
}

/// A generated universe. Labels in both splits are global class ids into
/// `vocab`.
#[derive(Debug, Clone)]
pub struct SyntheticUniverse {
    pub pretrain: FeatureDataset,
    pub heldout: FeatureDataset,
    pub vocab: ClassVocabulary,
    pub pretrain_classes: Vec<usize>,
    pub heldout_classes: Vec<usize>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticUniverse> {
    spec.validate()?;
    let (n, d, e, l) = (spec.n_classes, spec.d, spec.e, spec.tokens_per_class);
    let encoder = spec.matching_encoder(EncoderKind::MeanPoolLinear)?;
    let w_first = encoder.first_layer();

    // separate streams so changing one knob does not reshuffle the others
    let stream = |s: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(100 + s);
        rng
    };
    let mut latent_rng = stream(0);
    let mut image_rng = stream(1);
    let mut token_rng = stream(2);
    let mut split_rng = stream(3);

    let latents: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut latent_rng)).collect())
        .collect();

    let offset: Vec<f64> = {
        let normal = Normal::new(0.0, TOKEN_OFFSET_STD).expect("valid std");
        (0..e).map(|_| normal.sample(&mut token_rng)).collect()
    };
    let jitter = Normal::new(0.0, TOKEN_JITTER_STD).expect("valid std");
    let mut table = Vec::with_capacity(n * l * e);
    for z in &latents {
        let signal = w_first.matvec_transposed(z)?;
        for _ in 0..l {
            for (s, b) in signal.as_slice().iter().zip(&offset) {
                table.push(TOKEN_SIGNAL_SCALE * s + b + jitter.sample(&mut token_rng));
            }
        }
    }
    let token_embeddings = Matrix::new(n * l, e, table)?;

    let frequencies = zipf_frequencies(n, spec.zipf_exponent);
    let entries = (0..n)
        .map(|c| ClassEntry {
            class_id: c,
            name: format!("class_{c:04}"),
            token_ids: (0..l).map(|k| (c * l + k) as u32).collect(),
            frequency: frequencies[c],
        })
        .collect();
    let vocab = ClassVocabulary::new(entries, token_embeddings)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut split_rng);
    let held = spec.heldout_count();
    let mut heldout_classes = order[..held].to_vec();
    let mut pretrain_classes = order[held..].to_vec();
    heldout_classes.sort_unstable();
    pretrain_classes.sort_unstable();

    let noise = Normal::new(0.0, 1.0).expect("valid std");
    let mut images: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n);
    for z in &latents {
        let shots = (0..spec.shots)
            .map(|_| {
                z.iter()
                    .map(|&v| v + spec.noise_sigma * noise.sample(&mut image_rng))
                    .collect::<Vec<f64>>()
            })
            .collect();
        images.push(shots);
    }
    let build = |classes: &[usize]| -> Result<FeatureDataset> {
        let mut rows = Vec::with_capacity(classes.len() * spec.shots);
        let mut labels = Vec::with_capacity(classes.len() * spec.shots);
        for &c in classes {
            for x in &images[c] {
                rows.push(x.clone());
                labels.push(c as u32);
            }
        }
        FeatureDataset::new(Matrix::from_rows(&rows)?, labels)
    };
    Ok(SyntheticUniverse {
        pretrain: build(&pretrain_classes)?,
        heldout: build(&heldout_classes)?,
        vocab,
        pretrain_classes,
        heldout_classes,
    })
}
