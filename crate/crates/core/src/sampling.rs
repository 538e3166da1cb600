//! Negative-class proposal distributions and the per-step class subset.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::encoder::ClassVocabulary;
use crate::error::{PompError, Result};
use crate::numerics::{dot, norm, stable_softmax_unchecked, Matrix};
use crate::objective::adaptive_margin;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistributionKind {
    Uniform,
    Frequency,
    Similarity,
}

impl fmt::Display for DistributionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistributionKind::Uniform => "uniform",
            DistributionKind::Frequency => "frequency",
            DistributionKind::Similarity => "similarity",
        })
    }
}

impl FromStr for DistributionKind {
    type Err = PompError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(DistributionKind::Uniform),
            "frequency" => Ok(DistributionKind::Frequency),
            "similarity" => Ok(DistributionKind::Similarity),
            other => Err(PompError::invalid(format!(
                "unknown distribution {other:?} (expected uniform, frequency or similarity)"
            ))),
        }
    }
}

/// Proposal over negative classes.
#[derive(Debug, Clone)]
pub enum ProposalDistribution {
    Uniform,
    /// Proportional to the vocabulary's per-class frequency counts.
    Frequency,
    /// Softmax of image-to-class similarity over fixed class features.
    Similarity {
        class_features: Matrix,
        temperature: f64,
    },
}

impl ProposalDistribution {
    pub fn similarity(class_features: Matrix, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(PompError::invalid(format!(
                "similarity temperature must be positive, got {temperature}"
            )));
        }
        for r in 0..class_features.rows() {
            let n = norm(class_features.row(r));
            if (n - 1.0).abs() > 1e-6 {
                return Err(PompError::invalid(format!(
                    "similarity class feature {r} is not unit-norm (norm {n})"
                )));
            }
        }
        Ok(ProposalDistribution::Similarity {
            class_features,
            temperature,
        })
    }

    pub fn kind(&self) -> DistributionKind {
        match self {
            ProposalDistribution::Uniform => DistributionKind::Uniform,
            ProposalDistribution::Frequency => DistributionKind::Frequency,
            ProposalDistribution::Similarity { .. } => DistributionKind::Similarity,
        }
    }

    /// Normalized weights over `n` classes with `excluded` zeroed. `query` is
    /// the unit-norm image feature, required only for the similarity kind.
    pub fn weights(
        &self,
        vocab: &ClassVocabulary,
        excluded: &[usize],
        query: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        match self {
            ProposalDistribution::Uniform => uniform_weights(vocab.num_classes(), excluded),
            ProposalDistribution::Frequency => frequency_weights(&vocab.frequencies(), excluded),
            ProposalDistribution::Similarity { .. } => {
                let q = query.ok_or_else(|| {
                    PompError::invalid("similarity proposal needs an image feature")
                })?;
                similarity_weights(q, self, excluded)
            }
        }
    }
}

fn excluded_mask(n: usize, excluded: &[usize]) -> Result<Vec<bool>> {
    let mut mask = vec![false; n];
    for &i in excluded {
        if i >= n {
            return Err(PompError::UnknownClass(i));
        }
        mask[i] = true;
    }
    if mask.iter().all(|&m| m) {
        return Err(PompError::invalid("every class is excluded from the proposal"));
    }
    Ok(mask)
}

/// Equal weight on every non-excluded class.
pub fn uniform_weights(n: usize, excluded: &[usize]) -> Result<Vec<f64>> {
    let mask = excluded_mask(n, excluded)?;
    let support = mask.iter().filter(|&&m| !m).count() as f64;
    Ok(mask
        .iter()
        .map(|&m| if m { 0.0 } else { 1.0 / support })
        .collect())
}

/// Weight proportional to the class count, renormalized over the support.
pub fn frequency_weights(counts: &[u64], excluded: &[usize]) -> Result<Vec<f64>> {
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(PompError::invalid(format!("class {i} has a non-positive count")));
    }
    let mask = excluded_mask(counts.len(), excluded)?;
    let total: f64 = counts
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| !m)
        .map(|(&c, _)| c as f64)
        .sum();
    Ok(counts
        .iter()
        .zip(&mask)
        .map(|(&c, &m)| if m { 0.0 } else { c as f64 / total })
        .collect())
}

/// `softmax(x · w_i / τ_s)` over the support.
pub fn similarity_weights(
    query: &[f64],
    dist: &ProposalDistribution,
    excluded: &[usize],
) -> Result<Vec<f64>> {
    let ProposalDistribution::Similarity {
        class_features,
        temperature,
    } = dist
    else {
        return Err(PompError::invalid("similarity_weights needs a similarity proposal"));
    };
    if query.len() != class_features.cols() {
        return Err(PompError::ShapeMismatch {
            expected: format!("image feature of dim {}", class_features.cols()),
            found: format!("{}", query.len()),
        });
    }
    let qn = norm(query);
    if (qn - 1.0).abs() > 1e-6 {
        return Err(PompError::invalid(format!("image feature is not unit-norm (norm {qn})")));
    }
    let mask = excluded_mask(class_features.rows(), excluded)?;
    let support: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
    let logits: Vec<f64> = support
        .iter()
        .map(|&i| dot(query, class_features.row(i)) / temperature)
        .collect();
    let probs = stable_softmax_unchecked(&logits);
    let mut out = vec![0.0; mask.len()];
    for (&i, p) in support.iter().zip(probs) {
        out[i] = p;
    }
    Ok(out)
}

/// Weighted sampling of `k` distinct indices without replacement by
/// Gumbel-top-k over log-weights. Zero-weight indices are never drawn; equal
/// keys go to the lower index. The result is in descending key order.
pub fn sample_without_replacement<R: Rng + ?Sized>(
    weights: &[f64],
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
        return Err(PompError::invalid(format!("weight {i} is negative or non-finite")));
    }
    let support = weights.iter().filter(|&&w| w > 0.0).count();
    if k > support {
        return Err(PompError::invalid(format!(
            "cannot draw {k} distinct indices from a support of {support}"
        )));
    }
    // One uniform per index regardless of support keeps the stream position
    // independent of which weights are zero.
    let mut keys: Vec<(f64, usize)> = Vec::with_capacity(support);
    for (i, &w) in weights.iter().enumerate() {
        let u: f64 = rng.random();
        if w > 0.0 {
            // u in [0,1); nudge 0 so the Gumbel transform stays finite
            let u = u.max(f64::MIN_POSITIVE);
            let gumbel = -(-u.ln()).ln();
            keys.push((w.ln() + gumbel, i));
        }
    }
    keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(keys.into_iter().take(k).map(|(_, i)| i).collect())
}

/// The `K` classes contrasted at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepClassSet {
    class_ids: Vec<usize>,
    positive_positions: BTreeMap<usize, usize>,
    margin: f64,
    num_classes: usize,
}

impl StepClassSet {
    /// Builds a set directly. Every label must appear in `class_ids`.
    pub fn new(class_ids: Vec<usize>, labels: &[usize], num_classes: usize) -> Result<Self> {
        let mut seen = vec![false; num_classes];
        for &c in &class_ids {
            if c >= num_classes {
                return Err(PompError::UnknownClass(c));
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(PompError::invalid(format!("class {c} appears twice in the step set")));
            }
        }
        let mut positive_positions = BTreeMap::new();
        for &y in labels {
            let pos = class_ids
                .iter()
                .position(|&c| c == y)
                .ok_or_else(|| PompError::invalid(format!("label {y} missing from the step set")))?;
            positive_positions.insert(y, pos);
        }
        let margin = adaptive_margin(class_ids.len(), num_classes)?;
        Ok(Self {
            class_ids,
            positive_positions,
            margin,
            num_classes,
        })
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    /// Adaptive margin for this set's `(K, N)`.
    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Position of a ground-truth label within `class_ids`.
    pub fn position_of(&self, label: usize) -> Option<usize> {
        self.positive_positions.get(&label).copied()
    }

    pub fn positive_positions(&self) -> &BTreeMap<usize, usize> {
        &self.positive_positions
    }
}

/// Distinct batch labels plus `K - #distinct` negatives drawn from `dist`
/// with every batch label excluded.
pub fn build_step_class_set<R: Rng + ?Sized>(
    batch_labels: &[usize],
    k: usize,
    dist: &ProposalDistribution,
    vocab: &ClassVocabulary,
    query: Option<&[f64]>,
    rng: &mut R,
) -> Result<StepClassSet> {
    let n = vocab.num_classes();
    let mut positives: Vec<usize> = batch_labels.to_vec();
    positives.sort_unstable();
    positives.dedup();
    if positives.is_empty() {
        return Err(PompError::EmptyInput("build_step_class_set"));
    }
    if k > n {
        return Err(PompError::invalid(format!("K = {k} exceeds the number of classes N = {n}")));
    }
    if k < positives.len() {
        return Err(PompError::invalid(format!(
            "K = {k} is smaller than the {} distinct labels in the batch",
            positives.len()
        )));
    }
    if k < 2 {
        return Err(PompError::invalid("K must be at least 2"));
    }
    let needed = k - positives.len();
    let mut class_ids = positives.clone();
    if needed > 0 {
        let weights = dist.weights(vocab, &positives, query)?;
        class_ids.extend(sample_without_replacement(&weights, needed, rng)?);
    }
    StepClassSet::new(class_ids, &positives, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ClassEntry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab(n: usize) -> ClassVocabulary {
        let entries = (0..n)
            .map(|i| ClassEntry {
                class_id: i,
                name: format!("c{i}"),
                token_ids: vec![0],
                frequency: 1 + i as u64,
            })
            .collect();
        ClassVocabulary::new(entries, Matrix::identity(2)).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn uniform_examples() {
        assert!(close(&uniform_weights(3, &[0]).unwrap(), &[0.0, 0.5, 0.5], 0.0));
        let w = uniform_weights(5, &[2]).unwrap();
        assert!(close(&w, &[0.25, 0.25, 0.0, 0.25, 0.25], 1e-15));
        assert!(uniform_weights(2, &[0, 1]).is_err());
        assert!(uniform_weights(2, &[5]).is_err());
    }

    #[test]
    fn frequency_examples() {
        assert!(close(&frequency_weights(&[1, 1, 2], &[]).unwrap(), &[0.25, 0.25, 0.5], 1e-15));
        assert!(close(
            &frequency_weights(&[7, 7, 7, 7], &[1]).unwrap(),
            &uniform_weights(4, &[1]).unwrap(),
            1e-15
        ));
        assert!(close(&frequency_weights(&[1, 999], &[0]).unwrap(), &[0.0, 1.0], 0.0));
        assert!(frequency_weights(&[1, 0, 3], &[]).is_err());
    }

    fn sim_dist(rows: &[Vec<f64>], tau: f64) -> ProposalDistribution {
        ProposalDistribution::similarity(Matrix::from_rows(rows).unwrap(), tau).unwrap()
    }

    #[test]
    fn similarity_identical_features_is_uniform() {
        let f = vec![0.6, 0.8];
        let dist = sim_dist(&[f.clone(), f.clone(), f.clone(), f], 0.07);
        let w = similarity_weights(&[1.0, 0.0], &dist, &[3]).unwrap();
        assert!(close(&w, &uniform_weights(4, &[3]).unwrap(), 1e-15));
    }

    #[test]
    fn similarity_sharp_temperature_picks_dominant() {
        // x·w = 1.0 for class 0 and 0.9 for the others
        let c = 0.9f64;
        let s = (1.0 - c * c).sqrt();
        let rows = vec![vec![1.0, 0.0, 0.0], vec![c, s, 0.0], vec![c, 0.0, s], vec![c, -s, 0.0]];
        let dist = sim_dist(&rows, 1e-3);
        let w = similarity_weights(&[1.0, 0.0, 0.0], &dist, &[]).unwrap();
        assert!(w[0] >= 0.99, "{w:?}");
        let w = similarity_weights(&[1.0, 0.0, 0.0], &dist, &[0]).unwrap();
        assert_eq!(w[0], 0.0);
        assert!(close(&w[1..], &[1.0 / 3.0; 3], 1e-12));
    }

    #[test]
    fn similarity_rejects_unnormalized_query() {
        let dist = sim_dist(&[vec![1.0, 0.0], vec![0.0, 1.0]], 0.1);
        assert!(similarity_weights(&[0.5, 0.5], &dist, &[]).is_err());
        assert!(ProposalDistribution::similarity(Matrix::identity(2), 0.0).is_err());
        let mut not_unit = Matrix::identity(2);
        not_unit.scale(2.0);
        assert!(ProposalDistribution::similarity(not_unit, 0.1).is_err());
    }

    #[test]
    fn forced_support_is_returned() {
        let w = [0.0, 0.3, 0.0, 0.7, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut got = sample_without_replacement(&w, 2, &mut rng).unwrap();
        got.sort_unstable();
        assert_eq!(got, vec![1, 3]);
        assert!(sample_without_replacement(&w, 3, &mut rng).is_err());
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let w: Vec<f64> = (1..=50).map(|i| i as f64).collect();
        let a = sample_without_replacement(&w, 10, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_without_replacement(&w, 10, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let mut s = a.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 10);
    }

    #[test]
    fn full_set_is_permutation_with_zero_margin() {
        let v = vocab(6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set = build_step_class_set(&[4, 1], 6, &ProposalDistribution::Uniform, &v, None, &mut rng).unwrap();
        let mut ids = set.class_ids().to_vec();
        ids.sort_unstable();
        assert_eq!(ids, (0..6).collect::<Vec<_>>());
        assert_eq!(set.margin(), 0.0);
    }

    #[test]
    fn single_label_two_way_set() {
        let v = vocab(5);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = build_step_class_set(&[3], 2, &ProposalDistribution::Uniform, &v, None, &mut rng).unwrap();
            assert_eq!(set.class_ids()[0], 3);
            assert!([0, 1, 2, 4].contains(&set.class_ids()[1]));
            assert_eq!(set.position_of(3), Some(0));
        }
    }

    #[test]
    fn repeated_labels_enumeration() {
        let v = vocab(10);
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = build_step_class_set(&[1, 1, 2], 4, &ProposalDistribution::Frequency, &v, None, &mut rng).unwrap();
            let ids = set.class_ids();
            assert_eq!(ids.len(), 4);
            assert_eq!(&ids[..2], &[1, 2]);
            assert!(ids[2..].iter().all(|c| ![1, 2].contains(c)));
            assert_ne!(ids[2], ids[3]);
        }
    }

    #[test]
    fn step_set_errors() {
        let v = vocab(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = ProposalDistribution::Uniform;
        assert!(build_step_class_set(&[0, 1, 2], 2, &u, &v, None, &mut rng).is_err());
        assert!(build_step_class_set(&[0], 6, &u, &v, None, &mut rng).is_err());
        assert!(build_step_class_set(&[], 2, &u, &v, None, &mut rng).is_err());
        assert!(StepClassSet::new(vec![0, 0], &[0], 5).is_err());
        assert!(StepClassSet::new(vec![0, 1], &[2], 5).is_err());
    }

    #[test]
    fn similarity_step_set_needs_query() {
        let v = vocab(3);
        let dist = sim_dist(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]], 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(build_step_class_set(&[0], 2, &dist, &v, None, &mut rng).is_err());
        let set = build_step_class_set(&[0], 2, &dist, &v, Some(&[1.0, 0.0]), &mut rng).unwrap();
        assert_eq!(set.len(), 2);
    }
}
