//! Soft prompt, class vocabulary and the frozen text encoder.
//!
//! A class description is the prompt rows followed by the class's token
//! embeddings. The encoder mean-pools that sequence, applies frozen layers and
//! L2-normalizes, giving one unit-norm class feature per class. The backward
//! pass maps an upstream gradient on the class feature back to the sequence.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::binio::{self, Reader};
use crate::error::{PompError, Result};
use crate::numerics::{dot, Matrix, Vector};

pub const PROMPT_INIT_STD: f64 = 0.02;
pub const EMBEDDING_MAGIC: &[u8; 8] = b"POMPEMBD";
pub const EMBEDDING_VERSION: u32 = 1;

/// The learnable `M×e` prompt matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrompt {
    theta: Matrix,
}

impl SoftPrompt {
    pub fn from_matrix(theta: Matrix) -> Result<Self> {
        if !theta.is_finite() {
            return Err(PompError::invalid("prompt entries must be finite"));
        }
        Ok(Self { theta })
    }

    pub fn zeros(len: usize, embed_dim: usize) -> Self {
        Self {
            theta: Matrix::zeros(len, embed_dim),
        }
    }

    pub fn len(&self) -> usize {
        self.theta.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn embed_dim(&self) -> usize {
        self.theta.cols()
    }

    pub fn theta(&self) -> &Matrix {
        &self.theta
    }

    /// Mutable access for the optimizer; the shape cannot change through a slice.
    pub fn theta_mut(&mut self) -> &mut [f64] {
        self.theta.as_mut_slice()
    }
}

/// Gaussian(0, 0.02) prompt from a seeded generator.
pub fn init_prompt(len: usize, embed_dim: usize, seed: u64) -> Result<SoftPrompt> {
    if len == 0 || embed_dim == 0 {
        return Err(PompError::invalid("prompt length and embedding dim must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, PROMPT_INIT_STD).expect("valid std");
    let data = (0..len * embed_dim).map(|_| normal.sample(&mut rng)).collect();
    SoftPrompt::from_matrix(Matrix::new(len, embed_dim, data)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassEntry {
    pub class_id: usize,
    pub name: String,
    pub token_ids: Vec<u32>,
    pub frequency: u64,
}

/// Class names, token sequences and frequency counts over a frozen token table.
#[derive(Debug, Clone)]
pub struct ClassVocabulary {
    entries: Vec<ClassEntry>,
    token_embeddings: Matrix,
}

impl ClassVocabulary {
    /// Validates ids are dense and unique, tokens are in range and `N >= 2`.
    pub fn new(mut entries: Vec<ClassEntry>, token_embeddings: Matrix) -> Result<Self> {
        if entries.len() < 2 {
            return Err(PompError::invalid(format!(
                "vocabulary needs at least 2 classes, got {}",
                entries.len()
            )));
        }
        entries.sort_by_key(|e| e.class_id);
        let vocab_size = token_embeddings.rows();
        for (i, entry) in entries.iter().enumerate() {
            if entry.class_id != i {
                return Err(PompError::invalid(format!(
                    "class ids must be dense and unique: expected {i}, found {}",
                    entry.class_id
                )));
            }
            if entry.token_ids.is_empty() {
                return Err(PompError::invalid(format!("class {i} has no tokens")));
            }
            if entry.frequency == 0 {
                return Err(PompError::invalid(format!("class {i} has zero frequency")));
            }
            if let Some(&t) = entry.token_ids.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(PompError::invalid(format!(
                    "class {i} token {t} out of range for {vocab_size} embeddings"
                )));
            }
            if entry.name.contains(['\t', '\n']) {
                return Err(PompError::invalid(format!("class {i} name contains tab or newline")));
            }
        }
        Ok(Self {
            entries,
            token_embeddings,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.entries.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.token_embeddings.cols()
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn entry(&self, class_id: usize) -> Result<&ClassEntry> {
        self.entries
            .get(class_id)
            .ok_or(PompError::UnknownClass(class_id))
    }

    pub fn token_embeddings(&self) -> &Matrix {
        &self.token_embeddings
    }

    pub fn frequencies(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.frequency).collect()
    }

    pub fn max_tokens(&self) -> usize {
        self.entries.iter().map(|e| e.token_ids.len()).max().unwrap_or(0)
    }

    /// Restricts to `class_ids`, renumbering them densely in the given order.
    /// The token table is shared unchanged.
    pub fn subset(&self, class_ids: &[usize]) -> Result<ClassVocabulary> {
        let entries = class_ids
            .iter()
            .enumerate()
            .map(|(new_id, &old)| {
                let mut e = self.entry(old)?.clone();
                e.class_id = new_id;
                Ok(e)
            })
            .collect::<Result<Vec<_>>>()?;
        ClassVocabulary::new(entries, self.token_embeddings.clone())
    }
}

/// `[Θ; token embeddings of the class]`, shape `(M + L) × e`.
pub fn build_class_sequence(
    prompt: &SoftPrompt,
    vocab: &ClassVocabulary,
    class_id: usize,
) -> Result<Matrix> {
    let entry = vocab.entry(class_id)?;
    let e = prompt.embed_dim();
    if vocab.embed_dim() != e {
        return Err(PompError::ShapeMismatch {
            expected: format!("token embedding dim {e}"),
            found: format!("{}", vocab.embed_dim()),
        });
    }
    let rows = prompt.len() + entry.token_ids.len();
    let mut data = Vec::with_capacity(rows * e);
    data.extend_from_slice(prompt.theta().as_slice());
    for &t in &entry.token_ids {
        data.extend_from_slice(vocab.token_embeddings().row(t as usize));
    }
    Matrix::new(rows, e, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    /// `normalize(W_f · mean(seq))`
    MeanPoolLinear,
    /// `normalize(W_g · tanh(W_f · mean(seq)))`
    MeanPoolTwoLayerTanh,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::MeanPoolLinear => "linear",
            EncoderKind::MeanPoolTwoLayerTanh => "tanh",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = PompError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(EncoderKind::MeanPoolLinear),
            "tanh" => Ok(EncoderKind::MeanPoolTwoLayerTanh),
            other => Err(PompError::invalid(format!(
                "unknown encoder kind {other:?} (expected linear or tanh)"
            ))),
        }
    }
}

/// Per-class forward state kept for the backward pass.
#[derive(Debug)]
pub struct ClassActivation {
    /// The input sequence.
    pub sequence: Matrix,
    /// Pre-normalization feature for the linear kind, `tanh` output for the
    /// two-layer kind.
    pub hidden: Vector,
    /// Unit-norm class feature.
    pub output: Vector,
    /// Norm of the pre-normalization feature.
    pub pre_norm: f64,
}

/// Frozen map from a token-embedding sequence to a unit-norm `d`-vector.
#[derive(Debug, Clone)]
pub struct FrozenTextEncoder {
    kind: EncoderKind,
    w_first: Matrix,
    w_second: Option<Matrix>,
}

impl FrozenTextEncoder {
    /// Draws frozen weights with Gaussian(0, 1/sqrt(fan_in)) entries. The
    /// first layer is drawn first, so both kinds share `W_f` for a given seed.
    pub fn new(kind: EncoderKind, seed: u64, embed_dim: usize, output_dim: usize) -> Result<Self> {
        if embed_dim == 0 || output_dim == 0 {
            return Err(PompError::invalid("encoder dims must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gaussian = |rows: usize, cols: usize| {
            let normal = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).expect("valid std");
            let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
            Matrix::new(rows, cols, data)
        };
        let w_first = gaussian(output_dim, embed_dim)?;
        let w_second = match kind {
            EncoderKind::MeanPoolLinear => None,
            EncoderKind::MeanPoolTwoLayerTanh => Some(gaussian(output_dim, output_dim)?),
        };
        Ok(Self {
            kind,
            w_first,
            w_second,
        })
    }

    /// Builds a linear encoder from explicit weights (`d × e`).
    pub fn linear_from_weights(w_first: Matrix) -> Self {
        Self {
            kind: EncoderKind::MeanPoolLinear,
            w_first,
            w_second: None,
        }
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn embed_dim(&self) -> usize {
        self.w_first.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w_first.rows()
    }

    pub fn first_layer(&self) -> &Matrix {
        &self.w_first
    }

    /// Forward pass keeping the intermediate state. Takes ownership of the
    /// sequence so it lives in the activation cache.
    pub fn forward(&self, sequence: Matrix) -> Result<ClassActivation> {
        if sequence.cols() != self.embed_dim() {
            return Err(PompError::ShapeMismatch {
                expected: format!("sequence width {}", self.embed_dim()),
                found: format!("{}", sequence.cols()),
            });
        }
        let pooled = sequence.mean_rows();
        let first = self.w_first.matvec(pooled.as_slice())?;
        drop(pooled);
        let (hidden, pre) = match &self.w_second {
            None => {
                let pre = first.clone();
                (first, pre)
            }
            Some(w_second) => {
                let mut h = first;
                h.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
                let pre = w_second.matvec(h.as_slice())?;
                (h, pre)
            }
        };
        let pre_norm = pre.norm();
        if pre_norm == 0.0 || !pre_norm.is_finite() {
            return Err(PompError::Degenerate("zero-norm text feature before normalization"));
        }
        let mut output = pre;
        output.as_mut_slice().iter_mut().for_each(|v| *v /= pre_norm);
        Ok(ClassActivation {
            sequence,
            hidden,
            output,
            pre_norm,
        })
    }

    /// Gradient of `output · upstream` with respect to the pooled mean input.
    fn pooled_vjp(&self, act: &ClassActivation, upstream: &[f64]) -> Result<Vector> {
        let d = self.output_dim();
        if upstream.len() != d {
            return Err(PompError::ShapeMismatch {
                expected: format!("upstream of length {d}"),
                found: format!("{}", upstream.len()),
            });
        }
        if act.pre_norm == 0.0 {
            return Err(PompError::Degenerate("zero-norm text feature before normalization"));
        }
        // d(g/|g|)ᵀu = (u - o(o·u)) / |g|
        let out = act.output.as_slice();
        let proj = dot(out, upstream);
        let grad_pre: Vec<f64> = upstream
            .iter()
            .zip(out)
            .map(|(u, o)| (u - o * proj) / act.pre_norm)
            .collect();
        match &self.w_second {
            None => self.w_first.matvec_transposed(&grad_pre),
            Some(w_second) => {
                let mut grad_hidden = w_second.matvec_transposed(&grad_pre)?;
                for (g, h) in grad_hidden
                    .as_mut_slice()
                    .iter_mut()
                    .zip(act.hidden.as_slice())
                {
                    *g *= 1.0 - h * h;
                }
                self.w_first.matvec_transposed(grad_hidden.as_slice())
            }
        }
    }

    /// Full-sequence vector-Jacobian product from a cached activation.
    pub fn backward(&self, act: &ClassActivation, upstream: &[f64]) -> Result<Matrix> {
        self.backward_rows(act, upstream, act.sequence.rows())
    }

    /// Vector-Jacobian product restricted to the first `rows` sequence rows
    /// (the prompt rows when `rows = M`).
    pub fn backward_rows(
        &self,
        act: &ClassActivation,
        upstream: &[f64],
        rows: usize,
    ) -> Result<Matrix> {
        let n = act.sequence.rows();
        assert!(rows <= n, "cannot take {rows} rows of a {n}-row sequence");
        let mut grad_pooled = self.pooled_vjp(act, upstream)?;
        grad_pooled
            .as_mut_slice()
            .iter_mut()
            .for_each(|g| *g /= n as f64);
        let e = self.embed_dim();
        let mut out = Matrix::zeros(rows, e);
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(grad_pooled.as_slice());
        }
        Ok(out)
    }
}

/// Unit-norm class feature of a sequence.
pub fn encode_sequence(enc: &FrozenTextEncoder, seq: &Matrix) -> Result<Vector> {
    Ok(enc.forward(seq.clone())?.output)
}

/// `∂(encode(seq) · upstream) / ∂seq`.
pub fn sequence_vjp(enc: &FrozenTextEncoder, seq: &Matrix, upstream: &Vector) -> Result<Matrix> {
    let act = enc.forward(seq.clone())?;
    enc.backward(&act, upstream.as_slice())
}

/// Encodes one class and keeps its activation.
pub fn encode_class(
    enc: &FrozenTextEncoder,
    prompt: &SoftPrompt,
    vocab: &ClassVocabulary,
    class_id: usize,
) -> Result<ClassActivation> {
    let seq = build_class_sequence(prompt, vocab, class_id)?;
    enc.forward(seq).map_err(|e| match e {
        PompError::Degenerate(_) => PompError::DegenerateClass {
            class_id,
            source: Box::new(e),
        },
        other => other,
    })
}

/// Row `j` is the class feature of `class_ids[j]`.
pub fn encode_class_features(
    enc: &FrozenTextEncoder,
    prompt: &SoftPrompt,
    vocab: &ClassVocabulary,
    class_ids: &[usize],
) -> Result<Matrix> {
    if class_ids.is_empty() {
        return Err(PompError::EmptyInput("encode_class_features"));
    }
    let d = enc.output_dim();
    let mut out = Matrix::zeros(class_ids.len(), d);
    for (j, &id) in class_ids.iter().enumerate() {
        let act = encode_class(enc, prompt, vocab, id)?;
        out.row_mut(j).copy_from_slice(act.output.as_slice());
    }
    Ok(out)
}

/// Features for every class in the vocabulary, in id order.
pub fn encode_all_classes(
    enc: &FrozenTextEncoder,
    prompt: &SoftPrompt,
    vocab: &ClassVocabulary,
) -> Result<Matrix> {
    let ids: Vec<usize> = (0..vocab.num_classes()).collect();
    encode_class_features(enc, prompt, vocab, &ids)
}

pub fn write_vocabulary(path: &Path, vocab: &ClassVocabulary) -> Result<()> {
    binio::write_file(path, vocabulary_to_string(vocab).as_bytes())
}

pub fn vocabulary_to_string(vocab: &ClassVocabulary) -> String {
    let mut out = String::from("# class_id\tname\tfrequency\ttoken_ids\n");
    for e in vocab.entries() {
        let tokens: Vec<String> = e.token_ids.iter().map(u32::to_string).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.class_id,
            e.name,
            e.frequency,
            tokens.join(" ")
        ));
    }
    out
}

/// Parses the tab-separated vocabulary listing. `#` lines and blank lines are
/// skipped.
pub fn parse_vocabulary_entries(text: &str) -> Result<Vec<ClassEntry>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let parse_err = |message: String| PompError::Parse {
            line: line_no,
            message,
        };
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let class_id = fields[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad class id {:?}", fields[0])))?;
        let frequency = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad frequency {:?}", fields[2])))?;
        let token_ids = fields[3]
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|_| parse_err(format!("bad token id {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        entries.push(ClassEntry {
            class_id,
            name: fields[1].to_string(),
            token_ids,
            frequency,
        });
    }
    Ok(entries)
}

pub fn read_vocabulary(vocab_path: &Path, embeddings_path: &Path) -> Result<ClassVocabulary> {
    let bytes = binio::read_file(vocab_path)?;
    let text = String::from_utf8(bytes).map_err(|e| PompError::Parse {
        line: 0,
        message: format!("vocabulary is not UTF-8: {e}"),
    })?;
    let entries = parse_vocabulary_entries(&text)?;
    let embeddings = read_token_embeddings(embeddings_path)?;
    ClassVocabulary::new(entries, embeddings)
}

pub fn token_embeddings_to_bytes(table: &Matrix) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + table.as_slice().len() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    binio::put_u32(&mut out, EMBEDDING_VERSION);
    binio::put_u32(&mut out, binio::dim_u32("vocab size", table.rows())?);
    binio::put_u32(&mut out, binio::dim_u32("embedding dim", table.cols())?);
    for &v in table.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn token_embeddings_from_bytes(bytes: &[u8]) -> Result<Matrix> {
    let mut r = Reader::new(bytes);
    r.magic(EMBEDDING_MAGIC)?;
    r.version(EMBEDDING_VERSION)?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let offset = r.offset();
    let values = r.f32_array(rows * cols)?;
    r.finish()?;
    if rows == 0 || cols == 0 {
        return Err(PompError::ShapeMismatch {
            expected: "non-empty embedding table".into(),
            found: format!("{rows}x{cols} at offset {offset}"),
        });
    }
    Matrix::new(rows, cols, values.into_iter().map(f64::from).collect())
}

pub fn write_token_embeddings(path: &Path, table: &Matrix) -> Result<()> {
    binio::write_file(path, &token_embeddings_to_bytes(table)?)
}

pub fn read_token_embeddings(path: &Path) -> Result<Matrix> {
    token_embeddings_from_bytes(&binio::read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::finite_difference;

    fn toy_vocab(e: usize, seed: u64) -> ClassVocabulary {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let v = 12;
        let table = Matrix::new(v, e, (0..v * e).map(|_| normal.sample(&mut rng)).collect()).unwrap();
        let entries = (0..5)
            .map(|i| ClassEntry {
                class_id: i,
                name: format!("class {i}"),
                token_ids: (0..=(i % 3)).map(|k| ((2 * i + k) % v) as u32).collect(),
                frequency: 10 + i as u64,
            })
            .collect();
        ClassVocabulary::new(entries, table).unwrap()
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        Matrix::new(rows, cols, (0..rows * cols).map(|_| normal.sample(&mut rng)).collect()).unwrap()
    }

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        let diff: f64 = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        diff / a.frobenius_norm().max(b.frobenius_norm()).max(1e-300)
    }

    #[test]
    fn prompt_init_is_deterministic() {
        let a = init_prompt(4, 8, 42).unwrap();
        let b = init_prompt(4, 8, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_prompt(4, 8, 43).unwrap());
        let one = init_prompt(1, 1, 7).unwrap();
        assert!(one.theta().get(0, 0).is_finite());
    }

    #[test]
    fn prompt_init_std() {
        let p = init_prompt(16, 512, 1).unwrap();
        let xs = p.theta().as_slice();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sd = var.sqrt();
        assert!((0.015..=0.025).contains(&sd), "sd = {sd}");
    }

    #[test]
    fn class_sequence_layout() {
        let vocab = toy_vocab(3, 0);
        let prompt = SoftPrompt::from_matrix(random_matrix(2, 3, 5)).unwrap();
        let seq = build_class_sequence(&prompt, &vocab, 0).unwrap();
        assert_eq!(seq.shape(), (3, 3));
        assert_eq!(seq.row(0), prompt.theta().row(0));
        assert_eq!(seq.row(1), prompt.theta().row(1));
        let tok = vocab.entry(0).unwrap().token_ids[0] as usize;
        assert_eq!(seq.row(2), vocab.token_embeddings().row(tok));
        assert!(matches!(
            build_class_sequence(&prompt, &vocab, 99),
            Err(PompError::UnknownClass(99))
        ));
    }

    #[test]
    fn zero_prompt_rows_then_tokens() {
        let vocab = toy_vocab(4, 1);
        let prompt = SoftPrompt::zeros(3, 4);
        let seq = build_class_sequence(&prompt, &vocab, 2).unwrap();
        let toks = &vocab.entry(2).unwrap().token_ids;
        assert_eq!(seq.rows(), 3 + toks.len());
        for r in 0..3 {
            assert!(seq.row(r).iter().all(|&v| v == 0.0));
        }
        for (k, &t) in toks.iter().enumerate() {
            assert_eq!(seq.row(3 + k), vocab.token_embeddings().row(t as usize));
        }
    }

    #[test]
    fn swapping_prompt_rows_swaps_sequence_rows() {
        let vocab = toy_vocab(3, 2);
        let theta = random_matrix(2, 3, 9);
        let swapped =
            Matrix::from_rows(&[theta.row(1).to_vec(), theta.row(0).to_vec()]).unwrap();
        let a = build_class_sequence(&SoftPrompt::from_matrix(theta).unwrap(), &vocab, 1).unwrap();
        let b = build_class_sequence(&SoftPrompt::from_matrix(swapped).unwrap(), &vocab, 1).unwrap();
        assert_eq!(a.row(0), b.row(1));
        assert_eq!(a.row(1), b.row(0));
        assert_eq!(a.row(2), b.row(2));
    }

    #[test]
    fn identity_linear_encoder_normalizes_single_row() {
        let enc = FrozenTextEncoder::linear_from_weights(Matrix::identity(3));
        let seq = Matrix::new(1, 3, vec![1.0, 2.0, 2.0]).unwrap();
        let out = encode_sequence(&enc, &seq).unwrap();
        for (o, want) in out.as_slice().iter().zip([1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]) {
            assert!((o - want).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_feature_is_degenerate() {
        let enc = FrozenTextEncoder::linear_from_weights(Matrix::identity(2));
        let seq = Matrix::new(2, 2, vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        assert!(matches!(encode_sequence(&enc, &seq), Err(PompError::Degenerate(_))));
        let upstream = Vector::new(vec![1.0, 0.0]).unwrap();
        assert!(sequence_vjp(&enc, &seq, &upstream).is_err());
    }

    #[test]
    fn outputs_are_unit_norm_and_deterministic() {
        for kind in [EncoderKind::MeanPoolLinear, EncoderKind::MeanPoolTwoLayerTanh] {
            let enc = FrozenTextEncoder::new(kind, 3, 8, 6).unwrap();
            let enc2 = FrozenTextEncoder::new(kind, 3, 8, 6).unwrap();
            for s in 0..10 {
                let seq = random_matrix(1 + s % 4, 8, 100 + s as u64);
                let a = encode_sequence(&enc, &seq).unwrap();
                assert!((a.norm() - 1.0).abs() < 1e-12);
                assert_eq!(a, encode_sequence(&enc2, &seq).unwrap());
            }
        }
    }

    #[test]
    fn both_kinds_share_first_layer() {
        let a = FrozenTextEncoder::new(EncoderKind::MeanPoolLinear, 11, 5, 4).unwrap();
        let b = FrozenTextEncoder::new(EncoderKind::MeanPoolTwoLayerTanh, 11, 5, 4).unwrap();
        assert_eq!(a.first_layer(), b.first_layer());
    }

    #[test]
    fn scaling_first_layer_leaves_output_unchanged() {
        let w = random_matrix(5, 4, 21);
        let mut scaled = w.clone();
        scaled.scale(3.7);
        let a = FrozenTextEncoder::linear_from_weights(w);
        let b = FrozenTextEncoder::linear_from_weights(scaled);
        let seq = random_matrix(3, 4, 22);
        let oa = encode_sequence(&a, &seq).unwrap();
        let ob = encode_sequence(&b, &seq).unwrap();
        for (x, y) in oa.as_slice().iter().zip(ob.as_slice()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let enc = FrozenTextEncoder::new(EncoderKind::MeanPoolTwoLayerTanh, 0, 8, 6).unwrap();
        let seq = random_matrix(4, 8, 1);
        let g = sequence_vjp(&enc, &seq, &Vector::zeros(6)).unwrap();
        assert_eq!(g.shape(), (4, 8));
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    fn vjp_matches_fd(kind: EncoderKind, seed: u64, tol: f64) {
        let enc = FrozenTextEncoder::new(kind, seed, 8, 6).unwrap();
        let seq = random_matrix(5, 8, seed + 1);
        let upstream = Vector::new(random_matrix(1, 6, seed + 2).as_slice().to_vec()).unwrap();
        let analytic = sequence_vjp(&enc, &seq, &upstream).unwrap();
        let numeric = finite_difference(
            |s: &Matrix| encode_sequence(&enc, s).unwrap().dot(&upstream),
            &seq,
            1e-5,
        );
        let err = rel_err(&analytic, &numeric);
        assert!(err < tol, "{kind:?} seed {seed}: rel err {err}");
    }

    #[test]
    fn linear_vjp_matches_finite_differences() {
        vjp_matches_fd(EncoderKind::MeanPoolLinear, 0, 1e-6);
    }

    #[test]
    fn tanh_vjp_matches_finite_differences() {
        vjp_matches_fd(EncoderKind::MeanPoolTwoLayerTanh, 0, 1e-5);
    }

    #[test]
    fn vjp_backward_contract_random_fixtures() {
        for seed in 1..20 {
            vjp_matches_fd(EncoderKind::MeanPoolLinear, seed * 7, 1e-5);
            vjp_matches_fd(EncoderKind::MeanPoolTwoLayerTanh, seed * 7, 1e-5);
        }
    }

    #[test]
    fn batch_encode_matches_single_encodes() {
        let vocab = toy_vocab(8, 4);
        let enc = FrozenTextEncoder::new(EncoderKind::MeanPoolTwoLayerTanh, 4, 8, 6).unwrap();
        let prompt = init_prompt(3, 8, 4).unwrap();
        let all = encode_all_classes(&enc, &prompt, &vocab).unwrap();
        assert_eq!(all.shape(), (5, 6));
        for i in 0..5 {
            let seq = build_class_sequence(&prompt, &vocab, i).unwrap();
            let single = encode_sequence(&enc, &seq).unwrap();
            assert_eq!(all.row(i), single.as_slice());
            let one = encode_class_features(&enc, &prompt, &vocab, &[i]).unwrap();
            assert_eq!(one.row(0), single.as_slice());
        }
        let perm = encode_class_features(&enc, &prompt, &vocab, &[3, 0, 4, 1, 2]).unwrap();
        for (j, &i) in [3, 0, 4, 1, 2].iter().enumerate() {
            assert_eq!(perm.row(j), all.row(i));
        }
    }

    #[test]
    fn degenerate_class_error_names_class() {
        let table = Matrix::new(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let entries = vec![
            ClassEntry { class_id: 0, name: "a".into(), token_ids: vec![0], frequency: 1 },
            ClassEntry { class_id: 1, name: "b".into(), token_ids: vec![0, 1], frequency: 1 },
        ];
        let vocab = ClassVocabulary::new(entries, table).unwrap();
        let enc = FrozenTextEncoder::linear_from_weights(Matrix::identity(2));
        let err = encode_class_features(&enc, &SoftPrompt::zeros(1, 2), &vocab, &[0, 1]).unwrap_err();
        assert!(matches!(err, PompError::DegenerateClass { class_id: 1, .. }), "{err}");
    }

    #[test]
    fn vocabulary_validation() {
        let table = Matrix::zeros(3, 2);
        let mk = |id, toks: Vec<u32>| ClassEntry { class_id: id, name: format!("c{id}"), token_ids: toks, frequency: 1 };
        assert!(ClassVocabulary::new(vec![mk(0, vec![0])], table.clone()).is_err());
        assert!(ClassVocabulary::new(vec![mk(0, vec![0]), mk(2, vec![1])], table.clone()).is_err());
        assert!(ClassVocabulary::new(vec![mk(0, vec![0]), mk(0, vec![1])], table.clone()).is_err());
        assert!(ClassVocabulary::new(vec![mk(0, vec![0]), mk(1, vec![3])], table.clone()).is_err());
        assert!(ClassVocabulary::new(vec![mk(0, vec![0]), mk(1, vec![])], table.clone()).is_err());
        assert!(ClassVocabulary::new(vec![mk(1, vec![0]), mk(0, vec![2])], table).is_ok());
    }

    #[test]
    fn vocabulary_text_round_trip() {
        let vocab = toy_vocab(4, 8);
        let text = vocabulary_to_string(&vocab);
        let parsed = parse_vocabulary_entries(&text).unwrap();
        assert_eq!(parsed, vocab.entries());
        let bad = "0\tname\t5\n";
        assert!(matches!(parse_vocabulary_entries(bad), Err(PompError::Parse { line: 1, .. })));
        let bad_tok = "# header\n0\tname\t5\t1 x\n";
        assert!(matches!(parse_vocabulary_entries(bad_tok), Err(PompError::Parse { line: 2, .. })));
    }

    #[test]
    fn embedding_bytes_round_trip_and_errors() {
        let table = random_matrix(4, 3, 1);
        let bytes = token_embeddings_to_bytes(&table).unwrap();
        assert_eq!(&bytes[..8], b"POMPEMBD");
        assert_eq!(bytes.len(), 8 + 12 + 4 * 12);
        let back = token_embeddings_from_bytes(&bytes).unwrap();
        for (a, b) in table.as_slice().iter().zip(back.as_slice()) {
            assert_eq!(*a as f32, *b as f32);
        }
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(token_embeddings_from_bytes(&wrong), Err(PompError::BadMagic { .. })));
        assert!(matches!(
            token_embeddings_from_bytes(&bytes[..bytes.len() - 1]),
            Err(PompError::Truncated { offset: 20, .. })
        ));
    }
}
