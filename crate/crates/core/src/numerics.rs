//! Dense real vectors and matrices with stable reductions.
//!
//! Every [`Vector`] and [`Matrix`] buffer is registered with a process-wide
//! allocation meter on construction and released on drop, so the training
//! step's activation footprint can be measured deterministically without
//! looking at the OS allocator.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{PompError, Result};

const F64_BYTES: u64 = std::mem::size_of::<f64>() as u64;

static LIVE_BYTES: AtomicU64 = AtomicU64::new(0);
static PEAK_BYTES: AtomicU64 = AtomicU64::new(0);

/// Snapshot of the allocation meter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AllocationMeter {
    pub live_bytes: u64,
    pub peak_bytes: u64,
}

fn track_alloc(bytes: u64) {
    if bytes == 0 {
        return;
    }
    let live = LIVE_BYTES.fetch_add(bytes, Ordering::SeqCst) + bytes;
    PEAK_BYTES.fetch_max(live, Ordering::SeqCst);
}

fn track_free(bytes: u64) {
    if bytes == 0 {
        return;
    }
    LIVE_BYTES.fetch_sub(bytes, Ordering::SeqCst);
}

/// Current live and peak bytes of all buffers created through this module.
pub fn meter_snapshot() -> AllocationMeter {
    // peak first: a concurrent alloc between the two loads can only make
    // live larger, so clamp to keep peak >= live in the returned value.
    let peak = PEAK_BYTES.load(Ordering::SeqCst);
    let live = LIVE_BYTES.load(Ordering::SeqCst);
    AllocationMeter {
        live_bytes: live,
        peak_bytes: peak.max(live),
    }
}

/// Zero the meter. Only allowed while nothing tracked is alive.
pub fn reset_meter() -> Result<()> {
    let live = LIVE_BYTES.load(Ordering::SeqCst);
    if live != 0 {
        return Err(PompError::MeterBusy { live_bytes: live });
    }
    PEAK_BYTES.store(0, Ordering::SeqCst);
    Ok(())
}

/// Drop the peak down to the current live count, starting a new measurement
/// window without requiring every buffer to be freed.
pub fn reset_peak() {
    let live = LIVE_BYTES.load(Ordering::SeqCst);
    PEAK_BYTES.store(live, Ordering::SeqCst);
}

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(PompError::NonFinite { index }),
        None => Ok(()),
    }
}

/// Dense vector of 64-bit reals.
#[derive(PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    fn wrap(data: Vec<f64>) -> Self {
        track_alloc(data.len() as u64 * F64_BYTES);
        Self { data }
    }

    /// Builds a vector, rejecting empty or non-finite input.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(PompError::EmptyInput("vector"));
        }
        check_finite(&data)?;
        Ok(Self::wrap(data))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "vector dimension must be positive");
        Self::wrap(vec![0.0; dim])
    }

    pub fn from_slice(data: &[f64]) -> Result<Self> {
        Self::new(data.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }
}

impl Clone for Vector {
    fn clone(&self) -> Self {
        Self::wrap(self.data.clone())
    }
}

impl Drop for Vector {
    fn drop(&mut self) {
        track_free(self.data.len() as u64 * F64_BYTES);
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("Vector").field(&self.data).finish()
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

/// Row-major dense matrix of 64-bit reals.
#[derive(PartialEq)]
pub struct Matrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Matrix {
    fn wrap(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        track_alloc(data.len() as u64 * F64_BYTES);
        Self { data, rows, cols }
    }

    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(PompError::EmptyInput("matrix"));
        }
        if rows * cols != data.len() {
            return Err(PompError::ShapeMismatch {
                expected: format!("{rows}x{cols} = {} entries", rows * cols),
                found: format!("{} entries", data.len()),
            });
        }
        check_finite(&data)?;
        Ok(Self::wrap(rows, cols, data))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self::wrap(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Stacks equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(PompError::ShapeMismatch {
                    expected: format!("row length {cols}"),
                    found: format!("row {i} has length {}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row_vector(&self, r: usize) -> Vector {
        Vector::wrap(self.row(r).to_vec())
    }

    /// `self · v`, with `v` of length `cols`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vector> {
        if v.len() != self.cols {
            return Err(PompError::ShapeMismatch {
                expected: format!("vector of length {}", self.cols),
                found: format!("length {}", v.len()),
            });
        }
        let out = (0..self.rows).map(|r| dot(self.row(r), v)).collect();
        Ok(Vector::wrap(out))
    }

    /// `selfᵀ · v`, with `v` of length `rows`.
    pub fn matvec_transposed(&self, v: &[f64]) -> Result<Vector> {
        if v.len() != self.rows {
            return Err(PompError::ShapeMismatch {
                expected: format!("vector of length {}", self.rows),
                found: format!("length {}", v.len()),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            if vr == 0.0 {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(self.row(r)) {
                *o += vr * m;
            }
        }
        Ok(Vector::wrap(out))
    }

    /// Naive `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(PompError::ShapeMismatch {
                expected: format!("{} rows", self.cols),
                found: format!("{} rows", other.rows),
            });
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                let row = other.row(k);
                let dst = &mut out[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in dst.iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix::wrap(self.rows, other.cols, out))
    }

    /// Column-wise mean over rows.
    pub fn mean_rows(&self) -> Vector {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        let n = self.rows as f64;
        out.iter_mut().for_each(|o| *o /= n);
        Vector::wrap(out)
    }

    /// Scales every entry in place.
    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    /// `self += c · other`.
    pub fn axpy(&mut self, c: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(PompError::ShapeMismatch {
                expected: format!("{:?}", self.shape()),
                found: format!("{:?}", other.shape()),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Clone for Matrix {
    fn clone(&self) -> Self {
        Self::wrap(self.rows, self.cols, self.data.clone())
    }
}

impl Drop for Matrix {
    fn drop(&mut self) {
        track_free(self.data.len() as u64 * F64_BYTES);
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Matrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("data", &self.data)
            .finish()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unit-norm copy of `v`.
pub fn l2_normalize(v: &Vector) -> Result<Vector> {
    let n = v.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(PompError::Degenerate("cannot normalize a zero-norm vector"));
    }
    Ok(Vector::wrap(v.as_slice().iter().map(|x| x / n).collect()))
}

/// `log Σ exp(vals)` via max-shift.
pub fn log_sum_exp(vals: &[f64]) -> Result<f64> {
    if vals.is_empty() {
        return Err(PompError::EmptyInput("log_sum_exp"));
    }
    check_finite(vals)?;
    Ok(log_sum_exp_unchecked(vals))
}

pub(crate) fn log_sum_exp_unchecked(vals: &[f64]) -> f64 {
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = vals.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Softmax with max-shift; entries sum to one.
pub fn stable_softmax(vals: &[f64]) -> Result<Vec<f64>> {
    if vals.is_empty() {
        return Err(PompError::EmptyInput("stable_softmax"));
    }
    check_finite(vals)?;
    Ok(stable_softmax_unchecked(vals))
}

pub(crate) fn stable_softmax_unchecked(vals: &[f64]) -> Vec<f64> {
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|o| *o /= sum);
    out
}
