//! Dense numeric primitives.
//!
//! Row-major matrices, a clamped softmax, Shannon entropy together with its
//! hand-derived gradient with respect to logits, a central-difference
//! gradient checker, and a simulator for plain gradient descent of the
//! entropy of a single sample in logit space.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to every probability before it reaches a logarithm.
pub const PROB_EPS: f64 = 1e-12;

/// Step used by every central-difference oracle in the crate.
pub const FD_STEP: f64 = 1e-5;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix, checking the length and that every value is finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite matrix entry at index {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    /// Internal constructor for values produced by arithmetic on finite inputs.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so an empty-column matrix yields no rows
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_raw(idx.len(), self.cols, data)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::invalid("vstack: column counts differ"));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix::from_raw(rows, cols, data))
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }
}

/// Unnormalized class scores of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid("logit vector needs at least two classes"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite logit"));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Probability vector over `K >= 2` classes with every entry at least [`PROB_EPS`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::invalid("probability vector needs at least two classes"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < PROB_EPS || *p > 1.0) {
            return Err(Error::invalid("probability entry outside [eps, 1]"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("probabilities sum to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max_prob(&self) -> f64 {
        self.0.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Max-shifted softmax written into `out`, clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub(crate) fn softmax_into(z: &[f64], out: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    let mut clamped = false;
    for o in out.iter_mut() {
        *o /= sum;
        if *o < PROB_EPS {
            *o = PROB_EPS;
            clamped = true;
        } else if *o > 1.0 - PROB_EPS {
            *o = 1.0 - PROB_EPS;
            clamped = true;
        }
    }
    if clamped {
        let total: f64 = out.iter().sum();
        for o in out.iter_mut() {
            *o = (*o / total).max(PROB_EPS);
        }
    }
}

/// Shannon entropy of `p`, assuming entries are already clamped.
pub(crate) fn entropy_of(p: &[f64]) -> f64 {
    -p.iter().map(|&q| q * q.ln()).sum::<f64>()
}

/// Writes dH/dz into `grad` given `p = softmax(z)` and returns H.
///
/// dH/dz_j = -p_j (ln p_j + H); the components sum to zero.
pub(crate) fn entropy_grad_from_probs(p: &[f64], grad: &mut [f64]) -> f64 {
    let h = entropy_of(p);
    for (g, &q) in grad.iter_mut().zip(p) {
        *g = -q * (q.ln() + h);
    }
    h
}

pub fn softmax(z: &[f64]) -> Result<ProbVector> {
    if z.len() < 2 {
        return Err(Error::invalid("softmax needs at least two logits"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("softmax of non-finite logits"));
    }
    let mut out = vec![0.0; z.len()];
    softmax_into(z, &mut out);
    Ok(ProbVector(out))
}

/// `H(p) = -sum p_k ln p_k`, in nats.
pub fn entropy(p: &ProbVector) -> f64 {
    entropy_of(&p.0)
}

/// Derivative of the binary entropy with respect to the positive-class
/// probability: `ln((1 - p) / p)`.
pub fn binary_entropy_grad(p: f64) -> Result<f64> {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return Err(Error::invalid(format!("p = {p} outside [eps, 1 - eps]")));
    }
    Ok(((1.0 - p) / p).ln())
}

/// Gradient of `H(softmax(z))` with respect to the logits.
pub fn entropy_grad_logits(z: &LogitVector) -> LogitVector {
    let mut p = vec![0.0; z.len()];
    softmax_into(&z.0, &mut p);
    let mut grad = vec![0.0; z.len()];
    entropy_grad_from_probs(&p, &mut grad);
    LogitVector(grad)
}

/// Central-difference gradient of `f` at `x`.
///
/// The denominator is the actual distance between the two perturbed
/// coordinates, so representation error in `x ± step` does not leak in.
pub fn central_difference<F>(f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        let hi = orig + step;
        let lo = orig - step;
        probe[i] = hi;
        let f_hi = f(&probe);
        probe[i] = lo;
        let f_lo = f(&probe);
        probe[i] = orig;
        if !(f_hi.is_finite() && f_lo.is_finite()) {
            return Err(Error::invalid(format!("function is not finite near coordinate {i}")));
        }
        grad.push((f_hi - f_lo) / (hi - lo));
    }
    Ok(grad)
}

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, analytic: &[f64], x: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if analytic.len() != x.len() {
        return Err(Error::invalid("analytic gradient and point differ in length"));
    }
    let numeric = central_difference(f, x, step)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max))
}

/// Gradient descent on the entropy of one sample, parameterized by its logits.
///
/// Starts from `z = ln p0` and applies `z <- z - lr * dH/dz` for `steps`
/// iterations. The returned trajectory has `steps + 1` entries and starts at
/// `p0` itself.
pub fn simulate_entropy_descent(p0: &ProbVector, lr: f64, steps: usize) -> Result<Vec<ProbVector>> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    let k = p0.len();
    let mut z: Vec<f64> = p0.0.iter().map(|p| p.ln()).collect();
    let mut p = vec![0.0; k];
    let mut grad = vec![0.0; k];
    let mut traj = Vec::with_capacity(steps + 1);
    traj.push(p0.clone());
    for _ in 0..steps {
        softmax_into(&z, &mut p);
        entropy_grad_from_probs(&p, &mut grad);
        for (zi, g) in z.iter_mut().zip(&grad) {
            *zi -= lr * g;
        }
        softmax_into(&z, &mut p);
        traj.push(ProbVector(p.clone()));
    }
    Ok(traj)
}

/// CSV with header `step,p_1,...,p_K` and one row per trajectory entry.
pub fn trajectory_csv(traj: &[ProbVector]) -> String {
    let k = traj.first().map_or(0, ProbVector::len);
    let mut out = String::from("step");
    for i in 1..=k {
        let _ = write!(out, ",p_{i}");
    }
    out.push('\n');
    for (step, p) in traj.iter().enumerate() {
        let _ = write!(out, "{step}");
        for v in p.as_slice() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}
