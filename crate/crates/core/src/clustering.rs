//! Mini-batch k-means on feature batches.
//!
//! The assignment step labels each point with its nearest center, the update
//! step moves centers toward the mean of their members. Entropy adaptation
//! plays the same two roles with the argmax class as the label and a gradient
//! step on the batch-norm parameters as the update.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centers(Matrix);

impl Centers {
    pub fn new(c: Matrix) -> Result<Self> {
        if c.rows() < 2 {
            return Err(Error::invalid("need at least two centers"));
        }
        if !c.is_finite() {
            return Err(Error::invalid("centers must be finite"));
        }
        Ok(Self(c))
    }

    pub fn k(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn center(&self, c: usize) -> &[f64] {
        self.0.row(c)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment(Vec<usize>);

impl Assignment {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} centers")));
        }
        Ok(Self(labels))
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_dims(features: &Matrix, centers: &Centers) -> Result<()> {
    if features.cols() != centers.dim() {
        return Err(Error::invalid(format!(
            "features have {} columns, centers have {}",
            features.cols(),
            centers.dim()
        )));
    }
    Ok(())
}

/// Nearest center for every row; ties go to the lowest index.
pub fn assign_step(features: &Matrix, centers: &Centers) -> Result<Assignment> {
    check_dims(features, centers)?;
    let labels = features
        .iter_rows()
        .map(|z| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..centers.k() {
                let d = squared_distance(z, centers.center(c));
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            best
        })
        .collect();
    Ok(Assignment(labels))
}

/// How [`update_step`] moves the centers.
#[derive(Debug)]
pub enum UpdateRule<'a> {
    /// Each center with members becomes their mean.
    FullBatch,
    /// Streaming mean: each member moves its center by `(z - c) / count_c`,
    /// where `count_c` includes every point seen so far.
    MiniBatchRunning { counts: &'a mut [usize] },
}

/// Moves centers toward their members. Centers without members stay put.
pub fn update_step(
    features: &Matrix,
    assignment: &Assignment,
    centers: &Centers,
    rule: UpdateRule<'_>,
) -> Result<Centers> {
    check_dims(features, centers)?;
    if assignment.len() != features.rows() {
        return Err(Error::invalid("assignment length differs from the number of points"));
    }
    let (k, d) = (centers.k(), centers.dim());
    let mut out = centers.0.clone();
    match rule {
        UpdateRule::FullBatch => {
            let mut sums = Matrix::zeros(k, d);
            let mut counts = vec![0usize; k];
            for (z, &y) in features.iter_rows().zip(assignment.labels()) {
                counts[y] += 1;
                for (s, v) in sums.row_mut(y).iter_mut().zip(z) {
                    *s += v;
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    let n = counts[c] as f64;
                    for (o, s) in out.row_mut(c).iter_mut().zip(sums.row(c)) {
                        *o = s / n;
                    }
                }
            }
        }
        UpdateRule::MiniBatchRunning { counts } => {
            if counts.len() != k {
                return Err(Error::invalid("one running count per center required"));
            }
            for (z, &y) in features.iter_rows().zip(assignment.labels()) {
                counts[y] += 1;
                let eta = 1.0 / counts[y] as f64;
                for (o, v) in out.row_mut(y).iter_mut().zip(z) {
                    *o += eta * (v - *o);
                }
            }
        }
    }
    Ok(Centers(out))
}

/// `(1/N) sum_i |z_i - C_{y_i}|^2`.
pub fn kmeans_objective(features: &Matrix, assignment: &Assignment, centers: &Centers) -> Result<f64> {
    check_dims(features, centers)?;
    if assignment.len() != features.rows() || features.rows() == 0 {
        return Err(Error::invalid("assignment must cover a non-empty feature batch"));
    }
    let total: f64 = features
        .iter_rows()
        .zip(assignment.labels())
        .map(|(z, &y)| squared_distance(z, centers.center(y)))
        .sum();
    Ok(total / features.rows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CenterInit {
    /// The first `k` rows of the first batch.
    FirstK,
    /// `k` distinct rows of the first batch drawn with a seeded RNG.
    SeededRandom(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    FullBatch,
    MiniBatchRunning,
}

#[derive(Debug, Clone)]
pub struct KMeansRun {
    pub centers: Centers,
    /// Objective of each batch under its assignment and the updated centers.
    pub trace: Vec<f64>,
    /// Assignment of the last batch.
    pub last_assignment: Assignment,
}

impl KMeansRun {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("batch,objective\n");
        for (i, v) in self.trace.iter().enumerate() {
            out.push_str(&format!("{i},{v}\n"));
        }
        out
    }
}

/// Alternates assignment and update over a stream of batches.
pub fn run_minibatch_kmeans(batches: &[Matrix], k: usize, init: CenterInit, mode: UpdateMode) -> Result<KMeansRun> {
    if k < 2 {
        return Err(Error::invalid("k must be at least 2"));
    }
    let first = batches.first().ok_or_else(|| Error::invalid("empty batch stream"))?;
    if first.rows() < k {
        return Err(Error::invalid(format!("first batch has {} rows, need at least k = {k}", first.rows())));
    }
    let rows: Vec<usize> = match init {
        CenterInit::FirstK => (0..k).collect(),
        CenterInit::SeededRandom(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample(&mut rng, first.rows(), k).into_vec()
        }
    };
    let mut centers = Centers::new(first.select_rows(&rows))?;
    let mut counts = vec![0usize; k];
    let mut trace = Vec::with_capacity(batches.len());
    let mut last = Assignment(Vec::new());
    for batch in batches {
        let a = assign_step(batch, &centers)?;
        let rule = match mode {
            UpdateMode::FullBatch => UpdateRule::FullBatch,
            UpdateMode::MiniBatchRunning => UpdateRule::MiniBatchRunning { counts: &mut counts },
        };
        centers = update_step(batch, &a, &centers, rule)?;
        trace.push(kmeans_objective(batch, &a, &centers)?);
        last = a;
    }
    Ok(KMeansRun { centers, trace, last_assignment: last })
}
