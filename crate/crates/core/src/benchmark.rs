//! Synthetic signal benchmark: class templates on a 32-point grid, five
//! corruption families with five severities, source training and one-pass
//! streaming evaluation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::{AdaptationConfig, AdapterState};
use crate::checkpoint::to_json;
use crate::error::{Error, Result};
use crate::network::{BnMode, Network, NetworkMeta};
use crate::numeric::{argmax, softmax_into, Matrix};
use crate::optim::{Optimizer, OptimizerKind};

pub const SIGNAL_LEN: usize = 32;
pub const NOISE_SIGMA: f64 = 0.1;
pub const BUMP_WIDTH: f64 = 1.5;
pub const DEFAULT_K: usize = 3;
pub const DEFAULT_N_TEST: usize = 3000;
pub const DEFAULT_BATCH_SIZE: usize = 100;
pub const HIDDEN: [usize; 2] = [64, 64];

/// Derives an independent seed for a named sub-stream of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Center of class `c`'s bump. All centers sit in the left half so that a
/// reversed signal never looks like another class.
pub fn template_center(c: usize, k: usize) -> f64 {
    2.0 + 11.5 * c as f64 / (k - 1) as f64
}

/// Noise-free signal of class `c`.
pub fn template(c: usize, k: usize) -> Vec<f64> {
    let mu = template_center(c, k);
    (0..SIGNAL_LEN)
        .map(|t| (-((t as f64 - mu).powi(2)) / (2.0 * BUMP_WIDTH * BUMP_WIDTH)).exp())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalDataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

impl SignalDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// `m` signals, classes balanced within one, with i.i.d. N(0, 0.1^2) noise.
pub fn generate_dataset(k: usize, m: usize, seed: u64) -> Result<SignalDataset> {
    generate_dataset_with_noise(k, m, seed, NOISE_SIGMA)
}

pub fn generate_dataset_with_noise(k: usize, m: usize, seed: u64, sigma: f64) -> Result<SignalDataset> {
    if k < 2 || m < k {
        return Err(Error::invalid(format!("need k >= 2 and m >= k, got k = {k}, m = {m}")));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::invalid("noise level must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..m).map(|i| i % k).collect();
    labels.shuffle(&mut rng);
    let templates: Vec<Vec<f64>> = (0..k).map(|c| template(c, k)).collect();
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut data = Vec::with_capacity(m * SIGNAL_LEN);
    for &y in &labels {
        data.extend(templates[y].iter().map(|v| v + noise.sample(&mut rng)));
    }
    Ok(SignalDataset { inputs: Matrix::from_raw(m, SIGNAL_LEN, data), labels, k, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    SmoothBlur,
    Contrast,
    Brightness,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::SmoothBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::SmoothBlur => "smooth_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown corruption `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Corruption {
    kind: CorruptionKind,
    severity: u8,
}

impl Corruption {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::invalid(format!("severity must be in 1..=5, got {severity}")));
        }
        Ok(Self { kind, severity })
    }

    pub fn kind(&self) -> CorruptionKind {
        self.kind
    }

    pub fn severity(&self) -> u8 {
        self.severity
    }
}

/// Corrupts one signal. Randomness comes only from `seed`.
pub fn apply_corruption(x: &[f64], c: Corruption, seed: u64) -> Vec<f64> {
    let s = c.severity as f64;
    match c.kind {
        CorruptionKind::GaussianNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 0.1 * s).expect("positive sigma");
            x.iter().map(|v| v + noise.sample(&mut rng)).collect()
        }
        CorruptionKind::ImpulseNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = 0.03 * s;
            x.iter()
                .map(|&v| {
                    if rng.gen_bool(p) {
                        if rng.gen_bool(0.5) {
                            1.0
                        } else {
                            -1.0
                        }
                    } else {
                        v
                    }
                })
                .collect()
        }
        CorruptionKind::SmoothBlur => {
            let r = c.severity as usize;
            (0..x.len())
                .map(|t| {
                    let lo = t.saturating_sub(r);
                    let hi = (t + r + 1).min(x.len());
                    x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
                })
                .collect()
        }
        CorruptionKind::Contrast => contrast(x, 1.0 - 0.15 * s),
        CorruptionKind::Brightness => x.iter().map(|v| v + 0.2 * s).collect(),
    }
}

/// `mean(x) + (x - mean(x)) * factor`.
pub fn contrast(x: &[f64], factor: f64) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| mean + (v - mean) * factor).collect()
}

/// Corrupts every row; row `i` uses sub-stream `i` of `seed`.
pub fn corrupt_matrix(inputs: &Matrix, c: Corruption, seed: u64) -> Matrix {
    let mut out = Vec::with_capacity(inputs.rows() * inputs.cols());
    for (i, row) in inputs.iter_rows().enumerate() {
        out.extend(apply_corruption(row, c, derive_seed(seed, i as u64)));
    }
    Matrix::from_raw(inputs.rows(), inputs.cols(), out)
}

/// Fraction of positions where prediction and label agree.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::invalid("predictions and labels must be non-empty and of equal length"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Argmax predictions of a network on a matrix.
pub fn predict(net: &Network, inputs: &Matrix, mode: BnMode) -> Result<Vec<usize>> {
    let (logits, _) = net.forward(inputs, mode)?;
    Ok(logits.iter_rows().map(argmax).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    /// Probability of reversing each training signal.
    pub flip_prob: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        Self { epochs, batch_size: 64, lr: 1e-3, hidden: HIDDEN.to_vec(), flip_prob: 0.5, seed }
    }
}

/// Trains the source classifier with cross-entropy and random flips.
pub fn train_source(ds: &SignalDataset, epochs: usize, seed: u64) -> Result<Network> {
    Ok(train_source_with(ds, &TrainConfig::new(epochs, seed))?.network)
}

/// Mean cross-entropy and accuracy over one epoch's mini-batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub log: Vec<EpochLog>,
}

pub fn train_source_with(ds: &SignalDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if ds.len() < 2 || cfg.batch_size < 2 {
        return Err(Error::invalid("training needs at least two samples per batch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::mlp(ds.inputs.cols(), &cfg.hidden, ds.k, &mut rng)?;
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.lr, net.param_count())?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut x = ds.inputs.select_rows(chunk);
            for i in 0..x.rows() {
                if rng.gen_bool(cfg.flip_prob) {
                    x.row_mut(i).reverse();
                }
            }
            let (logits, cache) = net.forward(&x, BnMode::TrainStats)?;
            let b = chunk.len() as f64;
            let mut grad = Matrix::zeros(logits.rows(), logits.cols());
            let mut loss = 0.0;
            for (i, &idx) in chunk.iter().enumerate() {
                let y = ds.labels[idx];
                let g = grad.row_mut(i);
                softmax_into(logits.row(i), g);
                hits += usize::from(argmax(g) == y);
                loss -= g[y].ln() / b;
                g[y] -= 1.0;
                g.iter_mut().for_each(|v| *v /= b);
            }
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch, loss });
            }
            loss_sum += loss * b;
            seen += chunk.len();
            let grads = net.backward_full(&cache, &grad)?;
            let mut params = net.all_params();
            opt.step(&mut params, &grads)?;
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::TrainingDiverged { epoch, loss: f64::NAN });
            }
            net.set_all_params(&params)?;
            net.commit_running_stats(&cache)?;
        }
        let seen_f = seen.max(1) as f64;
        log.push(EpochLog { epoch, loss: loss_sum / seen_f, train_accuracy: hits as f64 / seen_f });
    }
    net.meta = NetworkMeta { seed: cfg.seed, trained_epochs: cfg.epochs };
    Ok(TrainOutcome { network: net, log })
}

/// Independent seeds for the parts of one benchmark run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub test_set: u64,
    pub corruption: u64,
    pub order: u64,
}

impl RunSeeds {
    pub fn from_seed(seed: u64) -> Self {
        Self { test_set: derive_seed(seed, 0), corruption: derive_seed(seed, 1), order: derive_seed(seed, 2) }
    }
}

/// Batch size and order of a one-pass stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamProtocol {
    pub batch_size: usize,
    pub order_seed: u64,
}

impl StreamProtocol {
    /// Consecutive batches of a seeded permutation of `0..n`. A trailing
    /// single sample joins the previous batch, since a batch of one has no
    /// batch statistics.
    pub fn batches(&self, n: usize) -> Result<Vec<Vec<usize>>> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.order_seed));
        let mut batches: Vec<Vec<usize>> = order.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let tail = batches.pop().expect("non-empty");
            batches.last_mut().expect("non-empty").extend(tail);
        }
        Ok(batches)
    }
}

/// Summary of one streaming run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: String,
    pub corruption: String,
    pub severity: u8,
    pub seed: u64,
    pub n_test: usize,
    pub accuracy: f64,
    /// Running accuracy after each batch.
    pub per_batch_accuracy: Vec<f64>,
    pub config: AdaptationConfig,
    pub batch_size: usize,
    pub q: usize,
    pub optimizer_steps: u32,
    /// SHA-256 of the adapted network's checkpoint document.
    pub params_digest: String,
}

/// A report together with the per-sample record it was computed from.
#[derive(Debug, Clone)]
pub struct StreamOutcome {
    pub report: RunReport,
    /// Test-set indices in stream order.
    pub order: Vec<usize>,
    /// Pre-update predictions in stream order.
    pub predictions: Vec<usize>,
    /// Labels in stream order.
    pub labels: Vec<usize>,
    /// Penultimate features in stream order, when requested.
    pub features: Option<Matrix>,
    pub network: Network,
}

pub fn params_digest(net: &Network) -> String {
    hex::encode(Sha256::digest(to_json(net).as_bytes()))
}

/// Inputs of one streaming run.
#[derive(Debug, Clone)]
pub struct StreamSetup<'a> {
    pub test: &'a SignalDataset,
    /// `None` streams the clean test set.
    pub corruption: Option<Corruption>,
    pub corruption_seed: u64,
    pub protocol: StreamProtocol,
    pub seed: u64,
    pub collect_features: bool,
}

/// Streams the test set once through a fresh adapter built from `net`.
pub fn stream_eval(net: &Network, setup: &StreamSetup<'_>, config: &AdaptationConfig) -> Result<StreamOutcome> {
    let test = setup.test;
    if test.inputs.cols() != net.input_dim() || test.k != net.k() {
        return Err(Error::invalid("test set does not match the network's input size or class count"));
    }
    let inputs = match setup.corruption {
        Some(c) => corrupt_matrix(&test.inputs, c, setup.corruption_seed),
        None => test.inputs.clone(),
    };
    let batches = setup.protocol.batches(test.len())?;
    let mut state = AdapterState::new(net.clone(), config.clone(), setup.protocol.batch_size)?;
    let mut order = Vec::with_capacity(test.len());
    let mut predictions = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    let mut features = Vec::new();
    let mut per_batch_accuracy = Vec::with_capacity(batches.len());
    let mut hits = 0usize;
    for idx in &batches {
        let out = state.adapt_batch(&inputs.select_rows(idx))?;
        for (&i, &p) in idx.iter().zip(&out.predictions) {
            hits += usize::from(p == test.labels[i]);
            order.push(i);
            predictions.push(p);
            labels.push(test.labels[i]);
        }
        if setup.collect_features {
            features.push(out.features);
        }
        per_batch_accuracy.push(hits as f64 / predictions.len() as f64);
    }
    let features = if setup.collect_features {
        Some(Matrix::vstack(&features.iter().collect::<Vec<_>>())?)
    } else {
        None
    };
    let q = state.q();
    let optimizer_steps = state.optimizer_steps();
    let network = state.into_network();
    let report = RunReport {
        strategy: config.strategy.to_string(),
        corruption: setup.corruption.map_or("none".to_string(), |c| c.kind().to_string()),
        severity: setup.corruption.map_or(0, |c| c.severity()),
        seed: setup.seed,
        n_test: predictions.len(),
        accuracy: accuracy(&predictions, &labels)?,
        per_batch_accuracy,
        config: config.clone(),
        batch_size: setup.protocol.batch_size,
        q,
        optimizer_steps,
        params_digest: params_digest(&network),
    };
    Ok(StreamOutcome { report, order, predictions, labels, features, network })
}
