//! Online test-time adaptation.
//!
//! Strategies, from least to most involved:
//!
//! * `Source` predicts with the frozen source model (running BN statistics).
//! * `Norm` normalizes with each test batch's own statistics, no gradient step.
//! * `Tent` minimizes the mean prediction entropy over BN scale and shift.
//! * `TentFiltered` does the same on samples whose entropy is below a fixed cutoff.
//! * `Ttc` adds three toggles on top of `Tent`: robust label assignment
//!   (average logits with those of a flipped input, no gradient through the
//!   flipped branch), entropy-power sample weights, and gradient accumulation
//!   over `Q` batches.
//!
//! Every gradient strategy normalizes with test-batch statistics and returns
//! the predictions computed before the parameter update of that batch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{BnMode, ForwardCache, GradientSet, Network};
use crate::numeric::{argmax, entropy_grad_from_probs, softmax_into, Matrix};
use crate::optim::{Optimizer, OptimizerKind};

/// Lower clamp on entropies before they are raised to `-tau`.
pub const ENTROPY_EPS: f64 = 1e-6;

/// Batch-size budget that the default accumulation count emulates.
pub const ACCUMULATION_TARGET: usize = 200;

/// Default entropy cutoff for `TentFiltered`, as a fraction of `ln K`.
pub const FILTER_FRACTION: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Source,
    Norm,
    Tent,
    TentFiltered,
    Ttc,
}

impl Strategy {
    pub const ALL: [Strategy; 5] =
        [Strategy::Source, Strategy::Norm, Strategy::Tent, Strategy::TentFiltered, Strategy::Ttc];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Source => "source",
            Strategy::Norm => "norm",
            Strategy::Tent => "tent",
            Strategy::TentFiltered => "tent-filtered",
            Strategy::Ttc => "ttc",
        }
    }

    /// Whether the strategy takes gradient steps.
    pub fn is_gradient_based(self) -> bool {
        matches!(self, Strategy::Tent | Strategy::TentFiltered | Strategy::Ttc)
    }

    pub fn bn_mode(self) -> BnMode {
        match self {
            Strategy::Source => BnMode::EvalStats,
            _ => BnMode::TestBatchStats,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown strategy `{s}`")))
    }
}

/// Weak augmentation used for robust label assignment. Both variants are involutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augmentation {
    Identity,
    /// Reverses every input row: the 1-D analogue of a horizontal flip.
    Flip,
}

impl Augmentation {
    pub fn apply(self, batch: &Matrix) -> Matrix {
        match self {
            Augmentation::Identity => batch.clone(),
            Augmentation::Flip => {
                let mut out = batch.clone();
                for i in 0..out.rows() {
                    out.row_mut(i).reverse();
                }
                out
            }
        }
    }
}

/// Settings of one adaptation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawConfig")]
pub struct AdaptationConfig {
    pub strategy: Strategy,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub tau: f64,
    /// `None` means `max(1, round(200 / N))` for batch size `N`.
    pub accumulation_q: Option<usize>,
    pub rla_enabled: bool,
    pub wa_enabled: bool,
    /// Applies to every gradient strategy; defaults to on for `Ttc` only.
    pub ga_enabled: bool,
    /// `None` means `0.4 ln K`.
    pub filter_threshold: Option<f64>,
    pub augmentation: Augmentation,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    strategy: Option<Strategy>,
    lr: Option<f64>,
    optimizer: Option<OptimizerKind>,
    tau: Option<f64>,
    accumulation_q: Option<usize>,
    rla_enabled: Option<bool>,
    wa_enabled: Option<bool>,
    ga_enabled: Option<bool>,
    filter_threshold: Option<f64>,
    augmentation: Option<Augmentation>,
}

impl TryFrom<RawConfig> for AdaptationConfig {
    type Error = Error;

    fn try_from(raw: RawConfig) -> Result<Self> {
        let base = AdaptationConfig::new(raw.strategy.unwrap_or(Strategy::Ttc));
        let cfg = AdaptationConfig {
            lr: raw.lr.unwrap_or(base.lr),
            optimizer: raw.optimizer.unwrap_or(base.optimizer),
            tau: raw.tau.unwrap_or(base.tau),
            accumulation_q: raw.accumulation_q.or(base.accumulation_q),
            rla_enabled: raw.rla_enabled.unwrap_or(base.rla_enabled),
            wa_enabled: raw.wa_enabled.unwrap_or(base.wa_enabled),
            ga_enabled: raw.ga_enabled.unwrap_or(base.ga_enabled),
            filter_threshold: raw.filter_threshold.or(base.filter_threshold),
            augmentation: raw.augmentation.unwrap_or(base.augmentation),
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self::new(Strategy::Ttc)
    }
}

impl AdaptationConfig {
    /// Defaults: Adam at lr 1e-3, tau 0.5, automatic Q, flip augmentation,
    /// all TTC components on, accumulation only for `Ttc`.
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            tau: 0.5,
            accumulation_q: None,
            rla_enabled: true,
            wa_enabled: true,
            ga_enabled: strategy == Strategy::Ttc,
            filter_threshold: None,
            augmentation: Augmentation::Flip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(Error::invalid(format!("tau must be non-negative, got {}", self.tau)));
        }
        if self.accumulation_q == Some(0) {
            return Err(Error::invalid("accumulation_q must be at least 1"));
        }
        if let Some(t) = self.filter_threshold {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::invalid(format!("filter_threshold must be positive, got {t}")));
            }
        }
        Ok(())
    }

    /// Number of batches per optimizer step for batch size `n`.
    pub fn effective_q(&self, n: usize) -> usize {
        if !self.ga_enabled {
            return 1;
        }
        self.accumulation_q.unwrap_or_else(|| default_q(n))
    }

    pub fn effective_tau(&self) -> f64 {
        if self.strategy == Strategy::Ttc && self.wa_enabled {
            self.tau
        } else {
            0.0
        }
    }

    pub fn filter_threshold_for(&self, k: usize) -> f64 {
        self.filter_threshold.unwrap_or(FILTER_FRACTION * (k as f64).ln())
    }
}

/// `max(1, round(200 / n))`.
pub fn default_q(n: usize) -> usize {
    ((ACCUMULATION_TARGET as f64 / n.max(1) as f64).round() as usize).max(1)
}

/// Per-row softmax, entropy and entropy gradient of a logit matrix.
#[derive(Debug, Clone)]
pub struct RowEntropies {
    pub probs: Matrix,
    pub grads: Matrix,
    pub entropies: Vec<f64>,
}

pub fn row_entropies(logits: &Matrix) -> Result<RowEntropies> {
    let (n, k) = logits.shape();
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if k < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if !logits.is_finite() {
        return Err(Error::invalid("non-finite logits"));
    }
    let mut probs = Matrix::zeros(n, k);
    let mut grads = Matrix::zeros(n, k);
    let mut entropies = Vec::with_capacity(n);
    for i in 0..n {
        softmax_into(logits.row(i), probs.row_mut(i));
        let h = entropy_grad_from_probs(probs.row(i), grads.row_mut(i));
        entropies.push(h);
    }
    Ok(RowEntropies { probs, grads, entropies })
}

impl RowEntropies {
    /// `L = sum_i w_i H_i` and its gradient with the weights held constant.
    pub fn weighted(&self, weights: &[f64]) -> (f64, Matrix) {
        let mut grad = self.grads.clone();
        let mut loss = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            loss += w * self.entropies[i];
            grad.row_mut(i).iter_mut().for_each(|g| *g *= w);
        }
        (loss, grad)
    }
}

/// Weighted entropy loss with caller-supplied constant weights.
pub fn weighted_entropy_loss(logits: &Matrix, weights: &[f64]) -> Result<(f64, Matrix)> {
    if weights.len() != logits.rows() {
        return Err(Error::invalid("one weight per sample required"));
    }
    Ok(row_entropies(logits)?.weighted(weights))
}

fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Mean Shannon entropy of the batch's predictions and its gradient.
pub fn tent_loss(logits: &Matrix) -> Result<(f64, Matrix)> {
    let rows = row_entropies(logits)?;
    Ok(rows.weighted(&uniform_weights(logits.rows())))
}

/// Per-sample loss weight; never differentiated through.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct SampleWeight(pub f64);

impl SampleWeight {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// `w_i = max(H_i, 1e-6)^(-tau) / n`. Weights are not renormalized.
pub fn sample_weights(entropies: &[f64], tau: f64, n: usize) -> Vec<SampleWeight> {
    entropies
        .iter()
        .map(|&h| SampleWeight(h.max(ENTROPY_EPS).powf(-tau) / n as f64))
        .collect()
}

/// Entropy-weighted loss `sum_i w_i H_i`; `tau = 0` reproduces [`tent_loss`].
pub fn ttc_loss(logits: &Matrix, tau: f64, n: usize) -> Result<(f64, Matrix)> {
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(Error::invalid(format!("tau must be non-negative, got {tau}")));
    }
    let rows = row_entropies(logits)?;
    let w: Vec<f64> = sample_weights(&rows.entropies, tau, n).into_iter().map(SampleWeight::value).collect();
    Ok(rows.weighted(&w))
}

/// Accepts sample `i` iff `H_i < threshold`.
pub fn entropy_filter(entropies: &[f64], threshold: f64) -> Vec<bool> {
    entropies.iter().map(|&h| h < threshold).collect()
}

/// Result of a forward pass with robust label assignment.
#[derive(Debug, Clone)]
pub struct RlaOutput {
    /// `(f(x) + f(aug(x))) / 2`.
    pub combined: Matrix,
    /// Cache of the differentiable `f(x)` branch.
    pub cache: ForwardCache,
    /// `f(aug(x))`, treated as a constant.
    pub aug_logits: Matrix,
    /// d(combined)/d(f(x)): 1/2 with a real augmentation branch.
    pub grad_scale: f64,
}

/// Averages the logits of a batch and of its augmented copy.
///
/// Each branch normalizes with its own batch statistics under `mode`; the
/// augmented branch is detached. With [`Augmentation::Identity`] there is no
/// second branch: the combined logits are the plain logits and carry the full
/// gradient.
pub fn rla_forward(net: &Network, batch: &Matrix, aug: Augmentation, mode: BnMode) -> Result<RlaOutput> {
    let (logits, cache) = net.forward(batch, mode)?;
    if aug == Augmentation::Identity {
        return Ok(RlaOutput { combined: logits.clone(), cache, aug_logits: logits, grad_scale: 1.0 });
    }
    let augmented = aug.apply(batch);
    if augmented.shape() != batch.shape() {
        return Err(Error::invalid("augmentation changed the input shape"));
    }
    let (aug_logits, _) = net.forward(&augmented, mode)?;
    let combined = Matrix::from_raw(
        logits.rows(),
        logits.cols(),
        logits.as_slice().iter().zip(aug_logits.as_slice()).map(|(a, b)| (a + b) / 2.0).collect(),
    );
    Ok(RlaOutput { combined, cache, aug_logits, grad_scale: 0.5 })
}

/// Sums 1/Q-scaled gradients and steps the optimizer on every Q-th batch.
#[derive(Debug, Clone)]
pub struct GradientAccumulator {
    accumulated: GradientSet,
    batches_seen: usize,
    q: usize,
}

impl GradientAccumulator {
    pub fn new(len: usize, q: usize) -> Result<Self> {
        if q == 0 {
            return Err(Error::invalid("accumulation count must be at least 1"));
        }
        Ok(Self { accumulated: GradientSet::zeros(len), batches_seen: 0, q })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn batches_seen(&self) -> usize {
        self.batches_seen
    }

    pub fn accumulated(&self) -> &GradientSet {
        &self.accumulated
    }

    /// Adds `grads` (already scaled by 1/Q) and, on the Q-th batch, applies
    /// one optimizer step to `params` and zeroes the sum. Returns whether a
    /// step happened.
    pub fn accumulate_and_maybe_step(
        &mut self,
        grads: &GradientSet,
        optimizer: &mut Optimizer,
        params: &mut [f64],
    ) -> Result<bool> {
        if grads.len() != self.accumulated.len() || params.len() != grads.len() {
            return Err(Error::invalid("gradient set does not match the accumulator"));
        }
        for (a, g) in self.accumulated.0.iter_mut().zip(grads.as_slice()) {
            *a += g;
        }
        self.batches_seen += 1;
        if self.batches_seen < self.q {
            return Ok(false);
        }
        optimizer.step(params, self.accumulated.as_slice())?;
        self.accumulated.0.iter_mut().for_each(|a| *a = 0.0);
        self.batches_seen = 0;
        Ok(true)
    }
}

/// What [`AdapterState::adapt_batch`] hands back for one batch.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// Argmax of `probs`; computed before any update in the same call.
    pub predictions: Vec<usize>,
    pub probs: Matrix,
    /// Penultimate activations of the plain (non-augmented) branch.
    pub features: Matrix,
    /// Unscaled loss, when a loss was evaluated.
    pub loss: Option<f64>,
    /// Samples that contributed to the loss.
    pub contributing: usize,
    pub stepped: bool,
}

/// Adaptation state of one stream. Mutated sequentially, batch after batch.
#[derive(Debug, Clone)]
pub struct AdapterState {
    net: Network,
    config: AdaptationConfig,
    accumulator: GradientAccumulator,
    optimizer: Optimizer,
    batches: usize,
}

impl AdapterState {
    /// `batch_size` fixes the automatic accumulation count.
    pub fn new(net: Network, config: AdaptationConfig, batch_size: usize) -> Result<Self> {
        config.validate()?;
        if config.strategy.is_gradient_based() && net.bn_layer_count() == 0 {
            return Err(Error::invalid("gradient adaptation needs at least one batch-norm layer"));
        }
        let len = net.bn_param_count();
        let accumulator = GradientAccumulator::new(len, config.effective_q(batch_size))?;
        let optimizer = Optimizer::new(config.optimizer, config.lr, len)?;
        Ok(Self { net, config, accumulator, optimizer, batches: 0 })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn config(&self) -> &AdaptationConfig {
        &self.config
    }

    pub fn q(&self) -> usize {
        self.accumulator.q()
    }

    pub fn batches_seen(&self) -> usize {
        self.batches
    }

    pub fn optimizer_steps(&self) -> u32 {
        self.optimizer.steps_taken()
    }

    pub fn adapt_batch(&mut self, batch: &Matrix) -> Result<BatchOutput> {
        if batch.rows() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let cfg = &self.config;
        let strategy = cfg.strategy;
        let mode = strategy.bn_mode();
        let aug = if strategy == Strategy::Ttc && cfg.rla_enabled { cfg.augmentation } else { Augmentation::Identity };
        let fwd = rla_forward(&self.net, batch, aug, mode)?;
        let rows = row_entropies(&fwd.combined)?;
        let n = batch.rows();
        let predictions: Vec<usize> = rows.probs.iter_rows().map(argmax).collect();

        let weights = match strategy {
            Strategy::Source | Strategy::Norm => None,
            Strategy::Tent => Some(uniform_weights(n)),
            Strategy::TentFiltered => {
                let mask = entropy_filter(&rows.entropies, cfg.filter_threshold_for(self.net.k()));
                let accepted = mask.iter().filter(|m| **m).count();
                (accepted > 0).then(|| {
                    let w = 1.0 / accepted as f64;
                    mask.iter().map(|&m| if m { w } else { 0.0 }).collect()
                })
            }
            Strategy::Ttc => Some(
                sample_weights(&rows.entropies, cfg.effective_tau(), n)
                    .into_iter()
                    .map(SampleWeight::value)
                    .collect(),
            ),
        };

        let mut loss = None;
        let mut contributing = 0;
        let mut stepped = false;
        if let Some(w) = weights {
            contributing = w.iter().filter(|v| **v > 0.0).count();
            let (l, grad) = rows.weighted(&w);
            loss = Some(l);
            // loss / Q, then through d(combined)/d(f(x))
            let scale = fwd.grad_scale / self.accumulator.q() as f64;
            let grad = if scale == 1.0 { grad } else { grad.scaled(scale) };
            let g = self.net.backward_bn_affine(&fwd.cache, &grad)?;
            let mut params = self.net.bn_affine_params();
            stepped = self.accumulator.accumulate_and_maybe_step(&g, &mut self.optimizer, &mut params)?;
            if stepped {
                self.net.set_bn_affine_params(&params)?;
            }
        }
        self.batches += 1;
        Ok(BatchOutput {
            predictions,
            probs: rows.probs,
            features: fwd.cache.into_penultimate(),
            loss,
            contributing,
            stepped,
        })
    }
}
