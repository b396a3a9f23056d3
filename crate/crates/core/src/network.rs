//! Feedforward classifier with batch normalization.
//!
//! The network is a flat list of dense and batch-norm layers, each followed
//! by an optional ReLU. Forward passes run in one of three batch-norm modes;
//! the backward pass either produces gradients for every parameter (source
//! training) or only for the batch-norm scale and shift (test-time
//! adaptation).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }
}

/// Which statistics a batch-norm layer normalizes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated by
    /// [`Network::commit_running_stats`].
    TrainStats,
    /// Running statistics accumulated at train time.
    EvalStats,
    /// Batch statistics of the current test batch; nothing is recorded.
    TestBatchStats,
}

impl BnMode {
    fn uses_batch_stats(self) -> bool {
        !matches!(self, BnMode::EvalStats)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out x in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    pub activation: Activation,
}

impl BatchNormLayer {
    /// Identity-initialized layer: unit scale, zero shift, running stats (0, 1).
    pub fn identity(features: usize, activation: Activation) -> Self {
        Self {
            gamma: vec![1.0; features],
            beta: vec![0.0; features],
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            eps: 1e-8,
            momentum: 0.1,
            activation,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    BatchNorm(BatchNormLayer),
}

impl Layer {
    fn in_dim(&self) -> usize {
        match self {
            Layer::Dense(d) => d.in_dim(),
            Layer::BatchNorm(b) => b.features(),
        }
    }

    fn out_dim(&self) -> usize {
        match self {
            Layer::Dense(d) => d.out_dim(),
            Layer::BatchNorm(b) => b.features(),
        }
    }
}

/// Provenance recorded alongside the parameters in a checkpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkMeta {
    pub seed: u64,
    pub trained_epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    k: usize,
    pub meta: NetworkMeta,
}

/// Gradient for the batch-norm scale and shift parameters, flattened in the
/// order of [`Network::bn_affine_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub Vec<f64>);

impl GradientSet {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
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

#[derive(Debug, Clone)]
struct BnCache {
    x_hat: Matrix,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Everything backward needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: BnMode,
    /// `activations[0]` is the input, `activations[i + 1]` the output of layer `i`.
    activations: Vec<Matrix>,
    bn: Vec<Option<BnCache>>,
    signature: Vec<(bool, usize, usize)>,
}

impl ForwardCache {
    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].rows()
    }

    pub fn logits(&self) -> &Matrix {
        self.activations.last().expect("cache holds at least the input")
    }

    /// Activations entering the final dense layer.
    pub fn penultimate(&self) -> &Matrix {
        &self.activations[self.activations.len() - 2]
    }

    pub fn into_penultimate(mut self) -> Matrix {
        let i = self.activations.len() - 2;
        self.activations.swap_remove(i)
    }
}

fn layer_signature(layers: &[Layer]) -> Vec<(bool, usize, usize)> {
    layers
        .iter()
        .map(|l| (matches!(l, Layer::BatchNorm(_)), l.in_dim(), l.out_dim()))
        .collect()
}

impl Network {
    /// Validates the layer chain. The final layer must be dense with `K >= 2` outputs.
    pub fn new(layers: Vec<Layer>, meta: NetworkMeta) -> Result<Self> {
        let last = match layers.last() {
            Some(Layer::Dense(d)) => d,
            Some(Layer::BatchNorm(_)) => return Err(Error::Schema("final layer must be dense".into())),
            None => return Err(Error::Schema("network has no layers".into())),
        };
        let k = last.out_dim();
        if k < 2 {
            return Err(Error::Schema(format!("network must emit at least 2 logits, has {k}")));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Schema(format!(
                    "layer {i} outputs {} features but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        for (i, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Dense(d) => {
                    if d.bias.len() != d.out_dim() {
                        return Err(Error::Schema(format!("dense layer {i}: bias length mismatch")));
                    }
                    if !d.weight.is_finite() || d.bias.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Schema(format!("dense layer {i}: non-finite parameter")));
                    }
                }
                Layer::BatchNorm(b) => {
                    let f = b.features();
                    if [b.beta.len(), b.running_mean.len(), b.running_var.len()].iter().any(|&n| n != f) {
                        return Err(Error::Schema(format!("bn layer {i}: per-feature arrays differ in length")));
                    }
                    let all = b.gamma.iter().chain(&b.beta).chain(&b.running_mean).chain(&b.running_var);
                    if all.clone().any(|v| !v.is_finite()) {
                        return Err(Error::Schema(format!("bn layer {i}: non-finite parameter")));
                    }
                    if b.running_var.iter().any(|&v| v < 0.0) {
                        return Err(Error::Schema(format!("bn layer {i}: negative running variance")));
                    }
                    if !(b.eps > 0.0 && b.eps.is_finite()) {
                        return Err(Error::Schema(format!("bn layer {i}: eps must be positive")));
                    }
                    if !(b.momentum > 0.0 && b.momentum < 1.0) {
                        return Err(Error::Schema(format!("bn layer {i}: momentum must lie in (0, 1)")));
                    }
                }
            }
        }
        Ok(Self { layers, k, meta })
    }

    /// `input -> [Dense(h) + BN + relu]* -> Dense(k)` with He-initialized
    /// weights, zero biases and identity batch norm.
    pub fn mlp<R: Rng>(input_dim: usize, hidden: &[usize], k: usize, rng: &mut R) -> Result<Self> {
        let mut layers = Vec::new();
        let mut width = input_dim;
        for &h in hidden {
            layers.push(Layer::Dense(he_dense(width, h, Activation::Identity, rng)));
            layers.push(Layer::BatchNorm(BatchNormLayer::identity(h, Activation::Relu)));
            width = h;
        }
        layers.push(Layer::Dense(he_dense(width, k, Activation::Identity, rng)));
        Self::new(layers, NetworkMeta::default())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].in_dim()
    }

    pub fn bn_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::BatchNorm(_))).count()
    }

    fn bn_layers(&self) -> impl Iterator<Item = &BatchNormLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::BatchNorm(b) => Some(b),
            Layer::Dense(_) => None,
        })
    }

    fn bn_layers_mut(&mut self) -> impl Iterator<Item = &mut BatchNormLayer> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::BatchNorm(b) => Some(b),
            Layer::Dense(_) => None,
        })
    }

    pub fn bn_param_count(&self) -> usize {
        self.bn_layers().map(|b| 2 * b.features()).sum()
    }

    /// Batch-norm scale and shift, flattened as `gamma, beta` per layer in order.
    pub fn bn_affine_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.bn_param_count());
        for b in self.bn_layers() {
            out.extend_from_slice(&b.gamma);
            out.extend_from_slice(&b.beta);
        }
        out
    }

    pub fn set_bn_affine_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.bn_param_count() {
            return Err(Error::invalid(format!(
                "expected {} affine parameters, got {}",
                self.bn_param_count(),
                params.len()
            )));
        }
        let mut rest = params;
        for b in self.bn_layers_mut() {
            let f = b.features();
            b.gamma.copy_from_slice(&rest[..f]);
            b.beta.copy_from_slice(&rest[f..2 * f]);
            rest = &rest[2 * f..];
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => d.weight.as_slice().len() + d.bias.len(),
                Layer::BatchNorm(b) => 2 * b.features(),
            })
            .sum()
    }

    /// Every trainable parameter, flattened per layer: dense `weight, bias`,
    /// batch norm `gamma, beta`.
    pub fn all_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            match l {
                Layer::Dense(d) => {
                    out.extend_from_slice(d.weight.as_slice());
                    out.extend_from_slice(&d.bias);
                }
                Layer::BatchNorm(b) => {
                    out.extend_from_slice(&b.gamma);
                    out.extend_from_slice(&b.beta);
                }
            }
        }
        out
    }

    pub fn set_all_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::invalid("parameter vector has the wrong length"));
        }
        let mut rest = params;
        let mut take = |dst: &mut [f64]| {
            let n = dst.len();
            dst.copy_from_slice(&rest[..n]);
            rest = &rest[n..];
        };
        for l in &mut self.layers {
            match l {
                Layer::Dense(d) => {
                    take(d.weight.as_mut_slice());
                    take(&mut d.bias);
                }
                Layer::BatchNorm(b) => {
                    take(&mut b.gamma);
                    take(&mut b.beta);
                }
            }
        }
        Ok(())
    }

    /// Runs the network on an `N x d` batch.
    pub fn forward(&self, batch: &Matrix, mode: BnMode) -> Result<(Matrix, ForwardCache)> {
        if batch.cols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "batch has {} columns, network expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let n = batch.rows();
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if mode.uses_batch_stats() && n < 2 {
            return Err(Error::DegenerateBatch(format!(
                "{mode:?} needs at least 2 samples for a batch variance, got {n}"
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut bn = Vec::with_capacity(self.layers.len());
        activations.push(batch.clone());
        for layer in &self.layers {
            let input = activations.last().expect("input pushed above");
            let (out, cache) = match layer {
                Layer::Dense(d) => (dense_forward(d, input), None),
                Layer::BatchNorm(b) => {
                    let (out, c) = bn_forward(b, input, mode);
                    (out, Some(c))
                }
            };
            activations.push(out);
            bn.push(cache);
        }
        let logits = activations.last().expect("at least one layer").clone();
        let cache = ForwardCache { mode, activations, bn, signature: layer_signature(&self.layers) };
        Ok((logits, cache))
    }

    /// Penultimate activations: the input of the final dense layer.
    pub fn penultimate_features(&self, batch: &Matrix, mode: BnMode) -> Result<Matrix> {
        let (_, cache) = self.forward(batch, mode)?;
        Ok(cache.into_penultimate())
    }

    /// Folds the batch statistics of a `TrainStats` forward pass into the
    /// running statistics. Other modes leave the network untouched.
    pub fn commit_running_stats(&mut self, cache: &ForwardCache) -> Result<()> {
        self.check_cache(cache)?;
        if cache.mode != BnMode::TrainStats {
            return Ok(());
        }
        for (layer, c) in self.layers.iter_mut().zip(&cache.bn) {
            if let (Layer::BatchNorm(b), Some(c)) = (layer, c) {
                let m = b.momentum;
                for j in 0..b.features() {
                    b.running_mean[j] = (1.0 - m) * b.running_mean[j] + m * c.mean[j];
                    b.running_var[j] = (1.0 - m) * b.running_var[j] + m * c.var[j];
                }
            }
        }
        Ok(())
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        if cache.signature != layer_signature(&self.layers) {
            return Err(Error::invalid("forward cache was produced by a different architecture"));
        }
        Ok(())
    }

    /// Gradient of the loss with respect to batch-norm `gamma`/`beta` only.
    ///
    /// Dense parameters receive no gradient; the chain rule still runs
    /// through dense layers to reach earlier batch-norm layers.
    pub fn backward_bn_affine(&self, cache: &ForwardCache, grad_logits: &Matrix) -> Result<GradientSet> {
        let (_, bn) = self.backward_impl(cache, grad_logits, false)?;
        Ok(bn)
    }

    /// Gradient of every trainable parameter, in the order of [`Network::all_params`].
    pub fn backward_full(&self, cache: &ForwardCache, grad_logits: &Matrix) -> Result<Vec<f64>> {
        let (dense, bn) = self.backward_impl(cache, grad_logits, true)?;
        let mut out = Vec::with_capacity(self.param_count());
        let mut dense_iter = dense.into_iter();
        let mut bn_rest = bn.as_slice();
        for l in &self.layers {
            match l {
                Layer::Dense(_) => {
                    let (dw, db) = dense_iter.next().expect("one entry per dense layer");
                    out.extend_from_slice(dw.as_slice());
                    out.extend_from_slice(&db);
                }
                Layer::BatchNorm(b) => {
                    let f = 2 * b.features();
                    out.extend_from_slice(&bn_rest[..f]);
                    bn_rest = &bn_rest[f..];
                }
            }
        }
        Ok(out)
    }

    #[allow(clippy::type_complexity)]
    fn backward_impl(
        &self,
        cache: &ForwardCache,
        grad_logits: &Matrix,
        want_dense: bool,
    ) -> Result<(Vec<(Matrix, Vec<f64>)>, GradientSet)> {
        self.check_cache(cache)?;
        let n = cache.batch_size();
        if grad_logits.shape() != (n, self.k) {
            return Err(Error::invalid(format!(
                "loss gradient has shape {:?}, expected ({n}, {})",
                grad_logits.shape(),
                self.k
            )));
        }
        // per-bn-layer (dgamma, dbeta), collected back to front
        let mut bn_grads: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        let mut dense_grads: Vec<(Matrix, Vec<f64>)> = Vec::new();
        let mut grad = grad_logits.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let output = &cache.activations[i + 1];
            let act = match layer {
                Layer::Dense(d) => d.activation,
                Layer::BatchNorm(b) => b.activation,
            };
            if act == Activation::Relu {
                for (g, &o) in grad.as_mut_slice().iter_mut().zip(output.as_slice()) {
                    if o <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let need_input_grad = i > 0;
            match layer {
                Layer::Dense(d) => {
                    let input = &cache.activations[i];
                    if want_dense {
                        dense_grads.push(dense_param_grads(&grad, input));
                    }
                    if need_input_grad {
                        grad = dense_input_grad(d, &grad);
                    }
                }
                Layer::BatchNorm(b) => {
                    let c = cache.bn[i].as_ref().expect("bn layers carry a cache");
                    let (dgamma, dbeta, dx) =
                        bn_backward(b, c, &grad, cache.mode.uses_batch_stats(), need_input_grad);
                    bn_grads.push((dgamma, dbeta));
                    if let Some(dx) = dx {
                        grad = dx;
                    }
                }
            }
        }
        bn_grads.reverse();
        dense_grads.reverse();
        let mut flat = Vec::with_capacity(self.bn_param_count());
        for (g, b) in bn_grads {
            flat.extend(g);
            flat.extend(b);
        }
        Ok((dense_grads, GradientSet(flat)))
    }
}

fn he_dense<R: Rng>(input: usize, output: usize, activation: Activation, rng: &mut R) -> DenseLayer {
    let std = (2.0 / input as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..input * output).map(|_| normal.sample(rng)).collect();
    DenseLayer { weight: Matrix::from_raw(output, input, data), bias: vec![0.0; output], activation }
}

fn dense_forward(d: &DenseLayer, x: &Matrix) -> Matrix {
    let (n, din) = x.shape();
    let dout = d.out_dim();
    let mut out = Vec::with_capacity(n * dout);
    for row in x.iter_rows() {
        for o in 0..dout {
            let w = &d.weight.as_slice()[o * din..(o + 1) * din];
            let s: f64 = w.iter().zip(row).map(|(a, b)| a * b).sum();
            out.push(d.activation.apply(s + d.bias[o]));
        }
    }
    Matrix::from_raw(n, dout, out)
}

fn dense_param_grads(grad: &Matrix, input: &Matrix) -> (Matrix, Vec<f64>) {
    let (n, dout) = grad.shape();
    let din = input.cols();
    let mut dw = vec![0.0; dout * din];
    let mut db = vec![0.0; dout];
    for s in 0..n {
        let g = grad.row(s);
        let x = input.row(s);
        for o in 0..dout {
            db[o] += g[o];
            let row = &mut dw[o * din..(o + 1) * din];
            for (w, &xi) in row.iter_mut().zip(x) {
                *w += g[o] * xi;
            }
        }
    }
    (Matrix::from_raw(dout, din, dw), db)
}

fn dense_input_grad(d: &DenseLayer, grad: &Matrix) -> Matrix {
    let n = grad.rows();
    let (dout, din) = d.weight.shape();
    let mut dx = vec![0.0; n * din];
    for s in 0..n {
        let g = grad.row(s);
        let out = &mut dx[s * din..(s + 1) * din];
        for o in 0..dout {
            let w = &d.weight.as_slice()[o * din..(o + 1) * din];
            for (v, &wi) in out.iter_mut().zip(w) {
                *v += g[o] * wi;
            }
        }
    }
    Matrix::from_raw(n, din, dx)
}

fn bn_forward(b: &BatchNormLayer, x: &Matrix, mode: BnMode) -> (Matrix, BnCache) {
    let (n, f) = x.shape();
    let (mean, var) = if mode.uses_batch_stats() {
        let mut mean = vec![0.0; f];
        for row in x.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; f];
        for row in x.iter_rows() {
            for j in 0..f {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        (mean, var)
    } else {
        (b.running_mean.clone(), b.running_var.clone())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + b.eps).sqrt()).collect();
    let mut x_hat = Vec::with_capacity(n * f);
    let mut out = Vec::with_capacity(n * f);
    for row in x.iter_rows() {
        for j in 0..f {
            let h = (row[j] - mean[j]) * inv_std[j];
            x_hat.push(h);
            out.push(b.activation.apply(b.gamma[j] * h + b.beta[j]));
        }
    }
    let cache = BnCache { x_hat: Matrix::from_raw(n, f, x_hat), inv_std, mean, var };
    (Matrix::from_raw(n, f, out), cache)
}

#[allow(clippy::type_complexity)]
fn bn_backward(
    b: &BatchNormLayer,
    c: &BnCache,
    grad: &Matrix,
    batch_stats: bool,
    need_input_grad: bool,
) -> (Vec<f64>, Vec<f64>, Option<Matrix>) {
    let (n, f) = grad.shape();
    let mut dgamma = vec![0.0; f];
    let mut dbeta = vec![0.0; f];
    for s in 0..n {
        let g = grad.row(s);
        let h = c.x_hat.row(s);
        for j in 0..f {
            dgamma[j] += g[j] * h[j];
            dbeta[j] += g[j];
        }
    }
    if !need_input_grad {
        return (dgamma, dbeta, None);
    }
    let mut dx = vec![0.0; n * f];
    if batch_stats {
        // dx = inv_std / N * (N dxh - sum(dxh) - x_hat * sum(dxh * x_hat)), dxh = g * gamma
        let nf = n as f64;
        for j in 0..f {
            let sum_dxh = dbeta[j] * b.gamma[j];
            let sum_dxh_xh = dgamma[j] * b.gamma[j];
            let scale = c.inv_std[j] / nf;
            for s in 0..n {
                let dxh = grad.get(s, j) * b.gamma[j];
                dx[s * f + j] = scale * (nf * dxh - sum_dxh - c.x_hat.get(s, j) * sum_dxh_xh);
            }
        }
    } else {
        for s in 0..n {
            for j in 0..f {
                dx[s * f + j] = grad.get(s, j) * b.gamma[j] * c.inv_std[j];
            }
        }
    }
    (dgamma, dbeta, Some(Matrix::from_raw(n, f, dx)))
}
