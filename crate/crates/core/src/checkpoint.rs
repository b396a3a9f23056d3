//! Portable JSON checkpoints.
//!
//! Every real number is written in scientific notation with 17 significant
//! digits, which round-trips any `f64` exactly. Layout:
//!
//! ```text
//! {"k": 3,
//!  "layers": [{"kind": "dense", "shape": [out, in], "weight": [...], "bias": [...], "activation": "identity"},
//!             {"kind": "bn", "shape": [f], "gamma": [...], "beta": [...], "running_mean": [...],
//!              "running_var": [...], "eps": 1e-8, "momentum": 0.1, "activation": "relu"}],
//!  "meta": {"seed": 7, "trained_epochs": 20}}
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::network::{Activation, BatchNormLayer, DenseLayer, Layer, Network, NetworkMeta};
use crate::numeric::Matrix;

fn real(v: f64) -> Box<RawValue> {
    RawValue::from_string(format!("{v:.16e}")).expect("scientific notation is valid JSON")
}

fn reals(v: &[f64]) -> Vec<Box<RawValue>> {
    v.iter().map(|&x| real(x)).collect()
}

#[derive(Serialize)]
struct CheckpointOut {
    k: usize,
    layers: Vec<LayerOut>,
    meta: NetworkMeta,
}

#[derive(Serialize)]
struct LayerOut {
    kind: &'static str,
    shape: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weight: Option<Vec<Box<RawValue>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bias: Option<Vec<Box<RawValue>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma: Option<Vec<Box<RawValue>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<Vec<Box<RawValue>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    running_mean: Option<Vec<Box<RawValue>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    running_var: Option<Vec<Box<RawValue>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eps: Option<Box<RawValue>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    momentum: Option<Box<RawValue>>,
    activation: Activation,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointIn {
    k: usize,
    layers: Vec<LayerIn>,
    meta: NetworkMeta,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerIn {
    kind: String,
    shape: Vec<usize>,
    weight: Option<Vec<f64>>,
    bias: Option<Vec<f64>>,
    gamma: Option<Vec<f64>>,
    beta: Option<Vec<f64>>,
    running_mean: Option<Vec<f64>>,
    running_var: Option<Vec<f64>>,
    eps: Option<f64>,
    momentum: Option<f64>,
    activation: Activation,
}

/// Serializes a network to the checkpoint JSON document.
pub fn to_json(net: &Network) -> String {
    let layers = net
        .layers()
        .iter()
        .map(|l| match l {
            Layer::Dense(d) => LayerOut {
                kind: "dense",
                shape: vec![d.out_dim(), d.in_dim()],
                weight: Some(reals(d.weight.as_slice())),
                bias: Some(reals(&d.bias)),
                gamma: None,
                beta: None,
                running_mean: None,
                running_var: None,
                eps: None,
                momentum: None,
                activation: d.activation,
            },
            Layer::BatchNorm(b) => LayerOut {
                kind: "bn",
                shape: vec![b.features()],
                weight: None,
                bias: None,
                gamma: Some(reals(&b.gamma)),
                beta: Some(reals(&b.beta)),
                running_mean: Some(reals(&b.running_mean)),
                running_var: Some(reals(&b.running_var)),
                eps: Some(real(b.eps)),
                momentum: Some(real(b.momentum)),
                activation: b.activation,
            },
        })
        .collect();
    let doc = CheckpointOut { k: net.k(), layers, meta: net.meta };
    let mut s = serde_json::to_string(&doc).expect("checkpoint serialization cannot fail");
    s.push('\n');
    s
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let before: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (before + column.saturating_sub(1)).min(text.len())
}

fn field<T>(v: Option<T>, layer: usize, name: &str) -> Result<T> {
    v.ok_or_else(|| Error::Schema(format!("layer {layer}: missing field `{name}`")))
}

fn check_len(v: &[f64], want: usize, layer: usize, name: &str) -> Result<()> {
    if v.len() != want {
        return Err(Error::Schema(format!(
            "layer {layer}: `{name}` has {} values, shape requires {want}",
            v.len()
        )));
    }
    Ok(())
}

/// Parses a checkpoint document.
pub fn from_json(text: &str) -> Result<Network> {
    let doc: CheckpointIn = serde_json::from_str(text).map_err(|e| {
        use serde_json::error::Category;
        match e.classify() {
            Category::Data => Error::Schema(e.to_string()),
            Category::Eof => Error::Parse { offset: text.len(), message: e.to_string() },
            _ => Error::Parse { offset: byte_offset(text, e.line(), e.column()), message: e.to_string() },
        }
    })?;
    let mut layers = Vec::with_capacity(doc.layers.len());
    for (i, l) in doc.layers.into_iter().enumerate() {
        let layer = match l.kind.as_str() {
            "dense" => {
                let &[out, inp] = l.shape.as_slice() else {
                    return Err(Error::Schema(format!("layer {i}: dense shape must be [out, in]")));
                };
                let weight = field(l.weight, i, "weight")?;
                let bias = field(l.bias, i, "bias")?;
                check_len(&weight, out * inp, i, "weight")?;
                check_len(&bias, out, i, "bias")?;
                let weight = Matrix::new(out, inp, weight).map_err(|e| Error::Schema(format!("layer {i}: {e}")))?;
                Layer::Dense(DenseLayer { weight, bias, activation: l.activation })
            }
            "bn" => {
                let &[f] = l.shape.as_slice() else {
                    return Err(Error::Schema(format!("layer {i}: bn shape must be [features]")));
                };
                let b = BatchNormLayer {
                    gamma: field(l.gamma, i, "gamma")?,
                    beta: field(l.beta, i, "beta")?,
                    running_mean: field(l.running_mean, i, "running_mean")?,
                    running_var: field(l.running_var, i, "running_var")?,
                    eps: field(l.eps, i, "eps")?,
                    momentum: field(l.momentum, i, "momentum")?,
                    activation: l.activation,
                };
                check_len(&b.gamma, f, i, "gamma")?;
                check_len(&b.beta, f, i, "beta")?;
                check_len(&b.running_mean, f, i, "running_mean")?;
                check_len(&b.running_var, f, i, "running_var")?;
                Layer::BatchNorm(b)
            }
            other => return Err(Error::Schema(format!("layer {i}: unknown kind `{other}`"))),
        };
        layers.push(layer);
    }
    let net = Network::new(layers, doc.meta)?;
    if net.k() != doc.k {
        return Err(Error::Schema(format!("`k` is {} but the final layer emits {} logits", doc.k, net.k())));
    }
    Ok(net)
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_json(net))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    from_json(&fs::read_to_string(path)?)
}

/// Loads a checkpoint and checks that it classifies into `k` classes.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, k: usize) -> Result<Network> {
    let net = load_checkpoint(path)?;
    if net.k() != k {
        return Err(Error::Schema(format!("checkpoint has K = {}, expected K = {k}", net.k())));
    }
    Ok(net)
}
