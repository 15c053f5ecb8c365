//! Networks, whole-network quantization and classification metrics.
//!
//! Layers are quantized in forward order. Each quantized layer sees the
//! activations produced by the already-quantized prefix as its inputs and the
//! original network's response as its target, so later layers can compensate
//! for errors introduced earlier.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ec::{conv_response_objective, fc_response_objective};
use crate::ec::{quantize_conv_ec, quantize_fc_ec, ConvCalibrationSet, FcCalibrationSet};
use crate::error::{config_err, dim_err, QcnnError, Result};
use crate::inference::{qconv_forward, qfc_forward};
use crate::io::Dataset;
use crate::quant::{
    quantize_conv_naive, quantize_fc_naive, QuantizationConfig, QuantizedConvLayer,
    QuantizedFcLayer,
};
use crate::tensor::{
    conv_forward, conv_geometry, fc_forward, maxpool_forward, Activation, ConvLayerSpec,
    DenseTensor, FcLayerSpec, PoolSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerKind {
    Fc(FcLayerSpec),
    Conv(ConvLayerSpec),
    MaxPool(PoolSpec),
    Flatten,
}

impl LayerKind {
    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerKind::Fc(_) | LayerKind::Conv(_))
    }

    pub fn activation(&self) -> Activation {
        match self {
            LayerKind::Fc(s) => s.activation,
            LayerKind::Conv(s) => s.activation,
            _ => Activation::None,
        }
    }

    /// Input channels seen by one quantizer: `C_s`, or `C_s / groups` for conv.
    pub fn quantized_input_dim(&self) -> Option<usize> {
        match self {
            LayerKind::Fc(s) => Some(s.input_dim),
            LayerKind::Conv(s) => Some(s.in_channels / s.groups.max(1)),
            _ => None,
        }
    }

    /// Output shape for an input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerKind::Fc(s) => {
                s.validate()?;
                if input != [s.input_dim] {
                    return dim_err(format!(
                        "fc layer expects input [{}], got {input:?}",
                        s.input_dim
                    ));
                }
                Ok(vec![s.output_dim])
            }
            LayerKind::Conv(s) => {
                let (_, _, oh, ow) = conv_geometry(s, input)?;
                Ok(vec![oh, ow, s.out_channels])
            }
            LayerKind::MaxPool(p) => match input {
                &[h, w, c] => Ok(vec![p.output_extent(h)?, p.output_extent(w)?, c]),
                other => dim_err(format!(
                    "max pooling needs a [h, w, c] input, got {other:?}"
                )),
            },
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

/// Architecture only: layer order, geometry and activations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    #[serde(default)]
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self =
            toml::from_str(text).map_err(|e| QcnnError::Format(format!("network spec: {e}")))?;
        spec.shapes()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Input shape of every layer followed by the network output shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return config_err("network input shape must be non-empty and positive");
        }
        let mut names = std::collections::HashSet::new();
        let mut shapes = vec![self.input_shape.clone()];
        for layer in &self.layers {
            if !names.insert(layer.name.as_str()) {
                return config_err(format!("duplicate layer name `{}`", layer.name));
            }
            let next = layer
                .kind
                .output_shape(shapes.last().unwrap())
                .map_err(|e| e.in_layer(&layer.name))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }
}

/// Parameters attached to a layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    None,
    Dense {
        weights: DenseTensor,
        bias: Option<DenseTensor>,
    },
    QuantizedFc(QuantizedFcLayer),
    QuantizedConv(QuantizedConvLayer),
}

impl LayerParams {
    pub fn is_quantized(&self) -> bool {
        matches!(
            self,
            LayerParams::QuantizedFc(_) | LayerParams::QuantizedConv(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: LayerParams,
}

impl Layer {
    pub fn name(&self) -> &str {
        &self.spec.name
    }

    /// Output after bias and activation.
    pub fn forward(&self, input: &DenseTensor) -> Result<DenseTensor> {
        let mut out = self.forward_linear(input)?;
        self.spec.kind.activation().apply(&mut out);
        Ok(out)
    }

    /// Output after bias, before activation.
    pub fn forward_linear(&self, input: &DenseTensor) -> Result<DenseTensor> {
        match (&self.spec.kind, &self.params) {
            (LayerKind::Fc(_), LayerParams::Dense { weights, bias }) => {
                fc_forward(weights, bias.as_ref(), input)
            }
            (LayerKind::Fc(_), LayerParams::QuantizedFc(q)) => qfc_forward(q, input),
            (LayerKind::Conv(s), LayerParams::Dense { weights, bias }) => {
                conv_forward(weights, bias.as_ref(), input, s)
            }
            (LayerKind::Conv(_), LayerParams::QuantizedConv(q)) => qconv_forward(q, input),
            (LayerKind::MaxPool(p), LayerParams::None) => maxpool_forward(input, p),
            (LayerKind::Flatten, LayerParams::None) => input.clone().reshape(vec![input.len()]),
            _ => config_err(format!(
                "layer `{}` has parameters of the wrong kind",
                self.name()
            )),
        }
    }

    fn check(&self) -> Result<()> {
        let name = self.name();
        let bad = |msg: String| config_err(format!("layer `{name}`: {msg}"));
        match (&self.spec.kind, &self.params) {
            (LayerKind::Fc(s), LayerParams::Dense { weights, bias }) => {
                if weights.shape() != [s.output_dim, s.input_dim] {
                    return bad(format!(
                        "weights {:?} do not match [{}, {}]",
                        weights.shape(),
                        s.output_dim,
                        s.input_dim
                    ));
                }
                check_bias(name, s.has_bias, bias.as_ref(), s.output_dim)
            }
            (LayerKind::Fc(s), LayerParams::QuantizedFc(q)) => {
                if (q.input_dim(), q.output_dim()) != (s.input_dim, s.output_dim) {
                    return bad("quantized layer dims differ from spec".into());
                }
                check_bias(name, s.has_bias, q.bias(), s.output_dim)
            }
            (LayerKind::Conv(s), LayerParams::Dense { weights, bias }) => {
                s.validate()?;
                if weights.shape() != s.kernel_shape().as_slice() {
                    return bad(format!(
                        "kernels {:?} do not match {:?}",
                        weights.shape(),
                        s.kernel_shape()
                    ));
                }
                check_bias(name, s.has_bias, bias.as_ref(), s.out_channels)
            }
            (LayerKind::Conv(s), LayerParams::QuantizedConv(q)) => {
                if q.spec() != s {
                    return bad("quantized layer spec differs from network spec".into());
                }
                check_bias(name, s.has_bias, q.bias(), s.out_channels)
            }
            (LayerKind::MaxPool(_) | LayerKind::Flatten, LayerParams::None) => Ok(()),
            _ => bad("parameters of the wrong kind".into()),
        }
    }
}

fn check_bias(name: &str, has_bias: bool, bias: Option<&DenseTensor>, n: usize) -> Result<()> {
    match (has_bias, bias) {
        (true, Some(b)) if b.len() == n => Ok(()),
        (false, None) => Ok(()),
        (true, Some(b)) => config_err(format!(
            "layer `{name}`: bias has {} values, expected {n}",
            b.len()
        )),
        (true, None) => config_err(format!("layer `{name}`: spec requires a bias")),
        (false, Some(_)) => config_err(format!("layer `{name}`: spec has no bias")),
    }
}

/// A network whose parametric layers are dense or quantized.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    name: String,
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(spec: NetworkSpec, params: Vec<LayerParams>) -> Result<Self> {
        spec.shapes()?;
        if params.len() != spec.layers.len() {
            return config_err(format!(
                "{} layers but {} parameter sets",
                spec.layers.len(),
                params.len()
            ));
        }
        let layers: Vec<Layer> = spec
            .layers
            .into_iter()
            .zip(params)
            .map(|(spec, params)| Layer { spec, params })
            .collect();
        for l in &layers {
            l.check()?;
        }
        Ok(Self {
            input_shape: spec.input_shape,
            name: spec.name,
            layers,
        })
    }

    /// He-normal weights and zero biases, deterministic in `seed`.
    pub fn random(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .layers
            .iter()
            .map(|l| match &l.kind {
                LayerKind::Fc(s) => LayerParams::Dense {
                    weights: DenseTensor::random_normal(
                        vec![s.output_dim, s.input_dim],
                        (2.0 / s.input_dim as f32).sqrt(),
                        &mut rng,
                    ),
                    bias: s.has_bias.then(|| DenseTensor::zeros(vec![s.output_dim])),
                },
                LayerKind::Conv(s) => {
                    let fan_in = s.kernel_size * s.kernel_size * s.in_channels / s.groups.max(1);
                    LayerParams::Dense {
                        weights: DenseTensor::random_normal(
                            s.kernel_shape(),
                            (2.0 / fan_in as f32).sqrt(),
                            &mut rng,
                        ),
                        bias: s.has_bias.then(|| DenseTensor::zeros(vec![s.out_channels])),
                    }
                }
                _ => LayerParams::None,
            })
            .collect();
        Self::new(spec, params)
    }

    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec {
            name: self.name.clone(),
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(|l| l.spec.clone()).collect(),
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name() == name)
    }

    fn check_input(&self, input: &DenseTensor) -> Result<()> {
        if input.shape() != self.input_shape.as_slice() {
            return dim_err(format!(
                "network expects input {:?}, got {:?}",
                self.input_shape,
                input.shape()
            ));
        }
        Ok(())
    }

    pub fn forward(&self, input: &DenseTensor) -> Result<DenseTensor> {
        self.forward_prefix(input, self.layers.len())
    }

    /// Output of the first `upto` layers, activations included.
    pub fn forward_prefix(&self, input: &DenseTensor, upto: usize) -> Result<DenseTensor> {
        self.check_input(input)?;
        let mut x = input.clone();
        for l in &self.layers[..upto.min(self.layers.len())] {
            x = l.forward(&x)?;
        }
        Ok(x)
    }

    /// Class scores: the full forward pass without a trailing softmax.
    pub fn logits(&self, input: &DenseTensor) -> Result<DenseTensor> {
        let Some(last) = self.layers.last() else {
            return self.forward(input);
        };
        let n = self.layers.len();
        let x = self.forward_prefix(input, n - 1)?;
        let mut out = last.forward_linear(&x)?;
        if last.spec.kind.activation() != Activation::Softmax {
            last.spec.kind.activation().apply(&mut out);
        }
        Ok(out)
    }
}

/// Per-layer quantization settings, keyed by layer name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuantizationPlan {
    entries: Vec<(String, QuantizationConfig)>,
}

impl QuantizationPlan {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces the config of one layer.
    pub fn set(&mut self, layer: impl Into<String>, cfg: QuantizationConfig) -> &mut Self {
        let layer = layer.into();
        match self.entries.iter_mut().find(|(n, _)| *n == layer) {
            Some(e) => e.1 = cfg,
            None => self.entries.push((layer, cfg)),
        }
        self
    }

    pub fn with(mut self, layer: impl Into<String>, cfg: QuantizationConfig) -> Self {
        self.set(layer, cfg);
        self
    }

    pub fn get(&self, layer: &str) -> Option<&QuantizationConfig> {
        self.entries
            .iter()
            .find(|(n, _)| n == layer)
            .map(|(_, c)| c)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &QuantizationConfig)> {
        self.entries.iter().map(|(n, c)| (n.as_str(), c))
    }

    /// Settings that reproduce the quantized layers of `net` (k-means and EC
    /// parameters are not recorded in a network and take their defaults).
    pub fn from_network(net: &Network) -> Self {
        let mut plan = Self::new();
        for l in net.layers() {
            let dk = match &l.params {
                LayerParams::QuantizedFc(q) => Some((q.subspace_dim(), q.codewords())),
                LayerParams::QuantizedConv(q) => Some((q.subspace_dim(), q.codewords())),
                _ => None,
            };
            if let Some((d, k)) = dk {
                plan.set(l.name(), QuantizationConfig::new(d, k));
            }
        }
        plan
    }

    /// Parses `layer=C'_s/K[,ec|,naive]` items separated by commas.
    ///
    /// A layer name ending in `*` matches every parametric layer with that
    /// prefix. `ec` / `naive` apply to the layers of the preceding item; later
    /// items override earlier ones. Other settings come from `base`.
    pub fn parse(text: &str, spec: &NetworkSpec, base: &QuantizationConfig) -> Result<Self> {
        let mut plan = Self::new();
        let mut last: Vec<String> = Vec::new();
        for token in text.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            if token == "ec" || token == "naive" {
                if last.is_empty() {
                    return config_err(format!("`{token}` must follow a layer=C'_s/K item"));
                }
                for name in &last {
                    let cfg = plan.get(name).copied().expect("set by the previous item");
                    plan.set(name.clone(), cfg.with_error_correction(token == "ec"));
                }
                continue;
            }
            let Some((pattern, params)) = token.split_once('=') else {
                return config_err(format!(
                    "cannot parse override `{token}`; expected layer=C'_s/K"
                ));
            };
            let (d, k) = params
                .split_once('/')
                .and_then(|(d, k)| {
                    Some((
                        d.trim().parse::<usize>().ok()?,
                        k.trim().parse::<usize>().ok()?,
                    ))
                })
                .ok_or_else(|| QcnnError::Config(format!("cannot parse `{params}` as C'_s/K")))?;
            let pattern = pattern.trim();
            let targets: Vec<&LayerSpec> = match pattern.strip_suffix('*') {
                Some(prefix) => spec
                    .layers
                    .iter()
                    .filter(|l| l.kind.is_parametric() && l.name.starts_with(prefix))
                    .collect(),
                None => spec.layers.iter().filter(|l| l.name == pattern).collect(),
            };
            if targets.is_empty() {
                return config_err(format!("override `{pattern}` matches no layer"));
            }
            last.clear();
            for l in targets {
                if !l.kind.is_parametric() {
                    return config_err(format!("layer `{}` has no weights to quantize", l.name));
                }
                let cfg = QuantizationConfig {
                    subspace_dim: d,
                    codewords: k,
                    ..*base
                };
                plan.set(l.name.clone(), cfg);
                last.push(l.name.clone());
            }
        }
        plan.validate(spec)?;
        Ok(plan)
    }

    /// Every entry names a parametric layer whose input splits into whole subspaces.
    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        for (name, cfg) in &self.entries {
            let Some(layer) = spec.layers.iter().find(|l| &l.name == name) else {
                return config_err(format!("override references unknown layer `{name}`"));
            };
            let Some(cs) = layer.kind.quantized_input_dim() else {
                return config_err(format!("layer `{name}` has no weights to quantize"));
            };
            cfg.validate()
                .and_then(|_| cfg.num_subspaces(cs))
                .map_err(|e| e.in_layer(name))?;
        }
        Ok(())
    }
}

/// Where a layer's calibration inputs come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CalibrationInputs {
    /// Outputs of the already-quantized prefix.
    #[default]
    QuantizedPrefix,
    /// Outputs of the original network's prefix.
    Original,
}

/// What happened to one quantized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerQuantization {
    pub index: usize,
    pub name: String,
    pub config: QuantizationConfig,
    /// Response objective after initialisation and after every subspace
    /// visit (error correction), or just the final objective (naive).
    pub objective_history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct QuantizedNetwork {
    pub network: Network,
    pub layers: Vec<LayerQuantization>,
}

pub fn quantize_network(
    net: &Network,
    calib: &[DenseTensor],
    plan: &QuantizationPlan,
) -> Result<QuantizedNetwork> {
    quantize_network_with(
        net,
        calib,
        plan,
        CalibrationInputs::QuantizedPrefix,
        |_, _| {},
    )
}

/// [`quantize_network`] with a choice of input source and a hook that sees
/// the calibration inputs handed to each quantized layer.
pub fn quantize_network_with(
    net: &Network,
    calib: &[DenseTensor],
    plan: &QuantizationPlan,
    source: CalibrationInputs,
    mut hook: impl FnMut(usize, &[DenseTensor]),
) -> Result<QuantizedNetwork> {
    if calib.is_empty() {
        return Err(QcnnError::EmptyDataset);
    }
    for x in calib {
        net.check_input(x)?;
    }
    plan.validate(&net.spec())?;

    let mut out = net.clone();
    let mut quant_acts: Vec<DenseTensor> = calib.to_vec();
    let mut orig_acts: Vec<DenseTensor> = calib.to_vec();
    let mut reports = Vec::new();

    for (idx, layer) in net.layers.iter().enumerate() {
        if let Some(cfg) = plan.get(layer.name()) {
            let LayerParams::Dense { weights, bias } = &layer.params else {
                return config_err(format!("layer `{}` is already quantized", layer.name()));
            };
            let inputs = match source {
                CalibrationInputs::QuantizedPrefix => &quant_acts,
                CalibrationInputs::Original => &orig_acts,
            };
            hook(idx, inputs);
            let targets: Vec<DenseTensor> = orig_acts
                .par_iter()
                .map(|x| match &layer.spec.kind {
                    LayerKind::Fc(_) => fc_forward(weights, None, x),
                    LayerKind::Conv(s) => conv_forward(weights, None, x, s),
                    _ => unreachable!("plan only names parametric layers"),
                })
                .collect::<Result<_>>()?;
            log::info!(
                "quantizing `{}` with C'_s={} K={} ec={}",
                layer.name(),
                cfg.subspace_dim,
                cfg.codewords,
                cfg.error_correction
            );
            let (params, history) =
                quantize_one(layer, weights, bias.as_ref(), inputs, &targets, cfg)
                    .map_err(|e| e.in_layer(layer.name()))?;
            out.layers[idx].params = params;
            reports.push(LayerQuantization {
                index: idx,
                name: layer.name().to_string(),
                config: *cfg,
                objective_history: history,
            });
        }
        let new_layer = &out.layers[idx];
        quant_acts = quant_acts
            .par_iter()
            .map(|x| new_layer.forward(x))
            .collect::<Result<_>>()?;
        orig_acts = orig_acts
            .par_iter()
            .map(|x| layer.forward(x))
            .collect::<Result<_>>()?;
    }
    Ok(QuantizedNetwork {
        network: out,
        layers: reports,
    })
}

fn quantize_one(
    layer: &Layer,
    weights: &DenseTensor,
    bias: Option<&DenseTensor>,
    inputs: &[DenseTensor],
    targets: &[DenseTensor],
    cfg: &QuantizationConfig,
) -> Result<(LayerParams, Vec<f64>)> {
    let flat = |ts: &[DenseTensor]| {
        ts.iter()
            .flat_map(|t| t.data().iter().copied())
            .collect::<Vec<f32>>()
    };
    match &layer.spec.kind {
        LayerKind::Fc(s) => {
            let set =
                FcCalibrationSet::new(s.input_dim, s.output_dim, flat(inputs), flat(targets))?;
            if cfg.error_correction {
                let r = quantize_fc_ec(weights, bias, &set, cfg)?;
                Ok((LayerParams::QuantizedFc(r.layer), r.history))
            } else {
                let q = quantize_fc_naive(weights, bias, cfg)?.layer;
                let obj = fc_response_objective(&q, &set)?;
                Ok((LayerParams::QuantizedFc(q), vec![obj]))
            }
        }
        LayerKind::Conv(s) => {
            let to3 = |sh: &[usize]| [sh[0], sh[1], sh[2]];
            let set = ConvCalibrationSet::new(
                to3(inputs[0].shape()),
                to3(targets[0].shape()),
                flat(inputs),
                flat(targets),
            )?;
            if cfg.error_correction {
                let r = quantize_conv_ec(weights, bias, s, &set, cfg)?;
                Ok((LayerParams::QuantizedConv(r.layer), r.history))
            } else {
                let q = quantize_conv_naive(weights, bias, s, cfg)?.layer;
                let obj = conv_response_objective(&q, &set)?;
                Ok((LayerParams::QuantizedConv(q), vec![obj]))
            }
        }
        _ => unreachable!("plan only names parametric layers"),
    }
}

/// Top-k error rates over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub samples: usize,
    /// `(k, error rate)` for each requested `k`.
    pub errors: Vec<(usize, f64)>,
}

impl EvalMetrics {
    pub fn error_at(&self, k: usize) -> Option<f64> {
        self.errors.iter().find(|(kk, _)| *kk == k).map(|(_, e)| *e)
    }

    pub fn top1_error(&self) -> Option<f64> {
        self.error_at(1)
    }

    pub fn top5_error(&self) -> Option<f64> {
        self.error_at(5)
    }
}

/// Rank of the true class among the scores; ties favour the lower class index.
pub fn label_rank(scores: &[f32], label: usize) -> usize {
    let s = scores[label];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < label))
        .count()
}

/// Top-k errors from precomputed class scores.
pub fn top_k_errors(scores: &[Vec<f32>], labels: &[usize], top_k: &[usize]) -> Result<EvalMetrics> {
    if scores.is_empty() {
        return Err(QcnnError::EmptyDataset);
    }
    if scores.len() != labels.len() {
        return dim_err(format!(
            "{} score rows for {} labels",
            scores.len(),
            labels.len()
        ));
    }
    let mut ranks = Vec::with_capacity(labels.len());
    for (row, &y) in scores.iter().zip(labels) {
        if y >= row.len() {
            return dim_err(format!("label {y} out of range for {} classes", row.len()));
        }
        ranks.push(label_rank(row, y));
    }
    let n = ranks.len();
    let errors = top_k
        .iter()
        .map(|&k| {
            (
                k,
                ranks.iter().filter(|&&r| r >= k).count() as f64 / n as f64,
            )
        })
        .collect();
    Ok(EvalMetrics { samples: n, errors })
}

pub fn evaluate(net: &Network, data: &Dataset, top_k: &[usize]) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(QcnnError::EmptyDataset);
    }
    let scores: Vec<Vec<f32>> = (0..data.len())
        .into_par_iter()
        .map(|i| net.logits(&data.tensor(i)).map(DenseTensor::into_data))
        .collect::<Result<_>>()?;
    top_k_errors(&scores, data.labels(), top_k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp_spec(dims: &[usize]) -> NetworkSpec {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec {
                name: format!("fc{}", i + 1),
                kind: LayerKind::Fc(FcLayerSpec {
                    input_dim: w[0],
                    output_dim: w[1],
                    has_bias: true,
                    activation: if i + 2 == dims.len() {
                        Activation::Softmax
                    } else {
                        Activation::Relu
                    },
                }),
            })
            .collect();
        NetworkSpec {
            name: "mlp".into(),
            input_shape: vec![dims[0]],
            layers,
        }
    }

    #[test]
    fn toml_round_trip_and_shapes() {
        let text = r#"
            name = "tiny"
            input_shape = [8, 8, 3]
            [[layers]]
            name = "conv1"
            type = "conv"
            in_channels = 3
            out_channels = 4
            kernel_size = 3
            padding = 1
            activation = "relu"
            [[layers]]
            name = "pool1"
            type = "maxpool"
            size = 2
            stride = 2
            [[layers]]
            name = "flat"
            type = "flatten"
            [[layers]]
            name = "fc1"
            type = "fc"
            input_dim = 64
            output_dim = 10
            activation = "softmax"
        "#;
        let spec = NetworkSpec::from_toml_str(text).unwrap();
        let shapes = spec.shapes().unwrap();
        assert_eq!(shapes[1], vec![8, 8, 4]);
        assert_eq!(shapes[2], vec![4, 4, 4]);
        assert_eq!(shapes.last().unwrap(), &vec![10]);
        let back: NetworkSpec = toml::from_str(&toml::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn incompatible_dims_are_rejected() {
        let mut spec = mlp_spec(&[4, 3, 2]);
        if let LayerKind::Fc(s) = &mut spec.layers[1].kind {
            s.input_dim = 5;
        }
        match spec.shapes() {
            Err(QcnnError::Dimension(m)) => assert!(m.contains("fc2"), "{m}"),
            other => panic!("expected a dimension error, got {other:?}"),
        }
    }

    #[test]
    fn plan_parsing() {
        let spec = mlp_spec(&[8, 6, 4]);
        let base = QuantizationConfig::new(1, 1).with_seed(9);
        let plan = QuantizationPlan::parse("fc*=2/4, fc1=4/2,ec", &spec, &base).unwrap();
        let fc1 = plan.get("fc1").unwrap();
        assert_eq!(
            (
                fc1.subspace_dim,
                fc1.codewords,
                fc1.error_correction,
                fc1.seed
            ),
            (4, 2, true, 9)
        );
        let fc2 = plan.get("fc2").unwrap();
        assert_eq!(
            (fc2.subspace_dim, fc2.codewords, fc2.error_correction),
            (2, 4, false)
        );

        assert!(QuantizationPlan::parse("fc3=2/4", &spec, &base).is_err());
        assert!(QuantizationPlan::parse("ec", &spec, &base).is_err());
        assert!(QuantizationPlan::parse("fc1=2x4", &spec, &base).is_err());
        let err = QuantizationPlan::parse("fc1=3/4", &spec, &base)
            .unwrap_err()
            .to_string();
        assert!(err.contains("fc1"), "{err}");
    }

    #[test]
    fn logits_skip_final_softmax() {
        let net = Network::random(mlp_spec(&[5, 4, 3]), 1).unwrap();
        let x = DenseTensor::new(vec![5], vec![0.3, -0.2, 1.0, 0.5, -1.0]).unwrap();
        let probs = net.forward(&x).unwrap();
        let logits = net.logits(&x).unwrap();
        let sum: f32 = probs.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-5);
        let mut soft = logits.clone();
        Activation::Softmax.apply(&mut soft);
        for (a, b) in soft.data().iter().zip(probs.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ranks_break_ties_by_lower_index() {
        assert_eq!(label_rank(&[1.0, 1.0, 0.0], 0), 0);
        assert_eq!(label_rank(&[1.0, 1.0, 0.0], 1), 1);
        assert_eq!(label_rank(&[0.0, 2.0, 1.0], 0), 2);
    }

    #[test]
    fn perfect_and_constant_classifiers() {
        let labels: Vec<usize> = (0..10).collect();
        let perfect: Vec<Vec<f32>> = labels
            .iter()
            .map(|&y| (0..10).map(|j| if j == y { 1.0 } else { 0.0 }).collect())
            .collect();
        let m = top_k_errors(&perfect, &labels, &[1, 5]).unwrap();
        assert_eq!(m.top1_error(), Some(0.0));
        assert_eq!(m.top5_error(), Some(0.0));

        let labels: Vec<usize> = (0..1000).map(|i| i % 10).collect();
        let constant = vec![vec![0.0f32; 10]; 1000];
        let m = top_k_errors(&constant, &labels, &[1, 5]).unwrap();
        assert!((m.top1_error().unwrap() - 0.9).abs() < 1e-12);
        assert!((m.top5_error().unwrap() - 0.5).abs() < 1e-12);

        assert!(matches!(
            top_k_errors(&[], &[], &[1]),
            Err(QcnnError::EmptyDataset)
        ));
        assert!(top_k_errors(&[vec![0.0; 3]], &[3], &[1]).is_err());
    }

    #[test]
    fn single_layer_matches_direct_ec() {
        let spec = mlp_spec(&[6, 4]);
        let net = Network::random(spec, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let calib: Vec<DenseTensor> = (0..20)
            .map(|_| DenseTensor::random_normal(vec![6], 1.0, &mut rng))
            .collect();
        let cfg = QuantizationConfig::new(2, 2)
            .with_error_correction(true)
            .with_seed(5);
        let plan = QuantizationPlan::new().with("fc1", cfg);
        let q = quantize_network(&net, &calib, &plan).unwrap();

        let LayerParams::Dense { weights, bias } = &net.layers()[0].params else {
            unreachable!()
        };
        let pairs: Vec<_> = calib
            .iter()
            .map(|x| (x.clone(), fc_forward(weights, None, x).unwrap()))
            .collect();
        let set = FcCalibrationSet::from_pairs(&pairs).unwrap();
        let direct = quantize_fc_ec(weights, bias.as_ref(), &set, &cfg).unwrap();
        assert_eq!(
            q.network.layers()[0].params,
            LayerParams::QuantizedFc(direct.layer)
        );
        assert_eq!(q.layers[0].objective_history, direct.history);
    }

    #[test]
    fn forward_prefix_composes() {
        let net = Network::random(mlp_spec(&[4, 3, 2]), 8).unwrap();
        let x = DenseTensor::new(vec![4], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let h = net.forward_prefix(&x, 1).unwrap();
        let y = net.layers()[1].forward(&h).unwrap();
        assert_eq!(y, net.forward(&x).unwrap());
        assert!(net.forward(&DenseTensor::zeros(vec![5])).is_err());
    }
}
