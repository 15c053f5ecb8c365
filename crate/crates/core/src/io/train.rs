//! Mini-batch SGD for fully-connected classifiers.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{config_err, dim_err, QcnnError, Result};
use crate::pipeline::{LayerKind, LayerParams, Network, NetworkSpec};
use crate::tensor::{Activation, DenseTensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.1,
            batch_size: 64,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub network: Network,
    /// Mean cross-entropy over each epoch's mini-batches.
    pub epoch_losses: Vec<f64>,
}

struct Dense {
    w: Array2<f32>,
    b: Array1<f32>,
}

fn check_arch(spec: &NetworkSpec, data: &Dataset) -> Result<()> {
    spec.shapes()?;
    let n = spec.layers.len();
    if n == 0 {
        return config_err("network has no layers");
    }
    for (i, l) in spec.layers.iter().enumerate() {
        let LayerKind::Fc(s) = &l.kind else {
            return config_err(format!(
                "layer `{}`: the reference trainer handles fc layers only",
                l.name
            ));
        };
        let want = if i + 1 == n {
            Activation::Softmax
        } else {
            Activation::Relu
        };
        if s.activation != want || !s.has_bias {
            return config_err(format!(
                "layer `{}` must have a bias and {want:?} activation",
                l.name
            ));
        }
    }
    if spec.input_shape.iter().product::<usize>() != data.sample_len() {
        return dim_err(format!(
            "network input {:?} does not fit samples {:?}",
            spec.input_shape,
            data.sample_shape()
        ));
    }
    Ok(())
}

/// Trains an fc-only classifier (relu hidden layers, softmax output) with
/// cross-entropy loss. Initialisation and shuffling derive from `cfg.seed`.
pub fn train_reference_mlp(
    spec: &NetworkSpec,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    check_arch(spec, data)?;
    if data.is_empty() {
        return Err(QcnnError::EmptyDataset);
    }
    if cfg.batch_size == 0 || cfg.learning_rate.is_nan() || cfg.learning_rate <= 0.0 {
        return config_err("batch size and learning rate must be positive");
    }
    let classes = match spec.layers.last().map(|l| l.kind) {
        Some(LayerKind::Fc(s)) => s.output_dim,
        _ => unreachable!("checked above"),
    };
    if data.num_classes() > classes {
        return config_err(format!(
            "labels need {} classes, output has {classes}",
            data.num_classes()
        ));
    }

    let init = Network::random(spec.clone(), cfg.seed)?;
    let mut layers: Vec<Dense> = init
        .layers()
        .iter()
        .map(|l| match &l.params {
            LayerParams::Dense {
                weights,
                bias: Some(b),
            } => Dense {
                w: Array2::from_shape_vec(
                    (weights.shape()[0], weights.shape()[1]),
                    weights.data().to_vec(),
                )
                .expect("shape checked"),
                b: Array1::from_vec(b.data().to_vec()),
            },
            _ => unreachable!("fc layers with bias"),
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let dim = data.sample_len();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let bsz = batch.len();
            let mut x = Array2::<f32>::zeros((bsz, dim));
            for (row, &i) in x.rows_mut().into_iter().zip(batch) {
                row.into_slice()
                    .expect("standard layout")
                    .copy_from_slice(data.sample(i));
            }
            // forward, keeping every layer's input
            let mut acts = vec![x];
            for (li, l) in layers.iter().enumerate() {
                let mut z = acts[li].dot(&l.w.t()) + &l.b;
                if li + 1 < layers.len() {
                    z.mapv_inplace(|v| v.max(0.0));
                }
                acts.push(z);
            }
            let mut delta = acts.pop().expect("output layer");
            let mut batch_loss = 0.0f64;
            for (mut row, &i) in delta.rows_mut().into_iter().zip(batch) {
                let max = row.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
                row.mapv_inplace(|v| (v - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|v| v / sum);
                let y = data.label(i);
                batch_loss -= (row[y].max(f32::MIN_POSITIVE) as f64).ln();
                row[y] -= 1.0;
            }
            if !batch_loss.is_finite() {
                return Err(QcnnError::Training(format!(
                    "loss diverged in epoch {}",
                    epoch + 1
                )));
            }
            loss_sum += batch_loss;
            delta /= bsz as f32;
            // backward
            for li in (0..layers.len()).rev() {
                let input = &acts[li];
                let grad_w = delta.t().dot(input);
                let grad_b = delta.sum_axis(Axis(0));
                if li > 0 {
                    let mut next = delta.dot(&layers[li].w);
                    next.zip_mut_with(input, |g, &a| {
                        if a <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    delta = next;
                }
                let l = &mut layers[li];
                l.w.scaled_add(-cfg.learning_rate, &grad_w);
                l.b.scaled_add(-cfg.learning_rate, &grad_b);
            }
        }
        let mean = loss_sum / data.len() as f64;
        if !mean.is_finite() || layers.iter().any(|l| l.w.iter().any(|v| !v.is_finite())) {
            return Err(QcnnError::Training(format!(
                "weights diverged in epoch {}",
                epoch + 1
            )));
        }
        log::info!("epoch {}: loss {mean:.4}", epoch + 1);
        epoch_losses.push(mean);
    }

    let params = layers
        .into_iter()
        .map(|l| {
            let (ct, cs) = l.w.dim();
            Ok(LayerParams::Dense {
                weights: DenseTensor::new(vec![ct, cs], l.w.into_iter().collect())?,
                bias: Some(DenseTensor::new(vec![ct], l.b.to_vec())?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainReport {
        network: Network::new(spec.clone(), params)?,
        epoch_losses,
    })
}
