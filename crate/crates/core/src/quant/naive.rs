//! Error-agnostic quantization: per-subspace k-means over weight sub-vectors.

use rayon::prelude::*;

use super::{kmeans, QuantizationConfig, QuantizedConvLayer, QuantizedFcLayer, SubCodebook};
use crate::error::{config_err, dim_err, Result};
use crate::tensor::{ConvLayerSpec, DenseTensor};

/// A quantized layer together with the k-means SSE of every subspace.
#[derive(Debug, Clone)]
pub struct NaiveQuantization<L> {
    pub layer: L,
    pub subspace_sse: Vec<f64>,
}

impl<L> NaiveQuantization<L> {
    pub fn total_sse(&self) -> f64 {
        self.subspace_sse.iter().sum()
    }
}

/// Runs k-means on each subspace's point set, in parallel; subspace `m` is seeded with `seed ^ m`.
fn cluster_subspaces(
    points_per_subspace: Vec<Vec<f32>>,
    cfg: &QuantizationConfig,
) -> Result<Vec<(SubCodebook, Vec<u16>, f64)>> {
    points_per_subspace
        .into_par_iter()
        .enumerate()
        .map(|(m, pts)| {
            let r = kmeans(&pts, cfg.subspace_dim, cfg.codewords, &cfg.kmeans_params(m))?;
            let idx = r.assignments.iter().map(|&a| a as u16).collect();
            Ok((SubCodebook::new(cfg.subspace_dim, r.centroids)?, idx, r.sse))
        })
        .collect()
}

/// Quantizes FC weights `[C_t, C_s]` by clustering the `C_t` sub-vectors of each subspace.
pub fn quantize_fc_naive(
    weights: &DenseTensor,
    bias: Option<&DenseTensor>,
    cfg: &QuantizationConfig,
) -> Result<NaiveQuantization<QuantizedFcLayer>> {
    if weights.ndim() != 2 {
        return dim_err(format!(
            "fc weights must be [C_t, C_s], got {:?}",
            weights.shape()
        ));
    }
    let (ct, cs) = (weights.shape()[0], weights.shape()[1]);
    let m_count = cfg.num_subspaces(cs)?;
    let d = cfg.subspace_dim;
    let points: Vec<Vec<f32>> = (0..m_count)
        .map(|m| {
            weights
                .data()
                .chunks_exact(cs)
                .flat_map(|col| col[m * d..(m + 1) * d].iter().copied())
                .collect()
        })
        .collect();
    let clustered = cluster_subspaces(points, cfg)?;
    let mut codebooks = Vec::with_capacity(m_count);
    let mut assignments = Vec::with_capacity(m_count * ct);
    let mut sse = Vec::with_capacity(m_count);
    for (cb, idx, e) in clustered {
        codebooks.push(cb);
        assignments.extend(idx);
        sse.push(e);
    }
    let layer = QuantizedFcLayer::new(cs, ct, d, codebooks, assignments, bias.cloned())?;
    Ok(NaiveQuantization {
        layer,
        subspace_sse: sse,
    })
}

/// Quantizes conv kernels `[C_t, d_k, d_k, C_s]`; each subspace pools the
/// sub-vectors of all kernel positions into one k-means problem, ordered
/// `(p_k, c_t)` with `c_t` fastest.
pub fn quantize_conv_naive(
    kernels: &DenseTensor,
    bias: Option<&DenseTensor>,
    spec: &ConvLayerSpec,
    cfg: &QuantizationConfig,
) -> Result<NaiveQuantization<QuantizedConvLayer>> {
    spec.validate()?;
    if spec.groups != 1 {
        return config_err("grouped conv layers cannot be quantized; split them into groups first");
    }
    if kernels.shape() != spec.kernel_shape().as_slice() {
        return dim_err(format!(
            "conv kernels must be {:?}, got {:?}",
            spec.kernel_shape(),
            kernels.shape()
        ));
    }
    let (cs, ct) = (spec.in_channels, spec.out_channels);
    let positions = spec.kernel_size * spec.kernel_size;
    let m_count = cfg.num_subspaces(cs)?;
    let d = cfg.subspace_dim;
    let kd = kernels.data();
    let points: Vec<Vec<f32>> = (0..m_count)
        .map(|m| {
            let mut pts = Vec::with_capacity(positions * ct * d);
            for pk in 0..positions {
                for c in 0..ct {
                    let base = (c * positions + pk) * cs + m * d;
                    pts.extend_from_slice(&kd[base..base + d]);
                }
            }
            pts
        })
        .collect();
    let clustered = cluster_subspaces(points, cfg)?;
    let mut codebooks = Vec::with_capacity(m_count);
    let mut assignments = Vec::with_capacity(m_count * positions * ct);
    let mut sse = Vec::with_capacity(m_count);
    for (cb, idx, e) in clustered {
        codebooks.push(cb);
        assignments.extend(idx);
        sse.push(e);
    }
    let layer = QuantizedConvLayer::new(*spec, d, codebooks, assignments, bias.cloned())?;
    Ok(NaiveQuantization {
        layer,
        subspace_sse: sse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::weight_quantization_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn repeated_columns_quantize_exactly() {
        let c = [1.0, -2.0, 0.5, 3.0];
        let e = [0.0, 4.0, -1.0, 2.0];
        let data: Vec<f32> = [c, c, e, e].concat();
        let w = DenseTensor::new(vec![4, 4], data).unwrap();
        let q = quantize_fc_naive(&w, None, &QuantizationConfig::new(4, 2)).unwrap();
        assert_eq!(q.total_sse(), 0.0);
        assert_eq!(q.layer.reconstruct_weights(), w);
    }

    #[test]
    fn scalar_columns_match_partition_oracle() {
        let w = DenseTensor::new(vec![4, 1], vec![0.0, 1.0, 4.0, 5.0]).unwrap();
        let cfg = QuantizationConfig::new(1, 2).with_restarts(10);
        let q = quantize_fc_naive(&w, None, &cfg).unwrap();
        assert_eq!(q.total_sse(), 1.0);
        assert_eq!(q.layer.reconstruct_weights().data(), &[0.5, 0.5, 4.5, 4.5]);
    }

    #[test]
    fn single_codeword_reconstructs_mean() {
        let w = DenseTensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let q = quantize_fc_naive(&w, None, &QuantizationConfig::new(2, 1)).unwrap();
        assert_eq!(q.layer.reconstruct_weights().data(), &[2.0, 4.0, 2.0, 4.0]);
    }

    #[test]
    fn reported_sse_matches_recomputed_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = DenseTensor::random_normal(vec![40, 12], 1.0, &mut rng);
        let q = quantize_fc_naive(&w, None, &QuantizationConfig::new(3, 4).with_seed(3)).unwrap();
        let err = weight_quantization_error(&w, &q.layer.reconstruct_weights()).unwrap();
        assert!((err - q.total_sse()).abs() <= 1e-4 * err);
    }

    #[test]
    fn conv_single_cluster_is_exact() {
        let spec = ConvLayerSpec::simple(4, 3, 2, 1, 0);
        let sub = [0.25f32, -1.0];
        let data: Vec<f32> = (0..3 * 4 * 2).flat_map(|_| sub).collect();
        let k = DenseTensor::new(spec.kernel_shape(), data).unwrap();
        let q = quantize_conv_naive(&k, None, &spec, &QuantizationConfig::new(2, 1)).unwrap();
        assert_eq!(q.total_sse(), 0.0);
        assert_eq!(q.layer.reconstruct_weights(), k);
    }

    #[test]
    fn conv_rejects_grouped_and_uneven() {
        let mut spec = ConvLayerSpec::simple(4, 2, 1, 1, 0);
        spec.groups = 2;
        let k = DenseTensor::zeros(spec.kernel_shape());
        assert!(quantize_conv_naive(&k, None, &spec, &QuantizationConfig::new(2, 2)).is_err());
        let spec = ConvLayerSpec::simple(4, 2, 1, 1, 0);
        let k = DenseTensor::zeros(spec.kernel_shape());
        assert!(quantize_conv_naive(&k, None, &spec, &QuantizationConfig::new(3, 2)).is_err());
    }
}
