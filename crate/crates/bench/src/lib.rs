//! Seeded layer fixtures shared by the benchmarks in `benches/`.

use qcnn::quant::{quantize_conv_naive, quantize_fc_naive};
use qcnn::{ConvLayerSpec, DenseTensor, QuantizationConfig, QuantizedConvLayer, QuantizedFcLayer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn uniform(shape: Vec<usize>, seed: u64) -> DenseTensor {
    DenseTensor::random_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Dense `[C_t, C_s]` weights and their naive quantization.
pub fn fc_pair(cs: usize, ct: usize, d: usize, k: usize) -> (DenseTensor, QuantizedFcLayer) {
    let w = uniform(vec![ct, cs], 1);
    let cfg = QuantizationConfig::new(d, k).with_seed(2);
    let q = quantize_fc_naive(&w, None, &cfg)
        .expect("valid fixture")
        .layer;
    (w, q)
}

/// Dense kernels and their naive quantization.
pub fn conv_pair(spec: &ConvLayerSpec, d: usize, k: usize) -> (DenseTensor, QuantizedConvLayer) {
    let w = uniform(spec.kernel_shape(), 3);
    let cfg = QuantizationConfig::new(d, k).with_seed(4);
    let q = quantize_conv_naive(&w, None, spec, &cfg)
        .expect("valid fixture")
        .layer;
    (w, q)
}
