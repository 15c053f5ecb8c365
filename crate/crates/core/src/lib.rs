//! Product-quantized convolutional networks.
//!
//! Weights of fully-connected and convolutional layers are split along the
//! input channels into subspaces, and each weight sub-vector is replaced by a
//! codeword from a small per-subspace codebook. A layer response then becomes
//! a sum of precomputed inner products between the input and the codewords.
//!
//! * [`quant`]: codebook learning by k-means on the weights.
//! * [`ec`]: codebook learning that minimises the response error instead.
//! * [`inference`]: lookup-table forward passes.
//! * [`pipeline`]: networks, layer-by-layer quantization and evaluation.
//! * [`accounting`]: theoretical FLOPs and storage.
//! * [`io`]: model files, MNIST and a reference trainer.

pub mod accounting;
pub mod ec;
pub mod error;
pub mod inference;
pub mod io;
pub mod pipeline;
pub mod quant;
pub mod tensor;

pub use accounting::{build_report, layer_bytes, layer_flops, ComplexityReport};
pub use error::{QcnnError, Result};
pub use pipeline::{
    evaluate, quantize_network, EvalMetrics, LayerKind, LayerParams, LayerSpec, Network,
    NetworkSpec, QuantizationPlan, QuantizedNetwork,
};
pub use quant::{QuantizationConfig, QuantizedConvLayer, QuantizedFcLayer, SubCodebook};
pub use tensor::{Activation, ConvLayerSpec, DenseTensor, FcLayerSpec, PoolSpec};
