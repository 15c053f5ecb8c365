//! Product quantization of layer parameters.
//!
//! The input dimension `C_s` of a layer is split evenly into `M` subspaces of
//! `C'_s` channels. Each subspace owns a sub-codebook of `K` sub-codewords and
//! every weight sub-vector is replaced by one of them. For conv layers the
//! codebook of a subspace is shared by all kernel positions.

mod kmeans;
mod naive;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans, KMeansParams, KMeansResult};
pub use naive::{quantize_conv_naive, quantize_fc_naive, NaiveQuantization};

use crate::error::{config_err, dim_err, QcnnError, Result};
use crate::tensor::{ConvLayerSpec, DenseTensor};

/// Largest codebook whose indices still fit a `u16`.
pub const MAX_CODEWORDS: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizationConfig {
    /// Channels per subspace, `C'_s`.
    pub subspace_dim: usize,
    /// Sub-codewords per subspace, `K`.
    pub codewords: usize,
    #[serde(default = "defaults::max_iter")]
    pub kmeans_max_iter: usize,
    #[serde(default = "defaults::rel_tol")]
    pub kmeans_rel_tol: f64,
    #[serde(default = "defaults::one")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub error_correction: bool,
    #[serde(default = "defaults::sweeps")]
    pub ec_sweeps: usize,
    /// EC starts: the k-means solution plus `ec_restarts - 1` seeded random
    /// assignments; the start with the lowest final objective is kept.
    #[serde(default = "defaults::one")]
    pub ec_restarts: usize,
    /// Ridge added to the least-squares normal equations, relative to their mean diagonal.
    #[serde(default = "defaults::ridge")]
    pub ridge: f64,
}

mod defaults {
    pub fn max_iter() -> usize {
        100
    }
    pub fn rel_tol() -> f64 {
        1e-6
    }
    pub fn one() -> usize {
        1
    }
    pub fn sweeps() -> usize {
        3
    }
    pub fn ridge() -> f64 {
        1e-8
    }
}

impl QuantizationConfig {
    pub fn new(subspace_dim: usize, codewords: usize) -> Self {
        Self {
            subspace_dim,
            codewords,
            kmeans_max_iter: defaults::max_iter(),
            kmeans_rel_tol: defaults::rel_tol(),
            restarts: 1,
            seed: 0,
            error_correction: false,
            ec_sweeps: defaults::sweeps(),
            ec_restarts: 1,
            ridge: defaults::ridge(),
        }
    }

    pub fn with_error_correction(mut self, on: bool) -> Self {
        self.error_correction = on;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn with_sweeps(mut self, sweeps: usize) -> Self {
        self.ec_sweeps = sweeps;
        self
    }

    pub fn with_ec_restarts(mut self, starts: usize) -> Self {
        self.ec_restarts = starts;
        self
    }

    /// `M = C_s / C'_s`, or a configuration error when the split is not even.
    pub fn num_subspaces(&self, input_dim: usize) -> Result<usize> {
        self.validate()?;
        if input_dim % self.subspace_dim != 0 {
            return config_err(format!(
                "input dimension {input_dim} is not divisible by subspace dimension {}",
                self.subspace_dim
            ));
        }
        Ok(input_dim / self.subspace_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subspace_dim == 0 {
            return config_err("subspace dimension must be positive");
        }
        if self.codewords == 0 || self.codewords > MAX_CODEWORDS {
            return config_err(format!(
                "codewords per subspace must be in 1..={MAX_CODEWORDS}, got {}",
                self.codewords
            ));
        }
        if self.kmeans_max_iter == 0
            || self.restarts == 0
            || self.ec_sweeps == 0
            || self.ec_restarts == 0
        {
            return config_err(
                "k-means iterations, restarts, EC sweeps and EC restarts must be positive",
            );
        }
        Ok(())
    }

    pub(crate) fn kmeans_params(&self, subspace: usize) -> KMeansParams {
        KMeansParams {
            max_iter: self.kmeans_max_iter,
            rel_tol: self.kmeans_rel_tol,
            restarts: self.restarts,
            seed: self.seed ^ subspace as u64,
        }
    }
}

/// `C'_s x K` sub-codebook stored codeword-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SubCodebook {
    dim: usize,
    data: Vec<f32>,
}

impl SubCodebook {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return dim_err(format!(
                "sub-codebook of dim {dim} cannot hold {} values",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(QcnnError::NonFinite("sub-codebook entry".into()));
        }
        Ok(Self { dim, data })
    }

    pub fn zeros(dim: usize, codewords: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * codewords],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn codeword(&self, k: usize) -> &[f32] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn codeword_mut(&mut self, k: usize) -> &mut [f32] {
        &mut self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

fn check_codebooks(codebooks: &[SubCodebook], m: usize, dim: usize, k: usize) -> Result<()> {
    if codebooks.len() != m {
        return dim_err(format!(
            "expected {m} sub-codebooks, got {}",
            codebooks.len()
        ));
    }
    if codebooks.iter().any(|cb| cb.dim() != dim || cb.len() != k) {
        return dim_err(format!("every sub-codebook must be {dim} x {k}"));
    }
    Ok(())
}

fn check_assignments(assignments: &[u16], expected: usize, k: usize) -> Result<()> {
    if assignments.len() != expected {
        return dim_err(format!(
            "expected {expected} assignments, got {}",
            assignments.len()
        ));
    }
    if let Some(bad) = assignments.iter().find(|&&a| a as usize >= k) {
        return dim_err(format!("assignment index {bad} out of range for K = {k}"));
    }
    Ok(())
}

/// A product-quantized fully-connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedFcLayer {
    input_dim: usize,
    output_dim: usize,
    subspace_dim: usize,
    codewords: usize,
    codebooks: Vec<SubCodebook>,
    /// `M x C_t`, output column fastest.
    assignments: Vec<u16>,
    bias: Option<DenseTensor>,
}

impl QuantizedFcLayer {
    pub fn new(
        input_dim: usize,
        output_dim: usize,
        subspace_dim: usize,
        codebooks: Vec<SubCodebook>,
        assignments: Vec<u16>,
        bias: Option<DenseTensor>,
    ) -> Result<Self> {
        if subspace_dim == 0 || input_dim % subspace_dim != 0 || output_dim == 0 {
            return config_err(format!(
                "cannot split input dimension {input_dim} into subspaces of {subspace_dim}"
            ));
        }
        let m = input_dim / subspace_dim;
        let k = codebooks.first().map_or(0, SubCodebook::len);
        check_codebooks(&codebooks, m, subspace_dim, k)?;
        check_assignments(&assignments, m * output_dim, k)?;
        if let Some(b) = &bias {
            if b.len() != output_dim {
                return dim_err(format!(
                    "bias has {} values, expected {output_dim}",
                    b.len()
                ));
            }
        }
        Ok(Self {
            input_dim,
            output_dim,
            subspace_dim,
            codewords: k,
            codebooks,
            assignments,
            bias,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn subspace_dim(&self) -> usize {
        self.subspace_dim
    }

    pub fn num_subspaces(&self) -> usize {
        self.codebooks.len()
    }

    pub fn codewords(&self) -> usize {
        self.codewords
    }

    pub fn codebooks(&self) -> &[SubCodebook] {
        &self.codebooks
    }

    pub fn codebook(&self, m: usize) -> &SubCodebook {
        &self.codebooks[m]
    }

    pub(crate) fn codebook_mut(&mut self, m: usize) -> &mut SubCodebook {
        &mut self.codebooks[m]
    }

    pub fn assignments(&self) -> &[u16] {
        &self.assignments
    }

    /// Assignments of subspace `m`, one per output column.
    pub fn subspace_assignments(&self, m: usize) -> &[u16] {
        &self.assignments[m * self.output_dim..(m + 1) * self.output_dim]
    }

    pub(crate) fn subspace_assignments_mut(&mut self, m: usize) -> &mut [u16] {
        &mut self.assignments[m * self.output_dim..(m + 1) * self.output_dim]
    }

    pub fn assignment(&self, m: usize, column: usize) -> usize {
        self.assignments[m * self.output_dim + column] as usize
    }

    pub fn bias(&self) -> Option<&DenseTensor> {
        self.bias.as_ref()
    }

    pub fn set_bias(&mut self, bias: Option<DenseTensor>) -> Result<()> {
        if let Some(b) = &bias {
            if b.len() != self.output_dim {
                return dim_err(format!(
                    "bias has {} values, expected {}",
                    b.len(),
                    self.output_dim
                ));
            }
        }
        self.bias = bias;
        Ok(())
    }

    /// Replaces every sub-vector with its sub-codeword; shape `[C_t, C_s]`.
    pub fn reconstruct_weights(&self) -> DenseTensor {
        let (cs, ct, d) = (self.input_dim, self.output_dim, self.subspace_dim);
        let mut w = vec![0.0f32; ct * cs];
        for (c, col) in w.chunks_exact_mut(cs).enumerate() {
            for (m, cb) in self.codebooks.iter().enumerate() {
                col[m * d..(m + 1) * d].copy_from_slice(cb.codeword(self.assignment(m, c)));
            }
        }
        DenseTensor::new(vec![ct, cs], w).expect("codebooks are finite")
    }
}

/// A product-quantized convolutional layer (ungrouped).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedConvLayer {
    spec: ConvLayerSpec,
    subspace_dim: usize,
    codewords: usize,
    codebooks: Vec<SubCodebook>,
    /// `M x d_k^2 x C_t`, output channel fastest.
    assignments: Vec<u16>,
    bias: Option<DenseTensor>,
}

impl QuantizedConvLayer {
    pub fn new(
        spec: ConvLayerSpec,
        subspace_dim: usize,
        codebooks: Vec<SubCodebook>,
        assignments: Vec<u16>,
        bias: Option<DenseTensor>,
    ) -> Result<Self> {
        spec.validate()?;
        if spec.groups != 1 {
            return config_err("quantized conv layers must be ungrouped");
        }
        if subspace_dim == 0 || spec.in_channels % subspace_dim != 0 {
            return config_err(format!(
                "cannot split {} input channels into subspaces of {subspace_dim}",
                spec.in_channels
            ));
        }
        let m = spec.in_channels / subspace_dim;
        let k = codebooks.first().map_or(0, SubCodebook::len);
        check_codebooks(&codebooks, m, subspace_dim, k)?;
        let positions = spec.kernel_size * spec.kernel_size;
        check_assignments(&assignments, m * positions * spec.out_channels, k)?;
        if let Some(b) = &bias {
            if b.len() != spec.out_channels {
                return dim_err(format!(
                    "bias has {} values, expected {}",
                    b.len(),
                    spec.out_channels
                ));
            }
        }
        Ok(Self {
            spec,
            subspace_dim,
            codewords: k,
            codebooks,
            assignments,
            bias,
        })
    }

    pub fn spec(&self) -> &ConvLayerSpec {
        &self.spec
    }

    pub fn subspace_dim(&self) -> usize {
        self.subspace_dim
    }

    pub fn num_subspaces(&self) -> usize {
        self.codebooks.len()
    }

    pub fn codewords(&self) -> usize {
        self.codewords
    }

    pub fn kernel_positions(&self) -> usize {
        self.spec.kernel_size * self.spec.kernel_size
    }

    pub fn codebooks(&self) -> &[SubCodebook] {
        &self.codebooks
    }

    pub fn codebook(&self, m: usize) -> &SubCodebook {
        &self.codebooks[m]
    }

    pub(crate) fn codebook_mut(&mut self, m: usize) -> &mut SubCodebook {
        &mut self.codebooks[m]
    }

    pub fn assignments(&self) -> &[u16] {
        &self.assignments
    }

    /// Assignments of subspace `m` at kernel position `pk`, one per output channel.
    pub fn position_assignments(&self, m: usize, pk: usize) -> &[u16] {
        let ct = self.spec.out_channels;
        let start = (m * self.kernel_positions() + pk) * ct;
        &self.assignments[start..start + ct]
    }

    pub(crate) fn position_assignments_mut(&mut self, m: usize, pk: usize) -> &mut [u16] {
        let ct = self.spec.out_channels;
        let start = (m * self.kernel_positions() + pk) * ct;
        &mut self.assignments[start..start + ct]
    }

    pub fn assignment(&self, m: usize, pk: usize, column: usize) -> usize {
        self.position_assignments(m, pk)[column] as usize
    }

    pub fn bias(&self) -> Option<&DenseTensor> {
        self.bias.as_ref()
    }

    pub fn set_bias(&mut self, bias: Option<DenseTensor>) -> Result<()> {
        if let Some(b) = &bias {
            if b.len() != self.spec.out_channels {
                return dim_err("bias length does not match output channels");
            }
        }
        self.bias = bias;
        Ok(())
    }

    /// Kernels rebuilt from the codebooks; shape `[C_t, d_k, d_k, C_s]`.
    pub fn reconstruct_weights(&self) -> DenseTensor {
        let (cs, ct, d) = (
            self.spec.in_channels,
            self.spec.out_channels,
            self.subspace_dim,
        );
        let positions = self.kernel_positions();
        let mut w = vec![0.0f32; ct * positions * cs];
        for c in 0..ct {
            for pk in 0..positions {
                let dst = &mut w[(c * positions + pk) * cs..(c * positions + pk + 1) * cs];
                for (m, cb) in self.codebooks.iter().enumerate() {
                    dst[m * d..(m + 1) * d].copy_from_slice(cb.codeword(self.assignment(m, pk, c)));
                }
            }
        }
        DenseTensor::new(self.spec.kernel_shape(), w).expect("codebooks are finite")
    }
}

/// Splits equal-length vectors (`[n, C_s]`, one vector per row) into `M`
/// tensors of shape `[n, C'_s]`, the m-th holding channels `[m C'_s, (m+1) C'_s)`.
pub fn split_subspaces(vectors: &DenseTensor, subspace_dim: usize) -> Result<Vec<DenseTensor>> {
    if vectors.ndim() != 2 {
        return dim_err(format!(
            "expected [n, C_s] vectors, got {:?}",
            vectors.shape()
        ));
    }
    let (n, cs) = (vectors.shape()[0], vectors.shape()[1]);
    if subspace_dim == 0 || cs % subspace_dim != 0 {
        return config_err(format!(
            "input dimension {cs} is not divisible by subspace dimension {subspace_dim}"
        ));
    }
    let m = cs / subspace_dim;
    (0..m)
        .map(|s| {
            let data: Vec<f32> = vectors
                .data()
                .chunks_exact(cs)
                .flat_map(|row| {
                    row[s * subspace_dim..(s + 1) * subspace_dim]
                        .iter()
                        .copied()
                })
                .collect();
            DenseTensor::new(vec![n, subspace_dim], data)
        })
        .collect()
}

/// `sum_m ||D^(m) B^(m) - W^(m)||_F^2`, recomputed from a reconstruction.
pub fn weight_quantization_error(
    original: &DenseTensor,
    reconstructed: &DenseTensor,
) -> Result<f64> {
    if original.shape() != reconstructed.shape() {
        return dim_err(format!(
            "shape mismatch {:?} vs {:?}",
            original.shape(),
            reconstructed.shape()
        ));
    }
    Ok(original
        .data()
        .par_iter()
        .zip(reconstructed.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum())
}
