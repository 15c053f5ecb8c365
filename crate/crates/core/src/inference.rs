//! Test-phase execution of quantized layers through inner-product lookup tables.
//!
//! For each input the table holds `<D_k^(m), S^(m)>` for every subspace and
//! sub-codeword (and, for conv, every input position). A response is then a
//! sum of `M` (FC) or `d_k^2 M` (conv) table reads.

use crate::error::{dim_err, Result};
use crate::quant::{QuantizedConvLayer, QuantizedFcLayer};
use crate::tensor::{conv_geometry, source_index, DenseTensor};

/// Multiply-add and addition counts of one quantized forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InferenceStats {
    /// Multiply-adds spent filling the lookup table.
    pub table_macs: u64,
    /// Table reads accumulated into responses.
    pub accumulations: u64,
}

impl InferenceStats {
    pub fn total(&self) -> u64 {
        self.table_macs + self.accumulations
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `M x K` inner products of one input against every sub-codeword.
#[derive(Debug, Clone, PartialEq)]
pub struct FcLookupTable {
    subspaces: usize,
    codewords: usize,
    data: Vec<f32>,
}

impl FcLookupTable {
    pub fn get(&self, m: usize, k: usize) -> f32 {
        self.data[m * self.codewords + k]
    }

    pub fn row(&self, m: usize) -> &[f32] {
        &self.data[m * self.codewords..(m + 1) * self.codewords]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.subspaces, self.codewords)
    }
}

pub fn build_lut_fc(q: &QuantizedFcLayer, input: &DenseTensor) -> Result<FcLookupTable> {
    if input.len() != q.input_dim() {
        return dim_err(format!(
            "quantized fc expects {} inputs, got {}",
            q.input_dim(),
            input.len()
        ));
    }
    let d = q.subspace_dim();
    let k = q.codewords();
    let s = input.data();
    let mut data = Vec::with_capacity(q.num_subspaces() * k);
    for (m, cb) in q.codebooks().iter().enumerate() {
        let sub = &s[m * d..(m + 1) * d];
        data.extend((0..k).map(|j| dot(cb.codeword(j), sub)));
    }
    Ok(FcLookupTable {
        subspaces: q.num_subspaces(),
        codewords: k,
        data,
    })
}

/// Approximate FC response `sum_m LUT(m, k_m(c_t)) + bias(c_t)`.
pub fn qfc_forward(q: &QuantizedFcLayer, input: &DenseTensor) -> Result<DenseTensor> {
    qfc_forward_with_stats(q, input).map(|(t, _)| t)
}

pub fn qfc_forward_with_stats(
    q: &QuantizedFcLayer,
    input: &DenseTensor,
) -> Result<(DenseTensor, InferenceStats)> {
    let lut = build_lut_fc(q, input)?;
    let ct = q.output_dim();
    let mut out = vec![0.0f32; ct];
    for m in 0..q.num_subspaces() {
        let row = lut.row(m);
        for (o, &a) in out.iter_mut().zip(q.subspace_assignments(m)) {
            *o += row[a as usize];
        }
    }
    if let Some(b) = q.bias() {
        for (o, bv) in out.iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    let stats = InferenceStats {
        table_macs: (q.input_dim() * q.codewords()) as u64,
        accumulations: (ct * q.num_subspaces()) as u64,
    };
    Ok((DenseTensor::new(vec![ct], out)?, stats))
}

/// Inner products of every input position's sub-vectors with every sub-codeword.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLookupTable {
    height: usize,
    width: usize,
    subspaces: usize,
    codewords: usize,
    data: Vec<f32>,
}

impl ConvLookupTable {
    pub fn get(&self, y: usize, x: usize, m: usize, k: usize) -> f32 {
        self.data[((y * self.width + x) * self.subspaces + m) * self.codewords + k]
    }

    /// `[height, width, M, K]`.
    pub fn shape(&self) -> [usize; 4] {
        [self.height, self.width, self.subspaces, self.codewords]
    }

    #[inline]
    fn entries_at(&self, y: usize, x: usize) -> &[f32] {
        let stride = self.subspaces * self.codewords;
        let base = (y * self.width + x) * stride;
        &self.data[base..base + stride]
    }
}

pub fn build_lut_conv(q: &QuantizedConvLayer, input: &DenseTensor) -> Result<ConvLookupTable> {
    let (h, w, _, _) = conv_geometry(q.spec(), input.shape())?;
    let cs = q.spec().in_channels;
    let d = q.subspace_dim();
    let k = q.codewords();
    let m_count = q.num_subspaces();
    let mut data = Vec::with_capacity(h * w * m_count * k);
    for px in input.data().chunks_exact(cs) {
        for (m, cb) in q.codebooks().iter().enumerate() {
            let sub = &px[m * d..(m + 1) * d];
            data.extend((0..k).map(|j| dot(cb.codeword(j), sub)));
        }
    }
    Ok(ConvLookupTable {
        height: h,
        width: w,
        subspaces: m_count,
        codewords: k,
        data,
    })
}

/// Approximate conv response: `d_k^2 M` table reads per output plus bias.
/// Reads that fall into zero padding are skipped.
pub fn qconv_forward(q: &QuantizedConvLayer, input: &DenseTensor) -> Result<DenseTensor> {
    qconv_forward_with_stats(q, input).map(|(t, _)| t)
}

pub fn qconv_forward_with_stats(
    q: &QuantizedConvLayer,
    input: &DenseTensor,
) -> Result<(DenseTensor, InferenceStats)> {
    let lut = build_lut_conv(q, input)?;
    let spec = q.spec();
    let (h, w, oh, ow) = conv_geometry(spec, input.shape())?;
    let (ct, dk) = (spec.out_channels, spec.kernel_size);
    let k = q.codewords();
    let m_count = q.num_subspaces();
    let mut out = vec![0.0f32; oh * ow * ct];
    let mut accumulations = 0u64;
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut out[(oy * ow + ox) * ct..(oy * ow + ox + 1) * ct];
            for ky in 0..dk {
                let Some(iy) = source_index(oy, ky, spec.stride, spec.padding, h) else {
                    continue;
                };
                for kx in 0..dk {
                    let Some(ix) = source_index(ox, kx, spec.stride, spec.padding, w) else {
                        continue;
                    };
                    let pk = ky * dk + kx;
                    let entries = lut.entries_at(iy, ix);
                    for m in 0..m_count {
                        let row = &entries[m * k..(m + 1) * k];
                        for (o, &a) in dst.iter_mut().zip(q.position_assignments(m, pk)) {
                            *o += row[a as usize];
                        }
                    }
                    accumulations += (m_count * ct) as u64;
                }
            }
            if let Some(b) = q.bias() {
                for (o, bv) in dst.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
        }
    }
    let stats = InferenceStats {
        table_macs: (h * w * spec.in_channels * k) as u64,
        accumulations,
    };
    Ok((DenseTensor::new(vec![oh, ow, ct], out)?, stats))
}

/// Same response as [`qconv_forward`], but every window recomputes its inner
/// products instead of reading a shared table.
pub fn qconv_forward_unshared(q: &QuantizedConvLayer, input: &DenseTensor) -> Result<DenseTensor> {
    let spec = q.spec();
    let (h, w, oh, ow) = conv_geometry(spec, input.shape())?;
    let (cs, ct, dk) = (spec.in_channels, spec.out_channels, spec.kernel_size);
    let d = q.subspace_dim();
    let s = input.data();
    let mut out = vec![0.0f32; oh * ow * ct];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut out[(oy * ow + ox) * ct..(oy * ow + ox + 1) * ct];
            for ky in 0..dk {
                let Some(iy) = source_index(oy, ky, spec.stride, spec.padding, h) else {
                    continue;
                };
                for kx in 0..dk {
                    let Some(ix) = source_index(ox, kx, spec.stride, spec.padding, w) else {
                        continue;
                    };
                    let pk = ky * dk + kx;
                    let px = &s[(iy * w + ix) * cs..(iy * w + ix + 1) * cs];
                    for m in 0..q.num_subspaces() {
                        let sub = &px[m * d..(m + 1) * d];
                        let cb = q.codebook(m);
                        for (o, &a) in dst.iter_mut().zip(q.position_assignments(m, pk)) {
                            *o += dot(cb.codeword(a as usize), sub);
                        }
                    }
                }
            }
            if let Some(b) = q.bias() {
                for (o, bv) in dst.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
        }
    }
    DenseTensor::new(vec![oh, ow, ct], out)
}
