//! Theoretical computation and storage cost of dense and quantized layers.
//!
//! One multiply-add counts as one FLOP. Biases and activations are not
//! counted in either FLOPs or bytes. Real values take 4 bytes; codeword
//! indices take `log2 K` bits, rounded up to whole bytes per layer.
//!
//! The quantized conv lookup table is filled at the `h x w` real input
//! positions; padded positions read zeros and need no table entries.

use std::fmt::{self, Write as _};

use crate::error::{config_err, Result};
use crate::pipeline::{LayerKind, NetworkSpec, QuantizationPlan};
use crate::quant::QuantizationConfig;
use crate::tensor::{conv_geometry, source_index, ConvLayerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AccountingOptions {
    /// Count only table reads whose kernel position lands on a real input
    /// pixel, as the inference engine does, instead of all `d_t^2 d_k^2`.
    pub exclude_padding: bool,
}

fn log2_codewords(k: usize) -> Result<u64> {
    if k == 0 || !k.is_power_of_two() {
        return config_err(format!(
            "K must be a power of two for storage accounting, got {k}"
        ));
    }
    Ok(k.trailing_zeros() as u64)
}

fn subspaces(cfg: &QuantizationConfig, input_dim: usize) -> Result<u64> {
    cfg.num_subspaces(input_dim).map(|m| m as u64)
}

/// `(output, kernel position)` pairs along one axis that read real input.
fn valid_pairs_1d(out: usize, spec: &ConvLayerSpec, extent: usize) -> u64 {
    (0..out)
        .map(|o| {
            (0..spec.kernel_size)
                .filter(|&k| source_index(o, k, spec.stride, spec.padding, extent).is_some())
                .count() as u64
        })
        .sum()
}

pub fn layer_flops(
    kind: &LayerKind,
    input_shape: &[usize],
    cfg: Option<&QuantizationConfig>,
) -> Result<u64> {
    layer_flops_with(kind, input_shape, cfg, AccountingOptions::default())
}

pub fn layer_flops_with(
    kind: &LayerKind,
    input_shape: &[usize],
    cfg: Option<&QuantizationConfig>,
    opts: AccountingOptions,
) -> Result<u64> {
    match kind {
        LayerKind::Fc(s) => {
            let (cs, ct) = (s.input_dim as u64, s.output_dim as u64);
            match cfg {
                None => Ok(cs * ct),
                Some(c) => Ok(cs * c.codewords as u64 + ct * subspaces(c, s.input_dim)?),
            }
        }
        LayerKind::Conv(s) => {
            let (h, w, oh, ow) = conv_geometry(s, input_shape)?;
            let g = s.groups as u64;
            let cs_g = (s.in_channels / s.groups) as u64;
            let ct_g = (s.out_channels / s.groups) as u64;
            let dk2 = (s.kernel_size * s.kernel_size) as u64;
            let dt2 = (oh * ow) as u64;
            match cfg {
                None => Ok(g * dt2 * ct_g * dk2 * cs_g),
                Some(c) => {
                    let m = subspaces(c, s.in_channels / s.groups)?;
                    let reads = if opts.exclude_padding {
                        valid_pairs_1d(oh, s, h) * valid_pairs_1d(ow, s, w)
                    } else {
                        dt2 * dk2
                    };
                    let table = (h * w) as u64 * cs_g * c.codewords as u64;
                    Ok(g * (table + reads * ct_g * m))
                }
            }
        }
        LayerKind::MaxPool(_) | LayerKind::Flatten => Ok(0),
    }
}

pub fn layer_bytes(kind: &LayerKind, cfg: Option<&QuantizationConfig>) -> Result<u64> {
    let (cs_g, ct_g, groups, dk2) = match kind {
        LayerKind::Fc(s) => (s.input_dim, s.output_dim, 1, 1),
        LayerKind::Conv(s) => (
            s.in_channels / s.groups,
            s.out_channels / s.groups,
            s.groups,
            s.kernel_size * s.kernel_size,
        ),
        LayerKind::MaxPool(_) | LayerKind::Flatten => return Ok(0),
    };
    let (cs_g, ct_g, g, dk2) = (cs_g as u64, ct_g as u64, groups as u64, dk2 as u64);
    match cfg {
        None => Ok(g * 4 * dk2 * cs_g * ct_g),
        Some(c) => {
            let bits = log2_codewords(c.codewords)?;
            let m = subspaces(c, cs_g as usize)?;
            let codebooks = g * 4 * cs_g * c.codewords as u64;
            let index_bits = g * dk2 * m * ct_g * bits;
            Ok(codebooks + index_bits.div_ceil(8))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub kind: &'static str,
    /// `(C'_s, K)` when the layer is quantized.
    pub quantization: Option<(usize, usize)>,
    pub flops_original: u64,
    pub flops_quantized: u64,
    pub bytes_original: u64,
    pub bytes_quantized: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityReport {
    pub network: String,
    pub layers: Vec<LayerCost>,
    pub flops_original: u64,
    pub flops_quantized: u64,
    pub bytes_original: u64,
    pub bytes_quantized: u64,
}

impl ComplexityReport {
    pub fn speedup(&self) -> f64 {
        self.flops_original as f64 / self.flops_quantized as f64
    }

    pub fn compression(&self) -> f64 {
        self.bytes_original as f64 / self.bytes_quantized as f64
    }

    pub fn layer(&self, name: &str) -> Option<&LayerCost> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>9} {:>14} {:>14} {:>8} {:>14} {:>14} {:>8}",
            "layer", "C's/K", "FLOPs", "FLOPs (Q)", "speedup", "bytes", "bytes (Q)", "ratio"
        );
        for l in &self.layers {
            let q = l
                .quantization
                .map_or("-".to_string(), |(d, k)| format!("{d}/{k}"));
            let _ = writeln!(
                s,
                "{:<12} {:>9} {:>14} {:>14} {:>7.2}x {:>14} {:>14} {:>7.2}x",
                l.name,
                q,
                l.flops_original,
                l.flops_quantized,
                l.flops_original as f64 / l.flops_quantized as f64,
                l.bytes_original,
                l.bytes_quantized,
                l.bytes_original as f64 / l.bytes_quantized as f64
            );
        }
        let _ = writeln!(
            s,
            "{:<12} {:>9} {:>14.3e} {:>14.3e} {:>7.2}x {:>14} {:>14} {:>7.2}x",
            "total",
            "",
            self.flops_original as f64,
            self.flops_quantized as f64,
            self.speedup(),
            self.bytes_original,
            self.bytes_quantized,
            self.compression()
        );
        s
    }

    /// One `key=value` per line; see the README for the schema.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "network={}", self.network);
        let _ = writeln!(s, "layers={}", self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(s, "layer.{i}.name={}", l.name);
            let _ = writeln!(s, "layer.{i}.kind={}", l.kind);
            let _ = writeln!(s, "layer.{i}.quantized={}", l.quantization.is_some());
            if let Some((d, k)) = l.quantization {
                let _ = writeln!(s, "layer.{i}.subspace_dim={d}");
                let _ = writeln!(s, "layer.{i}.codewords={k}");
            }
            let _ = writeln!(s, "layer.{i}.flops_original={}", l.flops_original);
            let _ = writeln!(s, "layer.{i}.flops_quantized={}", l.flops_quantized);
            let _ = writeln!(s, "layer.{i}.bytes_original={}", l.bytes_original);
            let _ = writeln!(s, "layer.{i}.bytes_quantized={}", l.bytes_quantized);
        }
        let _ = writeln!(s, "total.flops_original={}", self.flops_original);
        let _ = writeln!(s, "total.flops_quantized={}", self.flops_quantized);
        let _ = writeln!(s, "total.bytes_original={}", self.bytes_original);
        let _ = writeln!(s, "total.bytes_quantized={}", self.bytes_quantized);
        let _ = writeln!(s, "speedup={:.6}", self.speedup());
        let _ = writeln!(s, "compression={:.6}", self.compression());
        s
    }
}

impl fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

pub fn build_report(spec: &NetworkSpec, plan: &QuantizationPlan) -> Result<ComplexityReport> {
    build_report_with(spec, plan, AccountingOptions::default())
}

/// Costs of every parametric layer; layers absent from `plan` cost the same in both columns.
pub fn build_report_with(
    spec: &NetworkSpec,
    plan: &QuantizationPlan,
    opts: AccountingOptions,
) -> Result<ComplexityReport> {
    let shapes = spec.shapes()?;
    plan.validate(spec)?;
    let mut layers = Vec::new();
    for (l, input) in spec.layers.iter().zip(&shapes) {
        let kind = match l.kind {
            LayerKind::Fc(_) => "fc",
            LayerKind::Conv(_) => "conv",
            _ => continue,
        };
        let cfg = plan.get(&l.name);
        let named = |e: crate::error::QcnnError| e.in_layer(&l.name);
        let flops_original = layer_flops_with(&l.kind, input, None, opts)?;
        let bytes_original = layer_bytes(&l.kind, None)?;
        let (flops_quantized, bytes_quantized) = match cfg {
            Some(c) => (
                layer_flops_with(&l.kind, input, Some(c), opts).map_err(named)?,
                layer_bytes(&l.kind, Some(c)).map_err(named)?,
            ),
            None => (flops_original, bytes_original),
        };
        layers.push(LayerCost {
            name: l.name.clone(),
            kind,
            quantization: cfg.map(|c| (c.subspace_dim, c.codewords)),
            flops_original,
            flops_quantized,
            bytes_original,
            bytes_quantized,
        });
    }
    Ok(ComplexityReport {
        network: spec.name.clone(),
        flops_original: layers.iter().map(|l| l.flops_original).sum(),
        flops_quantized: layers.iter().map(|l| l.flops_quantized).sum(),
        bytes_original: layers.iter().map(|l| l.bytes_original).sum(),
        bytes_quantized: layers.iter().map(|l| l.bytes_quantized).sum(),
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Activation, FcLayerSpec};

    fn fc(cs: usize, ct: usize) -> LayerKind {
        LayerKind::Fc(FcLayerSpec {
            input_dim: cs,
            output_dim: ct,
            has_bias: true,
            activation: Activation::None,
        })
    }

    #[test]
    fn fc_formulas() {
        let l = fc(4, 8);
        assert_eq!(layer_flops(&l, &[4], None).unwrap(), 32);
        assert_eq!(
            layer_flops(&l, &[4], Some(&QuantizationConfig::new(2, 4))).unwrap(),
            32
        );
        assert_eq!(layer_bytes(&l, None).unwrap(), 128);
        // 4*4*4 codebook bytes + 2*8*2 bits
        assert_eq!(
            layer_bytes(&l, Some(&QuantizationConfig::new(2, 4))).unwrap(),
            64 + 4
        );
    }

    #[test]
    fn large_fc_storage() {
        let l = fc(9216, 4096);
        let cfg = QuantizationConfig::new(3, 16);
        assert_eq!(layer_bytes(&l, None).unwrap(), 150_994_944);
        assert_eq!(layer_bytes(&l, Some(&cfg)).unwrap(), 589_824 + 6_291_456);
    }

    #[test]
    fn non_power_of_two_is_rejected() {
        assert!(layer_bytes(&fc(4, 8), Some(&QuantizationConfig::new(2, 3))).is_err());
    }

    #[test]
    fn conv_formulas_and_padding_flag() {
        let spec = ConvLayerSpec::simple(4, 6, 3, 1, 1);
        let kind = LayerKind::Conv(spec);
        let cfg = QuantizationConfig::new(2, 8);
        assert_eq!(
            layer_flops(&kind, &[5, 5, 4], None).unwrap(),
            25 * 6 * 9 * 4
        );
        assert_eq!(
            layer_flops(&kind, &[5, 5, 4], Some(&cfg)).unwrap(),
            25 * 4 * 8 + 25 * 9 * 6 * 2
        );
        // per axis: 5 outputs x 3 taps minus the 2 taps that fall in the border
        let exact = layer_flops_with(
            &kind,
            &[5, 5, 4],
            Some(&cfg),
            AccountingOptions {
                exclude_padding: true,
            },
        )
        .unwrap();
        assert_eq!(exact, 25 * 4 * 8 + 13 * 13 * 6 * 2);
        assert_eq!(layer_bytes(&kind, None).unwrap(), 4 * 9 * 4 * 6);
        // 4*4*8 + ceil(9*2*6*3 / 8)
        assert_eq!(layer_bytes(&kind, Some(&cfg)).unwrap(), 128 + 41);
    }

    #[test]
    fn grouped_conv_sums_groups() {
        let mut spec = ConvLayerSpec::simple(4, 6, 1, 1, 0);
        spec.groups = 2;
        let kind = LayerKind::Conv(spec);
        assert_eq!(layer_flops(&kind, &[2, 2, 4], None).unwrap(), 2 * 4 * 3 * 2);
        assert_eq!(layer_bytes(&kind, None).unwrap(), 4 * 2 * 6);
        let cfg = QuantizationConfig::new(2, 2);
        // each group: table 4*2*2, reads 4*3*1
        assert_eq!(
            layer_flops(&kind, &[2, 2, 4], Some(&cfg)).unwrap(),
            2 * (16 + 12)
        );
    }
}
