//! Model file format.
//!
//! ```text
//! QCNN-MODEL <version>\n
//! <manifest: one line of JSON>\n
//! <blob section>
//! ```
//!
//! Blob offsets are relative to the start of the blob section. Real values are
//! little-endian `f32`; assignments are bit-packed (see [`PackedAssignments`]).
//! Every blob carries a CRC-32 of its bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::packing::{index_bits, PackedAssignments};
use crate::error::{QcnnError, Result};
use crate::pipeline::{LayerKind, LayerParams, Network, NetworkSpec};
use crate::quant::{QuantizedConvLayer, QuantizedFcLayer, SubCodebook};
use crate::tensor::DenseTensor;

pub const MAGIC: &str = "QCNN-MODEL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub offset: u64,
    pub length: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "storage", rename_all = "snake_case")]
pub enum LayerRecord {
    None,
    Dense {
        weights: BlobRef,
        bias: Option<BlobRef>,
    },
    Quantized {
        subspace_dim: usize,
        subspaces: usize,
        codewords: usize,
        index_bits: u32,
        /// `M x K x C'_s` reals, codeword-major within a subspace.
        codebooks: BlobRef,
        /// `(m, p_k, c_t)` order, `c_t` fastest.
        assignments: BlobRef,
        bias: Option<BlobRef>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub network: NetworkSpec,
    pub layers: Vec<LayerRecord>,
}

impl ModelManifest {
    /// Total bytes of blob data referenced.
    pub fn blob_bytes(&self) -> u64 {
        let refs = |r: &LayerRecord| -> Vec<u64> {
            match r {
                LayerRecord::None => vec![],
                LayerRecord::Dense { weights, bias } => [Some(weights), bias.as_ref()]
                    .into_iter()
                    .flatten()
                    .map(|b| b.length)
                    .collect(),
                LayerRecord::Quantized {
                    codebooks,
                    assignments,
                    bias,
                    ..
                } => [Some(codebooks), Some(assignments), bias.as_ref()]
                    .into_iter()
                    .flatten()
                    .map(|b| b.length)
                    .collect(),
            }
        };
        self.layers.iter().flat_map(refs).sum()
    }
}

struct BlobWriter {
    data: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, bytes: &[u8]) -> BlobRef {
        let r = BlobRef {
            offset: self.data.len() as u64,
            length: bytes.len() as u64,
            crc32: crc32fast::hash(bytes),
        };
        self.data.extend_from_slice(bytes);
        r
    }

    fn push_reals(&mut self, v: &[f32]) -> BlobRef {
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        self.push(&bytes)
    }
}

fn codebook_reals(books: &[SubCodebook]) -> Vec<f32> {
    books
        .iter()
        .flat_map(|b| b.data().iter().copied())
        .collect()
}

pub fn model_to_bytes(net: &Network) -> Result<Vec<u8>> {
    let mut blobs = BlobWriter { data: Vec::new() };
    let mut records = Vec::new();
    for layer in net.layers() {
        let rec = match &layer.params {
            LayerParams::None => LayerRecord::None,
            LayerParams::Dense { weights, bias } => LayerRecord::Dense {
                weights: blobs.push_reals(weights.data()),
                bias: bias.as_ref().map(|b| blobs.push_reals(b.data())),
            },
            LayerParams::QuantizedFc(q) => LayerRecord::Quantized {
                subspace_dim: q.subspace_dim(),
                subspaces: q.num_subspaces(),
                codewords: q.codewords(),
                index_bits: index_bits(q.codewords()),
                codebooks: blobs.push_reals(&codebook_reals(q.codebooks())),
                assignments: blobs
                    .push(PackedAssignments::pack(q.assignments(), q.codewords())?.as_bytes()),
                bias: q.bias().map(|b| blobs.push_reals(b.data())),
            },
            LayerParams::QuantizedConv(q) => LayerRecord::Quantized {
                subspace_dim: q.subspace_dim(),
                subspaces: q.num_subspaces(),
                codewords: q.codewords(),
                index_bits: index_bits(q.codewords()),
                codebooks: blobs.push_reals(&codebook_reals(q.codebooks())),
                assignments: blobs
                    .push(PackedAssignments::pack(q.assignments(), q.codewords())?.as_bytes()),
                bias: q.bias().map(|b| blobs.push_reals(b.data())),
            },
        };
        records.push(rec);
    }
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        network: net.spec(),
        layers: records,
    };
    let json = serde_json::to_string(&manifest).map_err(|e| QcnnError::Format(e.to_string()))?;
    let mut out = format!("{MAGIC} {FORMAT_VERSION}\n{json}\n").into_bytes();
    out.extend_from_slice(&blobs.data);
    Ok(out)
}

pub fn save_model(path: impl AsRef<Path>, net: &Network) -> Result<()> {
    std::fs::write(path, model_to_bytes(net)?)?;
    Ok(())
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(QcnnError::Format(msg.into()))
}

struct BlobReader<'a> {
    data: &'a [u8],
}

impl BlobReader<'_> {
    fn bytes(&self, name: &str, r: &BlobRef) -> Result<&[u8]> {
        let available = self.data.len() as u64;
        let end = r.offset.checked_add(r.length);
        if end.is_none_or(|e| e > available) {
            return Err(QcnnError::TruncatedBlob {
                name: name.to_string(),
                offset: r.offset,
                needed: r.length,
                available,
            });
        }
        let bytes = &self.data[r.offset as usize..(r.offset + r.length) as usize];
        let actual = crc32fast::hash(bytes);
        if actual != r.crc32 {
            return Err(QcnnError::Checksum {
                name: name.to_string(),
                expected: r.crc32,
                actual,
            });
        }
        Ok(bytes)
    }

    fn reals(&self, name: &str, r: &BlobRef, count: usize) -> Result<Vec<f32>> {
        let bytes = self.bytes(name, r)?;
        if bytes.len() != count * 4 {
            return format_err(format!(
                "blob `{name}` holds {} bytes, expected {}",
                bytes.len(),
                count * 4
            ));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn tensor(&self, name: &str, r: &BlobRef, shape: Vec<usize>) -> Result<DenseTensor> {
        let v = self.reals(name, r, shape.iter().product())?;
        DenseTensor::new(shape, v)
    }
}

/// Splits the header line and manifest off the blob section.
fn split_sections(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    let nl = |from: usize| {
        bytes[from..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|p| p + from)
    };
    let Some(h) = nl(0) else {
        return format_err("missing model header line");
    };
    let header = std::str::from_utf8(&bytes[..h])
        .map_err(|_| QcnnError::Format("header is not text".into()))?;
    let Some(version) = header.strip_prefix(MAGIC).map(str::trim) else {
        return format_err(format!("not a model file (header `{header}`)"));
    };
    let found: u32 = version
        .parse()
        .map_err(|_| QcnnError::Format(format!("bad format version `{version}`")))?;
    if found != FORMAT_VERSION {
        return Err(QcnnError::VersionMismatch {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let Some(m) = nl(h + 1) else {
        return format_err("model manifest is truncated");
    };
    Ok((&bytes[h + 1..m], &bytes[m + 1..]))
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Network> {
    let (manifest, blob_section) = split_sections(bytes)?;
    let manifest: ModelManifest = serde_json::from_slice(manifest)
        .map_err(|e| QcnnError::Format(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(QcnnError::VersionMismatch {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    if manifest.layers.len() != manifest.network.layers.len() {
        return format_err("manifest layer records do not match the network");
    }
    let blobs = BlobReader { data: blob_section };
    let mut params = Vec::new();
    for (spec, rec) in manifest.network.layers.iter().zip(&manifest.layers) {
        let name = &spec.name;
        let bias_len = match &spec.kind {
            LayerKind::Fc(s) => s.output_dim,
            LayerKind::Conv(s) => s.out_channels,
            _ => 0,
        };
        let bias = |b: &Option<BlobRef>| -> Result<Option<DenseTensor>> {
            b.as_ref()
                .map(|r| blobs.tensor(&format!("{name}.bias"), r, vec![bias_len]))
                .transpose()
        };
        let p = match (rec, &spec.kind) {
            (LayerRecord::None, LayerKind::MaxPool(_) | LayerKind::Flatten) => LayerParams::None,
            (LayerRecord::Dense { weights, bias: b }, LayerKind::Fc(s)) => LayerParams::Dense {
                weights: blobs.tensor(
                    &format!("{name}.weights"),
                    weights,
                    vec![s.output_dim, s.input_dim],
                )?,
                bias: bias(b)?,
            },
            (LayerRecord::Dense { weights, bias: b }, LayerKind::Conv(s)) => LayerParams::Dense {
                weights: blobs.tensor(&format!("{name}.weights"), weights, s.kernel_shape())?,
                bias: bias(b)?,
            },
            (
                LayerRecord::Quantized {
                    subspace_dim,
                    subspaces,
                    codewords,
                    index_bits: bits,
                    codebooks,
                    assignments,
                    bias: b,
                },
                kind @ (LayerKind::Fc(_) | LayerKind::Conv(_)),
            ) => {
                let (d, m, k) = (*subspace_dim, *subspaces, *codewords);
                if *bits != index_bits(k) {
                    return format_err(format!(
                        "layer `{name}`: {bits}-bit indices for {k} codewords"
                    ));
                }
                let reals = blobs.reals(&format!("{name}.codebooks"), codebooks, m * k * d)?;
                let books = reals
                    .chunks_exact((k * d).max(1))
                    .map(|c| SubCodebook::new(d, c.to_vec()))
                    .collect::<Result<Vec<_>>>()?;
                let (positions, ct) = match kind {
                    LayerKind::Conv(s) => (s.kernel_size * s.kernel_size, s.out_channels),
                    LayerKind::Fc(s) => (1, s.output_dim),
                    _ => unreachable!(),
                };
                let packed = blobs
                    .bytes(&format!("{name}.assignments"), assignments)?
                    .to_vec();
                let idx =
                    PackedAssignments::from_bytes(packed, *bits, m * positions * ct)?.unpack();
                match kind {
                    LayerKind::Fc(s) => LayerParams::QuantizedFc(QuantizedFcLayer::new(
                        s.input_dim,
                        s.output_dim,
                        d,
                        books,
                        idx,
                        bias(b)?,
                    )?),
                    LayerKind::Conv(s) => LayerParams::QuantizedConv(QuantizedConvLayer::new(
                        *s,
                        d,
                        books,
                        idx,
                        bias(b)?,
                    )?),
                    _ => unreachable!(),
                }
            }
            _ => {
                return format_err(format!(
                    "layer `{name}`: storage record does not fit the layer type"
                ))
            }
        };
        params.push(p);
    }
    Network::new(manifest.network, params)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    model_from_bytes(&std::fs::read(path)?)
}
