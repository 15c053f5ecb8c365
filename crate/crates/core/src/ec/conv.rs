//! Block coordinate descent for conv layers.
//!
//! Per subspace `m` and response row `r = (n, p_t)`:
//!
//! * `R` is the target minus the response of every other subspace,
//! * `Q` (codebook update) additionally removes the kernel positions that use
//!   other codewords, leaving one least-squares problem per codeword,
//! * `P` (assignment update) removes every kernel position except the one
//!   being reassigned, which is then chosen by trying all codewords.
//!
//! Codewords and kernel positions are visited sequentially.

use rayon::prelude::*;

use super::{improved_codeword, random_assignments, EcResult};
use crate::error::{dim_err, QcnnError, Result};
use crate::quant::{quantize_conv_naive, QuantizationConfig, QuantizedConvLayer};
use crate::tensor::{conv_geometry, source_index, ConvLayerSpec, DenseTensor};

/// Input feature maps `S_n` (`[h, w, C_s]`) and desired responses `T_n`
/// (`[d_t, d_t, C_t]`, bias removed).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvCalibrationSet {
    input_shape: [usize; 3],
    target_shape: [usize; 3],
    inputs: Vec<f32>,
    targets: Vec<f32>,
}

impl ConvCalibrationSet {
    pub fn new(
        input_shape: [usize; 3],
        target_shape: [usize; 3],
        inputs: Vec<f32>,
        targets: Vec<f32>,
    ) -> Result<Self> {
        let in_len: usize = input_shape.iter().product();
        let out_len: usize = target_shape.iter().product();
        if in_len == 0 || out_len == 0 || inputs.is_empty() || inputs.len() % in_len != 0 {
            return dim_err("conv calibration needs at least one sample of positive size");
        }
        let n = inputs.len() / in_len;
        if targets.len() != n * out_len {
            return dim_err(format!(
                "{n} calibration inputs need {} target values, got {}",
                n * out_len,
                targets.len()
            ));
        }
        if inputs.iter().chain(&targets).any(|v| !v.is_finite()) {
            return Err(QcnnError::NonFinite("calibration sample".into()));
        }
        Ok(Self {
            input_shape,
            target_shape,
            inputs,
            targets,
        })
    }

    pub fn from_pairs(pairs: &[(DenseTensor, DenseTensor)]) -> Result<Self> {
        let Some((s0, t0)) = pairs.first() else {
            return dim_err("calibration set needs at least one sample");
        };
        let to3 = |t: &DenseTensor| -> Result<[usize; 3]> {
            match t.shape() {
                &[a, b, c] => Ok([a, b, c]),
                other => dim_err(format!(
                    "conv calibration tensors must be 3-D, got {other:?}"
                )),
            }
        };
        let (is, ts) = (to3(s0)?, to3(t0)?);
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for (s, t) in pairs {
            if to3(s)? != is || to3(t)? != ts {
                return dim_err("calibration samples have inconsistent shapes");
            }
            inputs.extend_from_slice(s.data());
            targets.extend_from_slice(t.data());
        }
        Self::new(is, ts, inputs, targets)
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.input_shape.iter().product::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn target_shape(&self) -> [usize; 3] {
        self.target_shape
    }
}

/// Response geometry shared by all subspaces.
struct Layout {
    spec: ConvLayerSpec,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    positions: usize,
    rows: usize,
}

impl Layout {
    fn new(spec: &ConvLayerSpec, calib: &ConvCalibrationSet) -> Result<Self> {
        let (h, w, oh, ow) = conv_geometry(spec, &calib.input_shape)?;
        if calib.target_shape != [oh, ow, spec.out_channels] {
            return dim_err(format!(
                "targets are {:?}, layer produces [{oh}, {ow}, {}]",
                calib.target_shape, spec.out_channels
            ));
        }
        Ok(Self {
            spec: *spec,
            h,
            w,
            oh,
            ow,
            positions: spec.kernel_size * spec.kernel_size,
            rows: calib.len() * oh * ow,
        })
    }

    /// Sub-vector of subspace `m` read at every `(row, p_k)`, zero under padding;
    /// `rows x positions x d`.
    fn lift(&self, calib: &ConvCalibrationSet, m: usize, d: usize) -> Vec<f64> {
        let cs = self.spec.in_channels;
        let dk = self.spec.kernel_size;
        let img_len = self.h * self.w * cs;
        let mut x = vec![0.0f64; self.rows * self.positions * d];
        x.par_chunks_mut(self.positions * d)
            .enumerate()
            .for_each(|(r, dst)| {
                let n = r / (self.oh * self.ow);
                let oy = (r / self.ow) % self.oh;
                let ox = r % self.ow;
                let img = &calib.inputs[n * img_len..(n + 1) * img_len];
                for ky in 0..dk {
                    let Some(iy) =
                        source_index(oy, ky, self.spec.stride, self.spec.padding, self.h)
                    else {
                        continue;
                    };
                    for kx in 0..dk {
                        let Some(ix) =
                            source_index(ox, kx, self.spec.stride, self.spec.padding, self.w)
                        else {
                            continue;
                        };
                        let pk = ky * dk + kx;
                        let src = &img[(iy * self.w + ix) * cs + m * d
                            ..(iy * self.w + ix) * cs + (m + 1) * d];
                        for (o, &v) in dst[pk * d..(pk + 1) * d].iter_mut().zip(src) {
                            *o = v as f64;
                        }
                    }
                }
            });
        x
    }
}

/// `<D_k, X[r, p_k]>` for every row, position and codeword; `rows x positions x K`.
fn position_responses(q: &QuantizedConvLayer, lifted: &[f64], m: usize) -> Vec<f64> {
    let d = q.subspace_dim();
    let k = q.codewords();
    let cb = q.codebook(m);
    let words: Vec<Vec<f64>> = (0..k)
        .map(|j| cb.codeword(j).iter().map(|&v| v as f64).collect())
        .collect();
    let mut out = vec![0.0; lifted.len() / d * k];
    out.par_chunks_mut(k)
        .zip(lifted.par_chunks(d))
        .for_each(|(dst, x)| {
            for (o, wv) in dst.iter_mut().zip(&words) {
                *o = wv.iter().zip(x).map(|(a, b)| a * b).sum();
            }
        });
    out
}

fn refresh_codeword_responses(
    q: &QuantizedConvLayer,
    lifted: &[f64],
    m: usize,
    k: usize,
    resp: &mut [f64],
) {
    let d = q.subspace_dim();
    let kk = q.codewords();
    let word: Vec<f64> = q
        .codebook(m)
        .codeword(k)
        .iter()
        .map(|&v| v as f64)
        .collect();
    resp.par_chunks_mut(kk)
        .zip(lifted.par_chunks(d))
        .for_each(|(dst, x)| {
            dst[k] = word.iter().zip(x).map(|(a, b)| a * b).sum();
        });
}

/// Response of subspace `m`, `rows x C_t`.
fn contribution(q: &QuantizedConvLayer, resp: &[f64], m: usize, positions: usize) -> Vec<f64> {
    let (k, ct) = (q.codewords(), q.spec().out_channels);
    let rows = resp.len() / (positions * k);
    let mut out = vec![0.0; rows * ct];
    out.par_chunks_mut(ct).enumerate().for_each(|(r, dst)| {
        for pk in 0..positions {
            let pr = &resp[(r * positions + pk) * k..(r * positions + pk + 1) * k];
            for (o, &a) in dst.iter_mut().zip(q.position_assignments(m, pk)) {
                *o += pr[a as usize];
            }
        }
    });
    out
}

fn objective_from(approx: &[f64], calib: &ConvCalibrationSet) -> f64 {
    approx
        .par_iter()
        .zip(calib.targets.par_iter())
        .map(|(&y, &t)| {
            let e = t as f64 - y;
            e * e
        })
        .sum()
}

fn full_approximation(
    q: &QuantizedConvLayer,
    layout: &Layout,
    calib: &ConvCalibrationSet,
) -> Vec<f64> {
    let mut approx = vec![0.0f64; layout.rows * q.spec().out_channels];
    for m in 0..q.num_subspaces() {
        let lifted = layout.lift(calib, m, q.subspace_dim());
        let resp = position_responses(q, &lifted, m);
        for (a, c) in approx
            .iter_mut()
            .zip(contribution(q, &resp, m, layout.positions))
        {
            *a += c;
        }
    }
    approx
}

/// Squared response error summed over samples and response positions; bias is not involved.
pub fn conv_response_objective(q: &QuantizedConvLayer, calib: &ConvCalibrationSet) -> Result<f64> {
    let layout = Layout::new(q.spec(), calib)?;
    Ok(objective_from(
        &full_approximation(q, &layout, calib),
        calib,
    ))
}

/// Sequential least-squares update of every codeword of subspace `m`.
#[allow(clippy::too_many_arguments)]
fn update_codebook(
    q: &mut QuantizedConvLayer,
    layout: &Layout,
    lifted: &[f64],
    resp: &mut [f64],
    own: &mut [f64],
    residual: &[f64],
    m: usize,
    ridge: f64,
) {
    let d = q.subspace_dim();
    let kk = q.codewords();
    let ct = q.spec().out_channels;
    let p = layout.positions;
    for k in 0..kk {
        // positions of each column that currently use codeword k
        let users: Vec<Vec<usize>> = (0..ct)
            .map(|c| (0..p).filter(|&pk| q.assignment(m, pk, c) == k).collect())
            .collect();
        if users.iter().all(Vec::is_empty) {
            continue;
        }
        let mut a = vec![0.0; d * d];
        let mut b = vec![0.0; d];
        let mut f = vec![0.0; d];
        for (c, pks) in users.iter().enumerate() {
            if pks.is_empty() {
                continue;
            }
            for r in 0..layout.rows {
                f.iter_mut().for_each(|v| *v = 0.0);
                let mut mine = 0.0;
                for &pk in pks {
                    let x = &lifted[(r * p + pk) * d..(r * p + pk + 1) * d];
                    for (fv, xv) in f.iter_mut().zip(x) {
                        *fv += xv;
                    }
                    mine += resp[(r * p + pk) * kk + k];
                }
                let target = residual[r * ct + c] - (own[r * ct + c] - mine);
                for i in 0..d {
                    b[i] += f[i] * target;
                    for j in 0..d {
                        a[i * d + j] += f[i] * f[j];
                    }
                }
            }
        }
        let Some(x) = improved_codeword(&a, &b, q.codebook(m).codeword(k), ridge) else {
            continue;
        };
        let before: Vec<f64> = (0..layout.rows * p).map(|i| resp[i * kk + k]).collect();
        q.codebook_mut(m).codeword_mut(k).copy_from_slice(&x);
        refresh_codeword_responses(q, lifted, m, k, resp);
        for (c, pks) in users.iter().enumerate() {
            for r in 0..layout.rows {
                let delta: f64 = pks
                    .iter()
                    .map(|&pk| resp[(r * p + pk) * kk + k] - before[r * p + pk])
                    .sum();
                own[r * ct + c] += delta;
            }
        }
    }
}

/// Sequential over kernel positions; at each position every column tries all codewords.
fn update_assignments(
    q: &mut QuantizedConvLayer,
    layout: &Layout,
    resp: &[f64],
    own: &mut [f64],
    residual: &[f64],
    m: usize,
) {
    let kk = q.codewords();
    let ct = q.spec().out_channels;
    let p = layout.positions;
    for pk in 0..p {
        let current = q.position_assignments(m, pk).to_vec();
        let chosen: Vec<u16> = (0..ct)
            .into_par_iter()
            .map(|c| {
                let cur = current[c] as usize;
                let mut costs = vec![0.0f64; kk];
                for r in 0..layout.rows {
                    let pr = &resp[(r * p + pk) * kk..(r * p + pk + 1) * kk];
                    let target = residual[r * ct + c] - (own[r * ct + c] - pr[cur]);
                    for (cost, &v) in costs.iter_mut().zip(pr) {
                        let e = v - target;
                        *cost += e * e;
                    }
                }
                let mut best = 0usize;
                for j in 1..kk {
                    if costs[j] < costs[best] {
                        best = j;
                    }
                }
                best as u16
            })
            .collect();
        for (c, (&old, &new)) in current.iter().zip(&chosen).enumerate() {
            if old != new {
                for r in 0..layout.rows {
                    let pr = &resp[(r * p + pk) * kk..(r * p + pk + 1) * kk];
                    own[r * ct + c] += pr[new as usize] - pr[old as usize];
                }
            }
        }
        q.position_assignments_mut(m, pk).copy_from_slice(&chosen);
    }
}

/// Error-corrected conv quantization: k-means initialisation, then
/// `cfg.ec_sweeps` sweeps of block coordinate descent over the subspaces.
pub fn quantize_conv_ec(
    kernels: &DenseTensor,
    bias: Option<&DenseTensor>,
    spec: &ConvLayerSpec,
    calib: &ConvCalibrationSet,
    cfg: &QuantizationConfig,
) -> Result<EcResult<QuantizedConvLayer>> {
    // fail on geometry before spending time in k-means
    Layout::new(spec, calib)?;
    let init = quantize_conv_naive(kernels, bias, spec, cfg)?.layer;
    let mut best = refine_conv_ec(init.clone(), calib, cfg)?;
    for start in 1..cfg.ec_restarts {
        let mut q = init.clone();
        for m in 0..q.num_subspaces() {
            for pk in 0..q.kernel_positions() {
                let seed = cfg.seed ^ m as u64 ^ ((pk as u64) << 32);
                let k = q.codewords();
                random_assignments(q.position_assignments_mut(m, pk), k, seed, start);
            }
        }
        best = best.better(refine_conv_ec(q, calib, cfg)?);
    }
    Ok(best)
}

pub fn refine_conv_ec(
    mut q: QuantizedConvLayer,
    calib: &ConvCalibrationSet,
    cfg: &QuantizationConfig,
) -> Result<EcResult<QuantizedConvLayer>> {
    let layout = Layout::new(q.spec(), calib)?;
    let d = q.subspace_dim();
    let m_count = q.num_subspaces();
    let mut approx = full_approximation(&q, &layout, calib);
    let mut history = vec![objective_from(&approx, calib)];

    for _ in 0..cfg.ec_sweeps {
        for m in 0..m_count {
            let lifted = layout.lift(calib, m, d);
            let mut resp = position_responses(&q, &lifted, m);
            let start = contribution(&q, &resp, m, layout.positions);
            let residual: Vec<f64> = calib
                .targets
                .par_iter()
                .zip(approx.par_iter())
                .zip(start.par_iter())
                .map(|((&t, &y), &s)| t as f64 - y + s)
                .collect();
            let saved_book = q.codebook(m).clone();
            let saved_assign: Vec<Vec<u16>> = (0..layout.positions)
                .map(|pk| q.position_assignments(m, pk).to_vec())
                .collect();
            let saved_approx = approx.clone();
            let mut own = start.clone();
            update_codebook(
                &mut q, &layout, &lifted, &mut resp, &mut own, &residual, m, cfg.ridge,
            );
            update_assignments(&mut q, &layout, &resp, &mut own, &residual, m);

            // rebuild this subspace's response exactly rather than trusting the running deltas
            let finish = contribution(&q, &resp, m, layout.positions);
            approx
                .par_iter_mut()
                .zip(start.par_iter().zip(finish.par_iter()))
                .for_each(|(a, (s, f))| *a += f - s);
            let prev = *history.last().unwrap();
            let obj = objective_from(&approx, calib);
            if obj > prev {
                // only rounding can get here; keep the previous state of this subspace
                *q.codebook_mut(m) = saved_book;
                for (pk, a) in saved_assign.iter().enumerate() {
                    q.position_assignments_mut(m, pk).copy_from_slice(a);
                }
                approx = saved_approx;
                history.push(prev);
            } else {
                history.push(obj);
            }
        }
    }
    Ok(EcResult {
        layer: q,
        history,
        subspaces: m_count,
    })
}
