use rayon::prelude::*;

use super::{improved_codeword, random_assignments, EcResult};
use crate::error::{dim_err, QcnnError, Result};
use crate::quant::{quantize_fc_naive, QuantizationConfig, QuantizedFcLayer};
use crate::tensor::DenseTensor;

/// Layer inputs `S_n` and desired responses `T_n` (bias already removed).
#[derive(Debug, Clone, PartialEq)]
pub struct FcCalibrationSet {
    input_dim: usize,
    output_dim: usize,
    inputs: Vec<f32>,
    targets: Vec<f32>,
}

impl FcCalibrationSet {
    /// `inputs` holds `N x C_s` values and `targets` `N x C_t`, sample-major.
    pub fn new(
        input_dim: usize,
        output_dim: usize,
        inputs: Vec<f32>,
        targets: Vec<f32>,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || inputs.is_empty() || inputs.len() % input_dim != 0 {
            return dim_err("calibration inputs must hold at least one C_s vector");
        }
        let n = inputs.len() / input_dim;
        if targets.len() != n * output_dim {
            return dim_err(format!(
                "{n} calibration inputs need {} target values, got {}",
                n * output_dim,
                targets.len()
            ));
        }
        if inputs.iter().chain(&targets).any(|v| !v.is_finite()) {
            return Err(QcnnError::NonFinite("calibration sample".into()));
        }
        Ok(Self {
            input_dim,
            output_dim,
            inputs,
            targets,
        })
    }

    pub fn from_pairs(pairs: &[(DenseTensor, DenseTensor)]) -> Result<Self> {
        let Some((s0, t0)) = pairs.first() else {
            return dim_err("calibration set needs at least one sample");
        };
        let (cs, ct) = (s0.len(), t0.len());
        let mut inputs = Vec::with_capacity(pairs.len() * cs);
        let mut targets = Vec::with_capacity(pairs.len() * ct);
        for (s, t) in pairs {
            if s.len() != cs || t.len() != ct {
                return dim_err("calibration samples have inconsistent sizes");
            }
            inputs.extend_from_slice(s.data());
            targets.extend_from_slice(t.data());
        }
        Self::new(cs, ct, inputs, targets)
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.input_dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn input(&self, n: usize) -> &[f32] {
        &self.inputs[n * self.input_dim..(n + 1) * self.input_dim]
    }

    pub fn target(&self, n: usize) -> &[f32] {
        &self.targets[n * self.output_dim..(n + 1) * self.output_dim]
    }
}

fn check_dims(q: &QuantizedFcLayer, calib: &FcCalibrationSet) -> Result<()> {
    if q.input_dim() != calib.input_dim() || q.output_dim() != calib.output_dim() {
        return dim_err(format!(
            "layer is {}x{}, calibration set is {}x{}",
            q.input_dim(),
            q.output_dim(),
            calib.input_dim(),
            calib.output_dim()
        ));
    }
    Ok(())
}

/// Products `<D_k^(m), S_n^(m)>` for all samples and codewords, `N x K`.
fn codeword_responses(q: &QuantizedFcLayer, calib: &FcCalibrationSet, m: usize) -> Vec<f64> {
    let d = q.subspace_dim();
    let k = q.codewords();
    let cb = q.codebook(m);
    let mut out = Vec::with_capacity(calib.len() * k);
    for n in 0..calib.len() {
        let s = &calib.input(n)[m * d..(m + 1) * d];
        for j in 0..k {
            out.push(
                cb.codeword(j)
                    .iter()
                    .zip(s)
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum(),
            );
        }
    }
    out
}

/// Current contribution of subspace `m` to every response, `N x C_t`.
fn subspace_contribution(q: &QuantizedFcLayer, responses: &[f64], m: usize, n: usize) -> Vec<f64> {
    let (k, ct) = (q.codewords(), q.output_dim());
    let assign = q.subspace_assignments(m);
    let mut out = vec![0.0; n * ct];
    out.par_chunks_mut(ct).enumerate().for_each(|(i, row)| {
        let resp = &responses[i * k..(i + 1) * k];
        for (o, &a) in row.iter_mut().zip(assign) {
            *o = resp[a as usize];
        }
    });
    out
}

fn objective_from(approx: &[f64], calib: &FcCalibrationSet) -> f64 {
    approx
        .par_iter()
        .zip(calib.targets.par_iter())
        .map(|(&y, &t)| {
            let e = t as f64 - y;
            e * e
        })
        .sum()
}

/// `sum_n ||T_n - sum_m (D^(m) B^(m))^T S_n^(m)||^2`; bias is not involved.
pub fn fc_response_objective(q: &QuantizedFcLayer, calib: &FcCalibrationSet) -> Result<f64> {
    check_dims(q, calib)?;
    let n = calib.len();
    let mut approx = vec![0.0f64; n * q.output_dim()];
    for m in 0..q.num_subspaces() {
        let resp = codeword_responses(q, calib, m);
        let contrib = subspace_contribution(q, &resp, m, n);
        for (a, c) in approx.iter_mut().zip(&contrib) {
            *a += c;
        }
    }
    Ok(objective_from(&approx, calib))
}

/// Statistics of one subspace visit: Gram matrix of the input sub-vectors
/// (`d x d`), `H = sum_n S_n^(m) R_n^(m)^T` stored column-major (`C_t x d`),
/// and the squared residual norm of every column.
pub(crate) struct SubspaceStats {
    pub gram: Vec<f64>,
    pub cross: Vec<f64>,
    pub residual_sq: Vec<f64>,
}

pub(crate) fn subspace_stats(
    calib: &FcCalibrationSet,
    residual: &[f64],
    m: usize,
    d: usize,
) -> SubspaceStats {
    let (n, ct) = (calib.len(), calib.output_dim());
    let mut gram = vec![0.0; d * d];
    for i in 0..n {
        let s = &calib.input(i)[m * d..(m + 1) * d];
        for a in 0..d {
            for b in 0..d {
                gram[a * d + b] += s[a] as f64 * s[b] as f64;
            }
        }
    }
    const BLOCK: usize = 64;
    let mut cross = vec![0.0; ct * d];
    let mut residual_sq = vec![0.0; ct];
    cross
        .par_chunks_mut(BLOCK * d)
        .zip(residual_sq.par_chunks_mut(BLOCK))
        .enumerate()
        .for_each(|(b, (h, rr))| {
            let c0 = b * BLOCK;
            let width = rr.len();
            for i in 0..n {
                let s = &calib.input(i)[m * d..(m + 1) * d];
                let row = &residual[i * ct + c0..i * ct + c0 + width];
                for (j, &r) in row.iter().enumerate() {
                    rr[j] += r * r;
                    for (hv, &sv) in h[j * d..(j + 1) * d].iter_mut().zip(s) {
                        *hv += sv as f64 * r;
                    }
                }
            }
        });
    SubspaceStats {
        gram,
        cross,
        residual_sq,
    }
}

/// Least-squares update of codeword `k` of subspace `m` from the columns currently assigned to it.
/// Returns whether the codeword changed.
pub(crate) fn update_codeword(
    q: &mut QuantizedFcLayer,
    stats: &SubspaceStats,
    m: usize,
    k: usize,
    ridge: f64,
) -> bool {
    let d = q.subspace_dim();
    let mut count = 0usize;
    let mut b = vec![0.0; d];
    for (c, &a) in q.subspace_assignments(m).iter().enumerate() {
        if a as usize == k {
            count += 1;
            for (bv, hv) in b.iter_mut().zip(&stats.cross[c * d..(c + 1) * d]) {
                *bv += hv;
            }
        }
    }
    if count == 0 {
        return false;
    }
    let a: Vec<f64> = stats.gram.iter().map(|g| g * count as f64).collect();
    match improved_codeword(&a, &b, q.codebook(m).codeword(k), ridge) {
        Some(x) => {
            q.codebook_mut(m).codeword_mut(k).copy_from_slice(&x);
            true
        }
        None => false,
    }
}

/// Per column, picks the codeword minimising the residual error; ties go to the lowest index.
pub(crate) fn update_assignments(q: &mut QuantizedFcLayer, stats: &SubspaceStats, m: usize) {
    let d = q.subspace_dim();
    let k = q.codewords();
    let cb = q.codebook(m).clone();
    let words: Vec<Vec<f64>> = (0..k)
        .map(|j| cb.codeword(j).iter().map(|&v| v as f64).collect())
        .collect();
    let quad: Vec<f64> = words
        .iter()
        .map(|w| {
            let mut acc = 0.0;
            for a in 0..d {
                for b in 0..d {
                    acc += w[a] * stats.gram[a * d + b] * w[b];
                }
            }
            acc
        })
        .collect();
    q.subspace_assignments_mut(m)
        .par_iter_mut()
        .enumerate()
        .for_each(|(c, slot)| {
            let h = &stats.cross[c * d..(c + 1) * d];
            let mut best = 0usize;
            let mut best_cost = f64::INFINITY;
            for (j, w) in words.iter().enumerate() {
                let lin: f64 = w.iter().zip(h).map(|(a, b)| a * b).sum();
                let cost = stats.residual_sq[c] - 2.0 * lin + quad[j];
                if cost < best_cost {
                    best_cost = cost;
                    best = j;
                }
            }
            *slot = best as u16;
        });
}

/// Error-corrected FC quantization: k-means initialisation, then
/// `cfg.ec_sweeps` block-coordinate sweeps over the subspaces.
///
/// `weights` is `[C_t, C_s]`; the calibration targets are the desired
/// responses without bias. `bias` is carried into the result untouched.
pub fn quantize_fc_ec(
    weights: &DenseTensor,
    bias: Option<&DenseTensor>,
    calib: &FcCalibrationSet,
    cfg: &QuantizationConfig,
) -> Result<EcResult<QuantizedFcLayer>> {
    let init = quantize_fc_naive(weights, bias, cfg)?.layer;
    let mut best = refine_fc_ec(init.clone(), calib, cfg)?;
    for start in 1..cfg.ec_restarts {
        let mut q = init.clone();
        for m in 0..q.num_subspaces() {
            let k = q.codewords();
            random_assignments(q.subspace_assignments_mut(m), k, cfg.seed ^ m as u64, start);
        }
        best = best.better(refine_fc_ec(q, calib, cfg)?);
    }
    Ok(best)
}

/// Runs the block-coordinate sweeps from an existing quantization.
pub fn refine_fc_ec(
    mut q: QuantizedFcLayer,
    calib: &FcCalibrationSet,
    cfg: &QuantizationConfig,
) -> Result<EcResult<QuantizedFcLayer>> {
    check_dims(&q, calib)?;
    let n = calib.len();
    let (m_count, d, k) = (q.num_subspaces(), q.subspace_dim(), q.codewords());

    let mut approx = vec![0.0f64; n * q.output_dim()];
    for m in 0..m_count {
        let resp = codeword_responses(&q, calib, m);
        for (a, c) in approx
            .iter_mut()
            .zip(subspace_contribution(&q, &resp, m, n))
        {
            *a += c;
        }
    }
    let mut history = vec![objective_from(&approx, calib)];

    for _ in 0..cfg.ec_sweeps {
        for m in 0..m_count {
            let resp = codeword_responses(&q, calib, m);
            let old = subspace_contribution(&q, &resp, m, n);
            let residual: Vec<f64> = calib
                .targets
                .par_iter()
                .zip(approx.par_iter())
                .zip(old.par_iter())
                .map(|((&t, &y), &own)| t as f64 - y + own)
                .collect();
            let saved = (
                q.codebook(m).clone(),
                q.subspace_assignments(m).to_vec(),
                approx.clone(),
            );
            let stats = subspace_stats(calib, &residual, m, d);
            // Codewords only touch their own columns, so they are updated independently.
            for j in 0..k {
                update_codeword(&mut q, &stats, m, j, cfg.ridge);
            }
            update_assignments(&mut q, &stats, m);

            let resp = codeword_responses(&q, calib, m);
            let new = subspace_contribution(&q, &resp, m, n);
            approx
                .par_iter_mut()
                .zip(old.par_iter().zip(new.par_iter()))
                .for_each(|(a, (o, nw))| *a += nw - o);
            let prev = *history.last().unwrap();
            let obj = objective_from(&approx, calib);
            if obj > prev {
                // only rounding can get here; keep the previous state of this subspace
                let (cb, assign, y) = saved;
                *q.codebook_mut(m) = cb;
                q.subspace_assignments_mut(m).copy_from_slice(&assign);
                approx = y;
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
