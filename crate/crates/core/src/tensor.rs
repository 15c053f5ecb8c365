//! Dense tensors and the exact (unquantized) layer forwards.
//!
//! Every quantized path in the crate is measured against the functions in
//! this module. Layouts are row-major with the last index fastest:
//!
//! * feature maps: `[height, width, channels]`
//! * FC weights: `[C_t, C_s]`, one contiguous weight vector per output neuron
//! * conv kernels: `[C_t, d_k, d_k, C_s / groups]`, input channel fastest
//!   within a kernel position, so a channel-subspace slice is contiguous.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, QcnnError, Result};

/// N-dimensional array of `f32` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl DenseTensor {
    /// Builds a tensor, checking the element count and that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return dim_err(format!("tensor extents must be positive, got {shape:?}"));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return dim_err(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(QcnnError::NonFinite(format!(
                "tensor element {pos} is {}",
                data[pos]
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn random_uniform<R: Rng + ?Sized>(
        shape: Vec<usize>,
        lo: f32,
        hi: f32,
        rng: &mut R,
    ) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Self { shape, data }
    }

    /// Standard-normal samples scaled by `std`.
    pub fn random_normal<R: Rng + ?Sized>(shape: Vec<usize>, std: f32, rng: &mut R) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return dim_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Relu,
    Softmax,
}

impl Activation {
    pub fn apply(self, t: &mut DenseTensor) {
        match self {
            Activation::None => {}
            Activation::Relu => {
                for v in t.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            Activation::Softmax => softmax_in_place(t.data_mut()),
        }
    }
}

pub(crate) fn softmax_in_place(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcLayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    #[serde(default = "default_true")]
    pub has_bias: bool,
    #[serde(default)]
    pub activation: Activation,
}

impl FcLayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return config_err("fc layer dims must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    #[serde(default = "default_one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default = "default_one")]
    pub groups: usize,
    #[serde(default = "default_true")]
    pub has_bias: bool,
    #[serde(default)]
    pub activation: Activation,
}

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

impl ConvLayerSpec {
    /// Ungrouped conv with no bias and no activation.
    pub fn simple(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
            groups: 1,
            has_bias: false,
            activation: Activation::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel_size == 0
            || self.stride == 0
        {
            return config_err("conv channels, kernel size and stride must be positive");
        }
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return config_err(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            ));
        }
        if self.activation == Activation::Softmax {
            return config_err("softmax activation is only allowed on fc layers");
        }
        Ok(())
    }

    /// Spatial output extent for an input extent.
    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel_size {
            return dim_err(format!(
                "input extent {input} with padding {} is smaller than kernel {}",
                self.padding, self.kernel_size
            ));
        }
        Ok((padded - self.kernel_size) / self.stride + 1)
    }

    pub fn kernel_shape(&self) -> Vec<usize> {
        vec![
            self.out_channels,
            self.kernel_size,
            self.kernel_size,
            self.in_channels / self.groups,
        ]
    }
}

/// Max pooling; `ceil_mode` follows the Caffe output-size convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub size: usize,
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default)]
    pub ceil_mode: bool,
}

impl PoolSpec {
    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if self.size == 0 || self.stride == 0 || padded < self.size {
            return dim_err(format!(
                "pool {}x{} stride {} does not fit input extent {input}",
                self.size, self.size, self.stride
            ));
        }
        let span = padded - self.size;
        let mut out = if self.ceil_mode {
            span.div_ceil(self.stride) + 1
        } else {
            span / self.stride + 1
        };
        // last window must start inside the (left-padded) input
        if self.ceil_mode && (out - 1) * self.stride >= input + self.padding {
            out -= 1;
        }
        Ok(out)
    }
}

fn check_fc_shapes(
    weights: &DenseTensor,
    bias: Option<&DenseTensor>,
    input_len: usize,
) -> Result<(usize, usize)> {
    if weights.ndim() != 2 {
        return dim_err(format!(
            "fc weights must be [C_t, C_s], got {:?}",
            weights.shape()
        ));
    }
    let (ct, cs) = (weights.shape()[0], weights.shape()[1]);
    if input_len != cs {
        return dim_err(format!(
            "fc input has {input_len} values, weights expect {cs}"
        ));
    }
    if let Some(b) = bias {
        if b.len() != ct {
            return dim_err(format!("fc bias has {} values, expected {ct}", b.len()));
        }
    }
    Ok((cs, ct))
}

/// `T(c_t) = <W_{c_t}, S> + bias(c_t)`; activation is not applied.
pub fn fc_forward(
    weights: &DenseTensor,
    bias: Option<&DenseTensor>,
    input: &DenseTensor,
) -> Result<DenseTensor> {
    let (cs, ct) = check_fc_shapes(weights, bias, input.len())?;
    let s = input.data();
    let w = weights.data();
    let out: Vec<f32> = (0..ct)
        .map(|c| {
            let col = &w[c * cs..(c + 1) * cs];
            let dot: f32 = col.iter().zip(s).map(|(a, b)| a * b).sum();
            dot + bias.map_or(0.0, |b| b.data()[c])
        })
        .collect();
    Ok(DenseTensor {
        shape: vec![ct],
        data: out,
    })
}

/// Checks a `[h, w, c]` feature map against a conv spec and returns `(h, w, out_h, out_w)`.
pub fn conv_geometry(
    spec: &ConvLayerSpec,
    input_shape: &[usize],
) -> Result<(usize, usize, usize, usize)> {
    spec.validate()?;
    if input_shape.len() != 3 || input_shape[2] != spec.in_channels {
        return dim_err(format!(
            "conv input must be [h, w, {}], got {input_shape:?}",
            spec.in_channels
        ));
    }
    let (h, w) = (input_shape[0], input_shape[1]);
    Ok((h, w, spec.output_extent(h)?, spec.output_extent(w)?))
}

/// Input coordinate read by output coordinate `o` at kernel offset `k`, or `None` under padding.
#[inline]
pub(crate) fn source_index(
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    extent: usize,
) -> Option<usize> {
    let pos = o * stride + k;
    if pos < pad || pos - pad >= extent {
        None
    } else {
        Some(pos - pad)
    }
}

/// Exact convolution: each response sums the channel-wise inner products over
/// the receptive field, plus bias. Padding reads contribute zero.
pub fn conv_forward(
    kernels: &DenseTensor,
    bias: Option<&DenseTensor>,
    input: &DenseTensor,
    spec: &ConvLayerSpec,
) -> Result<DenseTensor> {
    let (h, w, oh, ow) = conv_geometry(spec, input.shape())?;
    if kernels.shape() != spec.kernel_shape().as_slice() {
        return dim_err(format!(
            "conv kernels must be {:?}, got {:?}",
            spec.kernel_shape(),
            kernels.shape()
        ));
    }
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return dim_err(format!(
                "conv bias has {} values, expected {}",
                b.len(),
                spec.out_channels
            ));
        }
    }
    let (cs, ct, dk) = (spec.in_channels, spec.out_channels, spec.kernel_size);
    let cg = cs / spec.groups;
    let ctg = ct / spec.groups;
    let s = input.data();
    let kd = kernels.data();
    let mut out = vec![0.0f32; oh * ow * ct];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut out[(oy * ow + ox) * ct..(oy * ow + ox + 1) * ct];
            for (c, slot) in dst.iter_mut().enumerate() {
                let g = c / ctg;
                let mut acc = 0.0f32;
                for ky in 0..dk {
                    let Some(iy) = source_index(oy, ky, spec.stride, spec.padding, h) else {
                        continue;
                    };
                    for kx in 0..dk {
                        let Some(ix) = source_index(ox, kx, spec.stride, spec.padding, w) else {
                            continue;
                        };
                        let sv = &s[(iy * w + ix) * cs + g * cg..(iy * w + ix) * cs + (g + 1) * cg];
                        let kv =
                            &kd[((c * dk + ky) * dk + kx) * cg..((c * dk + ky) * dk + kx + 1) * cg];
                        for (a, b) in kv.iter().zip(sv) {
                            acc += a * b;
                        }
                    }
                }
                *slot = acc + bias.map_or(0.0, |b| b.data()[c]);
            }
        }
    }
    Ok(DenseTensor {
        shape: vec![oh, ow, ct],
        data: out,
    })
}

pub fn maxpool_forward(input: &DenseTensor, spec: &PoolSpec) -> Result<DenseTensor> {
    if input.ndim() != 3 {
        return dim_err(format!(
            "pool input must be [h, w, c], got {:?}",
            input.shape()
        ));
    }
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (spec.output_extent(h)?, spec.output_extent(w)?);
    let s = input.data();
    let mut out = vec![f32::NEG_INFINITY; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for ky in 0..spec.size {
                let Some(iy) = source_index(oy, ky, spec.stride, spec.padding, h) else {
                    continue;
                };
                for kx in 0..spec.size {
                    let Some(ix) = source_index(ox, kx, spec.stride, spec.padding, w) else {
                        continue;
                    };
                    for (d, v) in dst
                        .iter_mut()
                        .zip(&s[(iy * w + ix) * c..(iy * w + ix + 1) * c])
                    {
                        *d = d.max(*v);
                    }
                }
            }
        }
    }
    Ok(DenseTensor {
        shape: vec![oh, ow, c],
        data: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> DenseTensor {
        DenseTensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(DenseTensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(matches!(
            DenseTensor::new(vec![2], vec![1.0, f32::NAN]),
            Err(QcnnError::NonFinite(_))
        ));
        assert!(DenseTensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn fc_small_cases() {
        let w = t(&[1, 2], &[2.0, -1.0]);
        let s = t(&[2], &[3.0, 4.0]);
        assert_eq!(fc_forward(&w, None, &s).unwrap().data(), &[2.0]);

        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(fc_forward(&eye, None, &s).unwrap().data(), &[3.0, 4.0]);

        let bias = t(&[1], &[0.5]);
        assert_eq!(fc_forward(&w, Some(&bias), &s).unwrap().data(), &[2.5]);
    }

    #[test]
    fn fc_column_sums_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        // C_s = 3, C_t = 2
        let w = DenseTensor::random_uniform(vec![2, 3], -1.0, 1.0, &mut rng);
        let s = t(&[3], &[1.0, 1.0, 1.0]);
        let got = fc_forward(&w, None, &s).unwrap();
        for c in 0..2 {
            let mut acc = 0.0f32;
            for i in 0..3 {
                acc += w.data()[c * 3 + i];
            }
            assert_eq!(got.data()[c], acc);
        }
    }

    #[test]
    fn fc_shape_mismatch() {
        let w = t(&[1, 2], &[2.0, -1.0]);
        let s = t(&[3], &[3.0, 4.0, 1.0]);
        assert!(matches!(
            fc_forward(&w, None, &s),
            Err(QcnnError::Dimension(_))
        ));
    }

    #[test]
    fn conv_small_cases() {
        let s = t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 1, 1], &[2.0]);
        let spec = ConvLayerSpec::simple(1, 1, 1, 1, 0);
        let out = conv_forward(&k, None, &s, &spec).unwrap();
        assert_eq!(out.shape(), &[2, 2, 1]);
        assert_eq!(out.data(), &[2.0, 4.0, 6.0, 8.0]);

        let ones = t(&[1, 2, 2, 1], &[1.0; 4]);
        let spec = ConvLayerSpec::simple(1, 1, 2, 1, 0);
        assert_eq!(
            conv_forward(&ones, None, &s, &spec).unwrap().data(),
            &[10.0]
        );
    }

    #[test]
    fn conv_matches_quadruple_loop() {
        let s = t(&[3, 3, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let k = t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let spec = ConvLayerSpec::simple(1, 1, 2, 1, 0);
        let out = conv_forward(&k, None, &s, &spec).unwrap();
        let mut expect = [0.0f32; 4];
        for oy in 0..2 {
            for ox in 0..2 {
                for ky in 0..2 {
                    for kx in 0..2 {
                        expect[oy * 2 + ox] +=
                            s.data()[(oy + ky) * 3 + ox + kx] * k.data()[ky * 2 + kx];
                    }
                }
            }
        }
        // 1+4+12+20, 2+6+15+24, 4+10+21+32, 5+12+24+36
        assert_eq!(expect, [37.0, 47.0, 67.0, 77.0]);
        assert_eq!(out.data(), &expect);
    }

    #[test]
    fn conv_padding_and_stride() {
        let s = t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let ones = t(&[1, 3, 3, 1], &[1.0; 9]);
        let spec = ConvLayerSpec::simple(1, 1, 3, 1, 1);
        let out = conv_forward(&ones, None, &s, &spec).unwrap();
        assert_eq!(out.shape(), &[2, 2, 1]);
        assert_eq!(out.data(), &[10.0; 4]);

        let spec = ConvLayerSpec::simple(1, 1, 3, 2, 1);
        let out = conv_forward(&ones, None, &s, &spec).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
    }

    #[test]
    fn conv_invalid_geometry() {
        let s = t(&[2, 2, 1], &[1.0; 4]);
        let k = t(&[1, 3, 3, 1], &[1.0; 9]);
        let spec = ConvLayerSpec::simple(1, 1, 3, 1, 0);
        assert!(matches!(
            conv_forward(&k, None, &s, &spec),
            Err(QcnnError::Dimension(_))
        ));
    }

    #[test]
    fn grouped_conv_is_independent_per_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = DenseTensor::random_uniform(vec![4, 4, 4], -1.0, 1.0, &mut rng);
        let mut spec = ConvLayerSpec::simple(4, 2, 3, 1, 1);
        spec.groups = 2;
        let k = DenseTensor::random_uniform(spec.kernel_shape(), -1.0, 1.0, &mut rng);
        let out = conv_forward(&k, None, &s, &spec).unwrap();
        for g in 0..2 {
            let sub: Vec<f32> = s
                .data()
                .chunks(4)
                .flat_map(|px| px[g * 2..g * 2 + 2].to_vec())
                .collect();
            let sub = DenseTensor::new(vec![4, 4, 2], sub).unwrap();
            let kg = DenseTensor::new(vec![1, 3, 3, 2], k.data()[g * 18..(g + 1) * 18].to_vec())
                .unwrap();
            let one = conv_forward(&kg, None, &sub, &ConvLayerSpec::simple(2, 1, 3, 1, 1)).unwrap();
            for p in 0..16 {
                assert_eq!(out.data()[p * 2 + g], one.data()[p]);
            }
        }
    }

    #[test]
    fn pool_extents() {
        let p = PoolSpec {
            size: 3,
            stride: 2,
            padding: 0,
            ceil_mode: true,
        };
        assert_eq!(p.output_extent(55).unwrap(), 27);
        assert_eq!(p.output_extent(13).unwrap(), 6);
        let p = PoolSpec {
            size: 3,
            stride: 3,
            padding: 0,
            ceil_mode: true,
        };
        assert_eq!(p.output_extent(109).unwrap(), 37);
        assert_eq!(p.output_extent(18).unwrap(), 6);
        let p = PoolSpec {
            size: 2,
            stride: 2,
            padding: 0,
            ceil_mode: true,
        };
        assert_eq!(p.output_extent(35).unwrap(), 18);
        let p = PoolSpec {
            size: 2,
            stride: 2,
            padding: 0,
            ceil_mode: false,
        };
        assert_eq!(p.output_extent(35).unwrap(), 17);
    }

    #[test]
    fn maxpool_values() {
        let s = t(&[2, 2, 1], &[1.0, 5.0, -3.0, 4.0]);
        let p = PoolSpec {
            size: 2,
            stride: 2,
            padding: 0,
            ceil_mode: false,
        };
        assert_eq!(maxpool_forward(&s, &p).unwrap().data(), &[5.0]);
    }

    #[test]
    fn activations() {
        let mut a = t(&[3], &[-1.0, 0.0, 2.0]);
        Activation::Relu.apply(&mut a);
        assert_eq!(a.data(), &[0.0, 0.0, 2.0]);
        let mut b = t(&[2], &[0.0, 0.0]);
        Activation::Softmax.apply(&mut b);
        assert_eq!(b.data(), &[0.5, 0.5]);
    }
}
