mod common;

use common::{rel_dev, tensor};
use qcnn::pipeline::{quantize_network_with, CalibrationInputs, LayerParams};
use qcnn::{
    quantize_network, Activation, ConvLayerSpec, DenseTensor, FcLayerSpec, LayerKind, LayerSpec,
    Network, NetworkSpec, QuantizationConfig, QuantizationPlan,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn conv_fc_spec() -> NetworkSpec {
    let mut conv = ConvLayerSpec::simple(2, 4, 3, 1, 1);
    conv.activation = Activation::Relu;
    conv.has_bias = true;
    NetworkSpec {
        name: "tiny".into(),
        input_shape: vec![5, 5, 2],
        layers: vec![
            LayerSpec {
                name: "conv1".into(),
                kind: LayerKind::Conv(conv),
            },
            LayerSpec {
                name: "flat".into(),
                kind: LayerKind::Flatten,
            },
            LayerSpec {
                name: "fc1".into(),
                kind: LayerKind::Fc(FcLayerSpec {
                    input_dim: 100,
                    output_dim: 3,
                    has_bias: true,
                    activation: Activation::None,
                }),
            },
        ],
    }
}

/// Rewrites every parametric layer so each subspace holds at most `k`
/// distinct sub-vectors, all of them in use.
fn make_representable(net: &mut Network, d: usize, k: usize, rng: &mut ChaCha8Rng) {
    for layer in net.layers_mut() {
        let LayerParams::Dense { weights, .. } = &mut layer.params else {
            continue;
        };
        let cs = *weights.shape().last().unwrap();
        let rows = weights.len() / cs;
        for m in 0..cs / d {
            let words: Vec<Vec<f32>> = (0..k)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let mut pick: Vec<usize> = (0..rows).map(|r| r % k).collect();
            pick.shuffle(rng);
            for (r, &j) in pick.iter().enumerate() {
                weights.data_mut()[r * cs + m * d..r * cs + (m + 1) * d].copy_from_slice(&words[j]);
            }
        }
    }
}

fn calibration(n: usize, seed: u64) -> Vec<DenseTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| tensor(&mut rng, vec![5, 5, 2])).collect()
}

fn plan(d: usize, k: usize, ec: bool) -> QuantizationPlan {
    let cfg = QuantizationConfig::new(d, k)
        .with_error_correction(ec)
        .with_seed(3);
    QuantizationPlan::new().with("conv1", cfg).with("fc1", cfg)
}

#[test]
fn representable_network_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = Network::random(conv_fc_spec(), 1).unwrap();
    make_representable(&mut net, 2, 4, &mut rng);
    let calib = calibration(8, 2);
    for ec in [false, true] {
        let q = quantize_network(&net, &calib, &plan(2, 4, ec)).unwrap();
        assert!(
            q.network
                .layers()
                .iter()
                .filter(|l| l.params.is_quantized())
                .count()
                == 2
        );
        for x in calibration(5, 9) {
            let dev = rel_dev(&q.network.forward(&x).unwrap(), &net.forward(&x).unwrap());
            assert!(dev <= 1e-4, "ec {ec}: {dev}");
        }
    }
}

#[test]
fn quantization_is_deterministic() {
    let net = Network::random(conv_fc_spec(), 4).unwrap();
    let calib = calibration(6, 1);
    let a = quantize_network(&net, &calib, &plan(1, 4, true)).unwrap();
    let b = quantize_network(&net, &calib, &plan(1, 4, true)).unwrap();
    assert_eq!(a.network, b.network);
    assert_eq!(a.layers, b.layers);
}

#[test]
fn later_layers_see_the_quantized_prefix() {
    let net = Network::random(conv_fc_spec(), 4).unwrap();
    let calib = calibration(6, 1);
    let mut seen = Vec::new();
    let q = quantize_network_with(
        &net,
        &calib,
        &plan(1, 4, true),
        CalibrationInputs::QuantizedPrefix,
        |i, xs| seen.push((i, xs.to_vec())),
    )
    .unwrap();
    assert_eq!(seen.iter().map(|(i, _)| *i).collect::<Vec<_>>(), [0, 2]);
    for (i, xs) in &seen {
        for (x, s) in calib.iter().zip(xs) {
            assert_eq!(&q.network.forward_prefix(x, *i).unwrap(), s);
        }
    }
}

/// Squared error of fc1's response, fed by the network's own quantized
/// prefix, against the original network's response.
fn fc1_error(q: &Network, orig: &Network, calib: &[DenseTensor]) -> f64 {
    calib
        .iter()
        .map(|x| {
            let got = q.layers()[2]
                .forward_linear(&q.forward_prefix(x, 2).unwrap())
                .unwrap();
            let want = orig.layers()[2]
                .forward_linear(&orig.forward_prefix(x, 2).unwrap())
                .unwrap();
            got.data()
                .iter()
                .zip(want.data())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
        })
        .sum()
}

#[test]
fn accumulative_calibration_compensates_upstream_error() {
    let net = Network::random(conv_fc_spec(), 8).unwrap();
    let calib = calibration(12, 3);
    let p = plan(1, 2, true);
    let run = |source| {
        quantize_network_with(&net, &calib, &p, source, |_, _| {})
            .unwrap()
            .network
    };
    let accumulative = fc1_error(&run(CalibrationInputs::QuantizedPrefix), &net, &calib);
    let independent = fc1_error(&run(CalibrationInputs::Original), &net, &calib);
    assert!(
        accumulative <= independent,
        "{accumulative} > {independent}"
    );
}
