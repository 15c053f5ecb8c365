mod common;

use common::{codebooks, indices, tensor};
use qcnn::accounting::{layer_flops_with, AccountingOptions};
use qcnn::inference::{qconv_forward_with_stats, qfc_forward_with_stats};
use qcnn::{
    layer_flops, Activation, ConvLayerSpec, FcLayerSpec, LayerKind, QuantizationConfig,
    QuantizedConvLayer, QuantizedFcLayer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn fc_engine_work_equals_accounted_flops() {
    for seed in 0..40 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, m, ct) = (
            rng.random_range(1..5),
            rng.random_range(1..7),
            rng.random_range(1..20),
        );
        let k = 1 << rng.random_range(0..7);
        let q = QuantizedFcLayer::new(
            m * d,
            ct,
            d,
            codebooks(&mut rng, m, d, k),
            indices(&mut rng, m * ct, k),
            None,
        )
        .unwrap();
        let (_, stats) = qfc_forward_with_stats(&q, &tensor(&mut rng, vec![m * d])).unwrap();
        let kind = LayerKind::Fc(FcLayerSpec {
            input_dim: m * d,
            output_dim: ct,
            has_bias: false,
            activation: Activation::None,
        });
        let counted = layer_flops(&kind, &[m * d], Some(&QuantizationConfig::new(d, k))).unwrap();
        assert_eq!(stats.total(), counted, "seed {seed}");
    }
}

#[test]
fn conv_engine_work_equals_padding_aware_flops() {
    for seed in 0..40 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, m, ct) = (
            rng.random_range(1..4),
            rng.random_range(1..3),
            rng.random_range(1..6),
        );
        let (dk, stride, pad) = (
            rng.random_range(1..5),
            rng.random_range(1..3),
            rng.random_range(0..3),
        );
        let k = 1 << rng.random_range(0..5);
        let (h, w) = (rng.random_range(dk..dk + 6), rng.random_range(dk..dk + 6));
        let spec = ConvLayerSpec::simple(m * d, ct, dk, stride, pad);
        let q = QuantizedConvLayer::new(
            spec,
            d,
            codebooks(&mut rng, m, d, k),
            indices(&mut rng, m * dk * dk * ct, k),
            None,
        )
        .unwrap();
        let (_, stats) =
            qconv_forward_with_stats(&q, &tensor(&mut rng, vec![h, w, m * d])).unwrap();
        let cfg = QuantizationConfig::new(d, k);
        let kind = LayerKind::Conv(spec);
        let exact = AccountingOptions {
            exclude_padding: true,
        };
        let counted = layer_flops_with(&kind, &[h, w, m * d], Some(&cfg), exact).unwrap();
        assert_eq!(stats.total(), counted, "seed {seed}");
        let nominal = layer_flops(&kind, &[h, w, m * d], Some(&cfg)).unwrap();
        assert!(nominal >= counted);
        if pad == 0 {
            assert_eq!(nominal, counted, "seed {seed}");
        }
    }
}
