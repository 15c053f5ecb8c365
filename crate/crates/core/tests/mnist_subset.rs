//! End-to-end recipe on the bundled 10k-digit MNIST subset.

mod common;

use std::time::Instant;

use common::{arch, workspace_root};
use qcnn::io::{load_mnist_dir, train_reference_mlp, MnistSplit, TrainConfig};
use qcnn::{evaluate, quantize_network, DenseTensor, QuantizationConfig, QuantizationPlan};

#[test]
fn train_quantize_and_evaluate_subset() {
    let dir = workspace_root().join("data/mnist-subset");
    let train = load_mnist_dir(&dir, MnistSplit::Train).unwrap();
    let test = load_mnist_dir(&dir, MnistSplit::Test).unwrap();
    assert_eq!((train.len(), test.len()), (8000, 2000));

    let start = Instant::now();
    let trained =
        train_reference_mlp(&arch("mnist-3layer"), &train, &TrainConfig::default()).unwrap();
    let base = evaluate(&trained.network, &test, &[1])
        .unwrap()
        .top1_error()
        .unwrap();

    let calib: Vec<DenseTensor> = (0..1000).map(|i| train.tensor(i)).collect();
    let error = |ec: bool| {
        let plan = QuantizationPlan::new().with(
            "fc1",
            QuantizationConfig::new(4, 32).with_error_correction(ec),
        );
        let q = quantize_network(&trained.network, &calib, &plan).unwrap();
        evaluate(&q.network, &test, &[1])
            .unwrap()
            .top1_error()
            .unwrap()
    };
    let (ec, naive) = (error(true), error(false));
    eprintln!(
        "subset: baseline {:.2}%, EC {:.2}%, naive {:.2}%, {:.1}s",
        100.0 * base,
        100.0 * ec,
        100.0 * naive,
        start.elapsed().as_secs_f64()
    );
    assert!(base <= 0.06);
    assert!(ec <= naive);
    assert!(ec - base <= 0.01);
}
