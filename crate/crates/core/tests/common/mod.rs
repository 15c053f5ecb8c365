#![allow(dead_code)]

use std::path::PathBuf;

use qcnn::{DenseTensor, NetworkSpec, SubCodebook};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn arch(name: &str) -> NetworkSpec {
    NetworkSpec::load(workspace_root().join("archs").join(format!("{name}.toml")))
        .expect("shipped architecture")
}

pub fn codebooks(rng: &mut ChaCha8Rng, m: usize, d: usize, k: usize) -> Vec<SubCodebook> {
    (0..m)
        .map(|_| {
            SubCodebook::new(
                d,
                (0..k * d).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            )
            .unwrap()
        })
        .collect()
}

pub fn indices(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<u16> {
    (0..n).map(|_| rng.random_range(0..k) as u16).collect()
}

pub fn tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> DenseTensor {
    DenseTensor::random_uniform(shape, -1.0, 1.0, rng)
}

pub fn rel_dev(a: &DenseTensor, b: &DenseTensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let num: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum();
    let den: f64 = b.data().iter().map(|y| (*y as f64).powi(2)).sum();
    (num / den.max(1e-30)).sqrt()
}
