use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn qcnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qcnn"))
        .current_dir(root())
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = qcnn(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn failure(args: &[&str]) -> String {
    let out = qcnn(args);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const DATA: &str = "data/mnist-subset";

fn train(out: &Path) -> String {
    ok(&[
        "train-ref",
        "--data-dir",
        DATA,
        "--out",
        s(out),
        "--epochs",
        "2",
        "--seed",
        "5",
    ])
}

/// One dense model shared by the tests that only read it.
fn dense_model() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    let dir = DIR.get_or_init(|| {
        let d = tempfile::tempdir().unwrap();
        train(&d.path().join("dense.qcnn"));
        d
    });
    Box::leak(dir.path().join("dense.qcnn").into_boxed_path())
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.qcnn"), dir.path().join("b.qcnn"));
    let log = train(&a);
    assert!(log.contains("epoch   2"));
    train(&b);
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn missing_dataset_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = failure(&[
        "train-ref",
        "--data-dir",
        "no/such/dir",
        "--out",
        s(&dir.path().join("m.qcnn")),
    ]);
    assert!(err.starts_with("error:"), "{err}");
}

#[test]
fn quantize_reports_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let log = ok(&[
            "quantize",
            "--model",
            s(dense_model()),
            "--out",
            s(&out),
            "--data-dir",
            DATA,
            "--layers",
            "fc1=4/32,ec",
            "--calib-n",
            "200",
            "--seed",
            "3",
        ]);
        (log, std::fs::read(out).unwrap())
    };
    let (log, a) = run("a.qcnn");
    assert!(log.contains("fc1 4/32 ec: objective"), "{log}");
    assert!(log.contains("12.08x"), "{log}");
    let (_, b) = run("b.qcnn");
    assert_eq!(a, b);

    let evals = ok(&[
        "eval",
        "--model",
        s(dense_model()),
        "--model",
        s(&dir.path().join("a.qcnn")),
        "--data-dir",
        DATA,
    ]);
    assert_eq!(evals.matches("top-1 error").count(), 2, "{evals}");

    let kv = ok(&[
        "report",
        "--model",
        s(&dir.path().join("a.qcnn")),
        "--report-format",
        "kv",
    ]);
    assert!(kv.contains("layer.0.codewords=32"), "{kv}");
}

#[test]
fn quantize_rejects_bad_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("q.qcnn");
    let run = |layers: &str| {
        failure(&[
            "quantize",
            "--model",
            s(dense_model()),
            "--out",
            s(&out),
            "--data-dir",
            DATA,
            "--layers",
            layers,
        ])
    };
    assert!(run("fc1=4/33").contains("K must be a power of two for storage accounting"));
    assert!(run("fc1=5/32").contains("layer `fc1`"));
    assert!(run("fc9=4/32").contains("fc9"));
    assert!(!out.exists());
}

#[test]
fn report_on_shipped_architecture() {
    let kv = ok(&[
        "report",
        "--arch",
        "archs/alexnet.toml",
        "--report-format",
        "kv",
        "--layers",
        "conv*=8/128,conv1=3/128,fc6=4/32,fc7=4/32,fc8=1/16",
    ]);
    let speedup: f64 = kv
        .lines()
        .find_map(|l| l.strip_prefix("speedup="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((speedup - 4.15).abs() < 0.1, "{speedup}");
    let table = ok(&["report", "--arch", "archs/vgg16.toml"]);
    assert!(table.contains("conv5_3"));
}

#[test]
fn infer_on_blank_image() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("blank.pgm");
    let mut bytes = b"P5\n28 28\n255\n".to_vec();
    bytes.resize(bytes.len() + 28 * 28, 0);
    std::fs::write(&img, bytes).unwrap();
    let label: usize = ok(&["infer", "--model", s(dense_model()), "--image", s(&img)])
        .trim()
        .parse()
        .unwrap();
    assert!(label < 10);
    failure(&[
        "infer",
        "--model",
        s(dense_model()),
        "--image",
        "missing.png",
    ]);
}

#[test]
fn unreadable_model_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.qcnn");
    std::fs::write(&bad, b"not a model").unwrap();
    assert!(failure(&["eval", "--model", s(&bad), "--data-dir", DATA]).contains("error"));
}
