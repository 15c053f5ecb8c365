//! MNIST in the IDX format, optionally gzip-compressed.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::Dataset;
use crate::error::{QcnnError, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(QcnnError::Format(msg.into()))
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .map_err(|e| QcnnError::Format(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| QcnnError::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    match bytes.get(at..at + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => format_err("IDX header is truncated"),
    }
}

/// Returns `(count, rows, cols, pixels scaled to [0, 1])`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return format_err(format!(
            "image file magic is {magic:#010x}, expected {IMAGES_MAGIC:#010x}"
        ));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    let need = n * rows * cols;
    if body.len() != need {
        return format_err(format!(
            "image file declares {need} pixels but holds {}",
            body.len()
        ));
    }
    Ok((
        n,
        rows,
        cols,
        body.iter().map(|&p| p as f32 / 255.0).collect(),
    ))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return format_err(format!(
            "label file magic is {magic:#010x}, expected {LABELS_MAGIC:#010x}"
        ));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return format_err(format!(
            "label file declares {n} labels but holds {}",
            body.len()
        ));
    }
    if let Some(bad) = body.iter().find(|&&l| l > 9) {
        return format_err(format!("label {bad} is not a digit"));
    }
    Ok(body.iter().map(|&l| l as usize).collect())
}

/// Images become flat `rows * cols` vectors.
pub fn load_mnist(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_maybe_gzip(images.as_ref())?)?;
    let labels = parse_idx_labels(&read_maybe_gzip(labels.as_ref())?)?;
    if labels.len() != n {
        return format_err(format!("{n} images but {} labels", labels.len()));
    }
    Dataset::new(vec![rows * cols], pixels, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

impl MnistSplit {
    fn prefix(self) -> &'static str {
        match self {
            MnistSplit::Train => "train",
            MnistSplit::Test => "t10k",
        }
    }
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    let candidates = [
        stem.to_string(),
        format!("{stem}.gz"),
        stem.replace("-idx", ".idx"),
        format!("{}.gz", stem.replace("-idx", ".idx")),
    ];
    candidates
        .iter()
        .map(|c| dir.join(c))
        .find(|p| p.is_file())
        .ok_or_else(|| QcnnError::Format(format!("no `{stem}[.gz]` in {}", dir.display())))
}

/// Loads a split from a directory with the standard MNIST file names.
pub fn load_mnist_dir(dir: impl AsRef<Path>, split: MnistSplit) -> Result<Dataset> {
    let dir = dir.as_ref();
    let p = split.prefix();
    load_mnist(
        find_file(dir, &format!("{p}-images-idx3-ubyte"))?,
        find_file(dir, &format!("{p}-labels-idx1-ubyte"))?,
    )
}
