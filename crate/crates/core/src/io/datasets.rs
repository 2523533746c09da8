use std::path::{Path, PathBuf};

use crate::data::{quantize_pixel, Dataset, Provenance, Split};
use crate::error::{Error, Result};

use super::bytes::{parse, read_file};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Parses an IDX file, returning its dimensions and payload.
pub fn parse_idx<'a>(path: &Path, bytes: &'a [u8], magic: u32) -> Result<(Vec<usize>, &'a [u8])> {
    if bytes.len() < 4 {
        return Err(parse(path, 0, format!("truncated header: {} bytes", bytes.len())));
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if found != magic {
        return Err(parse(path, 0, format!("bad magic {found:#010x}, expected {magic:#010x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(parse(path, bytes.len() as u64, format!("truncated header: expected {header} bytes, file has {}", bytes.len())));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|d| u32::from_be_bytes(bytes[4 + 4 * d..8 + 4 * d].try_into().expect("4 bytes")) as usize)
        .collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(parse(
            path,
            bytes.len().min(expected) as u64,
            format!("expected {expected} bytes for dims {dims:?}, file has {}", bytes.len()),
        ));
    }
    Ok((dims, &bytes[header..]))
}

/// Loads an MNIST image/label IDX pair, quantizing pixels at exponent 0.
pub fn load_mnist_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let ib = read_file(images)?;
    let lb = read_file(labels)?;
    let (idims, pixels) = parse_idx(images, &ib, IDX_IMAGES)?;
    let (ldims, lab) = parse_idx(labels, &lb, IDX_LABELS)?;
    if idims[0] != ldims[0] {
        return Err(parse(labels, 4, format!("{} labels for {} images", ldims[0], idims[0])));
    }
    if let Some(i) = lab.iter().position(|&l| l > 9) {
        return Err(parse(labels, 8 + i as u64, format!("label {} outside [0, 9]", lab[i])));
    }
    Dataset::new(
        [1, idims[1], idims[2]],
        pixels.iter().map(|&p| quantize_pixel(p)).collect(),
        lab.to_vec(),
        10,
        split,
        Provenance::Mnist,
    )
}

/// Standard file names inside an MNIST directory.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = if split == Split::Train { "train" } else { "t10k" };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let (i, l) = mnist_paths(dir, split);
    load_mnist_idx(&i, &l, split)
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Loads and concatenates CIFAR-10 binary batch files.
pub fn load_cifar10_bin(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::validation("no CIFAR-10 batch files given"));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read_file(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(parse(
                path,
                (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
                format!("{} bytes is not a multiple of the {CIFAR_RECORD}-byte record", bytes.len()),
            ));
        }
        for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if rec[0] > 9 {
                return Err(parse(path, (r * CIFAR_RECORD) as u64, format!("label {} outside [0, 9]", rec[0])));
            }
            labels.push(rec[0]);
            images.extend(rec[1..].iter().map(|&p| quantize_pixel(p)));
        }
    }
    Dataset::new([3, 32, 32], images, labels, 10, split, Provenance::Cifar10)
}

/// Batch files of the standard `cifar-10-batches-bin` directory.
pub fn cifar10_paths(dir: &Path, split: Split) -> Vec<PathBuf> {
    if split == Split::Train {
        (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect()
    } else {
        vec![dir.join("test_batch.bin")]
    }
}

pub fn load_cifar10_dir(dir: &Path, split: Split) -> Result<Dataset> {
    load_cifar10_bin(&cifar10_paths(dir, split), split)
}
