//! Readers for the CIFAR binary and IDX formats, and assembly of the
//! train / validation / test splits an experiment runs on.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparse_at_core::data::{synthetic_dataset, Dataset, SyntheticSpec};
use sparse_at_core::train::Splits;

use crate::config::{DataConfig, DatasetKind};
use crate::error::{HarnessError, Result};

const CIFAR_PIXELS: usize = 3 * 32 * 32;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| HarnessError::Io(path.to_path_buf(), e))
}

/// Decodes CIFAR records: `label_bytes` label bytes (the last one is used)
/// followed by 3072 channel-major pixels.
pub fn parse_cifar(bytes: &[u8], label_bytes: usize, classes: usize) -> Result<Dataset> {
    let record = label_bytes + CIFAR_PIXELS;
    if bytes.is_empty() || !bytes.len().is_multiple_of(record) {
        return Err(HarnessError::Format(format!(
            "CIFAR file of {} bytes is not a whole number of {record}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / record;
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(record) {
        let label = rec[label_bytes - 1] as usize;
        if label >= classes {
            return Err(HarnessError::Format(format!("label {label} out of range for {classes} classes")));
        }
        labels.push(label);
        images.extend(rec[label_bytes..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(Dataset::new(vec![3, 32, 32], images, labels, classes)?)
}

/// One CIFAR-10 batch file.
pub fn load_cifar10(path: &Path) -> Result<Dataset> {
    parse_cifar(&read(path)?, 1, 10)
}

/// One CIFAR-100 file; the fine label is used.
pub fn load_cifar100(path: &Path) -> Result<Dataset> {
    parse_cifar(&read(path)?, 2, 100)
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let mut it = parts.into_iter();
    let mut out = it.next().ok_or_else(|| HarnessError::Format("no data files".into()))?;
    for p in it {
        out.images.extend(p.images);
        out.labels.extend(p.labels);
    }
    Ok(out)
}

/// `(train, test)` from a `cifar-10-batches-bin` directory.
pub fn load_cifar10_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = (1..=5)
        .map(|i| load_cifar10(&dir.join(format!("data_batch_{i}.bin"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((concat(train)?, load_cifar10(&dir.join("test_batch.bin"))?))
}

/// `(train, test)` from a `cifar-100-binary` directory.
pub fn load_cifar100_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((load_cifar100(&dir.join("train.bin"))?, load_cifar100(&dir.join("test.bin"))?))
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| HarnessError::Format("IDX header truncated".into()))
}

/// IDX image file: magic `0x00000803`, then count, rows, cols.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != 0x0803 {
        return Err(HarnessError::Format(format!("bad IDX image magic {magic:#010x}")));
    }
    let (n, rows, cols) = (be_u32(bytes, 4)? as usize, be_u32(bytes, 8)? as usize, be_u32(bytes, 12)? as usize);
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(HarnessError::Format(format!(
            "IDX image body has {} bytes, header says {n}x{rows}x{cols}",
            body.len()
        )));
    }
    Ok((n, rows, cols, body))
}

/// IDX label file: magic `0x00000801`, then count.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != 0x0801 {
        return Err(HarnessError::Format(format!("bad IDX label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(HarnessError::Format(format!("IDX label body has {} bytes, header says {n}", body.len())));
    }
    Ok(body)
}

/// Grayscale images `[1, rows, cols]` scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(HarnessError::Format(format!("{n} images but {} labels", labels.len())));
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1).max(10);
    Ok(Dataset::new(
        vec![1, rows, cols],
        pixels.iter().map(|&b| b as f32 / 255.0).collect(),
        labels.iter().map(|&l| l as usize).collect(),
        classes,
    )?)
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    parse_idx(&read(images)?, &read(labels)?)
}

fn idx_pair(dir: &Path, prefix: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Full `(train, test)` sets for the configured dataset.
pub fn load_raw(cfg: &DataConfig) -> Result<(Dataset, Dataset)> {
    match cfg.kind {
        DatasetKind::Cifar10 => load_cifar10_dir(&cfg.path),
        DatasetKind::Cifar100 => load_cifar100_dir(&cfg.path),
        DatasetKind::Idx => {
            let (ti, tl) = idx_pair(&cfg.path, "train");
            let (si, sl) = idx_pair(&cfg.path, "t10k");
            Ok((load_idx(&ti, &tl)?, load_idx(&si, &sl)?))
        }
        DatasetKind::Synthetic => {
            let mut spec = SyntheticSpec::new(
                cfg.synthetic_classes,
                cfg.synthetic_per_class + cfg.synthetic_test_per_class,
                &cfg.synthetic_shape,
                cfg.split_seed,
            );
            spec.noise = cfg.synthetic_noise;
            let all = synthetic_dataset(&spec)?;
            let n_train = cfg.synthetic_classes * cfg.synthetic_per_class;
            let train: Vec<usize> = (0..n_train).collect();
            let test: Vec<usize> = (n_train..all.len()).collect();
            Ok((all.subset(&train), all.subset(&test)))
        }
    }
}

/// Seeded hold-out of `val_size` validation samples, then `train_size`
/// training samples from the rest (0 keeps all), `test_size` test samples
/// (0 keeps all), and the fixed training-evaluation subset.
pub fn make_splits(cfg: &DataConfig, train_full: &Dataset, test_full: &Dataset) -> Result<Splits> {
    if cfg.val_size >= train_full.len() {
        return Err(HarnessError::Config(format!(
            "validation size {} leaves no training data out of {}",
            cfg.val_size,
            train_full.len()
        )));
    }
    let mut order: Vec<usize> = (0..train_full.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.split_seed));
    let (val_idx, rest) = order.split_at(cfg.val_size);
    let take = if cfg.train_size == 0 { rest.len() } else { cfg.train_size.min(rest.len()) };
    let mut train_idx = rest[..take].to_vec();
    let mut val_idx = val_idx.to_vec();
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    let train = train_full.subset(&train_idx);
    let test = if cfg.test_size == 0 || cfg.test_size >= test_full.len() {
        test_full.clone()
    } else {
        let mut idx: Vec<usize> = (0..test_full.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.split_seed.wrapping_add(1)));
        idx.truncate(cfg.test_size);
        idx.sort_unstable();
        test_full.subset(&idx)
    };
    let train_eval = train.sample(cfg.train_eval_size, cfg.split_seed.wrapping_add(2));
    let val = if val_idx.is_empty() { train.head(0) } else { train_full.subset(&val_idx) };
    Ok(Splits {
        train,
        val,
        test,
        train_eval,
    })
}

pub fn load_splits(cfg: &DataConfig) -> Result<Splits> {
    let (train, test) = load_raw(cfg)?;
    make_splits(cfg, &train, &test)
}
