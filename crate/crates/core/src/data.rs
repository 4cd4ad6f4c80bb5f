//! Datasets: MNIST IDX and CIFAR-10 binary ingestion, synthetic Gaussian
//! blobs, and (stratified) minibatch planning.

use std::fs::File;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{CheckpointError, Container};
use crate::linalg::Matrix;
use crate::rng::SplitMix64;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("stratified batching unsatisfiable: {0}")]
    Unsatisfiable(String),
    #[error("dataset container: {0}")]
    Container(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Samples are stored one per row, flattened; `shape` is the per-sample shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub shape: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        classes: usize,
        shape: Vec<usize>,
        split: Split,
    ) -> Result<Self, DataError> {
        if features.rows() != labels.len() {
            return Err(DataError::CountMismatch {
                images: features.rows(),
                labels: labels.len(),
            });
        }
        if shape.iter().product::<usize>() != features.cols() {
            return Err(DataError::InvalidParameter(format!(
                "sample shape {shape:?} does not match {} features",
                features.cols()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            features,
            labels,
            classes,
            shape,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Rows `indices` as a feature matrix plus their labels.
    pub fn gather(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        let m = Matrix::from_vec(indices.len(), d, data).expect("row length is the dataset width");
        (m, labels)
    }

    /// The first `n` samples (or all of them).
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (features, labels) = self.gather(&idx);
        Dataset {
            features,
            labels,
            classes: self.classes,
            shape: self.shape.clone(),
            split: self.split,
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(io_err)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(io_err)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::TruncatedFile(format!("{what}: header ends early")))
}

/// Parses an IDX image file. Returns `(count, rows, cols, pixels / 255)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>), DataError> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let body = &bytes[16..];
    let expected = count * rows * cols;
    if body.len() != expected {
        return Err(DataError::TruncatedFile(format!(
            "images: header promises {expected} pixel bytes, file holds {}",
            body.len()
        )));
    }
    let pixels = body.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((count, rows, cols, pixels))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, DataError> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(DataError::TruncatedFile(format!(
            "labels: header promises {count} labels, file holds {}",
            body.len()
        )));
    }
    Ok(body.iter().map(|&b| usize::from(b)).collect())
}

fn find_file(dir: &Path, stem: &str) -> PathBuf {
    let plain = dir.join(stem);
    if plain.exists() {
        return plain;
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        gz
    } else {
        plain
    }
}

fn mnist_split(dir: &Path, prefix: &str, split: Split) -> Result<Dataset, DataError> {
    let images = read_file(&find_file(dir, &format!("{prefix}-images-idx3-ubyte")))?;
    let labels = read_file(&find_file(dir, &format!("{prefix}-labels-idx1-ubyte")))?;
    let (count, rows, cols, pixels) = parse_idx_images(&images)?;
    let labels = parse_idx_labels(&labels)?;
    if labels.len() != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    let features = Matrix::from_vec(count, rows * cols, pixels).expect("size checked by parser");
    Dataset::new(features, labels, 10, vec![1, rows, cols], split)
}

/// Loads `train-*` and `t10k-*` IDX files (optionally gzip-compressed).
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    Ok((
        mnist_split(dir, "train", Split::Train)?,
        mnist_split(dir, "t10k", Split::Test)?,
    ))
}

/// Parses concatenated CIFAR-10 records (label byte + 3072 pixel bytes).
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>), DataError> {
    if bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(DataError::TruncatedFile(format!(
            "{} bytes is not a multiple of the {CIFAR_RECORD_LEN}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_LEN - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD_LEN) {
        let label = usize::from(rec[0]);
        if label >= CIFAR_CLASSES {
            return Err(DataError::LabelOutOfRange {
                label,
                classes: CIFAR_CLASSES,
            });
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok((labels, pixels))
}

fn cifar_split(files: &[PathBuf], split: Split) -> Result<Dataset, DataError> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for f in files {
        let (l, p) = parse_cifar10(&read_file(f)?)?;
        labels.extend(l);
        pixels.extend(p);
    }
    let features = Matrix::from_vec(labels.len(), CIFAR_RECORD_LEN - 1, pixels).expect("record size");
    Dataset::new(features, labels, CIFAR_CLASSES, vec![3, 32, 32], split)
}

/// Loads `data_batch_1..5.bin` and `test_batch.bin`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    let test = [dir.join("test_batch.bin")];
    Ok((cifar_split(&train, Split::Train)?, cifar_split(&test, Split::Test)?))
}

/// Regular simplex with unit edges embedded in the first `classes − 1`
/// coordinates (Helmert basis), or points on the first axis spaced 1 apart
/// when `dim` is too small for a simplex.
fn class_centers(classes: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut centers = vec![vec![0.0; dim]; classes];
    if dim + 1 >= classes {
        for (c, center) in centers.iter_mut().enumerate() {
            for j in 1..classes {
                // j-th Helmert row: (1, …, 1, −j, 0, …)/√(j(j+1)), scaled by 1/√2.
                let norm = ((j * (j + 1)) as f64).sqrt() * std::f64::consts::SQRT_2;
                center[j - 1] = match c.cmp(&j) {
                    std::cmp::Ordering::Less => 1.0 / norm,
                    std::cmp::Ordering::Equal => -(j as f64) / norm,
                    std::cmp::Ordering::Greater => 0.0,
                };
            }
        }
    } else {
        for (c, center) in centers.iter_mut().enumerate() {
            center[0] = c as f64;
        }
    }
    centers
}

/// Unit-variance isotropic Gaussian clusters whose means sit `separation`
/// apart, split 80/20 per class and min-max rescaled (one global affine map)
/// into `[0, 1]`.
///
/// Sample order: for each class, `per_class` draws (means plus `dim` Box–Muller
/// normals); the first `⌊0.8·per_class⌋` of each class go to train. Both splits
/// are then shuffled with the same stream.
pub fn synth_blobs(
    seed: u64,
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
) -> Result<(Dataset, Dataset), DataError> {
    if classes < 2 || per_class < 4 || dim < 1 || !(separation >= 0.0 && separation.is_finite()) {
        return Err(DataError::InvalidParameter(format!(
            "blobs need classes ≥ 2, per_class ≥ 4, dim ≥ 1, separation ≥ 0 \
             (got {classes}, {per_class}, {dim}, {separation})"
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let centers = class_centers(classes, dim);
    let n_train = per_class * 4 / 5;
    let mut train = Vec::with_capacity(classes * n_train);
    let mut test = Vec::with_capacity(classes * (per_class - n_train));
    for (c, center) in centers.iter().enumerate() {
        for i in 0..per_class {
            let x: Vec<f64> = center.iter().map(|&m| m * separation + rng.gaussian()).collect();
            if i < n_train {
                train.push((x, c));
            } else {
                test.push((x, c));
            }
        }
    }
    rng.shuffle(&mut train);
    rng.shuffle(&mut test);

    let (lo, hi) = train
        .iter()
        .chain(&test)
        .flat_map(|(x, _)| x.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let build = |rows: Vec<(Vec<f64>, usize)>, split| {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for (x, l) in rows {
            data.extend(x.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)));
            labels.push(l);
        }
        Dataset::new(
            Matrix::from_vec(n, dim, data).expect("row width is dim"),
            labels,
            classes,
            vec![dim],
            split,
        )
    };
    Ok((build(train, Split::Train)?, build(test, Split::Test)?))
}

/// How one epoch is cut into minibatches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub epoch_seed: u64,
    pub batch_size: usize,
    pub stratified: bool,
    pub min_per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batches {
    pub batches: Vec<Vec<usize>>,
    /// Samples left out of this epoch.
    pub dropped: usize,
}

/// Shuffled minibatches for one epoch.
///
/// Plain plans shuffle all indices and cut them into `batch_size` chunks;
/// the last chunk may be short. Stratified plans shuffle each class, give
/// every batch `min_per_class` samples of every class, fill the remaining
/// slots from the shuffled pool of leftovers, and drop what cannot complete
/// a full batch.
pub fn stratified_batches(ds: &Dataset, plan: &BatchPlan) -> Result<Batches, DataError> {
    if plan.batch_size == 0 {
        return Err(DataError::InvalidParameter("batch_size must be ≥ 1".into()));
    }
    let mut rng = SplitMix64::new(plan.epoch_seed);
    if !plan.stratified {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        rng.shuffle(&mut order);
        return Ok(Batches {
            batches: order.chunks(plan.batch_size).map(<[usize]>::to_vec).collect(),
            dropped: 0,
        });
    }

    let floor = ds.classes * plan.min_per_class;
    if plan.min_per_class == 0 || plan.batch_size < floor {
        return Err(DataError::Unsatisfiable(format!(
            "batch of {} cannot hold {} samples for each of {} classes",
            plan.batch_size, plan.min_per_class, ds.classes
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for members in &mut by_class {
        rng.shuffle(members);
    }
    let per_class_limit = by_class.iter().map(|m| m.len() / plan.min_per_class).min().unwrap_or(0);
    let n_batches = per_class_limit.min(ds.len() / plan.batch_size);
    if n_batches == 0 {
        let (class, count) = by_class
            .iter()
            .enumerate()
            .map(|(c, m)| (c, m.len()))
            .min_by_key(|&(_, n)| n)
            .unwrap_or((0, 0));
        return Err(DataError::Unsatisfiable(format!(
            "class {class} has {count} samples, {} per batch required (batch {}, dataset {})",
            plan.min_per_class,
            plan.batch_size,
            ds.len()
        )));
    }

    let mut batches: Vec<Vec<usize>> = vec![Vec::with_capacity(plan.batch_size); n_batches];
    let mut pool = Vec::new();
    for members in &by_class {
        let (reserved, rest) = members.split_at(n_batches * plan.min_per_class);
        for (b, chunk) in batches.iter_mut().zip(reserved.chunks(plan.min_per_class)) {
            b.extend_from_slice(chunk);
        }
        pool.extend_from_slice(rest);
    }
    rng.shuffle(&mut pool);
    let extra = plan.batch_size - floor;
    let mut pool_iter = pool.iter().copied();
    for b in &mut batches {
        b.extend(pool_iter.by_ref().take(extra));
        rng.shuffle(b);
    }
    let dropped = pool_iter.count();
    Ok(Batches { batches, dropped })
}

/// Stores a train/test pair in the checkpoint container format: blocks
/// `train.features`, `train.labels`, `test.features`, `test.labels`, labels
/// written as floats.
pub fn save_datasets(path: &Path, train: &Dataset, test: &Dataset) -> Result<(), DataError> {
    let header = serde_json::json!({
        "kind": "dataset",
        "classes": train.classes,
        "shape": train.shape,
    });
    let mut c = Container::new(header);
    for (name, ds) in [("train", train), ("test", test)] {
        c.push(format!("{name}.features"), ds.features.as_slice());
        let labels: Vec<f64> = ds.labels.iter().map(|&l| l as f64).collect();
        c.push(format!("{name}.labels"), &labels);
    }
    c.write(path)?;
    Ok(())
}

/// Reads a pair written by [`save_datasets`].
pub fn load_datasets(path: &Path) -> Result<(Dataset, Dataset), DataError> {
    let c = Container::read(path)?;
    let bad = |what: &str| DataError::Container(CheckpointError::Header(what.to_string()));
    if c.header["kind"] != "dataset" {
        return Err(bad("not a dataset container"));
    }
    let classes = c.header["classes"].as_u64().ok_or_else(|| bad("classes"))? as usize;
    let shape: Vec<usize> = serde_json::from_value(c.header["shape"].clone()).map_err(|e| bad(&e.to_string()))?;
    let dim: usize = shape.iter().product();
    let split = |name: &str, split: Split| -> Result<Dataset, DataError> {
        let features = c
            .block(&format!("{name}.features"))
            .ok_or_else(|| bad("missing features"))?;
        let labels = c
            .block(&format!("{name}.labels"))
            .ok_or_else(|| bad("missing labels"))?;
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(bad("feature block size"));
        }
        let labels = labels
            .iter()
            .map(|&l| {
                if l >= 0.0 && l.fract() == 0.0 {
                    Ok(l as usize)
                } else {
                    Err(bad("non-integer label"))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let m = Matrix::from_vec(labels.len(), dim, features.to_vec()).map_err(|e| bad(&e.to_string()))?;
        Dataset::new(m, labels, classes, shape.clone(), split)
    };
    Ok((split("train", Split::Train)?, split("test", Split::Test)?))
}
