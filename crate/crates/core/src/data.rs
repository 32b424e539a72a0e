//! Datasets: seeded Gaussian blobs, MNIST IDX files and CIFAR-10 binary
//! batches, all flattened to `samples x features` and normalized.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::{LinalgError, Matrix};
use crate::net::Targets;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{file}: {reason} (byte offset {offset})")]
    Format {
        file: String,
        offset: usize,
        reason: String,
    },
    #[error("invalid dataset specification: {0}")]
    Spec(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub const CIFAR10_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f64; 3] = [0.2023, 0.1994, 0.2010];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-feature affine normalization `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            std: vec![1.0; features],
        }
    }

    /// Column means and population standard deviations of `raw`. Constant
    /// columns get a unit scale.
    pub fn fit(raw: &Matrix) -> Self {
        let (n, d) = raw.shape();
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, x) in mean.iter_mut().zip(raw.row(i)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((v, x), m) in var.iter_mut().zip(raw.row(i)).zip(&mean) {
                *v += (x - m).powi(2);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n.max(1) as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, raw: &Matrix) -> Matrix {
        Matrix::from_fn(raw.rows(), raw.cols(), |i, j| (raw.get(i, j) - self.mean[j]) / self.std[j])
    }

    pub fn invert(&self, normalized: &Matrix) -> Matrix {
        Matrix::from_fn(normalized.rows(), normalized.cols(), |i, j| {
            normalized.get(i, j) * self.std[j] + self.mean[j]
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: Split,
    pub normalization: Normalization,
    /// Position of each sample in the generating pool or source file.
    pub source_indices: Vec<usize>,
}

impl Dataset {
    pub fn new(
        inputs: Matrix,
        labels: Vec<usize>,
        class_count: usize,
        split: Split,
        normalization: Normalization,
        source_indices: Vec<usize>,
    ) -> Result<Self> {
        if inputs.rows() != labels.len() || source_indices.len() != labels.len() {
            return Err(DataError::Spec(format!(
                "{} rows, {} labels, {} source indices",
                inputs.rows(),
                labels.len(),
                source_indices.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(DataError::Spec(format!("label {l} at {i} is outside 0..{class_count}")));
        }
        if normalization.mean.len() != inputs.cols() || normalization.std.len() != inputs.cols() {
            return Err(DataError::Spec("normalization width does not match features".into()));
        }
        inputs.check_finite()?;
        Ok(Self {
            inputs,
            labels,
            class_count,
            split,
            normalization,
            source_indices,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.inputs.cols()
    }

    pub fn targets(&self) -> Targets {
        Targets::Labels(self.labels.clone())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            split: self.split,
            normalization: self.normalization.clone(),
            source_indices: indices.iter().map(|&i| self.source_indices[i]).collect(),
        }
    }

    /// Matrix text of the inputs followed by a `labels ...` line.
    pub fn to_text(&self) -> String {
        let labels: Vec<String> = self.labels.iter().map(|l| l.to_string()).collect();
        format!("{}labels {}\n", self.inputs.to_text(), labels.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    /// Radius of the sphere the class means lie on.
    pub delta: f64,
    pub sigma: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(DataError::Spec(format!("classes must be ≥ 2, got {}", self.classes)));
        }
        if self.dim == 0 {
            return Err(DataError::Spec("dim must be ≥ 1".into()));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(DataError::Spec(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(DataError::Spec(format!("delta must be ≥ 0, got {}", self.delta)));
        }
        if self.train_size == 0 {
            return Err(DataError::Spec("train_size must be ≥ 1".into()));
        }
        Ok(())
    }

    /// The seeded class means, before normalization.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.classes)
            .map(|_| {
                let g: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                g.iter().map(|x| self.delta * x / norm).collect()
            })
            .collect()
    }
}

/// Draws a train and a test split from one seeded pool.
///
/// Labels are balanced (`i mod k`) and shuffled within each split. Train
/// statistics normalize both splits.
pub fn generate_blobs(spec: &BlobSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let means = spec.class_means();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut draw = |size: usize, offset: usize| {
        let mut order: Vec<usize> = (0..size).collect();
        order.shuffle(&mut rng);
        let labels: Vec<usize> = order.iter().map(|i| i % spec.classes).collect();
        let raw = Matrix::from_fn(size, spec.dim, |i, j| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            means[labels[i]][j] + spec.sigma * noise
        });
        let source: Vec<usize> = (offset..offset + size).collect();
        (raw, labels, source)
    };
    let (train_raw, train_labels, train_src) = draw(spec.train_size, 0);
    let (test_raw, test_labels, test_src) = draw(spec.test_size, spec.train_size);
    assert!(
        train_src.last().map_or(true, |&last| test_src.first().map_or(true, |&first| last < first)),
        "train and test pools overlap"
    );

    let norm = Normalization::fit(&train_raw);
    let train = Dataset::new(norm.apply(&train_raw), train_labels, spec.classes, Split::Train, norm.clone(), train_src)?;
    let test = Dataset::new(norm.apply(&test_raw), test_labels, spec.classes, Split::Test, norm, test_src)?;
    Ok((train, test))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn be_u32(bytes: &[u8], offset: usize, file: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Format {
            file: file.into(),
            offset,
            reason: format!("header needs {} bytes, file has {}", offset + 4, bytes.len()),
        })
}

fn expect_len(bytes: &[u8], want: usize, file: &str) -> Result<()> {
    if bytes.len() != want {
        return Err(DataError::Format {
            file: file.into(),
            offset: bytes.len().min(want),
            reason: format!("expected {want} bytes, found {}", bytes.len()),
        });
    }
    Ok(())
}

/// Parses an IDX image file (magic `0x00000803`) to `count x (rows·cols)`
/// pixel values scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], file: &str) -> Result<Matrix> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != 0x0803 {
        return Err(DataError::Format {
            file: file.into(),
            offset: 0,
            reason: format!("bad image magic {magic:#010x}, expected 0x00000803"),
        });
    }
    let count = be_u32(bytes, 4, file)? as usize;
    let pixels = be_u32(bytes, 8, file)? as usize * be_u32(bytes, 12, file)? as usize;
    expect_len(bytes, 16 + count * pixels, file)?;
    let data = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Matrix::from_vec(count, pixels, data)?)
}

/// Parses an IDX label file (magic `0x00000801`); labels must be digits.
pub fn parse_idx_labels(bytes: &[u8], file: &str) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != 0x0801 {
        return Err(DataError::Format {
            file: file.into(),
            offset: 0,
            reason: format!("bad label magic {magic:#010x}, expected 0x00000801"),
        });
    }
    let count = be_u32(bytes, 4, file)? as usize;
    expect_len(bytes, 8 + count, file)?;
    bytes[8..]
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if b > 9 {
                Err(DataError::Format {
                    file: file.into(),
                    offset: 8 + i,
                    reason: format!("label {b} outside 0..=9"),
                })
            } else {
                Ok(b as usize)
            }
        })
        .collect()
}

fn idx_split(dir: &Path, images: &str, labels: &str) -> Result<(Matrix, Vec<usize>)> {
    let x = parse_idx_images(&read_file(&dir.join(images))?, images)?;
    let y = parse_idx_labels(&read_file(&dir.join(labels))?, labels)?;
    if x.rows() != y.len() {
        return Err(DataError::Format {
            file: labels.into(),
            offset: 4,
            reason: format!("{} labels for {} images", y.len(), x.rows()),
        });
    }
    Ok((x, y))
}

/// Loads the four standard uncompressed MNIST files from `dir`.
///
/// Pixels are scaled to `[0, 1]` and then standardized by the scalar mean
/// and standard deviation of the training pixels.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let (train_x, train_y) = idx_split(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let (test_x, test_y) = idx_split(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    let values = train_x.as_slice();
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let std = if std > 1e-12 { std } else { 1.0 };
    let d = train_x.cols();
    let norm = Normalization {
        mean: vec![mean; d],
        std: vec![std; d],
    };
    let (n_train, n_test) = (train_y.len(), test_y.len());
    Ok((
        Dataset::new(norm.apply(&train_x), train_y, 10, Split::Train, norm.clone(), (0..n_train).collect())?,
        Dataset::new(norm.apply(&test_x), test_y, 10, Split::Test, norm, (0..n_test).collect())?,
    ))
}

const CIFAR_RECORD: usize = 1 + 3072;

/// Parses CIFAR-10 binary records (label byte, then 1024 red, 1024 green,
/// 1024 blue pixel bytes) into raw `[0, 1]` pixels.
pub fn parse_cifar10(bytes: &[u8], file: &str) -> Result<(Matrix, Vec<usize>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(DataError::Format {
            file: file.into(),
            offset: bytes.len() - bytes.len() % CIFAR_RECORD,
            reason: format!("length {} is not a multiple of the {CIFAR_RECORD}-byte record", bytes.len()),
        });
    }
    let count = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * 3072);
    for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if record[0] > 9 {
            return Err(DataError::Format {
                file: file.into(),
                offset: r * CIFAR_RECORD,
                reason: format!("label {} outside 0..=9", record[0]),
            });
        }
        labels.push(record[0] as usize);
        data.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((Matrix::from_vec(count, 3072, data)?, labels))
}

pub fn cifar10_normalization() -> Normalization {
    Normalization {
        mean: (0..3072).map(|j| CIFAR10_MEAN[j / 1024]).collect(),
        std: (0..3072).map(|j| CIFAR10_STD[j / 1024]).collect(),
    }
}

fn cifar_split(dir: &Path, files: &[String], split: Split) -> Result<Dataset> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let (x, y) = parse_cifar10(&read_file(&dir.join(f))?, f)?;
        rows.extend(x.into_vec());
        labels.extend(y);
    }
    let raw = Matrix::from_vec(labels.len(), 3072, rows)?;
    let norm = cifar10_normalization();
    let n = labels.len();
    Dataset::new(norm.apply(&raw), labels, 10, split, norm, (0..n).collect())
}

/// Loads `data_batch_1..5.bin` and `test_batch.bin` from `dir`, normalized
/// with the standard per-channel constants.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train_files: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    let train = cifar_split(dir, &train_files, Split::Train)?;
    let test = cifar_split(dir, &["test_batch.bin".to_string()], Split::Test)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> BlobSpec {
        BlobSpec {
            classes: 4,
            dim: 6,
            delta: 3.0,
            sigma: 1.0,
            train_size: 200,
            test_size: 80,
            seed: 5,
        }
    }

    fn nearest_mean_accuracy(spec: &BlobSpec, test: &Dataset) -> f64 {
        let means = spec.class_means();
        let raw = test.normalization.invert(&test.inputs);
        let hits = (0..test.len())
            .filter(|&i| {
                let dist = |m: &Vec<f64>| m.iter().zip(raw.row(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..means.len())
                    .min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b])))
                    .unwrap();
                best == test.labels[i]
            })
            .count();
        hits as f64 / test.len() as f64
    }

    #[test]
    fn blobs_are_deterministic_balanced_and_disjoint() {
        let (train, test) = generate_blobs(&spec()).unwrap();
        let (train2, test2) = generate_blobs(&spec()).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        assert_eq!(train.inputs.shape(), (200, 6));
        for c in 0..4 {
            assert_eq!(train.labels.iter().filter(|&&l| l == c).count(), 50);
        }
        assert!(train.source_indices.iter().all(|i| !test.source_indices.contains(i)));
        let other = generate_blobs(&BlobSpec { seed: 6, ..spec() }).unwrap().0;
        assert_ne!(other.inputs, train.inputs);
    }

    #[test]
    fn train_split_is_standardized() {
        let (train, _) = generate_blobs(&spec()).unwrap();
        let refit = Normalization::fit(&train.inputs);
        for j in 0..6 {
            assert!(refit.mean[j].abs() < 1e-12);
            assert!((refit.std[j] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_round_trip() {
        let (train, _) = generate_blobs(&spec()).unwrap();
        let raw = train.normalization.invert(&train.inputs);
        let back = train.normalization.apply(&raw);
        let rel = back.sub(&train.inputs).unwrap().frobenius_norm() / train.inputs.frobenius_norm();
        assert!(rel <= 1e-12);
    }

    #[test]
    fn tiny_noise_is_perfectly_separable() {
        let s = BlobSpec { sigma: 1e-6, ..spec() };
        let (_, test) = generate_blobs(&s).unwrap();
        assert_eq!(nearest_mean_accuracy(&s, &test), 1.0);
    }

    #[test]
    fn zero_separation_is_chance() {
        let s = BlobSpec {
            delta: 0.0,
            test_size: 2000,
            ..spec()
        };
        let (_, test) = generate_blobs(&s).unwrap();
        // Ties go to class 0 when every mean coincides.
        let acc = nearest_mean_accuracy(&s, &test);
        let p = 0.25;
        let band = 3.0 * (p * (1.0 - p) / 2000.0f64).sqrt();
        assert!((acc - p).abs() <= band, "{acc}");
    }

    #[test]
    fn well_separated_blobs_meet_bayes_bound() {
        let s = BlobSpec {
            classes: 3,
            dim: 20,
            delta: 4.0,
            sigma: 1.0,
            train_size: 300,
            test_size: 3000,
            seed: 8,
        };
        let (_, test) = generate_blobs(&s).unwrap();
        assert!(nearest_mean_accuracy(&s, &test) >= 0.95);
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_blobs(&BlobSpec { classes: 1, ..spec() }).is_err());
        assert!(generate_blobs(&BlobSpec { sigma: 0.0, ..spec() }).is_err());
        assert!(generate_blobs(&BlobSpec { dim: 0, ..spec() }).is_err());
    }

    #[test]
    fn text_export_has_labels_line() {
        let (train, _) = generate_blobs(&BlobSpec { train_size: 3, ..spec() }).unwrap();
        let text = train.to_text();
        let last = text.lines().last().unwrap();
        assert!(last.starts_with("labels "));
        let matrix_part: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        assert_eq!(Matrix::from_text(&matrix_part).unwrap(), train.inputs);
    }

    fn idx_images(count: u32, rows: u32, cols: u32, fill: u8) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [0x0803, count, rows, cols] {
            b.extend(u32::to_be_bytes(v));
        }
        b.extend(std::iter::repeat(fill).take((count * rows * cols) as usize));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(u32::to_be_bytes(0x0801));
        b.extend(u32::to_be_bytes(labels.len() as u32));
        b.extend(labels);
        b
    }

    #[test]
    fn idx_parsing_and_errors() {
        let x = parse_idx_images(&idx_images(3, 2, 2, 255), "img").unwrap();
        assert_eq!(x.shape(), (3, 4));
        assert!(x.as_slice().iter().all(|&v| v == 1.0));
        assert_eq!(parse_idx_labels(&idx_labels(&[0, 9, 3]), "lab").unwrap(), vec![0, 9, 3]);

        let mut truncated = idx_images(3, 2, 2, 0);
        truncated.pop();
        let err = parse_idx_images(&truncated, "img").unwrap_err().to_string();
        assert!(err.contains("expected 28 bytes, found 27"), "{err}");

        let err = parse_idx_labels(&idx_labels(&[1, 12]), "lab").unwrap_err();
        assert!(matches!(err, DataError::Format { offset: 9, .. }));

        let mut bad_magic = idx_labels(&[1]);
        bad_magic[3] = 0x03;
        assert!(matches!(parse_idx_labels(&bad_magic, "lab"), Err(DataError::Format { offset: 0, .. })));
        assert!(parse_idx_images(&[0, 0], "img").is_err());
    }

    #[test]
    fn mnist_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, bytes: Vec<u8>| std::fs::write(dir.path().join(name), bytes).unwrap();
        let mut train = idx_images(4, 2, 2, 0);
        train[16] = 255;
        write("train-images-idx3-ubyte", train);
        write("train-labels-idx1-ubyte", idx_labels(&[1, 2, 3, 4]));
        write("t10k-images-idx3-ubyte", idx_images(2, 2, 2, 51));
        write("t10k-labels-idx1-ubyte", idx_labels(&[5, 6]));
        let (tr, te) = load_mnist(dir.path()).unwrap();
        assert_eq!((tr.len(), te.len(), tr.features()), (4, 2, 4));
        let values = tr.inputs.as_slice();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert_eq!(te.labels, vec![5, 6]);
    }

    fn cifar_record(label: u8, rgb: [u8; 3]) -> Vec<u8> {
        let mut r = vec![label];
        for c in rgb {
            r.extend(std::iter::repeat(c).take(1024));
        }
        r
    }

    #[test]
    fn cifar_record_parsing() {
        let (x, y) = parse_cifar10(&cifar_record(7, [255, 0, 128]), "b").unwrap();
        assert_eq!(y, vec![7]);
        assert_eq!(x.shape(), (1, 3072));
        assert_eq!(x.get(0, 0), 1.0);
        assert_eq!(x.get(0, 1024), 0.0);
        let norm = cifar10_normalization();
        let z = norm.apply(&x);
        assert!((z.get(0, 0) - (1.0 - 0.4914) / 0.2023).abs() < 1e-12);
        assert!((z.get(0, 2048) - (128.0 / 255.0 - 0.4465) / 0.2010).abs() < 1e-12);

        let mut bad = cifar_record(7, [0, 0, 0]);
        bad.push(0);
        assert!(matches!(parse_cifar10(&bad, "b"), Err(DataError::Format { offset: 3073, .. })));
        assert!(parse_cifar10(&cifar_record(10, [0, 0, 0]), "b").is_err());
    }

    /// Set `OPTSHIFT_MNIST_DIR` to run against the official files.
    #[test]
    fn official_mnist_counts() {
        let Ok(dir) = std::env::var("OPTSHIFT_MNIST_DIR") else {
            return;
        };
        let (train, test) = load_mnist(Path::new(&dir)).unwrap();
        assert_eq!((train.len(), test.len(), train.features()), (60000, 10000, 784));
    }

    /// Set `OPTSHIFT_CIFAR10_DIR` to run against the official batches.
    #[test]
    fn official_cifar10_channel_means() {
        let Ok(dir) = std::env::var("OPTSHIFT_CIFAR10_DIR") else {
            return;
        };
        let (train, _) = load_cifar10(Path::new(&dir)).unwrap();
        let fit = Normalization::fit(&train.inputs);
        for c in 0..3 {
            let m = fit.mean[c * 1024..(c + 1) * 1024].iter().sum::<f64>() / 1024.0;
            assert!(m.abs() <= 0.02, "channel {c} mean {m}");
        }
    }
}
