use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ReadBytesExt};
use thiserror::Error;

use crate::tensor::{Matrix, Rng};

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;
pub const MNIST_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad magic {found}, expected {expected}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated, expected {expected} bytes of payload, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: label {label} is not a digit")]
    InvalidLabel { path: PathBuf, label: u8 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// Labeled samples stored feature-major: `inputs` is `d × N`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if inputs.cols() != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} samples but {} labels",
                inputs.cols(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(DataError::Invalid(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.rows()
    }

    /// Inputs and labels of the given samples, in order.
    pub fn gather(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        let d = self.dim();
        let src = self.inputs.as_slice();
        let mut data = Vec::with_capacity(d * indices.len());
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (
            Matrix::from_col_major(d, indices.len(), data).expect("gathered finite columns"),
            labels,
        )
    }

    /// The first `n` samples.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (inputs, labels) = self.gather(&idx);
        Self {
            inputs,
            labels,
            num_classes: self.num_classes,
        }
    }
}

/// Gaussian blobs around class means on the unit sphere. Sample `i`
/// belongs to class `i mod n_classes`.
pub fn make_blobs(
    rng: &mut Rng,
    n_samples: usize,
    n_features: usize,
    n_classes: usize,
    spread: f64,
) -> Result<Dataset, DataError> {
    if n_classes < 2 || n_features == 0 || n_samples == 0 {
        return Err(DataError::Invalid(format!(
            "blobs need >= 2 classes and nonempty shape, got {n_samples}x{n_features}, {n_classes} classes"
        )));
    }
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..n_features).map(|_| rng.normal()).collect();
            let r = crate::tensor::norm(&v);
            if r > 1e-12 {
                break v.into_iter().map(|x| x / r).collect();
            }
        })
        .collect();
    let mut data = Vec::with_capacity(n_samples * n_features);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let c = i % n_classes;
        for &mu in &means[c] {
            data.push(mu + spread * rng.normal());
        }
        labels.push(c);
    }
    let inputs = Matrix::from_col_major(n_features, n_samples, data)
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(inputs, labels, n_classes)
}

/// Reads an IDX image/label file pair. Pixels are scaled to `[0, 1]` and
/// each image is flattened row by row. `subset` keeps the first samples.
pub fn load_mnist_idx(
    images: &Path,
    labels: &Path,
    subset: Option<usize>,
) -> Result<Dataset, DataError> {
    let image_bytes = read_file(images)?;
    let label_bytes = read_file(labels)?;

    let mut r = image_bytes.as_slice();
    let header = |r: &mut &[u8], path: &Path, len: usize| -> Result<Vec<u32>, DataError> {
        let found = r.len();
        (0..len)
            .map(|_| {
                r.read_u32::<BigEndian>().map_err(|_| DataError::Truncated {
                    path: path.to_path_buf(),
                    expected: 4 * len,
                    found,
                })
            })
            .collect()
    };
    let h = header(&mut r, images, 4)?;
    if h[0] != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: images.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            found: h[0],
        });
    }
    let (count, rows, cols) = (h[1] as usize, h[2] as usize, h[3] as usize);
    let pixels = rows * cols;
    let take = subset.map_or(count, |s| s.min(count));
    let payload = count * pixels;
    if r.len() < payload {
        return Err(DataError::Truncated {
            path: images.to_path_buf(),
            expected: payload,
            found: r.len(),
        });
    }

    let mut lr = label_bytes.as_slice();
    let lh = header(&mut lr, labels, 2)?;
    if lh[0] != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: labels.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            found: lh[0],
        });
    }
    let label_count = lh[1] as usize;
    if lr.len() < label_count {
        return Err(DataError::Truncated {
            path: labels.to_path_buf(),
            expected: label_count,
            found: lr.len(),
        });
    }
    if label_count != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }

    let data: Vec<f64> = r[..take * pixels]
        .iter()
        .map(|&p| f64::from(p) / 255.0)
        .collect();
    let mut ys = Vec::with_capacity(take);
    for &y in &lr[..take] {
        if usize::from(y) >= MNIST_CLASSES {
            return Err(DataError::InvalidLabel {
                path: labels.to_path_buf(),
                label: y,
            });
        }
        ys.push(usize::from(y));
    }
    let inputs = Matrix::from_col_major(pixels, take, data)
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(inputs, ys, MNIST_CLASSES)
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}
