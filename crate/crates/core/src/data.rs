//! IDX image/label files and seeded mini-batches.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: label {label} at index {index} is outside [0, {CLASSES})")]
    LabelOutOfRange {
        path: PathBuf,
        index: usize,
        label: u8,
    },
    #[error("no IDX file for {0} (tried plain and .gz)")]
    Missing(PathBuf),
    #[error("{0}")]
    Invalid(String),
}

/// Images scaled to [0, 1] as `[M, 1, H, W]` plus class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    name: String,
    images: Tensor<f32>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        images: Tensor<f32>,
        labels: Vec<usize>,
    ) -> Result<Self, DataError> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(DataError::Invalid(format!(
                "images must be [M, 1, H, W], got {shape:?}"
            )));
        }
        if shape[0] != labels.len() {
            return Err(DataError::CountMismatch {
                images: shape[0],
                labels: labels.len(),
            });
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(DataError::Invalid("pixel values must lie in [0, 1]".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= CLASSES) {
            return Err(DataError::Invalid(format!(
                "label {bad} is outside [0, {CLASSES})"
            )));
        }
        Ok(Self {
            name: name.into(),
            images,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `[1, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let size = self.images.numel() / self.len();
        &self.images.data()[i * size..(i + 1) * size]
    }

    /// Stacks the given samples into `[B, 1, H, W]`.
    pub fn gather<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let [c, h, w] = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::of(f64::from(v))));
        }
        let images =
            Tensor::new([indices.len(), c, h, w], data).expect("gathered indices are nonempty");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` samples (all if fewer).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.gather::<f32>(&idx);
        Self {
            name: self.name.clone(),
            images,
            labels,
        }
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>, DataError> {
    let head = 4 * (dims + 1);
    let truncated = || DataError::Truncated {
        path: path.to_path_buf(),
        expected: head,
        found: bytes.len(),
    };
    let found = be_u32(bytes, 0).ok_or_else(truncated)?;
    if found != magic {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    let extents = (0..dims)
        .map(|d| {
            be_u32(bytes, 4 + 4 * d)
                .map(|v| v as usize)
                .ok_or_else(truncated)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let expected = head + extents.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(extents)
}

/// Reads an IDX image file (`0x803`) and label file (`0x801`); either may be
/// gzip-compressed.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset, DataError> {
    let image_bytes = read_maybe_gz(images_path)?;
    let dims = header(images_path, &image_bytes, IMAGE_MAGIC, 3)?;
    let label_bytes = read_maybe_gz(labels_path)?;
    let count = header(labels_path, &label_bytes, LABEL_MAGIC, 1)?[0];
    let (m, h, w) = (dims[0], dims[1], dims[2]);
    if m != count {
        return Err(DataError::CountMismatch {
            images: m,
            labels: count,
        });
    }
    if m == 0 || h == 0 || w == 0 {
        return Err(DataError::Invalid(format!(
            "{}: empty image file",
            images_path.display()
        )));
    }
    let pixels = image_bytes[16..16 + m * h * w]
        .iter()
        .map(|&b| f32::from(b) / 255.0)
        .collect();
    let labels = label_bytes[8..8 + m]
        .iter()
        .enumerate()
        .map(|(index, &label)| {
            if usize::from(label) < CLASSES {
                Ok(usize::from(label))
            } else {
                Err(DataError::LabelOutOfRange {
                    path: labels_path.to_path_buf(),
                    index,
                    label,
                })
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let name = images_path
        .parent()
        .and_then(Path::file_name)
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    let images = Tensor::new([m, 1, h, w], pixels).expect("extents checked above");
    Ok(LabeledDataset {
        name,
        images,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

fn resolve(root: &Path, stem: String) -> Result<PathBuf, DataError> {
    let plain = root.join(&stem);
    if plain.is_file() {
        return Ok(plain);
    }
    let gz = root.join(format!("{stem}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    Err(DataError::Missing(plain))
}

/// Loads `<root>/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]`.
pub fn load_split(root: &Path, split: Split) -> Result<LabeledDataset, DataError> {
    let images = resolve(root, format!("{}-images-idx3-ubyte", split.prefix()))?;
    let labels = resolve(root, format!("{}-labels-idx1-ubyte", split.prefix()))?;
    load_idx(&images, &labels)
}

/// The sample order for one epoch, cut into batches; the last one may be
/// shorter. Depends only on `(len, batch_size, seed, epoch)`.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Image/label batches for one epoch in seeded order.
pub fn minibatches<'a, T: Scalar>(
    dataset: &'a LabeledDataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> impl Iterator<Item = (Tensor<T>, Vec<usize>)> + 'a {
    batch_indices(dataset.len(), batch_size, seed, epoch)
        .into_iter()
        .map(move |idx| dataset.gather(&idx))
}
