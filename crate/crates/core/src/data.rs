//! MNIST IDX and CIFAR-10 binary loaders, normalization and batching.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_SIDE: usize = 32;
pub const CLASSES: usize = 10;

pub const MNIST_MEAN: [f64; 1] = [0.1307];
pub const MNIST_STD: [f64; 1] = [0.3081];
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        })
    }
}

impl DatasetKind {
    pub fn input_shape(self) -> [usize; 3] {
        match self {
            DatasetKind::Mnist => [1, 28, 28],
            DatasetKind::Cifar10 => [3, CIFAR_SIDE, CIFAR_SIDE],
        }
    }

    pub fn default_stats(self) -> (Vec<f64>, Vec<f64>) {
        match self {
            DatasetKind::Mnist => (MNIST_MEAN.to_vec(), MNIST_STD.to_vec()),
            DatasetKind::Cifar10 => (CIFAR_MEAN.to_vec(), CIFAR_STD.to_vec()),
        }
    }

    /// Standard file names under `dir` for the training or test split.
    pub fn files(self, dir: &Path, train: bool) -> Vec<PathBuf> {
        match (self, train) {
            (DatasetKind::Mnist, true) => vec![
                dir.join("train-images-idx3-ubyte"),
                dir.join("train-labels-idx1-ubyte"),
            ],
            (DatasetKind::Mnist, false) => vec![
                dir.join("t10k-images-idx3-ubyte"),
                dir.join("t10k-labels-idx1-ubyte"),
            ],
            (DatasetKind::Cifar10, true) => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
            (DatasetKind::Cifar10, false) => vec![dir.join("test_batch.bin")],
        }
    }

    /// Loads a split and normalizes it with the default statistics.
    pub fn load<T: Scalar>(self, dir: &Path, train: bool) -> Result<Dataset<T>> {
        let files = self.files(dir, train);
        let raw = match self {
            DatasetKind::Mnist => load_mnist_idx(&files[0], &files[1])?,
            DatasetKind::Cifar10 => load_cifar10_bin(&files)?,
        };
        let (mean, std) = self.default_stats();
        normalize(raw, &mean, &std)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    /// `[N×C×H×W]`.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Per-channel statistics applied by [`normalize`]; empty for raw `[0,1]` pixels.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::shape(format!("images must be [N,C,H,W], got {:?}", images.shape())));
        }
        if images.batch() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(Error::Consistency(format!("label {y} at index {i} exceeds {classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            mean: Vec::new(),
            std: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample `[C, H, W]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Samples at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Batch<T> {
        let per = self.images.sample_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.images.sample(i));
        }
        let [c, h, w] = self.sample_shape();
        Batch {
            images: Tensor::from_vec([indices.len(), c, h, w], data).expect("gathered sizes agree"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The first `n` samples (all of them when `n ≥ len`).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let b = self.gather(&idx);
        Dataset {
            images: b.images,
            labels: b.labels,
            classes: self.classes,
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
    }

    pub fn batches(&self, batch_size: usize, shuffle: bool, seed: u64) -> Result<Batches<'_, T>> {
        batches(self, batch_size, shuffle, seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let b = bytes.get(offset..offset + 4).ok_or_else(|| Error::Format {
        offset: offset as u64,
        message: format!("truncated while reading {what}"),
    })?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn idx_payload<'a>(bytes: &'a [u8], magic: u32, dims: usize, what: &str) -> Result<(Vec<usize>, &'a [u8])> {
    let found = be_u32(bytes, 0, "magic")?;
    if found != magic {
        return Err(Error::Format {
            offset: 0,
            message: format!("{what}: magic {found:#010x}, expected {magic:#010x}"),
        });
    }
    let shape: Vec<usize> = (0..dims)
        .map(|d| be_u32(bytes, 4 + 4 * d, "dimension").map(|v| v as usize))
        .collect::<Result<_>>()?;
    let start = 4 + 4 * dims;
    let len: usize = shape.iter().product();
    let payload = &bytes[start..];
    if payload.len() < len {
        return Err(Error::Format {
            offset: (start + payload.len()) as u64,
            message: format!("{what}: truncated, {} of {len} payload bytes present", payload.len()),
        });
    }
    if payload.len() > len {
        return Err(Error::Format {
            offset: (start + len) as u64,
            message: format!("{what}: {} trailing bytes", payload.len() - len),
        });
    }
    Ok((shape, payload))
}

fn scale_pixels<T: Scalar>(bytes: &[u8]) -> Vec<T> {
    let inv = 1.0 / 255.0;
    bytes.iter().map(|&b| T::lit(b as f64 * inv)).collect()
}

/// Parses IDX image (`0x803`) and label (`0x801`) files; pixels scaled to `[0,1]`.
pub fn parse_mnist_idx<T: Scalar>(images: &[u8], labels: &[u8]) -> Result<Dataset<T>> {
    let (ishape, pixels) = idx_payload(images, IDX_IMAGES_MAGIC, 3, "images")?;
    let (lshape, label_bytes) = idx_payload(labels, IDX_LABELS_MAGIC, 1, "labels")?;
    if ishape[0] != lshape[0] {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            ishape[0], lshape[0]
        )));
    }
    if ishape[0] == 0 {
        return Err(Error::Consistency("empty IDX file".into()));
    }
    let images = Tensor::from_vec([ishape[0], 1, ishape[1], ishape[2]], scale_pixels(pixels))?;
    Dataset::new(images, label_bytes.iter().map(|&b| b as usize).collect(), CLASSES)
}

pub fn load_mnist_idx<T: Scalar>(image_path: &Path, label_path: &Path) -> Result<Dataset<T>> {
    parse_mnist_idx(&fs::read(image_path)?, &fs::read(label_path)?)
}

/// Parses concatenated 3073-byte records: one label byte, then R, G and B
/// planes of 32×32 bytes.
pub fn parse_cifar10_bin<T: Scalar>(bytes: &[u8]) -> Result<Dataset<T>> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::Format {
            offset: whole as u64,
            message: format!(
                "length {} is not a positive multiple of the {CIFAR_RECORD}-byte record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        pixels.extend(scale_pixels::<T>(&rec[1..]));
    }
    let images = Tensor::from_vec([n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?;
    Dataset::new(images, labels, CLASSES)
}

pub fn load_cifar10_bin<T: Scalar, P: AsRef<Path>>(batch_paths: &[P]) -> Result<Dataset<T>> {
    if batch_paths.is_empty() {
        return Err(Error::invalid("no CIFAR-10 batch files given"));
    }
    let mut bytes = Vec::new();
    for p in batch_paths {
        let chunk = fs::read(p)?;
        if chunk.is_empty() || chunk.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format {
                offset: (chunk.len() / CIFAR_RECORD * CIFAR_RECORD) as u64,
                message: format!(
                    "{}: length {} is not a positive multiple of the {CIFAR_RECORD}-byte record",
                    p.as_ref().display(),
                    chunk.len()
                ),
            });
        }
        bytes.extend_from_slice(&chunk);
    }
    parse_cifar10_bin(&bytes)
}

/// `x ← (x − mean)/std` per channel.
pub fn normalize<T: Scalar>(mut data: Dataset<T>, mean: &[f64], std: &[f64]) -> Result<Dataset<T>> {
    let [c, h, w] = data.sample_shape();
    if mean.len() != c || std.len() != c {
        return Err(Error::shape(format!(
            "{c} channels but {} means and {} stds",
            mean.len(),
            std.len()
        )));
    }
    if let Some(s) = std.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::invalid(format!("standard deviation must be > 0, got {s}")));
    }
    let plane = h * w;
    for (k, chunk) in data.images.data_mut().chunks_mut(plane).enumerate() {
        let ch = k % c;
        let (m, inv) = (T::lit(mean[ch]), T::lit(1.0 / std[ch]));
        for v in chunk {
            *v = (*v - m) * inv;
        }
    }
    data.mean = mean.to_vec();
    data.std = std.to_vec();
    Ok(data)
}

/// Per-channel mean and (population) standard deviation.
pub fn channel_stats<T: Scalar>(data: &Dataset<T>) -> (Vec<f64>, Vec<f64>) {
    let [c, h, w] = data.sample_shape();
    let plane = h * w;
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for (k, chunk) in data.images.data().chunks(plane).enumerate() {
        for &v in chunk {
            let v = v.as_f64();
            sum[k % c] += v;
            sq[k % c] += v * v;
        }
    }
    let n = (data.len() * plane) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s / n - m * m).max(0.0).sqrt())
        .collect();
    (mean, std)
}

/// One pass over a dataset in fixed-size batches; the last batch may be short.
pub struct Batches<'a, T> {
    data: &'a Dataset<T>,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<T: Scalar> Iterator for Batches<'_, T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let b = self.data.gather(&self.order[self.pos..end]);
        self.pos = end;
        Some(b)
    }
}

pub fn batches<T: Scalar>(data: &Dataset<T>, batch_size: usize, shuffle: bool, seed: u64) -> Result<Batches<'_, T>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    let order = if shuffle {
        Rng::new(seed).permutation(data.len())
    } else {
        (0..data.len()).collect()
    };
    Ok(Batches {
        data,
        order,
        batch_size,
        pos: 0,
    })
}

/// Random horizontal flip and 4-pixel zero-pad random crop, per sample.
pub fn augment_flip_crop<T: Scalar>(images: &mut Tensor<T>, rng: &mut Rng) {
    const PAD: usize = 4;
    let [_, c, h, w] = *images.shape() else {
        return;
    };
    let per = c * h * w;
    let mut src = vec![T::zero(); per];
    for sample in images.data_mut().chunks_mut(per) {
        src.copy_from_slice(sample);
        let flip = rng.unit() < 0.5;
        let dy = rng.below(2 * PAD + 1) as isize - PAD as isize;
        let dx = rng.below(2 * PAD + 1) as isize - PAD as isize;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = if flip { (w - 1 - x) as isize } else { x as isize };
                    let sx = sx0 + dx;
                    sample[(ch * h + y) * w + x] = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        src[(ch * h + sy as usize) * w + sx as usize]
                    } else {
                        T::zero()
                    };
                }
            }
        }
    }
}
