//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use hsnn::checkpoint;
use hsnn::data::{load_cifar10_bin, load_mnist_idx, parse_cifar10_bin, parse_mnist_idx, Dataset, DatasetKind};
use hsnn::network::ArchDescriptor;
use hsnn::train::{build_model, fit, TrainConfig};
use hsnn::Error;
use hsnn::hoyer::{clip_unit, hoyer_extremum, ExtremumMode};
use hsnn::{Rng, Tensor};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

/// Smallest power of two `2^-k` such that every value times `2^k` is an integer.
fn dyadic_exponent(values: &[f64]) -> u32 {
    values
        .iter()
        .filter(|v| **v != 0.0)
        .map(|&v| {
            let bits = v.to_bits();
            let exp = ((bits >> 52) & 0x7ff) as i32;
            let mantissa = bits & ((1u64 << 52) - 1);
            // v = m · 2^(e - 1075) with m odd after trimming trailing zeros.
            let (m, e) = if exp == 0 { (mantissa, -1074) } else { (mantissa | (1u64 << 52), exp - 1075) };
            let e = e + m.trailing_zeros() as i32;
            (-e).max(0) as u32
        })
        .max()
        .unwrap_or(0)
}

fn to_scaled_int(v: f64, k: u32) -> BigInt {
    let r = BigRational::from_float(v).expect("finite value");
    let scaled = r * BigRational::from_integer(BigInt::one() << k);
    assert!(scaled.is_integer());
    scaled.to_integer()
}

/// Central differences of `H(u) = (‖u‖₁/‖u‖₂)²` in exact rational
/// arithmetic with step `2^-step_exp`, so the only error is truncation.
pub struct ExactHoyerFd {
    values: Vec<BigInt>,
    l1: BigInt,
    l2sq: BigInt,
    /// The step in units of `2^-k`.
    h: BigInt,
    step_exp: u32,
}

impl ExactHoyerFd {
    pub fn new(u: &[f64], step_exp: u32) -> Self {
        let k = dyadic_exponent(u).max(step_exp);
        let values: Vec<BigInt> = u.iter().map(|&v| to_scaled_int(v, k)).collect();
        let l1 = values.iter().map(|v| v.abs()).sum();
        let l2sq = values.iter().map(|v| v * v).sum();
        ExactHoyerFd {
            values,
            l1,
            l2sq,
            h: BigInt::one() << (k - step_exp),
            step_exp,
        }
    }

    /// `(H(u + h·e_i) − H(u − h·e_i)) / 2h`. `H` is scale invariant, so it is
    /// evaluated directly on the integer representation.
    pub fn derivative(&self, i: usize) -> f64 {
        let ui = &self.values[i];
        let eval = |delta: &BigInt| {
            let v = ui + delta;
            let l1 = &self.l1 - ui.abs() + v.abs();
            let l2sq = &self.l2sq - ui * ui + &v * &v;
            (&l1 * &l1, l2sq)
        };
        let (np, dp) = eval(&self.h);
        let (nm, dm) = eval(&(-&self.h));
        let num = &np * &dm - &nm * &dp;
        if num.is_zero() {
            return 0.0;
        }
        let den = dp * dm * BigInt::from(2);
        BigRational::new_raw(num << self.step_exp, den).to_f64().expect("finite quotient")
    }
}

/// Random shape with up to four axes and at most `max_len` elements.
pub fn random_shape(rng: &mut Rng, max_len: usize) -> Vec<usize> {
    loop {
        let ndim = 1 + rng.below(4);
        let shape: Vec<usize> = (0..ndim).map(|_| 1 + rng.below(12)).collect();
        let n: usize = shape.iter().product();
        if n <= max_len {
            return shape;
        }
    }
}

/// Values drawn from a mix of distributions, including exact zeros,
/// tied magnitudes and heavy tails.
pub fn random_values(rng: &mut Rng, n: usize) -> Vec<f64> {
    let style = rng.below(5);
    (0..n)
        .map(|_| match style {
            0 => rng.uniform(-1.0, 1.0),
            1 => {
                if rng.below(3) == 0 {
                    0.0
                } else {
                    rng.uniform(-3.0, 3.0)
                }
            }
            2 => rng.uniform(-1.0, 1.0) * 10f64.powf(rng.uniform(-3.0, 3.0)),
            3 => rng.uniform(-1.0, 1.0).powi(3),
            _ => rng.uniform(0.0, 2.0),
        })
        .collect()
}

/// Maximum of `Ext(clip_unit(z))` over every group in `mode`.
pub fn max_clipped_extremum(z: &Tensor<f64>, mode: ExtremumMode) -> f64 {
    let clipped = clip_unit(z);
    let mut worst = f64::NEG_INFINITY;
    {
        let ext = hoyer_extremum(&clipped, mode).expect("valid shape");
        for v in ext.groups().into_iter().flatten() {
            worst = worst.max(v);
        }
    }
    worst
}

pub fn mnist_dir() -> PathBuf {
    std::env::var_os("HSNN_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

pub fn load_mnist(train: bool) -> Dataset<f32> {
    let dir = mnist_dir();
    DatasetKind::Mnist.load(&dir, train).unwrap_or_else(|e| {
        panic!(
            "MNIST not readable in {} ({e}); set HSNN_MNIST_DIR to the directory holding the four IDX files",
            dir.display()
        )
    })
}

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn idx_images(n: usize, h: usize, w: usize, pixel: impl Fn(usize) -> u8) -> Vec<u8> {
    let mut out = vec![0, 0, 8, 3];
    for d in [n, h, w] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend((0..n * h * w).map(pixel));
    out
}

pub fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 8, 1];
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// The official MNIST files: split sizes, sample shape, label range and
/// the well-known first training label.
pub fn check_official_mnist() -> Result<String, String> {
    let dir = mnist_dir();
    let train = DatasetKind::Mnist.files(&dir, true);
    let test = DatasetKind::Mnist.files(&dir, false);
    let train: Dataset<f32> = load_mnist_idx(&train[0], &train[1]).map_err(|e| format!("train split: {e}"))?;
    let test: Dataset<f32> = load_mnist_idx(&test[0], &test[1]).map_err(|e| format!("test split: {e}"))?;
    ensure(train.len() == 60_000 && test.len() == 10_000, || {
        format!("split sizes {} / {}", train.len(), test.len())
    })?;
    for d in [&train, &test] {
        ensure(d.sample_shape() == [1, 28, 28], || format!("sample shape {:?}", d.sample_shape()))?;
        ensure(d.labels.iter().all(|&l| l < 10), || "label outside 0..9".into())?;
        ensure(d.images.data().iter().all(|v| (0.0..=1.0).contains(v)), || "pixel outside [0, 1]".into())?;
        let mut seen = [false; 10];
        d.labels.iter().for_each(|&l| seen[l] = true);
        ensure(seen.iter().all(|s| *s), || "a digit class is missing".into())?;
    }
    ensure(train.labels[0] == 5 && test.labels[0] == 7, || {
        format!("first labels {} / {}", train.labels[0], test.labels[0])
    })?;
    Ok("MNIST 60000 + 10000 samples of 1x28x28, labels 0..9".into())
}

fn cifar_records(n: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(n * 3073);
    for i in 0..n {
        out.push((i % 10) as u8);
        out.extend((0..3072).map(|p| ((i * 7 + p) % 256) as u8));
    }
    out
}

/// A synthetic CIFAR-10 binary batch of the official size.
pub fn check_synthetic_cifar() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("data_batch_1.bin");
    std::fs::write(&path, cifar_records(10_000)).map_err(|e| e.to_string())?;
    let d: Dataset<f32> = load_cifar10_bin(&[&path]).map_err(|e| e.to_string())?;
    ensure(d.len() == 10_000 && d.sample_shape() == [3, 32, 32], || {
        format!("{} samples of {:?}", d.len(), d.sample_shape())
    })?;
    ensure(d.labels[..3] == [0, 1, 2] && d.labels[9_999] == 9, || "record labels".into())?;
    // Record 1: the red plane starts at 7, the green plane at 7 + 1024.
    let s = d.images.sample(1);
    ensure(s[0] == 7.0 / 255.0 && s[1024] == ((7 + 1024) % 256) as f32 / 255.0, || "pixel layout".into())?;
    let mut cut = cifar_records(2);
    cut.pop();
    ensure(parse_cifar10_bin::<f32>(&cut).is_err(), || "truncated record accepted".into())?;
    ensure(parse_cifar10_bin::<f32>(&[]).is_err(), || "empty batch accepted".into())?;
    Ok("CIFAR-10 batch of 10000 records parsed, truncation rejected".into())
}

/// IDX files with wrong magic, rank, size or count must be rejected.
pub fn check_malformed_idx() -> Result<String, String> {
    let images = idx_images(3, 4, 5, |p| (p % 256) as u8);
    let labels = idx_labels(&[1, 2, 3]);
    let ok: Dataset<f64> = parse_mnist_idx(&images, &labels).map_err(|e| format!("valid fixture: {e}"))?;
    ensure(ok.sample_shape() == [1, 4, 5] && ok.labels == vec![1, 2, 3], || "valid fixture misparsed".into())?;
    let mut bad_magic = images.clone();
    bad_magic[3] = 1;
    let mut bad_type = images.clone();
    bad_type[2] = 9;
    let short = images[..images.len() - 1].to_vec();
    let mut long = images.clone();
    long.push(0);
    let cases: Vec<(&str, Vec<u8>, Vec<u8>)> = vec![
        ("image rank", bad_magic, labels.clone()),
        ("element type", bad_type, labels.clone()),
        ("truncated payload", short, labels.clone()),
        ("trailing bytes", long, labels.clone()),
        ("header only", images[..10].to_vec(), labels.clone()),
        ("label count", images.clone(), idx_labels(&[1, 2])),
        ("label magic", images.clone(), images.clone()),
        ("label value", images.clone(), idx_labels(&[1, 2, 10])),
        ("empty", idx_images(0, 4, 5, |_| 0), idx_labels(&[])),
    ];
    for (name, i, l) in cases {
        ensure(parse_mnist_idx::<f64>(&i, &l).is_err(), || format!("{name} defect accepted"))?;
    }
    Ok("9 malformed IDX variants rejected".into())
}

/// Two same-seed trainings give byte-identical checkpoints, a reload
/// re-serializes to the same bytes and corrupted headers are rejected.
pub fn check_checkpoints(arch: &str, data: &Dataset<f32>, cfg: &TrainConfig) -> Result<String, String> {
    let desc: ArchDescriptor = arch.parse().map_err(|e| format!("{e}"))?;
    let run = || -> Result<Vec<u8>, String> {
        let mut model = build_model::<f32>(&desc, cfg).map_err(|e| e.to_string())?;
        fit(&mut model, data, cfg, |_, _| Ok(())).map_err(|e| e.to_string())?;
        Ok(checkpoint::to_bytes(&model, cfg))
    };
    let a = run()?;
    let b = run()?;
    ensure(a == b, || "same-seed checkpoints differ".into())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.hsnn");
    std::fs::write(&path, &a).map_err(|e| e.to_string())?;
    let (model, loaded_cfg) = checkpoint::load::<f32>(&path).map_err(|e| e.to_string())?;
    ensure(&loaded_cfg == cfg, || "config changed in the round trip".into())?;
    ensure(checkpoint::to_bytes(&model, &loaded_cfg) == a, || "round trip is not byte-stable".into())?;
    let mut magic = a.clone();
    magic[0] = b'X';
    ensure(matches!(checkpoint::from_bytes::<f32>(&magic), Err(Error::BadMagic { .. })), || "bad magic accepted".into())?;
    let mut version = a.clone();
    version[4] = 2;
    ensure(
        matches!(checkpoint::from_bytes::<f32>(&version), Err(Error::UnsupportedVersion { .. })),
        || "unknown version accepted".into(),
    )?;
    for cut in [0, 3, 7, 11, a.len() / 2, a.len() - 1] {
        ensure(checkpoint::from_bytes::<f32>(&a[..cut]).is_err(), || format!("cut at {cut} accepted"))?;
    }
    let mut trailing = a.clone();
    trailing.push(0);
    ensure(checkpoint::from_bytes::<f32>(&trailing).is_err(), || "trailing byte accepted".into())?;
    Ok(format!("{} checkpoint bytes identical across runs and stable under reload", a.len()))
}
