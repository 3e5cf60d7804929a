//! Datasets: the CIFAR binary reader, a seeded synthetic task, augmentation
//! and deterministic batching.
//!
//! Pixels are kept as raw intensities in `[0, 1]`; no per-channel mean/std
//! normalization is applied anywhere.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR10_BATCH_RECORDS: usize = 10_000;
pub const CIFAR10_RECORD: usize = 1 + CIFAR_PIXELS;
/// Size of every CIFAR-10 batch file.
pub const CIFAR10_BATCH_BYTES: usize = CIFAR10_BATCH_RECORDS * CIFAR10_RECORD;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `C×H×W`.
    pub pixels: Tensor<f32>,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub name: String,
    pub images: Vec<LabeledImage>,
    pub num_classes: usize,
}

impl DatasetSplit {
    /// Checks that the split is non-empty, labels are in range and every
    /// image has the same `C×H×W` extents.
    pub fn new(name: impl Into<String>, images: Vec<LabeledImage>, num_classes: usize) -> Result<Self> {
        let name = name.into();
        let Some(first) = images.first() else {
            return Err(Error::Config(format!("split {name} is empty")));
        };
        let shape = first.pixels.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("split {name}: images must be C×H×W, got {shape:?}")));
        }
        for (i, img) in images.iter().enumerate() {
            if img.pixels.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "split {name}: image {i} has shape {:?}, expected {shape:?}",
                    img.pixels.shape()
                )));
            }
            if img.label >= num_classes {
                return Err(Error::Config(format!(
                    "split {name}: image {i} has label {} with {num_classes} classes",
                    img.label
                )));
            }
        }
        Ok(Self { name, images, num_classes })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> &[usize] {
        self.images[0].pixels.shape()
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for img in &self.images {
            h[img.label] += 1;
        }
        h
    }

    /// The first `n` images (all of them if `n` is larger).
    pub fn truncate(mut self, n: usize) -> Self {
        self.images.truncate(n.max(1));
        self
    }
}

fn ingestion(path: &Path, message: impl Into<String>) -> Error {
    Error::Ingestion { path: path.to_path_buf(), message: message.into() }
}

/// Parses `label_bytes` header bytes (the last is the class) followed by
/// 3072 channel-planar pixel bytes.
fn parse_records(path: &Path, bytes: &[u8], label_bytes: usize, num_classes: usize) -> Result<Vec<LabeledImage>> {
    let record = label_bytes + CIFAR_PIXELS;
    if !bytes.len().is_multiple_of(record) {
        return Err(ingestion(path, format!("size {} is not a whole number of {record}-byte records", bytes.len())));
    }
    bytes
        .chunks_exact(record)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[label_bytes - 1] as usize;
            if label >= num_classes {
                return Err(ingestion(
                    path,
                    format!("label {label} at offset {} exceeds {}", i * record + label_bytes - 1, num_classes - 1),
                ));
            }
            let data = rec[label_bytes..].iter().map(|&b| b as f32 / 255.0).collect();
            Ok(LabeledImage { pixels: Tensor::new(&[3, CIFAR_SIDE, CIFAR_SIDE], data)?, label })
        })
        .collect()
}

/// Inverse of the record parser for single-label (CIFAR-10) records.
pub fn encode_record(img: &LabeledImage) -> Result<Vec<u8>> {
    if img.pixels.shape() != [3, CIFAR_SIDE, CIFAR_SIDE] || img.label > u8::MAX as usize {
        return Err(Error::Shape(format!(
            "cannot encode image of shape {:?} with label {}",
            img.pixels.shape(),
            img.label
        )));
    }
    let mut out = Vec::with_capacity(CIFAR10_RECORD);
    out.push(img.label as u8);
    out.extend(img.pixels.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Decodes one 3073-byte CIFAR-10 record.
pub fn decode_record(bytes: &[u8]) -> Result<LabeledImage> {
    if bytes.len() != CIFAR10_RECORD {
        return Err(Error::Shape(format!("record has {} bytes, expected {CIFAR10_RECORD}", bytes.len())));
    }
    let mut v = parse_records(Path::new("<record>"), bytes, 1, 10)?;
    Ok(v.remove(0))
}

fn read_exact_size(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| ingestion(path, format!("cannot read: {e}")))?;
    if bytes.len() != expected {
        return Err(ingestion(path, format!("size {} bytes, expected {expected}", bytes.len())));
    }
    Ok(bytes)
}

fn cifar10_batch(dir: &Path, file: &str) -> Result<Vec<LabeledImage>> {
    let path: PathBuf = dir.join(file);
    let bytes = read_exact_size(&path, CIFAR10_BATCH_BYTES)?;
    parse_records(&path, &bytes, 1, 10)
}

pub fn load_cifar10_test(dir: &Path) -> Result<DatasetSplit> {
    DatasetSplit::new("test", cifar10_batch(dir, "test_batch.bin")?, 10)
}

/// The first `n_batches` (1 to 5) training files.
pub fn load_cifar10_train(dir: &Path, n_batches: usize) -> Result<DatasetSplit> {
    if !(1..=5).contains(&n_batches) {
        return Err(Error::Config(format!("CIFAR-10 has 5 training batches, asked for {n_batches}")));
    }
    let mut images = Vec::with_capacity(n_batches * CIFAR10_BATCH_RECORDS);
    for b in 1..=n_batches {
        images.extend(cifar10_batch(dir, &format!("data_batch_{b}.bin"))?);
    }
    DatasetSplit::new("train", images, 10)
}

/// `(train, test)` from `data_batch_1..5.bin` and `test_batch.bin`.
pub fn load_cifar10(dir: &Path) -> Result<(DatasetSplit, DatasetSplit)> {
    Ok((load_cifar10_train(dir, 5)?, load_cifar10_test(dir)?))
}

pub const CIFAR100_RECORD: usize = 2 + CIFAR_PIXELS;

fn cifar100_file(dir: &Path, file: &str, records: usize, name: &str) -> Result<DatasetSplit> {
    let path = dir.join(file);
    let bytes = read_exact_size(&path, records * CIFAR100_RECORD)?;
    DatasetSplit::new(name, parse_records(&path, &bytes, 2, 100)?, 100)
}

/// CIFAR-100 `test.bin`, labelled by the fine (second) header byte.
pub fn load_cifar100_test(dir: &Path) -> Result<DatasetSplit> {
    cifar100_file(dir, "test.bin", 10_000, "test")
}

pub fn load_cifar100_train(dir: &Path) -> Result<DatasetSplit> {
    cifar100_file(dir, "train.bin", 50_000, "train")
}

/// `(train, test)` from CIFAR-100's `train.bin` and `test.bin`.
pub fn load_cifar100(dir: &Path) -> Result<(DatasetSplit, DatasetSplit)> {
    Ok((load_cifar100_train(dir)?, load_cifar100_test(dir)?))
}

/// Deterministic separable task: class `k` is a bright square at a
/// class-specific location over uniform noise in `[0, 0.5)`. Labels cycle
/// round-robin, so `n = m·num_classes` gives `m` images per class.
///
/// Square positions lie on a `g×g` grid with `g = ⌈√num_classes⌉`, and the
/// square side is chosen so that neighbouring positions differ.
pub fn synthetic_dataset(seed: u64, n: usize, num_classes: usize, height: usize, width: usize) -> Result<DatasetSplit> {
    if num_classes == 0 || n < num_classes {
        return Err(Error::Config(format!(
            "synthetic data needs n ≥ num_classes ≥ 1, got n={n}, classes={num_classes}"
        )));
    }
    let g = (num_classes as f64).sqrt().ceil() as usize;
    let side = (height.min(width) / (g + 1)).max(1);
    if height < side + g - 1 || width < side + g - 1 {
        return Err(Error::Config(format!("{height}×{width} too small for {num_classes} synthetic classes")));
    }
    let place =
        |cell: usize, extent: usize| if g == 1 { (extent - side) / 2 } else { cell * (extent - side) / (g - 1) };
    let images = (0..n)
        .map(|i| {
            let label = i % num_classes;
            let (top, left) = (place(label / g, height), place(label % g, width));
            let mut rng = stream(seed, Purpose::Synthetic, &[i as u64]);
            let mut px = Tensor::from_fn(&[3, height, width], |_| rng.gen_range(0.0..0.5f32))?;
            let data = px.data_mut();
            for c in 0..3 {
                for y in top..top + side {
                    let row = (c * height + y) * width;
                    data[row + left..row + left + side].fill(1.0);
                }
            }
            Ok(LabeledImage { pixels: px, label })
        })
        .collect::<Result<Vec<_>>>()?;
    DatasetSplit::new("synthetic", images, num_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentFlags {
    pub hflip: bool,
    pub color_jitter: bool,
}

/// Jitter factors are drawn uniformly from `[1 − JITTER_STRENGTH, 1 + JITTER_STRENGTH]`.
pub const JITTER_STRENGTH: f32 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterFactors {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

/// Mirrors a `C×H×W` image over its width.
pub fn hflip(img: &Tensor<f32>) -> Tensor<f32> {
    let w = img.shape()[img.rank() - 1];
    let mut out = img.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

/// Per-pixel luma. Three channels use `0.299R + 0.587G + 0.114B`; any other
/// channel count uses the plain channel mean.
fn luma(data: &[f32], c: usize, plane: usize) -> Vec<f32> {
    (0..plane)
        .map(|p| {
            if c == 3 {
                0.299 * data[p] + 0.587 * data[plane + p] + 0.114 * data[2 * plane + p]
            } else {
                (0..c).map(|k| data[k * plane + p]).sum::<f32>() / c as f32
            }
        })
        .collect()
}

/// Brightness, then contrast against the mean luma, then saturation against
/// per-pixel luma. The image is clamped to `[0, 1]` after each stage.
pub fn color_jitter(img: &Tensor<f32>, f: JitterFactors) -> Tensor<f32> {
    let s = img.shape();
    let (c, plane) = (s[0], s[1] * s[2]);
    let mut out = img.map(|v| (v * f.brightness).clamp(0.0, 1.0));

    let mean = luma(out.data(), c, plane).iter().sum::<f32>() / plane as f32;
    out = out.map(|v| ((v - mean) * f.contrast + mean).clamp(0.0, 1.0));

    let l = luma(out.data(), c, plane);
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let g = l[i % plane];
        *v = ((*v - g) * f.saturation + g).clamp(0.0, 1.0);
    }
    out
}

/// Applies the enabled augmentations. Draw order is fixed: the flip coin
/// first, then brightness, contrast and saturation factors.
pub fn augment<R: Rng + ?Sized>(img: &LabeledImage, rng: &mut R, flags: AugmentFlags) -> LabeledImage {
    let mut pixels = img.pixels.clone();
    if flags.hflip && rng.gen_bool(0.5) {
        pixels = hflip(&pixels);
    }
    if flags.color_jitter {
        let mut draw = || rng.gen_range(1.0 - JITTER_STRENGTH..=1.0 + JITTER_STRENGTH);
        let f = JitterFactors { brightness: draw(), contrast: draw(), saturation: draw() };
        pixels = color_jitter(&pixels, f);
    }
    LabeledImage { pixels, label: img.label }
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `B×C×H×W`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Dataset positions of the batch rows.
    pub indices: Vec<usize>,
}

/// Epoch permutation keyed by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Purpose::Shuffle, &[epoch as u64]));
    order
}

/// Lazy batch sequence over one epoch. The last batch may be short.
pub struct Batches<'a> {
    split: &'a DatasetSplit,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    seed: u64,
    epoch: usize,
    flags: AugmentFlags,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let mut data = Vec::with_capacity(indices.len() * self.split.images[0].pixels.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in &indices {
            let img = &self.split.images[i];
            if self.flags == AugmentFlags::default() {
                data.extend_from_slice(img.pixels.data());
            } else {
                let mut rng = stream(self.seed, Purpose::Augment, &[self.epoch as u64, i as u64]);
                data.extend_from_slice(augment(img, &mut rng, self.flags).pixels.data());
            }
            labels.push(img.label);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.split.image_shape());
        let images = Tensor::new(&shape, data).expect("batch extents agree");
        Some(Batch { images, labels, indices })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (n, Some(n))
    }
}

impl ExactSizeIterator for Batches<'_> {}

/// Shuffled, augmented training batches for `epoch`. Each image's
/// augmentation stream is keyed by `(seed, epoch, dataset index)`.
pub fn batches(
    split: &DatasetSplit,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    flags: AugmentFlags,
) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    Ok(Batches { split, order: epoch_order(split.len(), seed, epoch), batch_size, pos: 0, seed, epoch, flags })
}

/// Batches in dataset order without augmentation.
pub fn eval_batches(split: &DatasetSplit, batch_size: usize) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    Ok(Batches {
        split,
        order: (0..split.len()).collect(),
        batch_size,
        pos: 0,
        seed: 0,
        epoch: 0,
        flags: AugmentFlags::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: f32) -> Tensor<f32> {
        Tensor::full(&[3, 4, 5], v).unwrap()
    }

    #[test]
    fn byte_scale_endpoints() {
        let mut rec = vec![7u8];
        rec.extend((0..CIFAR_PIXELS).map(|i| if i == 0 { 255 } else { (i % 256) as u8 }));
        let img = decode_record(&rec).unwrap();
        assert_eq!(img.label, 7);
        assert_eq!(img.pixels.data()[0], 1.0);
        assert_eq!(img.pixels.data()[256], 0.0);
        assert_eq!(encode_record(&img).unwrap(), rec);
    }

    #[test]
    fn bad_label_names_offset() {
        let mut rec = vec![0u8; 2 * CIFAR10_RECORD];
        rec[CIFAR10_RECORD] = 10;
        let err = parse_records(Path::new("x.bin"), &rec, 1, 10).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("x.bin") && msg.contains("offset 3073"), "{msg}");
    }

    #[test]
    fn synthetic_round_robin_and_deterministic() {
        let a = synthetic_dataset(3, 100, 10, 16, 16).unwrap();
        assert_eq!(a.label_histogram(), vec![10; 10]);
        let b = synthetic_dataset(3, 100, 10, 16, 16).unwrap();
        assert_eq!(a.images, b.images);
        let c = synthetic_dataset(4, 100, 10, 16, 16).unwrap();
        assert_ne!(a.images, c.images);
        assert!(synthetic_dataset(0, 5, 10, 16, 16).is_err());
    }

    #[test]
    fn flip_is_an_involution() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f32).unwrap();
        let f = hflip(&x);
        assert_eq!(&f.data()[..4], &[3.0, 2.0, 1.0, 0.0]);
        assert_eq!(hflip(&f), x);
    }

    #[test]
    fn neutral_jitter_is_identity_and_brightness_scales() {
        let x = Tensor::from_fn(&[3, 4, 5], |i| (i % 17) as f32 / 17.0).unwrap();
        let one = JitterFactors { brightness: 1.0, contrast: 1.0, saturation: 1.0 };
        let y = color_jitter(&x, one);
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let half = JitterFactors { brightness: 0.5, ..one };
        let y = color_jitter(&constant(0.8), half);
        assert!(y.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn batch_partition() {
        let split = synthetic_dataset(0, 10, 2, 8, 8).unwrap();
        let sizes: Vec<usize> =
            batches(&split, 4, 1, 0, AugmentFlags::default()).unwrap().map(|b| b.labels.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert!(batches(&split, 0, 1, 0, AugmentFlags::default()).is_err());
    }
}
