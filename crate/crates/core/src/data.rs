//! Datasets: CIFAR binary files and a procedurally rendered shape task.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, DfsError, Result};
use crate::tensor::Tensor;

pub const CIFAR_SIZE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIZE * CIFAR_SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images are `N × C × S × S`, stored flat.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub channels: usize,
    pub image_size: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Per-channel mean and (population) standard deviation.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let plane = self.image_size * self.image_size;
        let mut sum = vec![0.0f64; self.channels];
        let mut sq = vec![0.0f64; self.channels];
        for img in self.images.chunks(self.sample_len()) {
            for (c, p) in img.chunks(plane).enumerate() {
                for &v in p {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
        }
        let count = (self.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(0.0).sqrt())
            .collect();
        (mean, std)
    }

    pub fn standardize_with(&mut self, mean: &[f64], std: &[f64]) {
        let plane = self.image_size * self.image_size;
        let n = self.sample_len();
        for img in self.images.chunks_mut(n) {
            for (c, p) in img.chunks_mut(plane).enumerate() {
                let s = if std[c] > 0.0 { std[c] } else { 1.0 };
                for v in p {
                    *v = ((*v as f64 - mean[c]) / s) as f32;
                }
            }
        }
    }

    /// Stacks the listed samples into an NCHW tensor, optionally augmented.
    pub fn batch<R: Rng + ?Sized>(&self, indices: &[usize], augment: Option<&mut R>) -> (Tensor, Vec<usize>) {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        if let Some(rng) = augment {
            for img in data.chunks_mut(n) {
                pad_crop_flip(img, self.channels, self.image_size, 4, rng);
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let t = Tensor::new(&[indices.len(), self.channels, self.image_size, self.image_size], data)
            .expect("batch shape");
        (t, labels)
    }
}

/// Standardizes both splits with the training split's channel statistics.
pub fn standardize_pair(train: &mut Dataset, test: &mut Dataset) {
    let (mean, std) = train.channel_stats();
    train.standardize_with(&mean, &std);
    test.standardize_with(&mean, &std);
}

/// Mirrors every row of every channel in place.
pub fn hflip(img: &mut [f32], channels: usize, size: usize) {
    for c in 0..channels {
        for row in img[c * size * size..(c + 1) * size * size].chunks_mut(size) {
            row.reverse();
        }
    }
}

/// Zero-pads by `pad`, crops a random `size × size` window and flips
/// horizontally with probability 1/2.
pub fn pad_crop_flip<R: Rng + ?Sized>(img: &mut [f32], channels: usize, size: usize, pad: usize, rng: &mut R) {
    let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let flip = rng.random_bool(0.5);
    let src = img.to_vec();
    for c in 0..channels {
        let plane = &src[c * size * size..(c + 1) * size * size];
        for y in 0..size {
            for x in 0..size {
                let sy = y as isize + dy;
                let sx = x as isize + dx;
                let v = if sy < 0 || sx < 0 || sy >= size as isize || sx >= size as isize {
                    0.0
                } else {
                    plane[sy as usize * size + sx as usize]
                };
                img[c * size * size + y * size + x] = v;
            }
        }
    }
    if flip {
        hflip(img, channels, size);
    }
}

/// Drop-last batches of one epoch: a seeded permutation of `0..n` cut into
/// `n / batch_size` batches.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return config_err(format!("batch_size {batch_size} must be in 1..={n}"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ epoch);
    order.shuffle(&mut rng);
    Ok(order.chunks_exact(batch_size).map(|c| c.to_vec()).collect())
}

/// Endless deterministic batch sequence over successive epochs.
#[derive(Clone, Debug)]
pub struct BatchStream {
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    pending: std::vec::IntoIter<Vec<usize>>,
}

impl BatchStream {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        let first = epoch_batches(n, batch_size, seed, 0)?;
        Ok(Self {
            n,
            batch_size,
            seed,
            epoch: 0,
            pending: first.into_iter(),
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl Iterator for BatchStream {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if let Some(b) = self.pending.next() {
            return Some(b);
        }
        self.epoch += 1;
        self.pending = epoch_batches(self.n, self.batch_size, self.seed, self.epoch)
            .expect("validated at construction")
            .into_iter();
        self.pending.next()
    }
}

// ---------------------------------------------------------------- CIFAR

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarKind {
    /// One label byte per record.
    Cifar10,
    /// Coarse and fine label bytes per record; the fine label is used.
    Cifar100,
}

impl CifarKind {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarKind::Cifar10 => 1,
            CifarKind::Cifar100 => 2,
        }
    }

    pub fn record_size(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarKind::Cifar10 => 10,
            CifarKind::Cifar100 => 100,
        }
    }

    fn files(self, split: Split) -> Vec<&'static str> {
        match (self, split) {
            (CifarKind::Cifar10, Split::Train) => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            (CifarKind::Cifar10, Split::Test) => vec!["test_batch.bin"],
            (CifarKind::Cifar100, Split::Train) => vec!["train.bin"],
            (CifarKind::Cifar100, Split::Test) => vec!["test.bin"],
        }
    }
}

/// Parses records from raw bytes; pixels are scaled to `[0, 1]`.
pub fn parse_cifar_bytes(bytes: &[u8], kind: CifarKind, split: Split) -> Result<Dataset> {
    let rec = kind.record_size();
    if bytes.len() % rec != 0 {
        let complete = bytes.len() / rec;
        return Err(DfsError::Format {
            offset: (complete * rec) as u64,
            msg: format!(
                "truncated record: {} trailing bytes, expected record size {rec}",
                bytes.len() - complete * rec
            ),
        });
    }
    let n = bytes.len() / rec;
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[kind.label_bytes() - 1] as usize;
        if label >= kind.num_classes() {
            return Err(DfsError::Format {
                offset: (i * rec + kind.label_bytes() - 1) as u64,
                msg: format!("label {label} outside {} classes", kind.num_classes()),
            });
        }
        labels.push(label);
        images.extend(r[kind.label_bytes()..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(Dataset {
        images,
        labels,
        num_classes: kind.num_classes(),
        channels: 3,
        image_size: CIFAR_SIZE,
        split,
    })
}

pub fn load_cifar_file(path: &Path, kind: CifarKind, split: Split) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    parse_cifar_bytes(&bytes, kind, split).map_err(|e| match e {
        DfsError::Format { offset, msg } => DfsError::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

/// Loads one split from a directory holding the canonical file names.
pub fn load_cifar_binary(dir: &Path, kind: CifarKind, split: Split) -> Result<Dataset> {
    let mut parts = kind
        .files(split)
        .into_iter()
        .map(|f| load_cifar_file(&dir.join(f), kind, split));
    let mut ds = parts.next().expect("at least one file")?;
    for p in parts {
        let p = p?;
        ds.images.extend(p.images);
        ds.labels.extend(p.labels);
    }
    Ok(ds)
}

/// Serializes un-standardized `[0, 1]` images back to the binary layout.
/// For CIFAR-100 the coarse label byte is written as 0.
pub fn encode_cifar_bytes(ds: &Dataset, kind: CifarKind) -> Result<Vec<u8>> {
    if ds.channels != 3 || ds.image_size != CIFAR_SIZE {
        return config_err("only 3×32×32 datasets can be written in CIFAR layout");
    }
    let mut out = Vec::with_capacity(ds.len() * kind.record_size());
    for i in 0..ds.len() {
        if kind == CifarKind::Cifar100 {
            out.push(0);
        }
        out.push(ds.labels[i] as u8);
        out.extend(ds.image(i).iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}

// ------------------------------------------------------------ synthetic

/// Procedural colored-shape classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub image_size: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            samples_per_class: 500,
            test_samples_per_class: 100,
            image_size: 32,
            noise: 0.15,
            seed: 0,
        }
    }
}

pub const SYNTHETIC_SHAPES: usize = 10;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > SYNTHETIC_SHAPES {
            return config_err(format!("synthetic.num_classes must be in 2..={SYNTHETIC_SHAPES}"));
        }
        if self.samples_per_class == 0 || self.test_samples_per_class == 0 {
            return config_err("synthetic sample counts must be positive");
        }
        if self.image_size < 8 {
            return config_err("synthetic.image_size must be at least 8");
        }
        Ok(())
    }

    /// Renders one split; the same spec always yields identical bytes.
    pub fn generate(&self, split: Split) -> Result<Dataset> {
        self.validate()?;
        let per_class = match split {
            Split::Train => self.samples_per_class,
            Split::Test => self.test_samples_per_class,
        };
        let s = self.image_size;
        let n = per_class * self.num_classes;
        let mut images = Vec::with_capacity(n * 3 * s * s);
        let mut labels = Vec::with_capacity(n);
        let split_tag: u64 = match split {
            Split::Train => 0x7261_696e,
            Split::Test => 0x7465_7374,
        };
        for i in 0..n {
            let label = i % self.num_classes;
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ split_tag.rotate_left(17) ^ (i as u64).wrapping_mul(0x9e37_79b9));
            images.extend(render_shape(label, s, self.noise, &mut rng));
            labels.push(label);
        }
        Ok(Dataset {
            images,
            labels,
            num_classes: self.num_classes,
            channels: 3,
            image_size: s,
            split,
        })
    }
}

fn inside(shape: usize, u: f32, v: f32, r: f32) -> bool {
    let d = (u * u + v * v).sqrt();
    let t = r * 0.28;
    match shape {
        0 => d <= r,                                        // disc
        1 => d <= r && d >= r - t,                          // ring
        2 => u.abs() <= r * 0.85 && v.abs() <= r * 0.85,   // square
        3 => {
            let m = u.abs().max(v.abs());
            m <= r * 0.9 && m >= r * 0.9 - t                // square outline
        }
        4 => v <= r * 0.8 && v >= -r && u.abs() <= (v + r) * 0.55, // triangle
        5 => (u.abs() <= t * 0.6 && v.abs() <= r) || (v.abs() <= t * 0.6 && u.abs() <= r), // plus
        6 => ((u - v).abs() <= t * 0.8 || (u + v).abs() <= t * 0.8) && u.abs() <= r * 0.8 && v.abs() <= r * 0.8, // x
        7 => u.abs() <= r && v.abs() <= r && ((v + r) / (r * 0.5)).floor() as i32 % 2 == 0, // horizontal bars
        8 => u.abs() <= r && v.abs() <= r && ((u + r) / (r * 0.5)).floor() as i32 % 2 == 0, // vertical bars
        _ => {
            let a = ((u - r * 0.5).powi(2) + v * v).sqrt();
            let b = ((u + r * 0.5).powi(2) + v * v).sqrt();
            a <= r * 0.4 || b <= r * 0.4                     // two dots
        }
    }
}

fn render_shape<R: Rng + ?Sized>(shape: usize, size: usize, noise: f32, rng: &mut R) -> Vec<f32> {
    let s = size as f32;
    let r = s * rng.random_range(0.22..0.34);
    let cx = s * 0.5 + rng.random_range(-0.15..0.15) * s;
    let cy = s * 0.5 + rng.random_range(-0.15..0.15) * s;
    let angle: f32 = rng.random_range(-0.35..0.35);
    let (sin, cos) = angle.sin_cos();
    let bg: [f32; 3] = [rng.random(), rng.random(), rng.random()];
    let mut fg: [f32; 3] = [rng.random(), rng.random(), rng.random()];
    // keep foreground/background contrast
    let contrast: f32 = fg.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum();
    if contrast < 0.6 {
        fg = bg.map(|v| if v > 0.5 { v - 0.5 } else { v + 0.5 });
    }
    let mut img = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            let on = inside(shape, u, v, r);
            for c in 0..3 {
                let base = if on { fg[c] } else { bg[c] };
                let z: f32 = StandardNormal.sample(rng);
                img[c * size * size + y * size + x] = (base + noise * z).clamp(0.0, 1.0);
            }
        }
    }
    img
}
