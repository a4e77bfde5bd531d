//! Procedural image datasets and IDX-style persistence.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result, WslError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    BlobsStripesChecker,
    ShiftedVariant,
    UniformNoise,
}

/// Images stored `[N, C, H, W]` in `[0, 1]`, optionally labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub images: Vec<f32>,
    pub labels: Option<Vec<u8>>,
    pub shape: [usize; 3],
}

impl Split {
    pub fn len(&self) -> usize {
        let d: usize = self.shape.iter().product();
        if d == 0 {
            0
        } else {
            self.images.len() / d
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let d = self.image_len();
        &self.images[i * d..(i + 1) * d]
    }

    /// Copies the listed images into one contiguous batch.
    pub fn gather(&self, idx: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            out.extend_from_slice(self.image(i));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub classes: usize,
    pub train: Split,
    pub test: Split,
}

/// Parameters of one generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_side")]
    pub side: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_classes() -> usize {
    3
}
fn default_side() -> usize {
    16
}
fn default_channels() -> usize {
    1
}
fn default_n_train() -> usize {
    2000
}
fn default_n_test() -> usize {
    1000
}
fn default_noise() -> f64 {
    0.6
}

impl DatasetSpec {
    pub fn desk(kind: DatasetKind, seed: u64) -> Self {
        Self {
            kind,
            classes: default_classes(),
            side: default_side(),
            channels: default_channels(),
            n_train: default_n_train(),
            n_test: default_n_test(),
            noise: default_noise(),
            seed,
        }
    }

    pub fn generate(&self) -> Result<Dataset> {
        gen_dataset(self.kind, self.classes, self.side, self.channels, self.n_train, self.n_test, self.noise, self.seed)
    }
}

/// Smallest side length the pattern generators support.
pub const MIN_SIDE: usize = 8;

/// Generates a labeled pattern dataset (or unlabeled noise).
///
/// Class `c` draws from pattern family `c % 6`: Gaussian blobs, axis-aligned
/// stripes, checkerboards, rings, diagonal stripes and crosses, each with
/// random placement, scale, contrast and additive Gaussian noise. The shifted
/// variant transposes every image and compresses its contrast.
#[allow(clippy::too_many_arguments)]
pub fn gen_dataset(
    kind: DatasetKind,
    classes: usize,
    side: usize,
    channels: usize,
    n_train: usize,
    n_test: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if side < MIN_SIDE {
        return config(format!("side {side} is below the minimum of {MIN_SIDE} needed for pattern generation"));
    }
    if channels == 0 {
        return config("channels must be positive");
    }
    if kind != DatasetKind::UniformNoise && classes < 2 {
        return config(format!("need at least 2 classes, got {classes}"));
    }
    if !(0.0..=1.0).contains(&noise) {
        return config(format!("noise std {noise} outside [0, 1]"));
    }
    let shape = [channels, side, side];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = gen_split(kind, classes, shape, n_train, noise, &mut rng);
    let test = gen_split(kind, classes, shape, n_test, noise, &mut rng);
    Ok(Dataset { kind, classes, train, test })
}

fn gen_split(kind: DatasetKind, classes: usize, shape: [usize; 3], n: usize, noise: f64, rng: &mut ChaCha8Rng) -> Split {
    let d: usize = shape.iter().product();
    let mut images = Vec::with_capacity(n * d);
    if kind == DatasetKind::UniformNoise {
        images.extend((0..n * d).map(|_| rng.random::<f32>()));
        return Split { images, labels: None, shape };
    }
    let mut labels = Vec::with_capacity(n);
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    for i in 0..n {
        let label = (i % classes) as u8;
        let side = shape[1];
        let base = pattern(label as usize, side, rng);
        let contrast = rng.random_range(0.5..1.0);
        let offset = rng.random_range(0.0..(1.0 - contrast));
        for _ in 0..shape[0] {
            let ch_gain = if shape[0] > 1 { rng.random_range(0.8..1.0) } else { 1.0 };
            for y in 0..side {
                for x in 0..side {
                    let (sy, sx) = if kind == DatasetKind::ShiftedVariant { (x, y) } else { (y, x) };
                    let mut v = offset + contrast * ch_gain * base[sy * side + sx];
                    if kind == DatasetKind::ShiftedVariant {
                        v = 0.25 + 0.5 * v;
                    }
                    v += noise * gauss.sample(rng);
                    images.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        labels.push(label);
    }
    // interleaved labels, then a seeded shuffle so class order carries no signal
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut shuffled = Vec::with_capacity(images.len());
    for &i in &order {
        shuffled.extend_from_slice(&images[i * d..(i + 1) * d]);
    }
    let labels = order.iter().map(|&i| labels[i]).collect();
    Split { images: shuffled, labels: Some(labels), shape }
}

/// Noise-free pattern in `[0, 1]` for one class.
fn pattern(class: usize, side: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = side as f64;
    let mut img = vec![0.0; side * side];
    let family = class % 6;
    let variant = (class / 6) as f64;
    match family {
        0 => {
            let blobs = rng.random_range(1..=2);
            for _ in 0..blobs {
                let cy = rng.random_range(0.2 * s..0.8 * s);
                let cx = rng.random_range(0.2 * s..0.8 * s);
                let r = rng.random_range(0.1 * s..0.22 * s) * (1.0 + 0.3 * variant);
                for y in 0..side {
                    for x in 0..side {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        img[y * side + x] += (-d2 / (2.0 * r * r)).exp();
                    }
                }
            }
        }
        1 | 4 => {
            let period = rng.random_range(3.0..6.0) + variant;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let dir = if family == 4 {
                if rng.random_bool(0.5) { (1.0, 1.0) } else { (1.0, -1.0) }
            } else if rng.random_bool(0.5) {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            };
            for y in 0..side {
                for x in 0..side {
                    let t = dir.0 * y as f64 + dir.1 * x as f64;
                    img[y * side + x] = 0.5 + 0.5 * (std::f64::consts::TAU * t / period + phase).sin();
                }
            }
        }
        2 => {
            let cell = rng.random_range(2..=4) + variant as usize;
            let (py, px) = (rng.random_range(0..cell), rng.random_range(0..cell));
            for y in 0..side {
                for x in 0..side {
                    img[y * side + x] = (((y + py) / cell + (x + px) / cell) % 2) as f64;
                }
            }
        }
        3 => {
            let cy = rng.random_range(0.35 * s..0.65 * s);
            let cx = rng.random_range(0.35 * s..0.65 * s);
            let r = rng.random_range(0.2 * s..0.35 * s);
            for y in 0..side {
                for x in 0..side {
                    let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                    img[y * side + x] = (-(d - r).powi(2) / 2.0).exp();
                }
            }
        }
        _ => {
            let cy = rng.random_range(side / 4..3 * side / 4);
            let cx = rng.random_range(side / 4..3 * side / 4);
            let half = 1 + variant as usize;
            for y in 0..side {
                for x in 0..side {
                    if y.abs_diff(cy) <= half || x.abs_diff(cx) <= half {
                        img[y * side + x] = 1.0;
                    }
                }
            }
        }
    }
    let mx = img.iter().copied().fold(0.0, f64::max).max(1e-9);
    img.iter_mut().for_each(|v| *v /= mx);
    img
}

/// FNV-1a over the image and label bytes.
pub fn fingerprint(ds: &Dataset) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for split in [&ds.train, &ds.test] {
        for v in &split.images {
            eat(&v.to_le_bytes());
        }
        if let Some(l) = &split.labels {
            eat(l);
        }
    }
    format!("{h:016x}")
}

// ---------------------------------------------------------------- IDX files

const IDX_U8: u8 = 0x08;
const IDX_F32: u8 = 0x0D;

fn idx_header(dtype: u8, dims: &[usize]) -> Vec<u8> {
    let mut out = vec![0, 0, dtype, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out
}

pub fn write_idx_f32(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    let mut bytes = idx_header(IDX_F32, dims);
    bytes.reserve(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    crate::io::write_atomic(path, &bytes)
}

pub fn write_idx_u8(path: &Path, dims: &[usize], data: &[u8]) -> Result<()> {
    let mut bytes = idx_header(IDX_U8, dims);
    bytes.extend_from_slice(data);
    crate::io::write_atomic(path, &bytes)
}

/// Reads an IDX array as f32. Unsigned-byte payloads are returned raw
/// (0..=255); the caller decides whether to rescale.
pub fn read_idx(path: &Path) -> Result<(Vec<usize>, Vec<f32>, bool)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| WslError::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad("missing IDX magic"));
    }
    let (dtype, rank) = (bytes[2], bytes[3] as usize);
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    let payload = &bytes[header..];
    match dtype {
        IDX_U8 if payload.len() == n => Ok((dims, payload.iter().map(|&b| b as f32).collect(), true)),
        IDX_F32 if payload.len() == 4 * n => Ok((
            dims,
            payload.chunks_exact(4).map(|c| f32::from_be_bytes(c.try_into().unwrap())).collect(),
            false,
        )),
        IDX_U8 | IDX_F32 => Err(bad("payload length does not match dimensions")),
        other => Err(bad(&format!("unsupported dtype 0x{other:02x}"))),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    kind: DatasetKind,
    classes: usize,
    /// Absent for externally supplied IDX files.
    #[serde(default)]
    fingerprint: Option<String>,
}

/// Writes `{train,test}-{images,labels}.idx` plus `dataset.json` into `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, split) in [("train", &ds.train), ("test", &ds.test)] {
        let [c, h, w] = split.shape;
        write_idx_f32(&dir.join(format!("{name}-images.idx")), &[split.len(), c, h, w], &split.images)?;
        if let Some(labels) = &split.labels {
            write_idx_u8(&dir.join(format!("{name}-labels.idx")), &[labels.len()], labels)?;
        }
    }
    let meta = DatasetMeta { kind: ds.kind, classes: ds.classes, fingerprint: Some(fingerprint(ds)) };
    crate::io::write_atomic(&dir.join("dataset.json"), serde_json::to_string_pretty(&meta)?.as_bytes())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = serde_json::from_slice(&fs::read(dir.join("dataset.json"))?)?;
    let load_split = |name: &str| -> Result<Split> {
        let (dims, mut images, raw_bytes) = read_idx(&dir.join(format!("{name}-images.idx")))?;
        if raw_bytes {
            images.iter_mut().for_each(|v| *v /= 255.0);
        }
        let shape = match dims[..] {
            [_, c, h, w] => [c, h, w],
            [_, h, w] => [1, h, w],
            _ => return Err(WslError::Format(format!("{name} images must be rank 3 or 4, got {dims:?}"))),
        };
        let label_path = dir.join(format!("{name}-labels.idx"));
        let labels = if label_path.exists() {
            let (_, l, _) = read_idx(&label_path)?;
            Some(l.into_iter().map(|v| v as u8).collect())
        } else {
            None
        };
        Ok(Split { images, labels, shape })
    };
    let ds = Dataset { kind: meta.kind, classes: meta.classes, train: load_split("train")?, test: load_split("test")? };
    if let Some(stored) = meta.fingerprint {
        let fp = fingerprint(&ds);
        if fp != stored {
            return Err(WslError::Format(format!(
                "dataset fingerprint mismatch in {}: stored {stored}, computed {fp}",
                dir.display()
            )));
        }
    }
    Ok(ds)
}
