//! Image datasets: IDX ingestion, procedural synthetics, and epoch batching.
//!
//! All images are stored as `[N, C, H, W]` with pixels in `[-1, 1]`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IdxError, Result};
use crate::ops;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const IDX_MAGIC: u32 = 0x0000_0803;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    TwoGaussians,
    Checkerboard,
    Bars,
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-gaussians" => Ok(Self::TwoGaussians),
            "checkerboard" => Ok(Self::Checkerboard),
            "bars" => Ok(Self::Bars),
            other => Err(Error::UnknownDatasetKind(other.to_string())),
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TwoGaussians => "two-gaussians",
            Self::Checkerboard => "checkerboard",
            Self::Bars => "bars",
        })
    }
}

/// Where a dataset comes from. Serialized inside experiment configs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        kind: SyntheticKind,
        size: usize,
        count: usize,
    },
    /// Uncompressed IDX image file. With `downscale`, 28x28 digits are
    /// padded to 32x32 with background and average-pooled to 16x16.
    Idx {
        path: PathBuf,
        #[serde(default)]
        downscale: bool,
        #[serde(default)]
        limit: Option<usize>,
    },
}

impl DatasetSpec {
    /// Builds the dataset; synthetic data is drawn from the data stream of `seed`.
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            Self::Synthetic { kind, size, count } => synthetic(*kind, *size, *count, seed),
            Self::Idx { path, downscale, limit } => {
                let mut d = load_idx(path)?;
                if let Some(n) = limit {
                    d = d.take(*n)?;
                }
                if *downscale {
                    d = d.downscale_mnist()?;
                }
                Ok(d)
            }
        }
    }

    pub fn image_size(&self) -> Option<usize> {
        match self {
            Self::Synthetic { size, .. } => Some(*size),
            Self::Idx { downscale: true, .. } => Some(16),
            Self::Idx { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    source: String,
    seed: Option<u64>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, source: impl Into<String>, seed: Option<u64>) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::shape("dataset", format!("expected [N, C, H, W], got {:?}", images.shape())));
        }
        if let Some(v) = images.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidConfig(format!("pixel {v} outside [-1, 1]")));
        }
        Ok(Self {
            images,
            source: source.into(),
            seed,
        })
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(C, H, W)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        self.images.select(indices)
    }

    /// First `n` images (all of them if fewer).
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len()).max(1);
        let idx: Vec<usize> = (0..n).collect();
        Self::new(self.images.select(&idx)?, self.source.clone(), self.seed)
    }

    fn downscale_mnist(&self) -> Result<Self> {
        let (c, h, w) = self.image_shape();
        let (ph, pw) = ((32 - h.min(32)) / 2, (32 - w.min(32)) / 2);
        if h > 32 || w > 32 {
            return Err(Error::shape("downscale", format!("images {h}x{w} larger than 32x32")));
        }
        let n = self.len();
        let mut padded = Tensor::full([n, c, 32, 32], -1.0f32);
        {
            let src = self.images.data();
            let dst = padded.data_mut();
            for plane in 0..n * c {
                for y in 0..h {
                    let s = plane * h * w + y * w;
                    let d = plane * 1024 + (y + ph) * 32 + pw;
                    dst[d..d + w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
        Self::new(ops::downsample2(&padded)?, format!("{} (16x16)", self.source), self.seed)
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Decodes a 3-D unsigned-byte IDX file into `[N, 1, H, W]`, mapping byte
/// `x` to `2 x / 255 - 1`.
pub fn parse_idx(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 4 {
        return Err(IdxError::TruncatedHeader {
            needed: 4,
            available: bytes.len(),
        }
        .into());
    }
    let magic = read_u32(bytes, 0);
    if magic != IDX_MAGIC {
        return Err(IdxError::BadMagic { found: magic }.into());
    }
    if bytes.len() < 16 {
        return Err(IdxError::TruncatedHeader {
            needed: 16,
            available: bytes.len(),
        }
        .into());
    }
    let dims = vec![read_u32(bytes, 4), read_u32(bytes, 8), read_u32(bytes, 12)];
    if dims.contains(&0) {
        return Err(IdxError::EmptyDimension { dims }.into());
    }
    let needed = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| IdxError::DimensionOverflow { dims: dims.clone() })?;
    if bytes.len() < needed {
        return Err(IdxError::TruncatedPayload {
            needed: needed - 16,
            available: bytes.len() - 16,
        }
        .into());
    }
    if bytes.len() > needed {
        return Err(IdxError::TrailingBytes {
            extra: bytes.len() - needed,
        }
        .into());
    }
    let data = bytes[16..].iter().map(|&x| byte_to_pixel(x)).collect();
    let images = Tensor::new([dims[0] as usize, 1, dims[1] as usize, dims[2] as usize], data)?;
    Dataset::new(images, "idx", None)
}

pub fn byte_to_pixel(x: u8) -> f32 {
    2.0 * (x as f32 / 255.0) - 1.0
}

pub fn pixel_to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Encodes single-channel images back into IDX bytes.
pub fn to_idx(dataset: &Dataset) -> Result<Vec<u8>> {
    let (c, h, w) = dataset.image_shape();
    if c != 1 {
        return Err(Error::shape("to_idx", format!("IDX images are single-channel, got {c} channels")));
    }
    let mut out = Vec::with_capacity(16 + dataset.images.len());
    out.extend_from_slice(&IDX_MAGIC.to_be_bytes());
    for d in [dataset.len(), h, w] {
        let d = u32::try_from(d).map_err(|_| Error::shape("to_idx", format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend(dataset.images.data().iter().map(|&v| pixel_to_byte(v)));
    Ok(out)
}

pub fn load_idx(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let mut d = parse_idx(&bytes)?;
    d.source = path.display().to_string();
    Ok(d)
}

/// Gaussian blob centers of the two-gaussians kind, as fractions of the side.
pub const BLOB_CENTERS: [(f64, f64); 2] = [(0.3, 0.3), (0.7, 0.7)];

/// Blob profile `g_k(y, x)` in `[0, 1]` at pixel centers; width is `size / 8`.
pub fn blob(size: usize, k: usize, y: usize, x: usize) -> f64 {
    let (cy, cx) = BLOB_CENTERS[k];
    let w = size as f64 / 8.0;
    let dy = y as f64 + 0.5 - cy * size as f64;
    let dx = x as f64 + 0.5 - cx * size as f64;
    (-(dy * dy + dx * dx) / (2.0 * w * w)).exp()
}

/// Procedural single-channel images.
///
/// * `two-gaussians`: one blob at a center picked with probability 1/2,
///   amplitude `a ~ U(0.5, 1)`; pixel `= -1 + 2 a g_k`.
/// * `checkerboard`: cell side drawn from {1, 2, 4}, random phase per axis.
/// * `bars`: one uniformly chosen row at +1, the rest at -1.
pub fn synthetic(kind: SyntheticKind, size: usize, n: usize, seed: u64) -> Result<Dataset> {
    if size != 8 && size != 16 {
        return Err(Error::InvalidConfig(format!("synthetic image size {size} must be 8 or 16")));
    }
    if n == 0 {
        return Err(Error::InvalidConfig("synthetic dataset needs n >= 1".into()));
    }
    let mut rng = rng::stream(seed, Stream::Data);
    let per = size * size;
    let mut data = vec![-1.0f32; n * per];
    for img in data.chunks_mut(per) {
        draw_image(kind, size, &mut rng, img);
    }
    let images = Tensor::new([n, 1, size, size], data)?;
    Dataset::new(images, format!("synthetic:{kind}:{size}"), Some(seed))
}

fn draw_image(kind: SyntheticKind, size: usize, rng: &mut ChaCha8Rng, img: &mut [f32]) {
    match kind {
        SyntheticKind::TwoGaussians => {
            let k = rng.random_range(0..2usize);
            let a: f64 = rng.random_range(0.5..1.0);
            for y in 0..size {
                for x in 0..size {
                    img[y * size + x] = (-1.0 + 2.0 * a * blob(size, k, y, x)) as f32;
                }
            }
        }
        SyntheticKind::Checkerboard => {
            let cell = [1usize, 2, 4][rng.random_range(0..3usize)];
            let py = rng.random_range(0..cell);
            let px = rng.random_range(0..cell);
            for y in 0..size {
                for x in 0..size {
                    let on = ((y + py) / cell + (x + px) / cell).is_multiple_of(2);
                    img[y * size + x] = if on { 1.0 } else { -1.0 };
                }
            }
        }
        SyntheticKind::Bars => {
            let row = rng.random_range(0..size);
            img[row * size..(row + 1) * size].fill(1.0);
        }
    }
}

/// Endless epoch-wise shuffled batches of dataset indices. Each epoch is a
/// fresh permutation from the shuffle stream; the short last batch is kept.
#[derive(Debug, Clone)]
pub struct BatchStream {
    n: usize,
    batch_size: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        Self::with_rng(n, batch_size, rng::stream(seed, Stream::DataShuffle))
    }

    pub fn with_rng(n: usize, batch_size: usize, rng: ChaCha8Rng) -> Result<Self> {
        if batch_size == 0 || n == 0 {
            return Err(Error::InvalidConfig("batch size and dataset size must be positive".into()));
        }
        Ok(Self {
            n,
            batch_size,
            order: Vec::new(),
            pos: 0,
            rng,
        })
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.n);
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }

    /// The batches of one fresh epoch.
    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        self.pos = self.order.len();
        let mut out = vec![self.next_indices()];
        while self.pos < self.n {
            out.push(self.next_indices());
        }
        out
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }
}

/// One shuffled epoch of image batches.
pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<Vec<Tensor<f32>>> {
    let mut s = BatchStream::new(dataset.len(), batch_size, seed)?;
    s.epoch().iter().map(|idx| dataset.batch(idx)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(n: u32, h: u32, w: u32, payload: &[u8]) -> Vec<u8> {
        let mut b = IDX_MAGIC.to_be_bytes().to_vec();
        for d in [n, h, w] {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn parses_crafted_fixture() {
        let d = parse_idx(&fixture(1, 2, 2, &[0, 255, 0, 255])).unwrap();
        assert_eq!(d.images().shape(), &[1, 1, 2, 2]);
        assert_eq!(d.images().data(), &[-1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn distinct_errors() {
        let err = |b: &[u8]| match parse_idx(b).unwrap_err() {
            Error::Idx(e) => e,
            e => panic!("{e}"),
        };
        assert!(matches!(err(&fixture(1, 2, 2, &[0, 1, 2])), IdxError::TruncatedPayload { needed: 4, available: 3 }));
        let mut bad = fixture(1, 1, 1, &[0]);
        bad[3] = 0x01;
        assert!(matches!(err(&bad), IdxError::BadMagic { found: 0x801 }));
        assert!(matches!(err(&fixture(u32::MAX, u32::MAX, u32::MAX, &[])), IdxError::DimensionOverflow { .. }));
        assert!(matches!(err(&fixture(0, 2, 2, &[])), IdxError::EmptyDimension { .. }));
        assert!(matches!(err(&fixture(1, 1, 1, &[0, 0])), IdxError::TrailingBytes { extra: 1 }));
        assert!(matches!(err(&IDX_MAGIC.to_be_bytes()), IdxError::TruncatedHeader { .. }));
    }

    #[test]
    fn every_byte_survives_the_pixel_mapping() {
        for x in 0..=255u8 {
            assert_eq!(pixel_to_byte(byte_to_pixel(x)), x);
        }
    }

    #[test]
    fn downscale_pads_then_pools() {
        let d = parse_idx(&fixture(1, 28, 28, &[255; 784])).unwrap();
        let s = d.downscale_mnist().unwrap();
        assert_eq!(s.images().shape(), &[1, 1, 16, 16]);
        // the 2-pixel border fills whole pooled cells
        assert_eq!(s.images().data()[1], -1.0);
        assert_eq!(s.images().data()[17], 1.0);
        assert_eq!(s.images().data()[15 * 16 + 15], -1.0);
    }

    #[test]
    fn bars_have_one_lit_row() {
        let d = synthetic(SyntheticKind::Bars, 8, 50, 3).unwrap();
        for img in d.images().data().chunks(64) {
            let lit = img.chunks(8).filter(|r| r.iter().all(|&v| v == 1.0)).count();
            let dark = img.chunks(8).filter(|r| r.iter().all(|&v| v == -1.0)).count();
            assert_eq!((lit, dark), (1, 7));
        }
    }

    #[test]
    fn checkerboard_is_binary() {
        let d = synthetic(SyntheticKind::Checkerboard, 16, 20, 1).unwrap();
        assert!(d.images().data().iter().all(|&v| v == 1.0 || v == -1.0));
    }

    #[test]
    fn synthetic_rejects_bad_arguments() {
        assert!(synthetic(SyntheticKind::Bars, 12, 1, 0).is_err());
        assert!(synthetic(SyntheticKind::Bars, 8, 0, 0).is_err());
        assert!(matches!("spirals".parse::<SyntheticKind>(), Err(Error::UnknownDatasetKind(_))));
    }

    #[test]
    fn full_batch_is_a_permutation() {
        let mut s = BatchStream::new(10, 10, 4).unwrap();
        let e = s.epoch();
        assert_eq!(e.len(), 1);
        let mut b = e[0].clone();
        b.sort();
        assert_eq!(b, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn short_last_batch_is_kept() {
        let mut s = BatchStream::new(10, 4, 4).unwrap();
        let sizes: Vec<usize> = s.epoch().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }
}
