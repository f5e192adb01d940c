//! Dataset ingestion and sequentialization.
//!
//! Reads MNIST-style IDX files and CIFAR-10 binary batches from local paths
//! (gzip decompressed transparently when the filename ends in .gz), then turns
//! images into per-step input vectors: pixel-by-pixel (dimension = channels)
//! or row-by-row (dimension = width·channels), with an optional fixed random
//! permutation of the step order and optional average-pool downsampling.

use crate::dynamics::InputSequence;
use crate::numerics::Matrix;
use crate::rng::StreamRng;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
const IDX_MAGIC_LABELS: u32 = 0x0000_0801;
const CIFAR_RECORD_BYTES: usize = 1 + 3 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated at byte offset {offset} (needed {needed} more bytes)")]
    Truncated {
        path: String,
        offset: usize,
        needed: usize,
    },
    #[error("{path}: {len} bytes is not a whole number of {record}-byte records")]
    BadRecordLength {
        path: String,
        len: usize,
        record: usize,
    },
    #[error("label {label} out of range [0,9] at record {index}")]
    BadLabel { label: u8, index: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One image, planar channel layout: pixels[c][y][x] flattened, values in [0,1].
#[derive(Debug, Clone)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Contents of a single IDX file.
#[derive(Debug)]
pub enum IdxContent {
    Images(Vec<Image>),
    Labels(Vec<u8>),
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let wrap = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let raw = std::fs::read(path).map_err(wrap)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(wrap)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(DataError::Truncated {
                path: self.path.to_string(),
                offset: self.bytes.len(),
                needed: self.offset + n - self.bytes.len(),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parse one IDX file: magic 0x00000803 (images, 3 dimension sizes) or
/// 0x00000801 (labels, 1 dimension size), big-endian, unsigned bytes.
/// Pixel values are normalized by 1/255.
pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxContent> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let path_str = path.display().to_string();
    let mut cur = Cursor {
        bytes: &bytes,
        offset: 0,
        path: &path_str,
    };
    let magic = cur.u32_be()?;
    match magic {
        IDX_MAGIC_IMAGES => {
            let count = cur.u32_be()? as usize;
            let height = cur.u32_be()? as usize;
            let width = cur.u32_be()? as usize;
            let mut images = Vec::with_capacity(count);
            for _ in 0..count {
                let raw = cur.take(height * width)?;
                images.push(Image {
                    width,
                    height,
                    channels: 1,
                    pixels: raw.iter().map(|&b| b as f32 / 255.0).collect(),
                });
            }
            Ok(IdxContent::Images(images))
        }
        IDX_MAGIC_LABELS => {
            let count = cur.u32_be()? as usize;
            let raw = cur.take(count)?;
            for (index, &label) in raw.iter().enumerate() {
                if label > 9 {
                    return Err(DataError::BadLabel { label, index });
                }
            }
            Ok(IdxContent::Labels(raw.to_vec()))
        }
        found => Err(DataError::BadMagic {
            path: path_str,
            found,
            expected: IDX_MAGIC_IMAGES,
        }),
    }
}

/// Pair an IDX image file with an IDX label file.
pub fn dataset_from_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: Split,
) -> Result<Dataset> {
    let images = match load_idx(&images_path)? {
        IdxContent::Images(v) => v,
        IdxContent::Labels(_) => {
            return Err(DataError::Config(format!(
                "{}: expected an image file, found labels",
                images_path.as_ref().display()
            )))
        }
    };
    let labels = match load_idx(&labels_path)? {
        IdxContent::Labels(v) => v,
        IdxContent::Images(_) => {
            return Err(DataError::Config(format!(
                "{}: expected a label file, found images",
                labels_path.as_ref().display()
            )))
        }
    };
    if images.len() != labels.len() {
        return Err(DataError::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    Ok(Dataset {
        images,
        labels,
        split,
    })
}

/// CIFAR-10 binary batch: records of 1 label byte + 3×1024 channel-planar
/// pixel bytes (R, G, B), 32×32 images, normalized by 1/255.
pub fn load_cifar10_binary(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(DataError::BadRecordLength {
            path: path.display().to_string(),
            len: bytes.len(),
            record: CIFAR_RECORD_BYTES,
        });
    }
    let count = bytes.len() / CIFAR_RECORD_BYTES;
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for index in 0..count {
        let rec = &bytes[index * CIFAR_RECORD_BYTES..(index + 1) * CIFAR_RECORD_BYTES];
        let label = rec[0];
        if label > 9 {
            return Err(DataError::BadLabel { label, index });
        }
        labels.push(label);
        images.push(Image {
            width: 32,
            height: 32,
            channels: 3,
            pixels: rec[1..].iter().map(|&b| b as f32 / 255.0).collect(),
        });
    }
    Ok(Dataset {
        images,
        labels,
        split,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeqMode {
    Pixel,
    Row,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequentializeConfig {
    pub mode: SeqMode,
    #[serde(default)]
    pub permutation_seed: Option<u64>,
    #[serde(default = "one")]
    pub downsample: usize,
}

fn one() -> usize {
    1
}

/// Sequentialized dataset, stored flat: item i, step t occupies
/// `data[(i·steps + t)·dim .. +dim]`.
#[derive(Debug, Clone)]
pub struct SequencedDataset {
    pub steps: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub labels: Vec<u8>,
    /// The applied step permutation (presented step t shows source step perm[t]).
    pub permutation: Option<Vec<usize>>,
}

impl SequencedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn step_slice(&self, item: usize, t: usize) -> &[f64] {
        let base = (item * self.steps + t) * self.dim;
        &self.data[base..base + self.dim]
    }

    /// Materialize one item as an [`InputSequence`] (dt = 1, one step per
    /// presented position).
    pub fn input_sequence(&self, item: usize) -> InputSequence {
        let mut values = Matrix::zeros(self.steps, self.dim);
        for t in 0..self.steps {
            for (k, &v) in self.step_slice(item, t).iter().enumerate() {
                values[(t, k)] = v;
            }
        }
        InputSequence { values, dt: 1.0 }
    }
}

fn pooled(img: &Image, ds: usize) -> (usize, usize, Vec<f64>) {
    let (h, w, c) = (img.height / ds, img.width / ds, img.channels);
    let mut out = vec![0.0f64; h * w * c];
    let inv = 1.0 / (ds * ds) as f64;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in 0..ds {
                    for dx in 0..ds {
                        acc += img.pixel(ch, y * ds + dy, x * ds + dx) as f64;
                    }
                }
                out[(ch * h + y) * w + x] = acc * inv;
            }
        }
    }
    (h, w, out)
}

/// Turn every image into a step sequence.
///
/// Pixel mode: T = (H/ds)·(W/ds) steps of dimension `channels`, scanning the
/// (pooled) image row-major. Row mode: T = H/ds steps of dimension
/// (W/ds)·channels, channels interleaved per column. The permutation (when
/// seeded) reorders the presented steps identically for every image.
pub fn sequentialize(ds: &Dataset, cfg: &SequentializeConfig) -> Result<SequencedDataset> {
    if ds.is_empty() {
        return Err(DataError::Config("dataset is empty".into()));
    }
    let first = &ds.images[0];
    let (h0, w0, c0) = (first.height, first.width, first.channels);
    if cfg.downsample == 0 {
        return Err(DataError::Config("downsample must be ≥ 1".into()));
    }
    if h0 % cfg.downsample != 0 || w0 % cfg.downsample != 0 {
        return Err(DataError::Config(format!(
            "downsample {} does not divide {h0}x{w0}",
            cfg.downsample
        )));
    }
    let (ph, pw) = (h0 / cfg.downsample, w0 / cfg.downsample);
    let (steps, dim) = match cfg.mode {
        SeqMode::Pixel => (ph * pw, c0),
        SeqMode::Row => (ph, pw * c0),
    };
    let permutation = cfg.permutation_seed.map(|seed| {
        let mut order: Vec<usize> = (0..steps).collect();
        StreamRng::new(seed).shuffle(&mut order);
        order
    });

    let mut data = vec![0.0f64; ds.len() * steps * dim];
    for (i, img) in ds.images.iter().enumerate() {
        if img.height != h0 || img.width != w0 || img.channels != c0 {
            return Err(DataError::Config(format!(
                "image {i} has shape {}x{}x{}, expected {h0}x{w0}x{c0}",
                img.height, img.width, img.channels
            )));
        }
        let (gh, gw, grid) = pooled(img, cfg.downsample);
        for t_out in 0..steps {
            let t_src = permutation.as_ref().map_or(t_out, |p| p[t_out]);
            let dst = (i * steps + t_out) * dim;
            match cfg.mode {
                SeqMode::Pixel => {
                    let (y, x) = (t_src / gw, t_src % gw);
                    for ch in 0..c0 {
                        data[dst + ch] = grid[(ch * gh + y) * gw + x];
                    }
                }
                SeqMode::Row => {
                    let y = t_src;
                    for x in 0..gw {
                        for ch in 0..c0 {
                            data[dst + x * c0 + ch] = grid[(ch * gh + y) * gw + x];
                        }
                    }
                }
            }
        }
    }
    Ok(SequencedDataset {
        steps,
        dim,
        data,
        labels: ds.labels.clone(),
        permutation,
    })
}

/// Inverse of pixel-mode sequentialization (no permutation, no downsampling):
/// rebuilds the image from one item's step values.
pub fn reconstruct_pixel_mode(
    seq: &SequencedDataset,
    item: usize,
    width: usize,
    height: usize,
) -> Result<Image> {
    if seq.permutation.is_some() {
        return Err(DataError::Config(
            "cannot reconstruct a permuted sequence".into(),
        ));
    }
    if seq.steps != width * height {
        return Err(DataError::Config(format!(
            "{} steps cannot form a {width}x{height} image",
            seq.steps
        )));
    }
    let c = seq.dim;
    let mut pixels = vec![0.0f32; width * height * c];
    for t in 0..seq.steps {
        let (y, x) = (t / width, t % width);
        for (ch, &v) in seq.step_slice(item, t).iter().enumerate() {
            pixels[(ch * height + y) * width + x] = v as f32;
        }
    }
    Ok(Image {
        width,
        height,
        channels: c,
        pixels,
    })
}
