//! IDX parsing, bicubic reduction of digit images and the seeded
//! train/validation partitions.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::{Array2, Array3, ShapeBuilder};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Side length of the reduced digit images (16×16 → 256-dimensional signals).
pub const REDUCED_SIDE: usize = 16;

/// Decoded contents of an IDX file.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    Images(Array3<u8>),
    Labels(Vec<u8>),
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::TruncatedPayload {
            declared: offset + 4,
            available: bytes.len(),
        })
}

/// Parses an uncompressed IDX byte stream (unsigned-byte images or labels).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let magic = read_be_u32(bytes, 0)?;
    let ndims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        other => return Err(Error::UnknownMagic(other)),
    };
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        dims.push(read_be_u32(bytes, 4 + 4 * d)? as usize);
    }
    let header = 4 + 4 * ndims;
    let declared = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidDataset("IDX dimensions overflow".into()))?;
    let payload = &bytes[header..];
    if payload.len() < declared {
        return Err(Error::TruncatedPayload {
            declared,
            available: payload.len(),
        });
    }
    if payload.len() > declared {
        return Err(Error::InvalidDataset(format!(
            "{} trailing bytes after IDX payload",
            payload.len() - declared
        )));
    }
    Ok(match magic {
        IDX_IMAGES_MAGIC => IdxData::Images(
            Array3::from_shape_vec((dims[0], dims[1], dims[2]), payload.to_vec())
                .expect("shape checked against payload length"),
        ),
        _ => IdxData::Labels(payload.to_vec()),
    })
}

/// Encodes images or labels as an IDX byte stream.
pub fn encode_idx(data: &IdxData) -> Vec<u8> {
    let mut out = Vec::new();
    match data {
        IdxData::Images(images) => {
            out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
            for d in images.shape() {
                out.extend_from_slice(&(*d as u32).to_be_bytes());
            }
            out.extend(images.iter().copied());
        }
        IdxData::Labels(labels) => {
            out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
            out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
            out.extend_from_slice(labels);
        }
    }
    out
}

/// Reads an IDX file from disk, gunzipping it first when it carries the gzip magic.
pub fn read_idx_file(path: &Path) -> Result<IdxData> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut decoded = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut decoded)
            .map_err(|e| Error::io(path, e))?;
        parse_idx(&decoded)
    } else {
        parse_idx(&raw)
    }
}

/// Images plus labels as stored in the IDX files.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImageSet {
    images: Array3<u8>,
    labels: Vec<usize>,
    classes: usize,
}

impl RawImageSet {
    pub fn new(images: Array3<u8>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape()[0] != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidDataset(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn from_idx(images: IdxData, labels: IdxData, classes: usize) -> Result<Self> {
        match (images, labels) {
            (IdxData::Images(images), IdxData::Labels(labels)) => {
                Self::new(images, labels.into_iter().map(usize::from).collect(), classes)
            }
            _ => Err(Error::InvalidDataset(
                "expected an image file and a label file".into(),
            )),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Array3<u8> {
        &self.images
    }

    /// Image `i` as a float matrix with values in [0, 255].
    pub fn image(&self, i: usize) -> Array2<f64> {
        self.images
            .index_axis(ndarray::Axis(0), i)
            .mapv(|v| f64::from(v))
    }

    /// Resizes the selected images to 16×16, scales them to [0,1] and stacks
    /// them as columns.
    pub fn to_dataset(&self, indices: &[usize]) -> LabeledDataset {
        let dim = REDUCED_SIDE * REDUCED_SIDE;
        let columns: Vec<Vec<f64>> = indices
            .par_iter()
            .map(|&i| {
                let reduced = bicubic_resize(&self.image(i), REDUCED_SIDE, REDUCED_SIDE);
                reduced.iter().map(|v| v / 255.0).collect()
            })
            .collect();
        let mut data = Vec::with_capacity(dim * indices.len());
        for c in columns {
            data.extend(c);
        }
        let x = Array2::from_shape_vec((dim, indices.len()).f(), data)
            .expect("column data matches shape");
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        LabeledDataset::new(x, labels, self.classes).expect("labels validated on construction")
    }
}

/// Locates one of the four standard MNIST files in `dir`, accepting the
/// common naming variants and gzipped copies.
fn find_mnist_file(dir: &Path, stem: &str, kind: &str) -> Result<PathBuf> {
    let candidates = [
        format!("{stem}-{kind}"),
        format!("{stem}-{kind}.gz"),
        format!("{stem}-{}", kind.replacen('-', ".", 1)),
        format!("{stem}-{}.gz", kind.replacen('-', ".", 1)),
    ];
    candidates
        .iter()
        .map(|name| dir.join(name))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            Error::io(
                dir.join(&candidates[0]),
                std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
            )
        })
}

/// Loads the MNIST training (`train`) or testing (`t10k`) split from `dir`.
pub fn load_mnist(dir: &Path, split: &str) -> Result<RawImageSet> {
    let images = read_idx_file(&find_mnist_file(dir, split, "images-idx3-ubyte")?)?;
    let labels = read_idx_file(&find_mnist_file(dir, split, "labels-idx1-ubyte")?)?;
    RawImageSet::from_idx(images, labels, 10)
}

/// Signal matrix with one vectorized image per column plus class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    x: Array2<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(x: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if x.ncols() != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} columns but {} labels",
                x.ncols(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidDataset(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("non-finite signal entry".into()));
        }
        // Columns are accessed as contiguous slices throughout.
        let x = if x.t().is_standard_layout() {
            x
        } else {
            let mut f = Array2::zeros(x.raw_dim().f());
            f.assign(&x);
            f
        };
        Ok(Self { x, labels, classes })
    }

    pub fn signals(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Signal dimension N.
    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn signal(&self, i: usize) -> &[f64] {
        let n = self.dim();
        &self.x.as_slice_memory_order().expect("column-major storage")[i * n..(i + 1) * n]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Column indices of every sample of class `class`, ascending.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        let n = self.dim();
        let mut data = Vec::with_capacity(n * indices.len());
        for &i in indices {
            data.extend_from_slice(self.signal(i));
        }
        let x = Array2::from_shape_vec((n, indices.len()).f(), data).expect("shape");
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self {
            x,
            labels,
            classes: self.classes,
        }
    }
}

/// Keys cubic convolution kernel with a = −0.5.
fn keys_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Four-tap interpolation weights along one axis, pixel-center aligned,
/// with taps clamped to the border.
#[derive(Debug, Clone)]
pub struct ResampleWeights {
    taps: Vec<[(usize, f64); 4]>,
}

impl ResampleWeights {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        assert!(in_len > 0 && out_len > 0, "empty axis");
        let scale = in_len as f64 / out_len as f64;
        let last = (in_len - 1) as isize;
        let taps = (0..out_len)
            .map(|o| {
                let src = (o as f64 + 0.5) * scale - 0.5;
                let base = src.floor();
                let frac = src - base;
                let base = base as isize;
                let mut row = [(0usize, 0.0); 4];
                for (k, slot) in row.iter_mut().enumerate() {
                    let offset = k as isize - 1;
                    let idx = (base + offset).clamp(0, last) as usize;
                    *slot = (idx, keys_kernel(frac - offset as f64));
                }
                row
            })
            .collect();
        Self { taps }
    }

    pub fn taps(&self) -> &[[(usize, f64); 4]] {
        &self.taps
    }
}

/// Bicubic resampling of a single-channel image.
pub fn bicubic_resize(image: &Array2<f64>, out_rows: usize, out_cols: usize) -> Array2<f64> {
    let (rows, cols) = image.dim();
    let wr = ResampleWeights::new(rows, out_rows);
    let wc = ResampleWeights::new(cols, out_cols);

    // horizontal pass
    let mut tmp = Array2::<f64>::zeros((rows, out_cols));
    for r in 0..rows {
        for (c, taps) in wc.taps().iter().enumerate() {
            tmp[[r, c]] = taps.iter().map(|&(i, w)| w * image[[r, i]]).sum();
        }
    }
    // vertical pass
    let mut out = Array2::<f64>::zeros((out_rows, out_cols));
    for (r, taps) in wr.taps().iter().enumerate() {
        for c in 0..out_cols {
            out[[r, c]] = taps.iter().map(|&(i, w)| w * tmp[[i, c]]).sum();
        }
    }

    let lo = image.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = image.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo <= hi {
        out.mapv_inplace(|v| v.clamp(lo, hi));
    }
    out
}

/// Draws disjoint per-class training and validation sets from `source`.
///
/// Columns are grouped by class (class 0 first), each group in draw order.
pub fn build_partitions(
    source: &RawImageSet,
    per_class_train: usize,
    per_class_val: usize,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let required = per_class_train + per_class_val;
    let mut train_idx = Vec::with_capacity(per_class_train * source.classes());
    let mut val_idx = Vec::with_capacity(per_class_val * source.classes());
    for class in 0..source.classes() {
        let members: Vec<usize> = (0..source.len())
            .filter(|&i| source.labels()[i] == class)
            .collect();
        if members.len() < required {
            return Err(Error::InsufficientClassSamples {
                class,
                available: members.len(),
                required,
            });
        }
        let drawn = index::sample(&mut rng, members.len(), required);
        for (pos, d) in drawn.iter().enumerate() {
            if pos < per_class_train {
                train_idx.push(members[d]);
            } else {
                val_idx.push(members[d]);
            }
        }
    }
    Ok((source.to_dataset(&train_idx), source.to_dataset(&val_idx)))
}

/// The test split: every image, resized and scaled, in file order.
pub fn prepare_test(source: &RawImageSet) -> LabeledDataset {
    let all: Vec<usize> = (0..source.len()).collect();
    source.to_dataset(&all)
}
