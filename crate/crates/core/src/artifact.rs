//! Versioned binary container for dictionaries, models, codes and datasets.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DKSV" | version u32 | kind u32 | block count u32
//! per block: rows u64 | cols u64
//! per block: rows·cols f64, column-major
//! metadata count u32 | per entry: key len u32, key, value len u32, value
//! CRC-32 of everything above
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ShapeBuilder};

use crate::das::StructuredDictionary;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::mlp::MlpModel;
use crate::omp::{Dictionary, SparseCode, SparseCodeMatrix};

pub const MAGIC: &[u8; 4] = b"DKSV";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactKind {
    Dictionary = 1,
    StructuredDictionary = 2,
    MlpModel = 3,
    Codes = 4,
    Dataset = 5,
}

impl ArtifactKind {
    fn from_tag(tag: u32) -> Option<Self> {
        Some(match tag {
            1 => Self::Dictionary,
            2 => Self::StructuredDictionary,
            3 => Self::MlpModel,
            4 => Self::Codes,
            5 => Self::Dataset,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Dictionary => "dictionary",
            Self::StructuredDictionary => "structured-dictionary",
            Self::MlpModel => "mlp-model",
            Self::Codes => "codes",
            Self::Dataset => "dataset",
        }
    }
}

/// Matrices plus ordered string metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub kind: ArtifactKind,
    pub blocks: Vec<Array2<f64>>,
    pub metadata: Vec<(String, String)>,
}

impl Artifact {
    pub fn new(kind: ArtifactKind, blocks: Vec<Array2<f64>>) -> Self {
        Self {
            kind,
            blocks,
            metadata: Vec::new(),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Sets `key`, replacing an earlier value.
    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let key = key.into();
        let value = value.into();
        match self.metadata.iter_mut().find(|(k, _)| *k == key) {
            Some(entry) => entry.1 = value,
            None => self.metadata.push((key, value)),
        }
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::MalformedArtifact(format!("missing metadata key {key:?}")))
    }

    fn require_json<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        serde_json::from_str(self.require(key)?)
            .map_err(|e| Error::MalformedArtifact(format!("metadata {key:?}: {e}")))
    }

    fn expect_blocks(&self, n: usize) -> Result<()> {
        if self.blocks.len() != n {
            return Err(Error::MalformedArtifact(format!(
                "{} artifact with {} blocks, expected {n}",
                self.kind.name(),
                self.blocks.len()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            out.extend_from_slice(&(b.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(b.ncols() as u64).to_le_bytes());
        }
        for b in &self.blocks {
            for v in b.t().iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            for s in [k, v] {
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Checks magic, version and checksum, in that order, then parses.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < 8 {
            return Err(Error::ChecksumMismatch);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        if bytes.len() < 12 {
            return Err(Error::ChecksumMismatch);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(Error::ChecksumMismatch);
        }

        let mut r = Reader { buf: body, pos: 8 };
        let tag = r.u32()?;
        let kind = ArtifactKind::from_tag(tag)
            .ok_or_else(|| Error::MalformedArtifact(format!("unknown artifact kind {tag}")))?;
        let count = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            shapes.push((rows, cols));
        }
        let mut blocks = Vec::with_capacity(shapes.len());
        for (rows, cols) in shapes {
            let len = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::MalformedArtifact(format!("block {rows}×{cols} exceeds the payload")))?;
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            blocks.push(Array2::from_shape_vec((rows, cols).f(), data).expect("length checked"));
        }
        let entries = r.u32()? as usize;
        let mut metadata = Vec::with_capacity(entries.min(1024));
        for _ in 0..entries {
            let k = r.string()?;
            let v = r.string()?;
            metadata.push((k, v));
        }
        if r.remaining() != 0 {
            return Err(Error::MalformedArtifact(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { kind, blocks, metadata })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if n > self.remaining() {
            return Err(Error::MalformedArtifact("unexpected end of artifact".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::MalformedArtifact("metadata is not UTF-8".into()))
    }
}

/// Writes to a temporary file next to `path`, then renames it into place.
pub fn save_artifact(path: &Path, artifact: &Artifact) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&artifact.to_bytes()).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn load_artifact(path: &Path) -> Result<Artifact> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Artifact::from_bytes(&bytes)
}

/// Types stored as one artifact kind.
pub trait Persist: Sized {
    const KIND: ArtifactKind;

    fn to_artifact(&self) -> Artifact;

    fn from_artifact(artifact: &Artifact) -> Result<Self>;
}

fn check_kind<T: Persist>(artifact: &Artifact) -> Result<()> {
    if artifact.kind != T::KIND {
        return Err(Error::KindMismatch {
            expected: T::KIND.name().into(),
            found: artifact.kind.name().into(),
        });
    }
    Ok(())
}

/// Saves `value` with extra metadata entries appended.
pub fn save<T: Persist>(path: &Path, value: &T, metadata: &[(String, String)]) -> Result<()> {
    let mut a = value.to_artifact();
    for (k, v) in metadata {
        a.set(k.clone(), v.clone());
    }
    save_artifact(path, &a)
}

/// Loads a value of type `T` together with the raw artifact (for metadata).
pub fn load<T: Persist>(path: &Path) -> Result<(T, Artifact)> {
    let a = load_artifact(path)?;
    check_kind::<T>(&a)?;
    Ok((T::from_artifact(&a)?, a))
}

fn row(values: impl Iterator<Item = f64>) -> Array2<f64> {
    let v: Vec<f64> = values.collect();
    Array2::from_shape_vec((1, v.len()), v).expect("row vector")
}

fn to_index(v: f64) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(53) {
        Ok(v as usize)
    } else {
        Err(Error::MalformedArtifact(format!("{v} is not an index")))
    }
}

impl Persist for Dictionary {
    const KIND: ArtifactKind = ArtifactKind::Dictionary;

    fn to_artifact(&self) -> Artifact {
        let mut a = Artifact::new(Self::KIND, vec![self.atoms().clone()]);
        a.set("tags", serde_json::to_string(self.tags()).expect("serializable"));
        a
    }

    fn from_artifact(a: &Artifact) -> Result<Self> {
        check_kind::<Self>(a)?;
        a.expect_blocks(1)?;
        let tags = match a.get("tags") {
            Some(_) => a.require_json("tags")?,
            None => vec![None; a.blocks[0].ncols()],
        };
        Dictionary::with_tags(a.blocks[0].clone(), tags)
    }
}

impl Persist for StructuredDictionary {
    const KIND: ArtifactKind = ArtifactKind::StructuredDictionary;

    fn to_artifact(&self) -> Artifact {
        let mut a = Artifact::new(Self::KIND, vec![self.atoms().clone()]);
        a.set("classes", self.classes().to_string());
        a.set("class_tags", serde_json::to_string(self.class_tags()).expect("serializable"));
        a.set(
            "source_iterations",
            serde_json::to_string(self.source_iterations()).expect("serializable"),
        );
        a
    }

    fn from_artifact(a: &Artifact) -> Result<Self> {
        check_kind::<Self>(a)?;
        a.expect_blocks(1)?;
        StructuredDictionary::from_parts(
            a.blocks[0].clone(),
            a.require_json("class_tags")?,
            a.require_json("source_iterations")?,
            a.require_json("classes")?,
        )
    }
}

impl Persist for MlpModel {
    const KIND: ArtifactKind = ArtifactKind::MlpModel;

    fn to_artifact(&self) -> Artifact {
        let mut a = Artifact::new(Self::KIND, vec![self.hidden().clone(), self.output().clone()]);
        a.set("architecture", self.architecture());
        a.set("transfer", "satlin");
        a
    }

    fn from_artifact(a: &Artifact) -> Result<Self> {
        check_kind::<Self>(a)?;
        a.expect_blocks(2)?;
        if a.require("transfer")? != "satlin" {
            return Err(Error::MalformedArtifact("unknown transfer function".into()));
        }
        MlpModel::new(a.blocks[0].clone(), a.blocks[1].clone())
    }
}

/// Blocks: per-column counts (1×n), indices (1×T), values (1×T).
impl Persist for SparseCodeMatrix {
    const KIND: ArtifactKind = ArtifactKind::Codes;

    fn to_artifact(&self) -> Artifact {
        let cols = self.columns();
        let counts = row(cols.iter().map(|c| c.indices.len() as f64));
        let indices = row(cols.iter().flat_map(|c| c.indices.iter().map(|&j| j as f64)));
        let values = row(cols.iter().flat_map(|c| c.values.iter().copied()));
        let mut a = Artifact::new(Self::KIND, vec![counts, indices, values]);
        a.set("atoms", self.atoms().to_string());
        a.set("sparsity", self.sparsity().to_string());
        a
    }

    fn from_artifact(a: &Artifact) -> Result<Self> {
        check_kind::<Self>(a)?;
        a.expect_blocks(3)?;
        let atoms: usize = a.require_json("atoms")?;
        let q: usize = a.require_json("sparsity")?;
        let (counts, indices, values) = (&a.blocks[0], &a.blocks[1], &a.blocks[2]);
        if indices.len() != values.len() {
            return Err(Error::MalformedArtifact("index and value counts differ".into()));
        }
        let mut columns = Vec::with_capacity(counts.len());
        let (mut idx, mut val) = (indices.iter(), values.iter());
        let mut used = 0;
        for &c in counts.iter() {
            let c = to_index(c)?;
            used += c;
            if used > indices.len() {
                return Err(Error::MalformedArtifact("column counts exceed stored entries".into()));
            }
            let ix = idx.by_ref().take(c).map(|&v| to_index(v)).collect::<Result<Vec<_>>>()?;
            let vs = val.by_ref().take(c).copied().collect();
            columns.push(SparseCode { indices: ix, values: vs });
        }
        if used != indices.len() {
            return Err(Error::MalformedArtifact("unreferenced code entries".into()));
        }
        SparseCodeMatrix::new(atoms, q, columns)
    }
}

/// Blocks: signals (N×n), labels (1×n).
impl Persist for LabeledDataset {
    const KIND: ArtifactKind = ArtifactKind::Dataset;

    fn to_artifact(&self) -> Artifact {
        let labels = row(self.labels().iter().map(|&l| l as f64));
        let mut a = Artifact::new(Self::KIND, vec![self.signals().clone(), labels]);
        a.set("classes", self.classes().to_string());
        a
    }

    fn from_artifact(a: &Artifact) -> Result<Self> {
        check_kind::<Self>(a)?;
        a.expect_blocks(2)?;
        let labels = a.blocks[1].iter().map(|&v| to_index(v)).collect::<Result<Vec<_>>>()?;
        LabeledDataset::new(a.blocks[0].clone(), labels, a.require_json("classes")?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> Artifact {
        let mut a = Artifact::new(ArtifactKind::Dictionary, vec![array![[1.0, 0.0], [0.0, 1.0]]]);
        a.set("seed", "7");
        a
    }

    #[test]
    fn bytes_round_trip() {
        let a = sample();
        assert_eq!(Artifact::from_bytes(&a.to_bytes()).unwrap(), a);
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes();
        assert_eq!(&b[..4], b"DKSV");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..24], &2u64.to_le_bytes());
    }

    #[test]
    fn bad_magic() {
        let mut b = sample().to_bytes();
        b[..4].copy_from_slice(b"XXXX");
        assert!(matches!(Artifact::from_bytes(&b), Err(Error::BadMagic)));
        assert!(matches!(Artifact::from_bytes(b"DK"), Err(Error::BadMagic)));
    }

    #[test]
    fn unsupported_version() {
        let mut b = sample().to_bytes();
        b[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(Artifact::from_bytes(&b), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn truncation_and_corruption_fail_checksum() {
        let b = sample().to_bytes();
        assert!(matches!(Artifact::from_bytes(&b[..b.len() - 9]), Err(Error::ChecksumMismatch)));
        let mut c = b.clone();
        c[40] ^= 1;
        assert!(matches!(Artifact::from_bytes(&c), Err(Error::ChecksumMismatch)));
    }

    #[test]
    fn kind_mismatch() {
        let a = sample();
        assert!(matches!(
            MlpModel::from_artifact(&a),
            Err(Error::KindMismatch { .. })
        ));
    }
}
