use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distance function attached to a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Euclidean,
    /// `1 - cos(a, b)`.
    Cosine,
}

impl DistanceKind {
    pub(crate) fn code(self) -> u8 {
        match self {
            DistanceKind::Euclidean => 0,
            DistanceKind::Cosine => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DistanceKind::Euclidean),
            1 => Ok(DistanceKind::Cosine),
            other => Err(Error::Malformed(format!("unknown distance kind code {other}"))),
        }
    }
}

impl std::str::FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" | "l2" => Ok(DistanceKind::Euclidean),
            "cosine" => Ok(DistanceKind::Cosine),
            other => Err(Error::InvalidConfig(format!("unknown distance kind {other:?}"))),
        }
    }
}

/// An `n × d` table of vectors, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorDataset {
    d: usize,
    rows: Vec<f64>,
    kind: DistanceKind,
    normalized: bool,
}

const DATASET_MAGIC: [u8; 4] = *b"VECD";
const DATASET_VERSION: u32 = 1;

impl VectorDataset {
    /// Builds a dataset from a flat row-major buffer.
    pub fn from_flat(d: usize, rows: Vec<f64>, kind: DistanceKind) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidConfig("dimension must be positive".into()));
        }
        if rows.len() % d != 0 {
            return Err(Error::Shape(format!(
                "buffer of {} values is not a multiple of d = {d}",
                rows.len()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset rows".into()));
        }
        Ok(VectorDataset {
            d,
            rows,
            kind,
            normalized: false,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], kind: DistanceKind) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != d) {
            return Err(Error::Shape(format!("row {bad} has length {} (expected {d})", rows[bad].len())));
        }
        Self::from_flat(d, rows.concat(), kind)
    }

    pub fn n(&self) -> usize {
        self.rows.len() / self.d
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn kind(&self) -> DistanceKind {
        self.kind
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.rows.chunks_exact(self.d)
    }

    pub fn flat(&self) -> &[f64] {
        &self.rows
    }

    /// Scales every row to unit 2-norm. Zero rows are rejected.
    pub fn normalize(&mut self) -> Result<()> {
        let d = self.d;
        for (i, row) in self.rows.chunks_exact_mut(d).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Domain(format!("row {i} is the zero vector")));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        self.normalized = true;
        Ok(())
    }

    pub(crate) fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.d {
            return Err(Error::Shape(format!("row has length {} (expected {})", row.len(), self.d)));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("inserted row".into()));
        }
        self.rows.extend_from_slice(row);
        Ok(())
    }

    /// Keeps only rows whose flag is true.
    pub(crate) fn retain_rows(&mut self, keep: &[bool]) {
        let d = self.d;
        let mut out = Vec::with_capacity(self.rows.len());
        for (row, &k) in self.rows.chunks_exact(d).zip(keep) {
            if k {
                out.extend_from_slice(row);
            }
        }
        self.rows = out;
    }

    /// Content fingerprint (CRC32 over the `f32` encoding, hex).
    pub fn fingerprint(&self) -> String {
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&(self.n() as u64).to_le_bytes());
        hasher.update(&(self.d as u32).to_le_bytes());
        hasher.update(&[self.kind.code()]);
        for v in &self.rows {
            hasher.update(&(*v as f32).to_le_bytes());
        }
        format!("{:08x}", hasher.finalize())
    }

    /// Writes the binary `VECD` format. Values are stored as `f32`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::with_capacity(22 + self.rows.len() * 4 + 4);
        buf.extend_from_slice(&DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.n() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.d as u32).to_le_bytes());
        buf.push(self.kind.code());
        buf.push(u8::from(self.normalized));
        for v in &self.rows {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::decode(&buf)
    }

    fn decode(buf: &[u8]) -> Result<Self> {
        const HEADER: usize = 4 + 4 + 8 + 4 + 1 + 1;
        if buf.len() < 4 {
            return Err(Error::Truncated("dataset header".into()));
        }
        if buf[..4] != DATASET_MAGIC {
            return Err(Error::BadMagic { expected: DATASET_MAGIC });
        }
        if buf.len() < HEADER + 4 {
            return Err(Error::Truncated("dataset header".into()));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != DATASET_VERSION {
            return Err(Error::Version {
                found: version,
                supported: DATASET_VERSION,
            });
        }
        let n = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(buf[16..20].try_into().unwrap()) as usize;
        let body = n
            .checked_mul(d)
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::Malformed("dataset size overflows".into()))?;
        let expected = HEADER + body + 4;
        if buf.len() < expected {
            return Err(Error::Truncated(format!("dataset body: {} of {expected} bytes", buf.len())));
        }
        if buf.len() > expected {
            return Err(Error::Malformed("trailing bytes after dataset".into()));
        }
        let stored = u32::from_le_bytes(buf[expected - 4..].try_into().unwrap());
        let computed = crc32fast::hash(&buf[..expected - 4]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let kind = DistanceKind::from_code(buf[20])?;
        let normalized = buf[21] != 0;
        let rows = buf[HEADER..HEADER + body]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let mut ds = Self::from_flat(d.max(1), rows, kind)?;
        ds.normalized = normalized;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path)?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    /// Reads one whitespace-separated vector per line; blank lines and
    /// lines starting with `#` are skipped.
    pub fn read_text<R: BufRead>(r: R, kind: DistanceKind) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let row = trimmed
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map_err(|e| Error::Malformed(format!("line {}: {tok:?}: {e}", lineno + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Malformed("no vectors in text input".into()));
        }
        Self::from_rows(&rows, kind)
    }
}
