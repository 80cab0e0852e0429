//! On-disk formats.
//!
//! Matrix sets use the `MSET` binary layout, all integers and floats
//! little-endian:
//!
//! | offset | size        | field                       |
//! |--------|-------------|-----------------------------|
//! | 0      | 4           | magic `b"MSET"`             |
//! | 4      | 4           | format version, `u32` = 1   |
//! | 8      | 4           | `n`, `u32`                  |
//! | 12     | 4           | `p`, `u32`                  |
//! | 16     | `8 n p^2`   | `f64` values, row-major     |
//!
//! The same layout with `n = 1` stores a final (non-symmetric) `B`.
//!
//! Traces are CSV with a leading block of `# key: value` metadata lines,
//! one row per iterate (row 0 is the starting point).

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{AjdError, Result};
use crate::solver::{SolverTrace, Status};
use crate::types::SymmetricMatrixSet;

pub const MAGIC: &[u8; 4] = b"MSET";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

/// Raw contents of an `MSET` file; matrices need not be symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct MatSetFile {
    pub n: u32,
    pub p: u32,
    pub data: Vec<f64>,
}

impl MatSetFile {
    pub fn from_set(set: &SymmetricMatrixSet) -> Result<Self> {
        Ok(Self {
            n: to_u32(set.n())?,
            p: to_u32(set.p())?,
            data: set.as_slice().to_vec(),
        })
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(AjdError::DimensionMismatch {
                expected: "square matrix".into(),
                actual: format!("{}x{}", m.nrows(), m.ncols()),
            });
        }
        Ok(Self {
            n: 1,
            p: to_u32(m.nrows())?,
            data: m.transpose().as_slice().to_vec(),
        })
    }

    pub fn into_set(self) -> Result<SymmetricMatrixSet> {
        SymmetricMatrixSet::from_row_major(self.n as usize, self.p as usize, self.data)
    }

    /// Matrix `i` as a dense matrix.
    pub fn matrix(&self, i: usize) -> DMatrix<f64> {
        let p = self.p as usize;
        DMatrix::from_row_slice(p, p, &self.data[i * p * p..(i + 1) * p * p])
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 8 * self.data.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.n.to_le_bytes());
        out.extend_from_slice(&self.p.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(AjdError::Format(format!(
                "{} bytes is shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if &bytes[0..4] != MAGIC {
            return Err(AjdError::Format("bad magic bytes".into()));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = word(4);
        if version != FORMAT_VERSION {
            return Err(AjdError::Format(format!("unsupported version {version}")));
        }
        let (n, p) = (word(8), word(12));
        let expected = (n as u64)
            .checked_mul(p as u64 * p as u64)
            .and_then(|v| v.checked_mul(8))
            .and_then(|v| v.checked_add(HEADER_LEN as u64));
        if expected != Some(bytes.len() as u64) {
            return Err(AjdError::Format(format!(
                "n = {n}, p = {p} needs {} bytes, file has {}",
                expected.map_or_else(|| "too many".to_string(), |v| v.to_string()),
                bytes.len()
            )));
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { n, p, data })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| AjdError::InvalidArgument(format!("{v} does not fit in u32")))
}

pub fn save_set(set: &SymmetricMatrixSet, path: impl AsRef<Path>) -> Result<()> {
    MatSetFile::from_set(set)?.save(path)
}

pub fn load_set(path: impl AsRef<Path>) -> Result<SymmetricMatrixSet> {
    MatSetFile::load(path)?.into_set()
}

/// Metadata block written above the trace table.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceMetadata {
    pub method: String,
    pub seed: Option<u64>,
    pub n: usize,
    pub p: usize,
    pub sigma: Option<f64>,
    pub status: Status,
    pub generator: String,
    pub init_time_s: f64,
    pub dataset: String,
}

pub const TRACE_COLUMNS: [&str; 7] = [
    "iter",
    "loss",
    "grad_norm",
    "step_size",
    "halvings",
    "wall_time_s",
    "loss_decrease",
];

pub fn write_trace(out: &mut impl Write, meta: &TraceMetadata, trace: &SolverTrace) -> std::io::Result<()> {
    let opt = |v: Option<String>| v.unwrap_or_else(|| "none".to_string());
    writeln!(out, "# dataset: {}", meta.dataset)?;
    writeln!(out, "# method: {}", meta.method)?;
    writeln!(out, "# seed: {}", opt(meta.seed.map(|s| s.to_string())))?;
    writeln!(out, "# n: {}", meta.n)?;
    writeln!(out, "# p: {}", meta.p)?;
    writeln!(out, "# sigma: {}", opt(meta.sigma.map(|s| s.to_string())))?;
    writeln!(out, "# status: {}", meta.status.name())?;
    writeln!(out, "# generator: {}", meta.generator)?;
    writeln!(out, "# init_time_s: {:e}", meta.init_time_s)?;
    writeln!(out, "# version: {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(out, "{}", TRACE_COLUMNS.join(","))?;
    for r in &trace.records {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{},{:e},{:e}",
            r.iter, r.loss, r.grad_norm, r.step_size, r.halvings, r.wall_time, r.loss_decrease
        )?;
    }
    Ok(())
}

pub fn save_trace(path: impl AsRef<Path>, meta: &TraceMetadata, trace: &SolverTrace) -> Result<()> {
    let mut buf = Vec::new();
    write_trace(&mut buf, meta, trace)?;
    fs::write(path, buf)?;
    Ok(())
}

/// A parsed trace file: metadata pairs and numeric rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceTable {
    pub metadata: Vec<(String, String)>,
    pub rows: Vec<[f64; 7]>,
}

impl TraceTable {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = TRACE_COLUMNS.iter().position(|c| *c == name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }
}

pub fn parse_trace(text: &str) -> Result<TraceTable> {
    let mut metadata = Vec::new();
    let mut rows = Vec::new();
    let mut seen_header = false;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# ") {
            let (k, v) = rest
                .split_once(": ")
                .ok_or_else(|| AjdError::Format(format!("bad metadata line {line:?}")))?;
            metadata.push((k.to_string(), v.to_string()));
        } else if !seen_header {
            if line != TRACE_COLUMNS.join(",") {
                return Err(AjdError::Format(format!("unexpected header {line:?}")));
            }
            seen_header = true;
        } else {
            let mut row = [0.0; 7];
            let mut fields = line.split(',');
            for slot in row.iter_mut() {
                let field = fields
                    .next()
                    .ok_or_else(|| AjdError::Format(format!("short row {line:?}")))?;
                *slot = field
                    .parse()
                    .map_err(|_| AjdError::Format(format!("bad number {field:?}")))?;
            }
            rows.push(row);
        }
    }
    Ok(TraceTable { metadata, rows })
}
