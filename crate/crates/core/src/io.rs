//! CSV and binary serialization of trajectories and matrices.
//!
//! CSV values use Rust's shortest round-trip `Display` formatting, so
//! writing and re-reading a value returns the same bits. The binary container
//! is a 16-byte header (`LRKB`, version, rows, cols as little-endian `u32`)
//! followed by row-major little-endian `f64` data.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LRKB";
pub const VERSION: u32 = 1;

/// Incremental CSV writer with a fixed header.
pub struct CsvWriter<W: Write> {
    out: W,
    columns: usize,
    line: String,
}

impl CsvWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>, header: &[&str]) -> Result<Self> {
        Self::new(BufWriter::new(File::create(path)?), header)
    }
}

impl<W: Write> CsvWriter<W> {
    pub fn new(mut out: W, header: &[&str]) -> Result<Self> {
        writeln!(out, "{}", header.join(","))?;
        Ok(Self { out, columns: header.len(), line: String::new() })
    }

    pub fn row(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.columns {
            return Err(Error::dims(format!(
                "csv row has {} values, header has {}",
                values.len(),
                self.columns
            )));
        }
        self.line.clear();
        for (i, v) in values.iter().enumerate() {
            if i > 0 {
                self.line.push(',');
            }
            let _ = write!(self.line, "{v}");
        }
        self.line.push('\n');
        self.out.write_all(self.line.as_bytes())?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Header `t,<prefix>_0,...,<prefix>_{n-1}`.
pub fn indexed_header(prefix: &str, n: usize) -> Vec<String> {
    std::iter::once("t".to_string())
        .chain((0..n).map(|i| format!("{prefix}_{i}")))
        .collect()
}

/// Writes `states[n]` at time `n·dt` (or `(n+1)·dt` when `offset` is 1).
pub fn write_series_csv(
    path: impl AsRef<Path>,
    prefix: &str,
    dt: f64,
    offset: usize,
    states: &[DVector<f64>],
) -> Result<()> {
    let n = states.first().map_or(0, |s| s.len());
    let header = indexed_header(prefix, n);
    let refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut w = CsvWriter::create(path, &refs)?;
    let mut row = vec![0.0; n + 1];
    for (i, s) in states.iter().enumerate() {
        row[0] = (i + offset) as f64 * dt;
        row[1..].copy_from_slice(s.as_slice());
        w.row(&row)?;
    }
    w.finish()?;
    Ok(())
}

/// Parsed CSV table: header names and numeric rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<CsvTable> {
    read_csv_from(BufReader::new(File::open(path)?))
}

pub fn read_csv_from(reader: impl BufRead) -> Result<CsvTable> {
    let mut lines = reader.lines();
    let header: Vec<String> = match lines.next() {
        Some(l) => l?.split(',').map(|s| s.trim().to_string()).collect(),
        None => return Err(Error::Format("empty csv".into())),
    };
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("line {}: {e}", ln + 2)))?;
        if row.len() != header.len() {
            return Err(Error::Format(format!(
                "line {}: {} fields, header has {}",
                ln + 2,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok(CsvTable { header, rows })
}

/// Reads a `t,x_0..` series back into time stamps and state vectors.
pub fn read_series_csv(path: impl AsRef<Path>) -> Result<(Vec<f64>, Vec<DVector<f64>>)> {
    let table = read_csv(path)?;
    let t = table.rows.iter().map(|r| r[0]).collect();
    let x = table.rows.iter().map(|r| DVector::from_column_slice(&r[1..])).collect();
    Ok((t, x))
}

pub fn write_matrix_bin(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_matrix_to(&mut out, m)?;
    out.flush()?;
    Ok(())
}

pub fn write_matrix_to(out: &mut impl Write, m: &DMatrix<f64>) -> Result<()> {
    let rows = u32::try_from(m.nrows()).map_err(|_| Error::Format("too many rows".into()))?;
    let cols = u32::try_from(m.ncols()).map_err(|_| Error::Format("too many columns".into()))?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&rows.to_le_bytes())?;
    out.write_all(&cols.to_le_bytes())?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_matrix_bin(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    read_matrix_from(&mut BufReader::new(File::open(path)?))
}

pub fn read_matrix_from(input: &mut impl Read) -> Result<DMatrix<f64>> {
    let mut header = [0u8; 16];
    input.read_exact(&mut header)?;
    if &header[0..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let mut buf = vec![0u8; rows * cols * 8];
    input.read_exact(&mut buf)?;
    let mut m = DMatrix::zeros(rows, cols);
    for (idx, chunk) in buf.chunks_exact(8).enumerate() {
        m[(idx / cols, idx % cols)] = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        let states = vec![
            DVector::from_vec(vec![0.1, 1.0 / 3.0, -2.5e-300]),
            DVector::from_vec(vec![f64::MAX, 1e-17, 7.0]),
        ];
        write_series_csv(&p, "x", 0.01, 0, &states).unwrap();
        let (t, back) = read_series_csv(&p).unwrap();
        assert_eq!(t, vec![0.0, 0.01]);
        for (a, b) in states.iter().zip(&back) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("t,x_0,x_1,x_2\n"));
    }

    #[test]
    fn binary_round_trip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, -0.0]);
        let mut buf = Vec::new();
        write_matrix_to(&mut buf, &m).unwrap();
        assert_eq!(buf.len(), 16 + 48);
        assert_eq!(&buf[0..4], b"LRKB");
        assert_eq!(f64::from_le_bytes(buf[24..32].try_into().unwrap()), 2.0);
        let back = read_matrix_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = [0u8; 16];
        assert!(matches!(read_matrix_from(&mut buf.as_slice()), Err(Error::Format(_))));
    }
}
