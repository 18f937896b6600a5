//! On-disk formats: a small binary container for f64 matrices and a
//! JSON-lines metrics log. Both are byte-deterministic for identical inputs;
//! nothing here writes timestamps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt as _, WriteBytesExt as _};
use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};

const MATRIX_MAGIC: &[u8; 4] = b"EMEL";
const MATRIX_VERSION: u32 = 1;
/// Refuse to allocate matrices beyond this many entries when reading.
const MAX_MATRIX_ENTRIES: u64 = 1 << 28;

/// Write a row-major f64 matrix with a magic/version/dims header.
pub fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MATRIX_MAGIC)?;
    w.write_u32::<LittleEndian>(MATRIX_VERSION)?;
    w.write_u64::<LittleEndian>(m.nrows() as u64)?;
    w.write_u64::<LittleEndian>(m.ncols() as u64)?;
    for &v in m.iter() {
        w.write_f64::<LittleEndian>(v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let mut r = BufReader::new(File::open(path).map_err(|e| {
        Error::MissingInput(format!("matrix {}: {e}", path.display()))
    })?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MATRIX_MAGIC {
        return Err(Error::Parse(format!(
            "matrix {}: bad magic {magic:?}",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != MATRIX_VERSION {
        return Err(Error::Parse(format!(
            "matrix {}: unsupported version {version}",
            path.display()
        )));
    }
    let rows = r.read_u64::<LittleEndian>()?;
    let cols = r.read_u64::<LittleEndian>()?;
    if rows == 0 || cols == 0 || rows.saturating_mul(cols) > MAX_MATRIX_ENTRIES {
        return Err(Error::Parse(format!(
            "matrix {}: implausible dims {rows} x {cols}",
            path.display()
        )));
    }
    let mut data = vec![0.0f64; (rows * cols) as usize];
    r.read_f64_into::<LittleEndian>(&mut data)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Parse(format!(
            "matrix {}: trailing bytes after payload",
            path.display()
        )));
    }
    Array2::from_shape_vec((rows as usize, cols as usize), data)
        .map_err(|e| Error::Parse(format!("matrix {}: {e}", path.display())))
}

/// Append-only JSON-lines metrics log. Each record is one JSON object per
/// line; field order follows the serialized struct, so identical runs give
/// byte-identical files.
pub struct MetricsWriter {
    w: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            w: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record)?;
        self.w.write_all(line.as_bytes())?;
        self.w.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

/// Read every line of a JSON-lines file as a generic value, for tools and
/// tests that inspect metric logs.
pub fn read_json_lines(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::MissingInput(format!("metrics {}: {e}", path.display()))
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    #[test]
    fn matrix_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let mut rng = rng_from_seed(90);
        let m = Array2::from_shape_simple_fn((17, 5), || rng.gen_range(-10.0..10.0));
        write_matrix(&path, &m).unwrap();
        let back = read_matrix(&path).unwrap();
        assert_eq!(m.dim(), back.dim());
        for (a, b) in m.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn matrix_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = Array2::from_elem((3, 4), 1.5);
        write_matrix(&path, &m).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_matrix(&path).is_err());

        write_matrix(&path, &m).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_matrix(&path).is_err());

        write_matrix(&path, &m).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_matrix(&path).is_err());
    }

    #[test]
    fn missing_matrix_reports_missing_input() {
        let err = read_matrix(Path::new("/nonexistent/m.bin")).unwrap_err();
        assert!(matches!(err, Error::MissingInput(_)));
    }

    #[test]
    fn metrics_files_are_deterministic() {
        #[derive(Serialize)]
        struct Rec {
            step: usize,
            loss: f64,
        }
        let dir = tempfile::tempdir().unwrap();
        let write = |path: &Path| {
            let mut w = MetricsWriter::create(path).unwrap();
            for step in 0..5 {
                w.write(&Rec {
                    step,
                    loss: 1.0 / (step + 1) as f64,
                })
                .unwrap();
            }
            w.finish().unwrap();
        };
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        write(&p1);
        write(&p2);
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let records = read_json_lines(&p1).unwrap();
        assert_eq!(records.len(), 5);
        assert_eq!(records[0]["step"], 0);
    }
}
