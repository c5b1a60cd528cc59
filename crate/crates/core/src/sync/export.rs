use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SyncMatrix;
use crate::dataio::BinaryMatrix;
use crate::error::{Error, Result};

/// JSON form of a [`SyncMatrix`]: each row is a list of `[start, length]`
/// runs of ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncExport {
    pub movie_id: String,
    pub shots: usize,
    pub sentences: usize,
    pub xi: f64,
    pub lambda: Vec<f64>,
    pub runs: Vec<Vec<[usize; 2]>>,
}

impl SyncExport {
    pub fn new(movie_id: &str, m: &SyncMatrix) -> Self {
        let runs = (0..m.w.rows())
            .map(|i| {
                let mut out: Vec<[usize; 2]> = Vec::new();
                for j in 0..m.w.cols() {
                    if !m.w.get(i, j) {
                        continue;
                    }
                    match out.last_mut() {
                        Some(r) if r[0] + r[1] == j => r[1] += 1,
                        _ => out.push([j, 1]),
                    }
                }
                out
            })
            .collect();
        SyncExport {
            movie_id: movie_id.to_string(),
            shots: m.w.rows(),
            sentences: m.w.cols(),
            xi: m.xi,
            lambda: m.lambda.clone(),
            runs,
        }
    }

    pub fn to_matrix(&self) -> Result<SyncMatrix> {
        if self.runs.len() != self.shots || self.lambda.len() != self.sentences {
            return Err(Error::Data(
                "sync export: row or threshold count mismatch".into(),
            ));
        }
        let mut w = BinaryMatrix::zeros(self.shots, self.sentences);
        for (i, row) in self.runs.iter().enumerate() {
            for &[start, len] in row {
                if start + len > self.sentences {
                    return Err(Error::Data(format!(
                        "sync export: run past the last sentence in row {i}"
                    )));
                }
                (start..start + len).for_each(|j| w.set(i, j, true));
            }
        }
        Ok(SyncMatrix {
            w,
            lambda: self.lambda.clone(),
            xi: self.xi,
        })
    }
}

/// Binary PGM, one pixel per entry, shots down and sentences across.
pub fn write_pgm(path: &Path, w: &BinaryMatrix) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", w.cols(), w.rows()).into_bytes();
    bytes.extend(w.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_length_round_trip() {
        let w = BinaryMatrix::from_fn(4, 6, |i, j| (j >= i && j < i + 3) || j == 5);
        let m = SyncMatrix {
            w,
            lambda: vec![0.5; 6],
            xi: 0.3,
        };
        let e = SyncExport::new("x", &m);
        assert_eq!(e.runs[0], vec![[0, 3], [5, 1]]);
        assert_eq!(e.runs[3], vec![[3, 3]]);
        let json = serde_json::to_string(&e).unwrap();
        let back: SyncExport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_matrix().unwrap(), m);
    }

    #[test]
    fn pgm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.pgm");
        let w = BinaryMatrix::from_fn(2, 3, |i, j| i == j);
        write_pgm(&p, &w).unwrap();
        let bytes = fs::read(&p).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[255, 0, 0, 0, 255, 0]);
    }
}
