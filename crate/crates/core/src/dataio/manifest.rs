//! JSON manifest plus raw little-endian `f64` blobs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{BinaryMatrix, Interval, ModalityStream, MovieSample};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityEntry {
    pub name: String,
    pub dim: usize,
    pub blob: String,
    /// Sample intervals, one `[start, end]` per blob row.
    pub intervals: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub movie_id: String,
    pub shots: Vec<[f64; 2]>,
    pub modalities: Vec<ModalityEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synopsis_blob: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synopsis_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_labels: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tp_labels: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_sync_blob: Option<String>,
}

/// Writes a matrix as raw little-endian `f64`, row-major.
pub fn write_blob(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a blob of width `dim`; the row count comes from the file size and
/// must equal `expected_rows` when given.
pub fn read_blob(path: &Path, dim: usize, expected_rows: Option<usize>) -> Result<Tensor> {
    if dim == 0 {
        return Err(Error::Data(format!(
            "blob {}: width must be positive",
            path.display()
        )));
    }
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingBlob(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    let len = bytes.len() as u64;
    if !len.is_multiple_of(8) {
        return Err(Error::BlobTruncated {
            path: path.to_path_buf(),
            len,
            unit: 8,
        });
    }
    let row_bytes = 8 * dim as u64;
    let rows = (len / row_bytes) as usize;
    if !len.is_multiple_of(row_bytes) || expected_rows.is_some_and(|r| r != rows) {
        return Err(Error::BlobShape {
            path: path.to_path_buf(),
            dim,
            expected_rows,
            found_bytes: len,
        });
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::BlobNonFinite {
            path: path.to_path_buf(),
            index,
        });
    }
    Tensor::new(vec![rows, dim], data)
}

fn to_pairs(iv: &[Interval]) -> Vec<[f64; 2]> {
    iv.iter().map(|i| [i.start, i.end]).collect()
}

fn from_pairs(p: &[[f64; 2]]) -> Vec<Interval> {
    p.iter().map(|&[s, e]| Interval::new(s, e)).collect()
}

/// Sanitized file stem for blob names.
fn stem(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes `<dir>/<movie_id>.json` and its blobs next to it; returns the
/// manifest path.
pub fn save_manifest(sample: &MovieSample, dir: &Path) -> Result<PathBuf> {
    sample.validate()?;
    fs::create_dir_all(dir)?;
    let id = stem(&sample.movie_id);
    let mut modalities = Vec::with_capacity(sample.streams.len());
    for (m, s) in sample.streams.iter().enumerate() {
        let blob = format!("{id}.mod{m}.f64");
        write_blob(&dir.join(&blob), &s.samples)?;
        modalities.push(ModalityEntry {
            name: s.name.clone(),
            dim: s.dim(),
            blob,
            intervals: to_pairs(&s.intervals),
        });
    }
    let mut manifest = Manifest {
        movie_id: sample.movie_id.clone(),
        shots: to_pairs(&sample.shots),
        modalities,
        synopsis_blob: None,
        synopsis_dim: None,
        scene_labels: sample.scene_labels.clone(),
        tp_labels: sample.tp_labels.clone(),
        gold_sync_blob: None,
    };
    if let Some(syn) = &sample.synopsis {
        let blob = format!("{id}.synopsis.f64");
        write_blob(&dir.join(&blob), syn)?;
        manifest.synopsis_blob = Some(blob);
        manifest.synopsis_dim = Some(syn.cols());
    }
    if let Some(w) = &sample.gold_sync {
        let blob = format!("{id}.gold_sync.f64");
        write_blob(&dir.join(&blob), &w.to_tensor())?;
        manifest.gold_sync_blob = Some(blob);
    }
    let path = dir.join(format!("{id}.json"));
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}

pub fn load_manifest(path: &Path) -> Result<MovieSample> {
    let text = fs::read_to_string(path)?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut streams = Vec::with_capacity(manifest.modalities.len());
    for entry in &manifest.modalities {
        let samples = read_blob(
            &dir.join(&entry.blob),
            entry.dim,
            Some(entry.intervals.len()),
        )?;
        streams.push(ModalityStream::new(
            entry.name.clone(),
            samples,
            from_pairs(&entry.intervals),
        )?);
    }
    let synopsis = match (&manifest.synopsis_blob, manifest.synopsis_dim) {
        (Some(blob), Some(dim)) => Some(read_blob(&dir.join(blob), dim, None)?),
        (None, None) => None,
        _ => {
            return Err(Error::Data(
                "synopsis_blob and synopsis_dim must appear together".into(),
            ))
        }
    };
    let gold_sync = match &manifest.gold_sync_blob {
        Some(blob) => {
            let cols = synopsis
                .as_ref()
                .map(Tensor::rows)
                .ok_or_else(|| Error::Data("gold_sync_blob requires a synopsis".into()))?;
            let t = read_blob(&dir.join(blob), cols, Some(manifest.shots.len()))?;
            Some(BinaryMatrix::from_tensor(&t)?)
        }
        None => None,
    };
    let sample = MovieSample {
        movie_id: manifest.movie_id,
        shots: from_pairs(&manifest.shots),
        streams,
        synopsis,
        scene_labels: manifest.scene_labels,
        tp_labels: manifest.tp_labels,
        gold_sync,
    };
    sample.validate()?;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_movie, SynthConfig};

    fn cfg() -> SynthConfig {
        SynthConfig {
            shots: 30,
            scenes: 4,
            sentences: 4,
            modality_dims: vec![8, 3],
            ..SynthConfig::default()
        }
    }

    #[test]
    fn round_trip_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_movie(&cfg(), 5).unwrap();
        let path = save_manifest(&m, dir.path()).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), m);
    }

    #[test]
    fn wrong_width_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_movie(&cfg(), 5).unwrap();
        let path = save_manifest(&m, dir.path()).unwrap();
        // rewrite modality 0 (dim 8) with 7 columns worth of rows
        let rows = m.streams[0].samples.rows();
        let seven = Tensor::zeros(&[rows, 7]);
        write_blob(&dir.path().join("synth-000005.mod0.f64"), &seven).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(matches!(err, Error::BlobShape { dim: 8, .. }), "{err}");
    }

    #[test]
    fn truncated_blob_reports_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_movie(&cfg(), 5).unwrap();
        let path = save_manifest(&m, dir.path()).unwrap();
        let blob = dir.path().join("synth-000005.mod1.f64");
        let mut bytes = fs::read(&blob).unwrap();
        let full = bytes.len();
        bytes.truncate(full - 3);
        fs::write(&blob, bytes).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(matches!(err, Error::BlobTruncated { .. }));
        assert!(err.to_string().contains(&format!("{}", full - 3)), "{err}");
        assert_eq!(err.class(), crate::ErrorClass::Io);
    }

    #[test]
    fn missing_and_non_finite_blobs() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_movie(&cfg(), 5).unwrap();
        let path = save_manifest(&m, dir.path()).unwrap();
        let syn = dir.path().join("synth-000005.synopsis.f64");
        let mut t = m.synopsis.clone().unwrap();
        t.data_mut()[2] = f64::NAN;
        write_blob(&syn, &t).unwrap();
        assert!(matches!(
            load_manifest(&path),
            Err(Error::BlobNonFinite { index: 2, .. })
        ));
        fs::remove_file(&syn).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::MissingBlob(_))));
    }

    #[test]
    fn unknown_manifest_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        fs::write(
            &p,
            r#"{"movie_id":"x","shots":[],"modalities":[],"extra":1}"#,
        )
        .unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Json(_))));
    }
}
