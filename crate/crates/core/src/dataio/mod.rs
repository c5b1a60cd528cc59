//! Per-shot feature ingestion and synthetic movie generation.

mod manifest;
mod pool;
mod synth;

pub use manifest::{load_manifest, read_blob, save_manifest, write_blob, Manifest, ModalityEntry};
pub use pool::{assign_and_pool, PooledShotFeatures};
pub use synth::{synth_movie, SynthConfig, TP_POSITIONS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Number of turning points in the five-pivot narrative structure.
pub const NUM_TURNING_POINTS: usize = 5;

/// Half-open time span in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Self {
        Interval { start, end }
    }

    /// Strictly positive-length intersection; touching endpoints do not count.
    pub fn overlaps(&self, other: &Interval) -> bool {
        self.start.max(other.start) < self.end.min(other.end)
    }

    fn is_valid(&self) -> bool {
        self.start.is_finite() && self.end.is_finite() && self.start < self.end
    }
}

/// Raw features of one modality, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityStream {
    pub name: String,
    pub samples: Tensor,
    pub intervals: Vec<Interval>,
}

impl ModalityStream {
    pub fn new(name: impl Into<String>, samples: Tensor, intervals: Vec<Interval>) -> Result<Self> {
        let s = ModalityStream {
            name: name.into(),
            samples,
            intervals,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.rank() != 2 || self.dim() == 0 {
            return Err(Error::Data(format!(
                "stream `{}`: samples must be a non-empty-width matrix, got {:?}",
                self.name,
                self.samples.shape()
            )));
        }
        if self.samples.rows() != self.intervals.len() {
            return Err(Error::Data(format!(
                "stream `{}`: {} sample rows but {} intervals",
                self.name,
                self.samples.rows(),
                self.intervals.len()
            )));
        }
        if let Some(bad) = self.intervals.iter().position(|iv| !iv.is_valid()) {
            return Err(Error::Data(format!(
                "stream `{}`: invalid interval at {bad}",
                self.name
            )));
        }
        if self.intervals.windows(2).any(|w| w[1].start < w[0].start) {
            return Err(Error::Data(format!(
                "stream `{}`: intervals not sorted by start",
                self.name
            )));
        }
        Ok(())
    }
}

/// Dense 0/1 matrix, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BinaryMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        BinaryMatrix {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        BinaryMatrix { rows, cols, bits }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.cols + c] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn row_count(&self, r: usize) -> usize {
        (0..self.cols).filter(|&c| self.get(r, c)).count()
    }

    pub fn col_count(&self, c: usize) -> usize {
        (0..self.rows).filter(|&r| self.get(r, c)).count()
    }

    pub fn transpose(&self) -> BinaryMatrix {
        BinaryMatrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self ⊆ other` entrywise.
    pub fn is_subset_of(&self, other: &BinaryMatrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.rows, self.cols],
            self.bits
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        )
        .expect("shape matches bits")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::Data(format!(
                "binary matrix must be 2-D, got {:?}",
                t.shape()
            )));
        }
        let mut bits = Vec::with_capacity(t.len());
        for &v in t.data() {
            match v {
                0.0 => bits.push(false),
                1.0 => bits.push(true),
                other => return Err(Error::Data(format!("binary matrix holds {other}"))),
            }
        }
        Ok(BinaryMatrix {
            rows: t.rows(),
            cols: t.cols(),
            bits,
        })
    }
}

/// Everything known about one movie.
#[derive(Debug, Clone, PartialEq)]
pub struct MovieSample {
    pub movie_id: String,
    pub shots: Vec<Interval>,
    pub streams: Vec<ModalityStream>,
    /// `[L_syn × D_text]`
    pub synopsis: Option<Tensor>,
    /// 1 on the last shot of every scene except the final one.
    pub scene_labels: Option<Vec<u8>>,
    /// Gold synopsis sentence indices per turning point.
    pub tp_labels: Option<Vec<Vec<usize>>>,
    /// `[L_sh × L_syn]`
    pub gold_sync: Option<BinaryMatrix>,
}

impl MovieSample {
    pub fn num_shots(&self) -> usize {
        self.shots.len()
    }

    pub fn num_sentences(&self) -> usize {
        self.synopsis.as_ref().map_or(0, Tensor::rows)
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.movie_id;
        if self.shots.is_empty() {
            return Err(Error::Data(format!("movie `{id}` has no shots")));
        }
        if self.shots.iter().any(|s| !s.is_valid()) {
            return Err(Error::Data(format!("movie `{id}`: invalid shot interval")));
        }
        if self.shots.windows(2).any(|w| w[1].start < w[0].end) {
            return Err(Error::Data(format!(
                "movie `{id}`: shots overlap or are unsorted"
            )));
        }
        for s in &self.streams {
            s.validate()?;
        }
        let l_sh = self.num_shots();
        if let Some(lbl) = &self.scene_labels {
            if lbl.len() != l_sh {
                return Err(Error::Data(format!(
                    "movie `{id}`: {} scene labels for {l_sh} shots",
                    lbl.len()
                )));
            }
            if lbl.iter().any(|&v| v > 1) {
                return Err(Error::Data(format!(
                    "movie `{id}`: scene labels must be 0/1"
                )));
            }
        }
        let l_syn = self.num_sentences();
        if let Some(tps) = &self.tp_labels {
            if tps.iter().flatten().any(|&j| j >= l_syn) {
                return Err(Error::Data(format!(
                    "movie `{id}`: turning-point sentence index out of range (L_syn = {l_syn})"
                )));
            }
        }
        if let Some(w) = &self.gold_sync {
            if w.rows() != l_sh || w.cols() != l_syn {
                return Err(Error::Data(format!(
                    "movie `{id}`: gold sync is {}×{}, expected {l_sh}×{l_syn}",
                    w.rows(),
                    w.cols()
                )));
            }
        }
        Ok(())
    }

    /// Pools every stream onto the shot grid.
    pub fn pooled(&self) -> Result<PooledShotFeatures> {
        let mut features = Vec::with_capacity(self.streams.len());
        let mut empty_shots = Vec::with_capacity(self.streams.len());
        for s in &self.streams {
            let (f, e) = assign_and_pool(s, &self.shots)?;
            features.push(f);
            empty_shots.push(e);
        }
        Ok(PooledShotFeatures {
            features,
            empty_shots,
        })
    }

    /// Scene index of every shot, derived from the boundary labels.
    pub fn scene_of_shot(&self) -> Option<Vec<usize>> {
        let lbl = self.scene_labels.as_ref()?;
        let mut scene = 0;
        Some(
            lbl.iter()
                .map(|&b| {
                    let s = scene;
                    if b == 1 {
                        scene += 1;
                    }
                    s
                })
                .collect(),
        )
    }

    /// Shots assigned to any gold sentence of turning point `n`.
    pub fn tp_gold_shots(&self, n: usize) -> Option<Vec<usize>> {
        let tps = self.tp_labels.as_ref()?;
        let w = self.gold_sync.as_ref()?;
        Some(
            (0..w.rows())
                .filter(|&i| tps[n].iter().any(|&j| w.get(i, j)))
                .collect(),
        )
    }
}
