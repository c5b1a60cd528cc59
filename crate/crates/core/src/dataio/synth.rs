//! Synthetic movies with planted scene, turning-point and synopsis structure.
//!
//! A movie is a sequence of scenes, each with a latent vector. Shot features
//! of modality `m` are `A_m · h + noise`, where `h` is the scene latent plus
//! a turning-point signature on the shots of each turning-point sentence, and
//! `A_m` is a fixed per-modality map shared across all movies of a world.
//! Streams are sampled at 1 Hz over integer-length shots. Synopsis sentences
//! cover contiguous shot spans and equal the mean pooled text-modality row
//! of their span, plus optional noise.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{
    assign_and_pool, BinaryMatrix, Interval, ModalityStream, MovieSample, NUM_TURNING_POINTS,
};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Theory positions of the five turning points as fractions of the movie.
pub const TP_POSITIONS: [f64; NUM_TURNING_POINTS] = [0.10, 0.25, 0.50, 0.75, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub shots: usize,
    pub scenes: usize,
    /// 0 disables the synopsis, turning points and gold sync.
    pub sentences: usize,
    pub modality_dims: Vec<usize>,
    pub latent_dim: usize,
    /// Per-sample Gaussian noise.
    pub noise: f64,
    pub synopsis_noise: f64,
    /// Uniform jitter of planted turning points, as a fraction of the movie.
    pub tp_jitter: f64,
    /// Scale of the turning-point signature added to the latent.
    pub tp_signal: f64,
    pub max_shot_seconds: u32,
    /// Seed of the modality maps and signatures shared by all movies.
    pub world_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            shots: 200,
            scenes: 10,
            sentences: 12,
            modality_dims: vec![12, 8],
            latent_dim: 8,
            noise: 0.3,
            synopsis_noise: 0.0,
            tp_jitter: 0.02,
            tp_signal: 1.0,
            max_shot_seconds: 3,
            world_seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(20..=3000).contains(&self.shots) {
            return bad(format!("shots = {} outside [20, 3000]", self.shots));
        }
        if self.scenes < 2 {
            return bad(format!("scenes = {} must be at least 2", self.scenes));
        }
        if self.scenes > self.shots {
            return bad(format!(
                "scenes = {} exceeds shots = {}",
                self.scenes, self.shots
            ));
        }
        if self.sentences > self.shots {
            return bad(format!(
                "sentences = {} exceeds shots = {}",
                self.sentences, self.shots
            ));
        }
        if self.modality_dims.is_empty() || self.modality_dims.contains(&0) {
            return bad("need at least one modality, all with positive width".into());
        }
        if self.latent_dim == 0 || self.max_shot_seconds == 0 {
            return bad("latent_dim and max_shot_seconds must be positive".into());
        }
        if !(self.noise >= 0.0
            && self.synopsis_noise >= 0.0
            && self.tp_jitter >= 0.0
            && self.tp_signal >= 0.0)
        {
            return bad("noise, jitter and signal must be non-negative".into());
        }
        Ok(())
    }

    /// Index of the modality the synopsis is expressed in (the last one).
    pub fn text_modality(&self) -> usize {
        self.modality_dims.len() - 1
    }
}

struct World {
    maps: Vec<Tensor>,
    signatures: Vec<Vec<f64>>,
}

impl World {
    fn new(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.world_seed);
        let k = cfg.latent_dim;
        let std = 1.0 / (k as f64).sqrt();
        let maps = cfg
            .modality_dims
            .iter()
            .map(|&d| {
                let data = (0..d * k).map(|_| std * gaussian(&mut rng)).collect();
                Tensor::new(vec![d, k], data).expect("shape")
            })
            .collect();
        let signatures = (0..NUM_TURNING_POINTS)
            .map(|_| (0..k).map(|_| gaussian(&mut rng)).collect())
            .collect();
        World { maps, signatures }
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Contiguous sentence spans as start indices; boundaries snap to scene
/// starts when there are enough of them.
fn sentence_starts(shots: usize, sentences: usize, scene_starts: &[usize]) -> Vec<usize> {
    let cuts: Vec<usize> = scene_starts[1..].to_vec();
    let mut starts = vec![0];
    let mut prev = 0usize;
    let mut ci = 0usize;
    for t in 1..sentences {
        let target = t as f64 * shots as f64 / sentences as f64;
        let remaining = sentences - 1 - t;
        if cuts.len() >= sentences - 1 {
            // candidates after the previous pick that leave room for the rest
            let hi = cuts.len() - remaining;
            let best = (ci..hi)
                .min_by(|&a, &b| {
                    (cuts[a] as f64 - target)
                        .abs()
                        .partial_cmp(&(cuts[b] as f64 - target).abs())
                        .unwrap()
                })
                .expect("room reserved");
            starts.push(cuts[best]);
            ci = best + 1;
            prev = cuts[best];
        } else {
            let pos = (target.round() as usize)
                .max(prev + 1)
                .min(shots - 1 - remaining);
            starts.push(pos);
            prev = pos;
        }
    }
    starts
}

fn span_of(starts: &[usize], total: usize, i: usize) -> std::ops::Range<usize> {
    let end = starts.get(i + 1).copied().unwrap_or(total);
    starts[i]..end
}

/// Generates one movie. Bit-identical for equal `(cfg, seed)`.
pub fn synth_movie(cfg: &SynthConfig, seed: u64) -> Result<MovieSample> {
    cfg.validate()?;
    let world = World::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let l_sh = cfg.shots;

    let mut t = 0.0;
    let mut shots = Vec::with_capacity(l_sh);
    for _ in 0..l_sh {
        let d = f64::from(rng.random_range(1..=cfg.max_shot_seconds));
        shots.push(Interval::new(t, t + d));
        t += d;
    }

    let mut scene_starts: Vec<usize> = index::sample(&mut rng, l_sh - 1, cfg.scenes - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    scene_starts.sort_unstable();
    scene_starts.insert(0, 0);
    let mut scene_of = vec![0usize; l_sh];
    for s in 0..cfg.scenes {
        for i in span_of(&scene_starts, l_sh, s) {
            scene_of[i] = s;
        }
    }
    let mut scene_labels = vec![0u8; l_sh];
    for &s in &scene_starts[1..] {
        scene_labels[s - 1] = 1;
    }
    let latents: Vec<Vec<f64>> = (0..cfg.scenes)
        .map(|_| (0..cfg.latent_dim).map(|_| gaussian(&mut rng)).collect())
        .collect();
    let mut hidden: Vec<Vec<f64>> = scene_of.iter().map(|&s| latents[s].clone()).collect();

    let l_syn = cfg.sentences;
    let mut sent_starts = Vec::new();
    let mut tp_labels = None;
    if l_syn > 0 {
        sent_starts = sentence_starts(l_sh, l_syn, &scene_starts);
        let mut tps = Vec::with_capacity(NUM_TURNING_POINTS);
        for (n, frac) in TP_POSITIONS.iter().enumerate() {
            let jitter = if cfg.tp_jitter > 0.0 {
                rng.random_range(-cfg.tp_jitter..=cfg.tp_jitter)
            } else {
                0.0
            };
            let pos = ((frac + jitter) * l_sh as f64)
                .round()
                .clamp(0.0, (l_sh - 1) as f64) as usize;
            let sent = sent_starts.partition_point(|&s| s <= pos) - 1;
            for i in span_of(&sent_starts, l_sh, sent) {
                for (h, sig) in hidden[i].iter_mut().zip(&world.signatures[n]) {
                    *h += cfg.tp_signal * sig;
                }
            }
            tps.push(vec![sent]);
        }
        tp_labels = Some(tps);
    }

    let mut streams = Vec::with_capacity(cfg.modality_dims.len());
    for (m, map) in world.maps.iter().enumerate() {
        let d = map.rows();
        let mut samples = Vec::new();
        let mut intervals = Vec::new();
        for (i, shot) in shots.iter().enumerate() {
            let mean: Vec<f64> = (0..d)
                .map(|r| map.row(r).iter().zip(&hidden[i]).map(|(a, h)| a * h).sum())
                .collect();
            let mut sec = shot.start;
            while sec < shot.end {
                intervals.push(Interval::new(sec, sec + 1.0));
                samples.extend(mean.iter().map(|&v| v + cfg.noise * gaussian(&mut rng)));
                sec += 1.0;
            }
        }
        let samples = Tensor::new(vec![intervals.len(), d], samples)?;
        streams.push(ModalityStream::new(format!("m{m}"), samples, intervals)?);
    }

    let (synopsis, gold_sync) = if l_syn > 0 {
        let text = cfg.text_modality();
        let (pooled, _) = assign_and_pool(&streams[text], &shots)?;
        let d = pooled.cols();
        let mut rows = Vec::with_capacity(l_syn * d);
        let mut w = BinaryMatrix::zeros(l_sh, l_syn);
        for j in 0..l_syn {
            let span = span_of(&sent_starts, l_sh, j);
            let len = span.len() as f64;
            let mut acc = vec![0.0; d];
            for i in span {
                w.set(i, j, true);
                for (a, v) in acc.iter_mut().zip(pooled.row(i)) {
                    *a += v;
                }
            }
            rows.extend(
                acc.iter()
                    .map(|a| a / len + cfg.synopsis_noise * gaussian(&mut rng)),
            );
        }
        (Some(Tensor::new(vec![l_syn, d], rows)?), Some(w))
    } else {
        (None, None)
    };

    let sample = MovieSample {
        movie_id: format!("synth-{seed:06}"),
        shots,
        streams,
        synopsis,
        scene_labels: Some(scene_labels),
        tp_labels,
        gold_sync,
    };
    sample.validate()?;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(noise: f64, dims: Vec<usize>) -> SynthConfig {
        SynthConfig {
            shots: 60,
            scenes: 6,
            sentences: 5,
            modality_dims: dims,
            noise,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn noiseless_synopsis_is_span_mean() {
        let cfg = small(0.0, vec![6]);
        let m = synth_movie(&cfg, 1).unwrap();
        let pooled = m.pooled().unwrap().features.remove(0);
        let syn = m.synopsis.as_ref().unwrap();
        let w = m.gold_sync.as_ref().unwrap();
        for j in 0..syn.rows() {
            let span: Vec<usize> = (0..m.num_shots()).filter(|&i| w.get(i, j)).collect();
            let mut acc = vec![0.0; pooled.cols()];
            for &i in &span {
                for (a, v) in acc.iter_mut().zip(pooled.row(i)) {
                    *a += v;
                }
            }
            let mean: Vec<f64> = acc.iter().map(|a| a / span.len() as f64).collect();
            assert_eq!(syn.row(j), mean.as_slice());
        }
    }

    #[test]
    fn scene_labels_mark_planted_boundaries() {
        let cfg = small(0.3, vec![4, 4]);
        let m = synth_movie(&cfg, 2).unwrap();
        let lbl = m.scene_labels.as_ref().unwrap();
        assert_eq!(lbl.iter().filter(|&&b| b == 1).count(), cfg.scenes - 1);
        assert_eq!(*lbl.last().unwrap(), 0);
        assert_eq!(
            m.scene_of_shot().unwrap().last().copied(),
            Some(cfg.scenes - 1)
        );
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = small(0.5, vec![3, 5]);
        assert_eq!(synth_movie(&cfg, 9).unwrap(), synth_movie(&cfg, 9).unwrap());
        assert_ne!(
            synth_movie(&cfg, 9).unwrap(),
            synth_movie(&cfg, 10).unwrap()
        );
    }

    #[test]
    fn gold_sync_partitions_shots() {
        let cfg = SynthConfig {
            shots: 300,
            scenes: 24,
            sentences: 12,
            ..SynthConfig::default()
        };
        for seed in 0..5 {
            let m = synth_movie(&cfg, seed).unwrap();
            let w = m.gold_sync.as_ref().unwrap();
            for i in 0..w.rows() {
                assert_eq!(w.row_count(i), 1);
            }
            for j in 0..w.cols() {
                assert!(w.col_count(j) > 0);
            }
            // spans are contiguous and ordered
            let owner: Vec<usize> = (0..w.rows())
                .map(|i| (0..w.cols()).find(|&j| w.get(i, j)).unwrap())
                .collect();
            assert!(owner.windows(2).all(|p| p[1] == p[0] || p[1] == p[0] + 1));
            // sentence boundaries land on scene boundaries when scenes >= sentences
            let lbl = m.scene_labels.as_ref().unwrap();
            for i in 1..owner.len() {
                if owner[i] != owner[i - 1] {
                    assert_eq!(lbl[i - 1], 1);
                }
            }
            let tps = m.tp_labels.as_ref().unwrap();
            assert_eq!(tps.len(), NUM_TURNING_POINTS);
        }
    }

    #[test]
    fn more_sentences_than_scenes_still_partitions() {
        let cfg = SynthConfig {
            shots: 40,
            scenes: 3,
            sentences: 10,
            ..SynthConfig::default()
        };
        let m = synth_movie(&cfg, 4).unwrap();
        let w = m.gold_sync.unwrap();
        assert!((0..w.rows()).all(|i| w.row_count(i) == 1));
        assert!((0..w.cols()).all(|j| w.col_count(j) > 0));
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let mut cfg = small(0.0, vec![4]);
        cfg.scenes = cfg.shots + 1;
        assert!(matches!(synth_movie(&cfg, 0), Err(Error::Config(_))));
        cfg.scenes = 1;
        assert!(synth_movie(&cfg, 0).is_err());
        cfg.scenes = 4;
        cfg.shots = 10;
        assert!(synth_movie(&cfg, 0).is_err());
    }

    #[test]
    fn turning_points_near_theory_positions() {
        let cfg = SynthConfig {
            shots: 300,
            scenes: 24,
            sentences: 12,
            tp_jitter: 0.0,
            ..SynthConfig::default()
        };
        let m = synth_movie(&cfg, 3).unwrap();
        for (n, frac) in TP_POSITIONS.iter().enumerate() {
            let pos = (frac * 300.0).round() as usize;
            assert!(m.tp_gold_shots(n).unwrap().contains(&pos));
        }
    }
}
