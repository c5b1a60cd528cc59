use crate::dataio::{Interval, ModalityStream};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Mean-pooled raw features, one `[L_sh × D^m]` matrix per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledShotFeatures {
    pub features: Vec<Tensor>,
    /// Per modality, shots that had no overlapping sample (zero rows).
    pub empty_shots: Vec<Vec<usize>>,
}

impl PooledShotFeatures {
    pub fn num_modalities(&self) -> usize {
        self.features.len()
    }

    pub fn has_warnings(&self) -> bool {
        self.empty_shots.iter().any(|e| !e.is_empty())
    }
}

/// Averages every sample whose interval overlaps a shot with positive length.
/// Returns the pooled matrix and the shots that received no sample.
pub fn assign_and_pool(
    stream: &ModalityStream,
    shots: &[Interval],
) -> Result<(Tensor, Vec<usize>)> {
    if stream.intervals.is_empty() {
        return Err(Error::Data(format!("stream `{}` is empty", stream.name)));
    }
    stream.validate()?;
    if let Some(bad) = shots.iter().position(|s| !(s.start < s.end)) {
        return Err(Error::Data(format!(
            "shot {bad} has a non-positive interval"
        )));
    }
    let dim = stream.dim();
    let longest = stream
        .intervals
        .iter()
        .map(|iv| iv.end - iv.start)
        .fold(0.0, f64::max);
    let mut out = Tensor::zeros(&[shots.len(), dim]);
    let mut empty = Vec::new();
    for (i, shot) in shots.iter().enumerate() {
        // samples are sorted by start: candidates start before the shot ends
        // and no earlier than `shot.start - longest`
        let hi = stream.intervals.partition_point(|iv| iv.start < shot.end);
        let lo = stream.intervals[..hi].partition_point(|iv| iv.start < shot.start - longest);
        let mut count = 0usize;
        let row = &mut out.data_mut()[i * dim..(i + 1) * dim];
        for j in lo..hi {
            if stream.intervals[j].overlaps(shot) {
                for (acc, v) in row.iter_mut().zip(stream.samples.row(j)) {
                    *acc += v;
                }
                count += 1;
            }
        }
        if count == 0 {
            empty.push(i);
        } else {
            let inv = count as f64;
            row.iter_mut().for_each(|v| *v /= inv);
        }
    }
    Ok((out, empty))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(values: &[f64], intervals: &[(f64, f64)]) -> ModalityStream {
        ModalityStream::new(
            "m",
            Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap(),
            intervals
                .iter()
                .map(|&(s, e)| Interval::new(s, e))
                .collect(),
        )
        .unwrap()
    }

    fn brute_force(stream: &ModalityStream, shot: &Interval) -> Option<f64> {
        let hits: Vec<f64> = stream
            .intervals
            .iter()
            .zip(stream.samples.data())
            .filter(|(iv, _)| iv.start.max(shot.start) < iv.end.min(shot.end))
            .map(|(_, &v)| v)
            .collect();
        (!hits.is_empty()).then(|| hits.iter().sum::<f64>() / hits.len() as f64)
    }

    #[test]
    fn single_long_sample() {
        let s = stream(&[4.5], &[(0.0, 10.0)]);
        let (p, e) = assign_and_pool(&s, &[Interval::new(2.0, 5.0)]).unwrap();
        assert_eq!(p.data(), &[4.5]);
        assert!(e.is_empty());
    }

    #[test]
    fn three_one_second_samples() {
        let s = stream(&[1.0, 2.0, 3.0], &[(0.0, 1.0), (1.0, 2.0), (2.0, 3.0)]);
        let shot = Interval::new(0.5, 2.5);
        let (p, _) = assign_and_pool(&s, &[shot]).unwrap();
        assert_eq!(p.data(), &[2.0]);
        assert_eq!(brute_force(&s, &shot), Some(2.0));
    }

    #[test]
    fn sliding_ten_second_windows() {
        // 10 s windows with 1 s stride, value = window start
        let starts: Vec<f64> = (0..40).map(f64::from).collect();
        let iv: Vec<(f64, f64)> = starts.iter().map(|&s| (s, s + 10.0)).collect();
        let s = stream(&starts, &iv);
        let shot = Interval::new(20.0, 21.0);
        let contributors: Vec<f64> = starts
            .iter()
            .copied()
            .filter(|&st| Interval::new(st, st + 10.0).overlaps(&shot))
            .collect();
        assert_eq!(contributors, (11..=20).map(f64::from).collect::<Vec<_>>());
        let (p, _) = assign_and_pool(&s, &[shot]).unwrap();
        assert!((p.data()[0] - 15.5).abs() < 1e-12);
    }

    #[test]
    fn touching_endpoints_do_not_overlap() {
        let s = stream(&[7.0], &[(0.0, 1.0)]);
        let (p, e) = assign_and_pool(&s, &[Interval::new(1.0, 2.0)]).unwrap();
        assert_eq!(p.data(), &[0.0]);
        assert_eq!(e, vec![0]);
    }

    #[test]
    fn empty_stream_is_an_error() {
        let s = ModalityStream {
            name: "x".into(),
            samples: Tensor::zeros(&[0, 3]),
            intervals: vec![],
        };
        assert!(assign_and_pool(&s, &[Interval::new(0.0, 1.0)]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn matches_brute_force(
            raw in proptest::collection::vec((0.0f64..50.0, 0.1f64..12.0, -3.0f64..3.0), 1..40),
            shot_raw in proptest::collection::vec((0.0f64..60.0, 0.1f64..5.0), 1..10),
        ) {
            let mut raw = raw;
            raw.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let values: Vec<f64> = raw.iter().map(|r| r.2).collect();
            let iv: Vec<(f64, f64)> = raw.iter().map(|r| (r.0, r.0 + r.1)).collect();
            let s = stream(&values, &iv);
            let shots: Vec<Interval> = shot_raw.iter().map(|&(a, d)| Interval::new(a, a + d)).collect();
            let (p, empty) = assign_and_pool(&s, &shots).unwrap();
            for (i, shot) in shots.iter().enumerate() {
                match brute_force(&s, shot) {
                    Some(m) => proptest::prop_assert!((p.data()[i] - m).abs() < 1e-12),
                    None => {
                        proptest::prop_assert!(empty.contains(&i));
                        proptest::prop_assert_eq!(p.data()[i], 0.0);
                    }
                }
            }
        }

        #[test]
        fn permutation_invariant(perm_seed in 0u64..500) {
            use rand::{seq::SliceRandom, SeedableRng};
            let values: Vec<f64> = (0..8).map(|k| (k as f64 * 1.37).sin()).collect();
            let mut order: Vec<usize> = (0..8).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
            // identical intervals so any order is still sorted by start
            let iv = vec![(0.0, 4.0); 8];
            let a = stream(&values, &iv);
            let permuted: Vec<f64> = order.iter().map(|&k| values[k]).collect();
            let b = stream(&permuted, &iv);
            let shot = [Interval::new(1.0, 2.0)];
            let pa = assign_and_pool(&a, &shot).unwrap().0;
            let pb = assign_and_pool(&b, &shot).unwrap().0;
            proptest::prop_assert!((pa.data()[0] - pb.data()[0]).abs() < 1e-12);
        }
    }
}
