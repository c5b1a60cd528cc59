//! Shot↔sentence synchronization: banded thresholded assignment and the
//! symmetric multi-positive contrastive loss.

mod export;

pub use export::{write_pgm, SyncExport};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignfuse::Linear;
use crate::dataio::BinaryMatrix;
use crate::error::{Error, Result};
use crate::numcore::{ParamId, ParamStore, Session, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncConfig {
    /// Band half-width as a fraction of each axis.
    pub xi: f64,
    /// Threshold percentile per sentence, in [0, 1].
    pub percentile: f64,
    pub proj_dim: usize,
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_max: f64,
}

impl Default for SyncConfig {
    fn default() -> Self {
        SyncConfig {
            xi: 0.3,
            percentile: 0.99,
            proj_dim: 128,
            tau_init: 0.07,
            tau_min: 1e-3,
            tau_max: 10.0,
        }
    }
}

impl SyncConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0) || !(0.0..=1.0).contains(&self.percentile) || self.proj_dim == 0 {
            return Err(Error::Config(
                "sync: need xi > 0, percentile in [0, 1], proj_dim > 0".into(),
            ));
        }
        if !(0.0 < self.tau_min && self.tau_min <= self.tau_init && self.tau_init <= self.tau_max) {
            return Err(Error::Config(format!(
                "sync: need 0 < tau_min ≤ tau_init ≤ tau_max, got {} / {} / {}",
                self.tau_min, self.tau_init, self.tau_max
            )));
        }
        Ok(())
    }
}

/// Binary assignment with the thresholds that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncMatrix {
    pub w: BinaryMatrix,
    pub lambda: Vec<f64>,
    pub xi: f64,
}

/// Cosine similarity of every row of `a` against every row of `b`.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.normalize_rows().matmul(&b.normalize_rows().transpose()?)
}

/// Linearly interpolated quantile `q ∈ [0, 1]` at position `q·(n−1)`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Per-sentence thresholds: quantile `q` of each column of `sim`.
pub fn lambda_per_sentence(sim: &Tensor, q: f64) -> Result<Vec<f64>> {
    if sim.rank() != 2 || sim.rows() == 0 {
        return Err(Error::Contract(format!(
            "similarity matrix must have rows, got {:?}",
            sim.shape()
        )));
    }
    let t = sim.transpose()?;
    Ok((0..t.rows()).map(|j| quantile(t.row(j), q)).collect())
}

/// `j < i·L_syn/L_sh + ξ·L_syn` and `i < j·L_sh/L_syn + ξ·L_sh`.
pub fn band_mask(l_sh: usize, l_syn: usize, xi: f64) -> BinaryMatrix {
    let (a, b) = (l_sh as f64, l_syn as f64);
    BinaryMatrix::from_fn(l_sh, l_syn, |i, j| {
        let (i, j) = (i as f64, j as f64);
        j < i * b / a + xi * b && i < j * a / b + xi * a
    })
}

/// Closed-form E-step: `w_ij = 1` iff in band and `m_ij ≥ λ_j`.
pub fn e_step(sim: &Tensor, lambda: &[f64], xi: f64) -> Result<SyncMatrix> {
    if sim.rank() != 2 || lambda.len() != sim.cols() {
        return Err(Error::shape("e_step", sim.shape(), &[lambda.len()]));
    }
    let band = band_mask(sim.rows(), sim.cols(), xi);
    let w = BinaryMatrix::from_fn(sim.rows(), sim.cols(), |i, j| {
        band.get(i, j) && sim.get(i, j) >= lambda[j]
    });
    Ok(SyncMatrix {
        w,
        lambda: lambda.to_vec(),
        xi,
    })
}

/// Similarity, thresholds and assignment in one call.
pub fn synchronize(sim: &Tensor, cfg: &SyncConfig) -> Result<SyncMatrix> {
    let lambda = lambda_per_sentence(sim, cfg.percentile)?;
    e_step(sim, &lambda, cfg.xi)
}

/// One movie's contribution to the contrastive loss.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveItem<'a> {
    /// Unit-norm shot features `[L_sh × P]`.
    pub u: Var,
    /// Unit-norm sentence features `[L_syn × P]`.
    pub v: Var,
    pub w: &'a BinaryMatrix,
}

#[derive(Debug, Clone, Copy)]
pub struct ContrastiveLoss {
    pub loss: Var,
    /// Queries dropped for having no positive key.
    pub skipped_queries: usize,
}

/// Symmetric multi-positive InfoNCE over a batch of movies.
///
/// Positives are `w = 1`. Candidates for a query are its positives, the
/// out-of-band keys of its own movie and every key of the other movies;
/// in-band keys with `w = 0` take no part. Each direction is averaged over
/// its queries and the two directions are summed.
pub fn contrastive_loss(
    tape: &mut Tape,
    items: &[ContrastiveItem],
    inv_tau: Var,
    xi: f64,
) -> Result<ContrastiveLoss> {
    if items.is_empty() {
        return Err(Error::Contract(
            "contrastive loss needs at least one movie".into(),
        ));
    }
    let mut sh_off = vec![0usize];
    let mut syn_off = vec![0usize];
    for it in items {
        let (l_sh, l_syn) = (tape.shape(it.u)[0], tape.shape(it.v)[0]);
        if it.w.rows() != l_sh || it.w.cols() != l_syn {
            return Err(Error::shape(
                "contrastive_loss",
                &[it.w.rows(), it.w.cols()],
                &[l_sh, l_syn],
            ));
        }
        sh_off.push(sh_off.last().unwrap() + l_sh);
        syn_off.push(syn_off.last().unwrap() + l_syn);
    }
    let (n_sh, n_syn) = (*sh_off.last().unwrap(), *syn_off.last().unwrap());
    let mut mask = vec![true; n_sh * n_syn];
    let mut pos = vec![false; n_sh * n_syn];
    for (k, it) in items.iter().enumerate() {
        let band = band_mask(it.w.rows(), it.w.cols(), xi);
        for i in 0..it.w.rows() {
            for j in 0..it.w.cols() {
                let idx = (sh_off[k] + i) * n_syn + syn_off[k] + j;
                pos[idx] = it.w.get(i, j);
                mask[idx] = pos[idx] || !band.get(i, j);
            }
        }
    }
    let us: Vec<Var> = items.iter().map(|it| it.u).collect();
    let vs: Vec<Var> = items.iter().map(|it| it.v).collect();
    let u = if us.len() == 1 {
        us[0]
    } else {
        tape.concat_rows(&us)?
    };
    let v = if vs.len() == 1 {
        vs[0]
    } else {
        tape.concat_rows(&vs)?
    };
    let raw = tape.matmul_nt(u, v)?;
    let logits = tape.scale_by(raw, inv_tau)?;

    let mut skipped = 0usize;
    // shot queries: normalize across sentences
    let mut w_rows = vec![0.0; n_sh * n_syn];
    let row_counts: Vec<usize> = (0..n_sh)
        .map(|i| (0..n_syn).filter(|&j| pos[i * n_syn + j]).count())
        .collect();
    let valid_rows = row_counts.iter().filter(|&&c| c > 0).count();
    skipped += n_sh - valid_rows;
    for i in 0..n_sh {
        if row_counts[i] == 0 {
            continue;
        }
        for j in 0..n_syn {
            if pos[i * n_syn + j] {
                w_rows[i * n_syn + j] = -1.0 / (row_counts[i] as f64 * valid_rows as f64);
            }
        }
    }
    let mut w_cols = vec![0.0; n_sh * n_syn];
    let col_counts: Vec<usize> = (0..n_syn)
        .map(|j| (0..n_sh).filter(|&i| pos[i * n_syn + j]).count())
        .collect();
    let valid_cols = col_counts.iter().filter(|&&c| c > 0).count();
    skipped += n_syn - valid_cols;
    for j in 0..n_syn {
        if col_counts[j] == 0 {
            continue;
        }
        for i in 0..n_sh {
            if pos[i * n_syn + j] {
                w_cols[i * n_syn + j] = -1.0 / (col_counts[j] as f64 * valid_cols as f64);
            }
        }
    }
    let shape = vec![n_sh, n_syn];
    let lp_rows = tape.log_softmax(logits, 1, Some(mask.clone()))?;
    let lp_cols = tape.log_softmax(logits, 0, Some(mask))?;
    let a = tape.weighted_sum(lp_rows, Tensor::new(shape.clone(), w_rows)?)?;
    let b = tape.weighted_sum(lp_cols, Tensor::new(shape, w_cols)?)?;
    let loss = tape.add(a, b)?;
    Ok(ContrastiveLoss {
        loss,
        skipped_queries: skipped,
    })
}

/// Projection heads and learnable temperature for synchronization.
#[derive(Debug, Clone)]
pub struct SyncHeads {
    pub shot_proj: Linear,
    pub sentence_proj: Linear,
    /// `log τ`
    pub log_tau: ParamId,
}

impl SyncHeads {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        shot_dim: usize,
        sentence_dim: usize,
        cfg: &SyncConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(SyncHeads {
            shot_proj: Linear::new(
                store,
                &format!("{prefix}.shot_proj"),
                shot_dim,
                cfg.proj_dim,
                rng,
            ),
            sentence_proj: Linear::new(
                store,
                &format!("{prefix}.sentence_proj"),
                sentence_dim,
                cfg.proj_dim,
                rng,
            ),
            log_tau: store.insert(
                format!("{prefix}.log_tau"),
                Tensor::full(&[1], cfg.tau_init.ln()),
            ),
        })
    }

    pub fn shots(&self, s: &mut Session, z: Var) -> Result<Var> {
        let p = self.shot_proj.forward(s, z)?;
        s.tape.normalize_rows(p)
    }

    pub fn sentences(&self, s: &mut Session, z: Var) -> Result<Var> {
        let p = self.sentence_proj.forward(s, z)?;
        s.tape.normalize_rows(p)
    }

    /// `1/τ` as a tape scalar.
    pub fn inv_tau(&self, s: &mut Session) -> Result<Var> {
        let lt = s.param(self.log_tau);
        let neg = s.tape.scale(lt, -1.0)?;
        s.tape.exp(neg)
    }

    pub fn tau(&self, store: &ParamStore) -> f64 {
        store.get(self.log_tau).data()[0].exp()
    }

    /// Keeps `τ` inside `[tau_min, tau_max]`.
    pub fn clamp_tau(&self, store: &mut ParamStore, cfg: &SyncConfig) {
        let v = &mut store.get_mut(self.log_tau).data_mut()[0];
        *v = v.clamp(cfg.tau_min.ln(), cfg.tau_max.ln());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn quantile_conventions() {
        assert_eq!(quantile(&[0.4; 7], 0.99), 0.4);
        let col: Vec<f64> = (0..100).map(f64::from).collect();
        assert!((quantile(&col, 0.99) - 98.01).abs() < 1e-12);
        let sim = mat(&[vec![0.1, -0.5], vec![0.7, 0.2], vec![-0.3, 0.9]]);
        let lam = lambda_per_sentence(&sim, 0.99).unwrap();
        assert!(lam[0] >= -0.3 && lam[0] <= 0.7 && lam[1] >= -0.5 && lam[1] <= 0.9);
    }

    #[test]
    fn band_examples() {
        let b = band_mask(2, 2, 0.3);
        assert!(b.get(0, 0) && b.get(1, 1) && !b.get(0, 1) && !b.get(1, 0));
        assert_eq!(band_mask(5, 3, 1.0).count_ones(), 15);
    }

    #[test]
    fn e_step_examples() {
        let z = Tensor::zeros(&[3, 2]);
        assert_eq!(e_step(&z, &[0.1, 0.2], 0.3).unwrap().w.count_ones(), 0);
        let m = mat(&[vec![0.9, 0.8], vec![0.2, 0.7]]);
        let w = e_step(&m, &[0.5, 0.5], 0.3).unwrap().w;
        assert_eq!(w, BinaryMatrix::from_fn(2, 2, |i, j| i == j));
    }

    fn brute_force(sim: &Tensor, lambda: &[f64], xi: f64) -> BinaryMatrix {
        let (r, c) = (sim.rows(), sim.cols());
        let band = band_mask(r, c, xi);
        let cells: Vec<(usize, usize)> = (0..r)
            .flat_map(|i| (0..c).map(move |j| (i, j)))
            .filter(|&(i, j)| band.get(i, j))
            .collect();
        let mut best = (f64::NEG_INFINITY, BinaryMatrix::zeros(r, c));
        for bits in 0u64..(1 << cells.len()) {
            let mut w = BinaryMatrix::zeros(r, c);
            let mut score = 0.0;
            for (k, &(i, j)) in cells.iter().enumerate() {
                if bits >> k & 1 == 1 {
                    w.set(i, j, true);
                    score += sim.get(i, j) - lambda[j];
                }
            }
            // ties: prefer the larger set, matching the `≥` of the closed form
            if score > best.0 || (score == best.0 && w.count_ones() > best.1.count_ones()) {
                best = (score, w);
            }
        }
        best.1
    }

    proptest::proptest! {
        #[test]
        fn closed_form_is_the_exhaustive_optimum(seed in 0u64..10_000, r in 1usize..=6, c in 1usize..=4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sim = Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let lambda = lambda_per_sentence(&sim, 0.99).unwrap();
            let got = e_step(&sim, &lambda, 0.3).unwrap().w;
            proptest::prop_assert_eq!(got, brute_force(&sim, &lambda, 0.3));
        }

        #[test]
        fn raising_a_threshold_never_adds_ones(seed in 0u64..10_000, bump in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sim = Tensor::new(vec![6, 4], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let lam = lambda_per_sentence(&sim, 0.5).unwrap();
            let mut hi = lam.clone();
            hi[1] += bump;
            let a = e_step(&sim, &lam, 0.4).unwrap().w;
            let b = e_step(&sim, &hi, 0.4).unwrap().w;
            proptest::prop_assert!(b.is_subset_of(&a));
        }

        #[test]
        fn band_grows_with_xi_and_is_symmetric(r in 1usize..40, c in 1usize..40, xi in 0.01f64..1.2, dxi in 0.0f64..0.5) {
            let small = band_mask(r, c, xi);
            proptest::prop_assert!(small.is_subset_of(&band_mask(r, c, xi + dxi)));
            proptest::prop_assert_eq!(small.transpose(), band_mask(c, r, xi));
        }
    }

    fn loss_of(items: &[(Tensor, Tensor, BinaryMatrix)], tau: f64, xi: f64) -> (f64, usize) {
        let mut t = Tape::new();
        let vars: Vec<(Var, Var)> = items
            .iter()
            .map(|(u, v, _)| (t.constant(u.clone()), t.constant(v.clone())))
            .collect();
        let its: Vec<ContrastiveItem> = vars
            .iter()
            .zip(items)
            .map(|(&(u, v), (_, _, w))| ContrastiveItem { u, v, w })
            .collect();
        let inv = t.constant(Tensor::scalar(1.0 / tau));
        let out = contrastive_loss(&mut t, &its, inv, xi).unwrap();
        (t.value(out.loss).item(), out.skipped_queries)
    }

    #[test]
    fn lone_positive_pair_has_zero_loss() {
        let one = mat(&[vec![1.0, 0.0]]);
        let w = BinaryMatrix::from_fn(1, 1, |_, _| true);
        assert_eq!(loss_of(&[(one.clone(), one, w)], 0.07, 0.3).0, 0.0);
    }

    #[test]
    fn two_orthogonal_pairs_across_movies() {
        let e0 = mat(&[vec![1.0, 0.0]]);
        let e1 = mat(&[vec![0.0, 1.0]]);
        let w = BinaryMatrix::from_fn(1, 1, |_, _| true);
        let (l, skipped) = loss_of(
            &[(e0.clone(), e0, w.clone()), (e1.clone(), e1, w)],
            1.0,
            0.3,
        );
        let per_query = (1.0 + (-1.0f64).exp()).ln();
        assert!((l - 2.0 * per_query).abs() < 1e-12, "{l}");
        assert!((l - 0.626_523_6).abs() < 1e-6);
        assert_eq!(skipped, 0);
    }

    #[test]
    fn brute_force_loss_oracle_and_skipped_queries() {
        // one movie, 3 shots × 2 sentences, xi small so the band is the diagonal corridor
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = Tensor::new(
            vec![3, 4],
            (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
        .normalize_rows();
        let v = Tensor::new(
            vec![2, 4],
            (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
        .normalize_rows();
        let mut w = BinaryMatrix::zeros(3, 2);
        w.set(0, 0, true);
        w.set(1, 0, true);
        let xi = 0.3;
        let (got, skipped) = loss_of(&[(u.clone(), v.clone(), w.clone())], 0.5, xi);
        let band = band_mask(3, 2, xi);
        let s = u.matmul(&v.transpose().unwrap()).unwrap().map(|x| x / 0.5);
        let cand = |i: usize, j: usize| w.get(i, j) || !band.get(i, j);
        let mut rows = Vec::new();
        for i in 0..3 {
            let p: Vec<usize> = (0..2).filter(|&j| w.get(i, j)).collect();
            if p.is_empty() {
                continue;
            }
            let lse = (0..2)
                .filter(|&j| cand(i, j))
                .map(|j| s.get(i, j).exp())
                .sum::<f64>()
                .ln();
            rows.push(p.iter().map(|&j| lse - s.get(i, j)).sum::<f64>() / p.len() as f64);
        }
        let mut cols = Vec::new();
        for j in 0..2 {
            let p: Vec<usize> = (0..3).filter(|&i| w.get(i, j)).collect();
            if p.is_empty() {
                continue;
            }
            let lse = (0..3)
                .filter(|&i| cand(i, j))
                .map(|i| s.get(i, j).exp())
                .sum::<f64>()
                .ln();
            cols.push(p.iter().map(|&i| lse - s.get(i, j)).sum::<f64>() / p.len() as f64);
        }
        let want = rows.iter().sum::<f64>() / rows.len() as f64
            + cols.iter().sum::<f64>() / cols.len() as f64;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        // shot 2 and sentence 1 have no positive
        assert_eq!(skipped, 2);
    }

    #[test]
    fn raising_a_positive_similarity_lowers_the_loss() {
        // two one-shot movies, so each query has the other movie as negative
        let w = BinaryMatrix::from_fn(1, 1, |_, _| true);
        let v0 = mat(&[vec![1.0, 0.0]]);
        let v1 = mat(&[vec![0.0, 1.0]]);
        let u1 = mat(&[vec![0.0, 1.0]]);
        let run = |u0: Tensor| {
            loss_of(
                &[
                    (u0, v0.clone(), w.clone()),
                    (u1.clone(), v1.clone(), w.clone()),
                ],
                1.0,
                0.3,
            )
            .0
        };
        assert!(run(mat(&[vec![0.8, 0.6]])) < run(mat(&[vec![0.6, 0.8]])));
    }

    #[test]
    fn loss_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rand_unit = |r: usize| {
            Tensor::new(
                vec![r, 2],
                (0..2 * r).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()
            .normalize_rows()
        };
        let (u, v) = (rand_unit(5), rand_unit(3));
        let w = BinaryMatrix::from_fn(5, 3, |i, j| (i * 3) / 5 == j);
        let th: f64 = 0.83;
        let rot = mat(&[vec![th.cos(), th.sin()], vec![-th.sin(), th.cos()]]);
        let a = loss_of(&[(u.clone(), v.clone(), w.clone())], 0.2, 0.3).0;
        let b = loss_of(
            &[(u.matmul(&rot).unwrap(), v.matmul(&rot).unwrap(), w)],
            0.2,
            0.3,
        )
        .0;
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn tau_is_clamped() {
        let mut store = ParamStore::new();
        let cfg = SyncConfig::default();
        let heads = SyncHeads::new(
            &mut store,
            "sync",
            4,
            4,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert!((heads.tau(&store) - 0.07).abs() < 1e-15);
        store.get_mut(heads.log_tau).data_mut()[0] = 50.0;
        heads.clamp_tau(&mut store, &cfg);
        assert!((heads.tau(&store) - 10.0).abs() < 1e-9);
    }
}
