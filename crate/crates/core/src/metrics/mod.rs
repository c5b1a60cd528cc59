//! Boundary, turning-point and modality-importance metrics.

mod report;

pub use report::{config_digest, write_scores_csv, MetricsReport, ScoreRow, SCHEMA_VERSION};

use serde::Serialize;

use crate::alignfuse::FusionModel;
use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Session, Tensor};

fn check_pair(scores: &[f64], labels: &[u8]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores contain a non-finite value".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 {
        return Err(Error::Data(
            "average precision needs at least one positive label".into(),
        ));
    }
    Ok(pos)
}

/// Mean of the precision at every positive, ranking by descending score with
/// ties broken by lower index.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let pos = check_pair(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(acc / pos as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct F1Score {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
    /// Nothing was predicted positive.
    pub degenerate: bool,
}

/// F1 with `score ≥ threshold` predicted positive.
pub fn f1_at(scores: &[f64], labels: &[u8], threshold: f64) -> Result<F1Score> {
    let pos = check_pair(scores, labels)?;
    let predicted: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    let np = predicted.iter().filter(|&&p| p).count();
    let tp = predicted
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| p && l == 1)
        .count();
    if np == 0 {
        return Ok(F1Score {
            f1: 0.0,
            precision: 0.0,
            recall: 0.0,
            threshold,
            degenerate: true,
        });
    }
    let precision = tp as f64 / np as f64;
    let recall = tp as f64 / pos as f64;
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(F1Score {
        f1,
        precision,
        recall,
        threshold,
        degenerate: false,
    })
}

/// Best F1 over every distinct score used as threshold.
pub fn best_f1(scores: &[f64], labels: &[u8]) -> Result<F1Score> {
    check_pair(scores, labels)?;
    let mut cands = scores.to_vec();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let mut best: Option<F1Score> = None;
    for t in cands {
        let f = f1_at(scores, labels, t)?;
        if best.is_none_or(|b| f.f1 > b.f1) {
            best = Some(f);
        }
    }
    Ok(best.expect("at least one score"))
}

/// One turning-point decision on one movie.
#[derive(Debug, Clone, PartialEq)]
pub struct TpEvent {
    pub predicted: usize,
    pub gold: Vec<usize>,
    pub total_scenes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TpMetrics {
    /// Percent of events whose predicted scene is a gold scene.
    pub ta: f64,
    /// Percent of events whose prediction lies in `[min gold, max gold]`.
    pub pa: f64,
    /// Mean `|pred − nearest gold| / total scenes`, times 100.
    pub d: f64,
}

pub fn tp_metrics(events: &[TpEvent]) -> Result<TpMetrics> {
    if events.is_empty() {
        return Err(Error::Data("no turning-point events".into()));
    }
    let (mut ta, mut pa, mut d) = (0.0, 0.0, 0.0);
    for e in events {
        let (Some(&lo), Some(&hi)) = (e.gold.iter().min(), e.gold.iter().max()) else {
            return Err(Error::Data(
                "turning point with an empty gold scene set".into(),
            ));
        };
        if e.total_scenes == 0 {
            return Err(Error::Data("movie with zero scenes".into()));
        }
        if e.gold.contains(&e.predicted) {
            ta += 1.0;
        }
        if (lo..=hi).contains(&e.predicted) {
            pa += 1.0;
        }
        let near = e
            .gold
            .iter()
            .map(|&g| g.abs_diff(e.predicted))
            .min()
            .expect("non-empty");
        d += near as f64 / e.total_scenes as f64;
    }
    let n = events.len() as f64;
    Ok(TpMetrics {
        ta: 100.0 * ta / n,
        pa: 100.0 * pa / n,
        d: 100.0 * d / n,
    })
}

/// Scene-level scores as the max over each scene's shots.
pub fn max_pool_to_scenes(shot_scores: &[f64], scene_of_shot: &[usize]) -> Result<Vec<f64>> {
    if shot_scores.len() != scene_of_shot.len() {
        return Err(Error::Data(
            "scene map length differs from shot count".into(),
        ));
    }
    let n = scene_of_shot.iter().max().map_or(0, |m| m + 1);
    let mut out = vec![f64::NEG_INFINITY; n];
    for (&s, &k) in shot_scores.iter().zip(scene_of_shot) {
        out[k] = out[k].max(s);
    }
    Ok(out)
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Importance {
    /// One weight per modality, summing to 1.
    pub weights: Vec<f64>,
    /// Every raw score was zero; weights are uniform.
    pub degenerate: bool,
}

/// Which prediction to explain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// Largest logit of the key shot in a scene window.
    Scene,
    /// Largest logit over every shot and turning point.
    Act,
}

/// GradCAM over modalities: the gradient of the selected logit with respect
/// to the head weights, times the fused activations of the selected row,
/// summed over each modality's channels and passed through ReLU.
pub fn gradcam_importance(
    model: &FusionModel,
    store: &ParamStore,
    feats: &[Tensor],
    target: Target,
) -> Result<Importance> {
    let mut s = Session::eval(store);
    let enc = model.encode(&mut s, feats)?;
    let len = s.tape.shape(enc.fused)[0];
    let row = match target {
        Target::Scene => len / 2,
        Target::Act => 0,
    };
    let logits = model.head(&mut s, enc.fused)?;
    let values = s.tape.value(logits).clone();
    let nc = values.cols();
    let (row, class) = match target {
        Target::Scene => (row, argmax(values.row(row))),
        Target::Act => {
            let k = argmax(values.data());
            (k / nc, k % nc)
        }
    };
    let mut pick = Tensor::zeros(values.shape());
    pick.set(row, class, 1.0);
    let y = s.tape.weighted_sum(logits, pick)?;
    s.backward(y)?;
    let grads = s.grads();
    let gw = grads.get(model.head.w);
    let act = s.tape.value(enc.fused).row(row).to_vec();
    let c = model.cfg.channels;
    let raw: Vec<f64> = (0..model.num_modalities())
        .map(|m| {
            let sum: f64 = (m * c..(m + 1) * c)
                .map(|ch| gw.get(ch, class) * act[ch])
                .sum();
            sum.max(0.0)
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        let n = raw.len() as f64;
        return Ok(Importance {
            weights: vec![1.0 / n; raw.len()],
            degenerate: true,
        });
    }
    Ok(Importance {
        weights: raw.iter().map(|r| r / total).collect(),
        degenerate: false,
    })
}
