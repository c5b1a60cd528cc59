use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{derive_seed, Hooks, LogLine, Optimizer, TrainConfig};
use crate::alignfuse::{FusionModel, ModelConfig};
use crate::dataio::MovieSample;
use crate::error::{Error, Result};
use crate::metrics::{average_precision, best_f1, f1_at, F1Score};
use crate::numcore::{ParamStore, Session, Tape, Tensor, Var};

/// Pooled features and boundary labels of one movie.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMovie {
    pub movie_id: String,
    pub feats: Vec<Tensor>,
    pub labels: Vec<u8>,
}

impl SceneMovie {
    pub fn from_sample(m: &MovieSample) -> Result<Self> {
        let labels = m
            .scene_labels
            .clone()
            .ok_or_else(|| Error::Data(format!("movie `{}` has no scene labels", m.movie_id)))?;
        Ok(SceneMovie {
            movie_id: m.movie_id.clone(),
            feats: m.pooled()?.features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Rows `center−k ..= center+k`; out-of-range rows reflect about the edges
/// when `mirror` is set and are an error otherwise.
pub fn window(feats: &[Tensor], center: usize, k: usize, mirror: bool) -> Result<Vec<Tensor>> {
    let len = feats[0].rows();
    let idx: Vec<usize> = (0..=2 * k)
        .map(|o| {
            let j = center as isize + o as isize - k as isize;
            let last = len as isize - 1;
            let r = if j < 0 {
                -j
            } else if j > last {
                2 * last - j
            } else {
                j
            };
            if (!mirror && r != j) || r < 0 || r > last {
                Err(Error::Data(format!(
                    "window at shot {center} leaves a movie of {len} shots"
                )))
            } else {
                Ok(r as usize)
            }
        })
        .collect::<Result<_>>()?;
    feats.iter().map(|f| f.gather_rows(&idx)).collect()
}

/// Weighted cross-entropy over a batch of 2-class logits `[B × 2]`, class
/// weight `B / (2·count_c)`, normalized by the total weight. Returns the loss
/// and whether the batch held a single class (then weights are uniform).
pub fn weighted_scene_ce(tape: &mut Tape, logits: Var, labels: &[u8]) -> Result<(Var, bool)> {
    let b = labels.len();
    if b == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if tape.shape(logits) != [b, 2] {
        return Err(Error::shape(
            "weighted_scene_ce",
            tape.shape(logits),
            &[b, 2],
        ));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let counts = [b - pos, pos];
    let single = pos == 0 || pos == b;
    let weight = |c: usize| {
        if single {
            1.0
        } else {
            b as f64 / (2.0 * counts[c] as f64)
        }
    };
    let total: f64 = labels.iter().map(|&l| weight(usize::from(l))).sum();
    let mut w = Tensor::zeros(&[b, 2]);
    for (i, &l) in labels.iter().enumerate() {
        let c = usize::from(l);
        w.set(i, c, -weight(c) / total);
    }
    let lp = tape.log_softmax(logits, 1, None)?;
    Ok((tape.weighted_sum(lp, w)?, single))
}

/// Loss of one batch of `(movie, center)` windows.
pub fn scene_batch_loss(
    model: &FusionModel,
    s: &mut Session,
    movies: &[SceneMovie],
    batch: &[(usize, usize)],
) -> Result<(Var, bool)> {
    let k = model.cfg.seq_len / 2;
    let mut rows = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for &(mi, c) in batch {
        let win = window(&movies[mi].feats, c, k, false)?;
        rows.push(model.forward_scene(s, &win)?);
        labels.push(movies[mi].labels[c]);
    }
    let logits = if rows.len() == 1 {
        rows[0]
    } else {
        s.tape.concat_rows(&rows)?
    };
    weighted_scene_ce(&mut s.tape, logits, &labels)
}

/// Boundary probabilities for every shot, edges mirror-padded.
pub fn scene_scores(
    model: &FusionModel,
    store: &ParamStore,
    movie: &SceneMovie,
) -> Result<Vec<f64>> {
    let k = model.cfg.seq_len / 2;
    let mut out = Vec::with_capacity(movie.len());
    for c in 0..movie.len() {
        let mut s = Session::eval(store);
        let win = window(&movie.feats, c, k, true)?;
        let y = model.forward_scene(&mut s, &win)?;
        out.push(s.tape.value(y).softmax(1)?.data()[1]);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneEval {
    /// AP over all shots pooled across movies.
    pub ap: f64,
    /// Mean of per-movie AP over movies with a positive.
    pub ap_macro: f64,
    pub f1_fixed: F1Score,
    pub f1_best: F1Score,
    pub positive_rate: f64,
    /// Shots whose window needed mirror padding.
    pub padded_shots: usize,
    #[serde(skip)]
    pub scores: Vec<Vec<f64>>,
}

pub fn evaluate_scene(
    model: &FusionModel,
    store: &ParamStore,
    movies: &[SceneMovie],
) -> Result<SceneEval> {
    let k = model.cfg.seq_len / 2;
    let mut scores = Vec::with_capacity(movies.len());
    let mut all = Vec::new();
    let mut labels = Vec::new();
    let mut macro_aps = Vec::new();
    let mut padded = 0;
    for m in movies {
        let s = scene_scores(model, store, m)?;
        if m.labels.contains(&1) {
            macro_aps.push(average_precision(&s, &m.labels)?);
        }
        padded += m.len().min(2 * k);
        all.extend_from_slice(&s);
        labels.extend_from_slice(&m.labels);
        scores.push(s);
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok(SceneEval {
        ap: average_precision(&all, &labels)?,
        ap_macro: macro_aps.iter().sum::<f64>() / macro_aps.len().max(1) as f64,
        f1_fixed: f1_at(&all, &labels, 0.5)?,
        f1_best: best_f1(&all, &labels)?,
        positive_rate: pos as f64 / labels.len() as f64,
        padded_shots: padded,
        scores,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SceneEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    pub single_class_batches: usize,
    pub eval: Option<SceneEval>,
}

#[derive(Debug, Clone)]
pub struct SceneOutcome {
    pub model: FusionModel,
    pub store: ParamStore,
    pub initial: Option<SceneEval>,
    pub epochs: Vec<SceneEpoch>,
}

/// Every center whose full window stays inside its movie.
pub fn training_windows(movies: &[SceneMovie], k: usize) -> Vec<(usize, usize)> {
    movies
        .iter()
        .enumerate()
        .flat_map(|(mi, m)| (k..m.len().saturating_sub(k)).map(move |c| (mi, c)))
        .collect()
}

pub fn build_scene_model(cfg: &ModelConfig, seed: u64) -> Result<(FusionModel, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    let model = FusionModel::new(cfg.clone(), &mut store, "scene", &mut rng)?;
    Ok((model, store))
}

pub fn train_scene(
    train: &[SceneMovie],
    held_out: &[SceneMovie],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    hooks: &mut Hooks,
) -> Result<SceneOutcome> {
    cfg.validate()?;
    if model_cfg.num_classes != 2 || model_cfg.seq_len.is_multiple_of(2) {
        return Err(Error::Config(
            "scene model needs 2 classes and an odd window length".into(),
        ));
    }
    let (model, mut store) = build_scene_model(model_cfg, cfg.seed)?;
    let k = model_cfg.seq_len / 2;
    let mut windows = training_windows(train, k);
    if windows.is_empty() {
        return Err(Error::Data(format!(
            "no training window of {} shots fits any movie",
            model_cfg.seq_len
        )));
    }
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let evaluate = |store: &ParamStore| -> Result<Option<SceneEval>> {
        if held_out.is_empty() {
            Ok(None)
        } else {
            evaluate_scene(&model, store, held_out).map(Some)
        }
    };
    let initial = evaluate(&store)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        windows.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        let mut single = 0usize;
        for batch in windows.chunks(cfg.batch_size) {
            let mut s = Session::new(&store, true, derive_seed(cfg.seed, step));
            let (loss, one_class) = scene_batch_loss(&model, &mut s, train, batch)?;
            let value = s.tape.value(loss).item();
            s.backward(loss)?;
            let grads = s.grads();
            drop(s);
            opt.step(&mut store, &grads)?;
            if one_class {
                single += 1;
            }
            hooks.log(&LogLine {
                task: "scene",
                epoch,
                step,
                loss: value,
                parts: None,
                lr: cfg.optimizer.lr,
                seed: cfg.seed,
                warning: one_class.then_some("single-class batch: unweighted cross-entropy"),
            })?;
            total += value;
            batches += 1;
            step += 1;
        }
        let eval = evaluate(&store)?;
        hooks.checkpoint(
            epoch,
            &serde_json::json!({"task": "scene", "model": model_cfg, "train": cfg}),
            &store,
        )?;
        epochs.push(SceneEpoch {
            epoch,
            mean_loss: total / batches as f64,
            single_class_batches: single,
            eval,
        });
    }
    hooks.flush()?;
    Ok(SceneOutcome {
        model,
        store,
        initial,
        epochs,
    })
}
