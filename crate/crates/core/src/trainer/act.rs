use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{derive_seed, Hooks, LogLine, Optimizer, TrainConfig};
use crate::alignfuse::{FusionModel, ModelConfig};
use crate::dataio::{BinaryMatrix, MovieSample, NUM_TURNING_POINTS};
use crate::distill::{
    kd_loss_on_tape, synopsis_ce_on_tape, total_loss, total_loss_on_tape, transfer_targets_on_tape,
    LossParts, LossWeights,
};
use crate::error::{Error, Result};
use crate::metrics::{argmax, max_pool_to_scenes, tp_metrics, TpEvent, TpMetrics};
use crate::numcore::{ParamStore, Session, Tensor, Var};
use crate::sync::{
    contrastive_loss, cosine_similarity, synchronize, ContrastiveItem, SyncConfig, SyncHeads,
    SyncMatrix,
};

/// Everything the act pipeline needs from one movie.
#[derive(Debug, Clone, PartialEq)]
pub struct ActMovie {
    pub movie_id: String,
    pub feats: Vec<Tensor>,
    pub synopsis: Tensor,
    pub tp_labels: Vec<Vec<usize>>,
    /// Gold shots of each turning point, when a gold sync matrix exists.
    pub tp_gold_shots: Option<Vec<Vec<usize>>>,
    pub scene_of_shot: Option<Vec<usize>>,
    pub gold_sync: Option<BinaryMatrix>,
}

impl ActMovie {
    pub fn from_sample(m: &MovieSample) -> Result<Self> {
        let id = &m.movie_id;
        let synopsis = m
            .synopsis
            .clone()
            .ok_or_else(|| Error::Data(format!("movie `{id}` has no synopsis")))?;
        let tp_labels = m
            .tp_labels
            .clone()
            .ok_or_else(|| Error::Data(format!("movie `{id}` has no turning-point labels")))?;
        if tp_labels.len() != NUM_TURNING_POINTS {
            return Err(Error::Data(format!(
                "movie `{id}` has {} turning points, expected {NUM_TURNING_POINTS}",
                tp_labels.len()
            )));
        }
        let tp_gold_shots = m.gold_sync.as_ref().map(|_| {
            (0..NUM_TURNING_POINTS)
                .map(|n| m.tp_gold_shots(n).expect("gold sync present"))
                .collect()
        });
        Ok(ActMovie {
            movie_id: id.clone(),
            feats: m.pooled()?.features,
            synopsis,
            tp_labels,
            tp_gold_shots,
            scene_of_shot: m.scene_of_shot(),
            gold_sync: m.gold_sync.clone(),
        })
    }

    pub fn num_shots(&self) -> usize {
        self.feats[0].rows()
    }
}

/// Shot model, synopsis model and synchronization heads sharing one store.
#[derive(Debug, Clone)]
pub struct ActNets {
    pub shot: FusionModel,
    pub synopsis: FusionModel,
    pub heads: SyncHeads,
    pub sync: SyncConfig,
}

pub fn build_act_nets(
    shot_cfg: &ModelConfig,
    synopsis_cfg: &ModelConfig,
    sync: &SyncConfig,
    seed: u64,
) -> Result<(ActNets, ParamStore)> {
    if shot_cfg.num_classes != NUM_TURNING_POINTS || synopsis_cfg.num_classes != NUM_TURNING_POINTS
    {
        return Err(Error::Config(format!(
            "act models need {NUM_TURNING_POINTS} classes"
        )));
    }
    if synopsis_cfg.num_modalities() != 1 {
        return Err(Error::Config(
            "synopsis model must have exactly one modality".into(),
        ));
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    let shot = FusionModel::new(shot_cfg.clone(), &mut store, "shot", &mut rng)?;
    let synopsis = FusionModel::new(synopsis_cfg.clone(), &mut store, "synopsis", &mut rng)?;
    let heads = SyncHeads::new(
        &mut store,
        "sync",
        shot_cfg.fused_channels(),
        synopsis_cfg.fused_channels(),
        sync,
        &mut rng,
    )?;
    Ok((
        ActNets {
            shot,
            synopsis,
            heads,
            sync: *sync,
        },
        store,
    ))
}

/// Unit-norm shot and sentence features at eval.
pub fn movie_features(
    nets: &ActNets,
    store: &ParamStore,
    movie: &ActMovie,
) -> Result<(Tensor, Tensor)> {
    let mut s = Session::eval(store);
    let (_, z) = nets.shot.forward_rows(&mut s, &movie.feats)?;
    let u = nets.heads.shots(&mut s, z)?;
    let (_, zs) = nets
        .synopsis
        .forward_rows(&mut s, std::slice::from_ref(&movie.synopsis))?;
    let v = nets.heads.sentences(&mut s, zs)?;
    Ok((s.tape.value(u).clone(), s.tape.value(v).clone()))
}

/// E-step for every movie. With `warm`, similarities come from the last
/// (text) shot stream against the raw synopsis instead of the networks.
pub fn sync_all(
    nets: &ActNets,
    store: &ParamStore,
    movies: &[ActMovie],
    warm: bool,
) -> Result<Vec<SyncMatrix>> {
    movies
        .iter()
        .map(|m| {
            let sim = if warm {
                let text = m.feats.last().expect("at least one modality");
                if text.cols() != m.synopsis.cols() {
                    return Err(Error::Config(format!(
                        "warm start needs the text stream ({} wide) and synopsis ({} wide) in one space",
                        text.cols(),
                        m.synopsis.cols()
                    )));
                }
                cosine_similarity(text, &m.synopsis)?
            } else {
                let (u, v) = movie_features(nets, store, m)?;
                u.matmul(&v.transpose()?)?
            };
            synchronize(&sim, &nets.sync)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ActBatchLoss {
    pub total: Var,
    /// Components with zero weight are skipped and reported as 0.
    pub parts: LossParts,
    pub skipped_queries: usize,
    /// Largest `|Σ_i p_in − 1|` over the batch.
    pub target_sum_error: f64,
}

/// Combined objective on a batch of movies: contrastive loss over the whole
/// batch, cross-entropy and distillation averaged over movies.
pub fn act_batch_loss(
    nets: &ActNets,
    s: &mut Session,
    movies: &[&ActMovie],
    syncs: &[&BinaryMatrix],
    weights: LossWeights,
    joint_distill: bool,
) -> Result<ActBatchLoss> {
    if movies.len() != syncs.len() || movies.is_empty() {
        return Err(Error::Contract(
            "need one sync matrix per movie and a non-empty batch".into(),
        ));
    }
    let need_syn = weights.contrastive > 0.0 || weights.synopsis_ce > 0.0 || weights.distill > 0.0;
    let mut ys = Vec::with_capacity(movies.len());
    let mut us = Vec::with_capacity(movies.len());
    let mut qs = Vec::with_capacity(movies.len());
    let mut vs = Vec::with_capacity(movies.len());
    for m in movies {
        let (y, z) = nets.shot.forward_rows(s, &m.feats)?;
        ys.push(y);
        us.push(nets.heads.shots(s, z)?);
        if need_syn {
            let (q, zs) = nets
                .synopsis
                .forward_rows(s, std::slice::from_ref(&m.synopsis))?;
            qs.push(q);
            vs.push(nets.heads.sentences(s, zs)?);
        }
    }
    let inv_tau = nets.heads.inv_tau(s)?;
    let zero = s.input(Tensor::scalar(0.0));
    let inv_n = 1.0 / movies.len() as f64;
    let mut skipped = 0;
    let lc = if weights.contrastive > 0.0 {
        let items: Vec<ContrastiveItem> = (0..movies.len())
            .map(|k| ContrastiveItem {
                u: us[k],
                v: vs[k],
                w: syncs[k],
            })
            .collect();
        let out = contrastive_loss(&mut s.tape, &items, inv_tau, nets.sync.xi)?;
        skipped = out.skipped_queries;
        out.loss
    } else {
        zero
    };
    let mut lce = zero;
    if weights.synopsis_ce > 0.0 {
        for (k, m) in movies.iter().enumerate() {
            let l = synopsis_ce_on_tape(&mut s.tape, qs[k], &m.tp_labels)?;
            lce = s.tape.add(lce, l)?;
        }
        lce = s.tape.scale(lce, inv_n)?;
    }
    let mut lkd = zero;
    let mut target_sum_error: f64 = 0.0;
    if weights.distill > 0.0 {
        for k in 0..movies.len() {
            let (u, v, t, q) = if joint_distill {
                (us[k], vs[k], inv_tau, qs[k])
            } else {
                (
                    s.tape.detach(us[k]),
                    s.tape.detach(vs[k]),
                    s.tape.detach(inv_tau),
                    s.tape.detach(qs[k]),
                )
            };
            let p = transfer_targets_on_tape(&mut s.tape, u, v, t, q)?;
            let pv = s.tape.value(p);
            for n in 0..pv.cols() {
                let col: f64 = (0..pv.rows()).map(|i| pv.get(i, n)).sum();
                target_sum_error = target_sum_error.max((col - 1.0).abs());
            }
            let l = kd_loss_on_tape(&mut s.tape, ys[k], p)?;
            lkd = s.tape.add(lkd, l)?;
        }
        lkd = s.tape.scale(lkd, inv_n)?;
    }
    let parts = LossParts {
        contrastive: s.tape.value(lc).item(),
        synopsis_ce: s.tape.value(lce).item(),
        distill: s.tape.value(lkd).item(),
    };
    total_loss(parts, weights)?;
    let total = total_loss_on_tape(&mut s.tape, lc, lce, lkd, weights)?;
    Ok(ActBatchLoss {
        total,
        parts,
        skipped_queries: skipped,
        target_sum_error,
    })
}

fn gradient_step(
    nets: &ActNets,
    store: &mut ParamStore,
    opt: &mut Optimizer,
    batch: &[&ActMovie],
    syncs: &[&BinaryMatrix],
    weights: LossWeights,
    joint: bool,
    seed: u64,
) -> Result<(f64, LossParts, f64)> {
    let mut s = Session::new(store, true, seed);
    let out = act_batch_loss(nets, &mut s, batch, syncs, weights, joint)?;
    let value = s.tape.value(out.total).item();
    s.backward(out.total)?;
    let grads = s.grads();
    drop(s);
    opt.step(store, &grads)?;
    nets.heads.clamp_tau(store, &nets.sync);
    Ok((value, out.parts, out.target_sum_error))
}

#[derive(Debug, Clone)]
pub struct EmOutcome {
    /// Assignments from every E-step, in order.
    pub history: Vec<Vec<SyncMatrix>>,
    /// Mean contrastive loss of each M-step pass.
    pub losses: Vec<f64>,
}

/// Alternates E-steps and contrastive-only M-step passes over `movies`.
pub fn em_run(
    nets: &ActNets,
    store: &mut ParamStore,
    movies: &[ActMovie],
    opt: &mut Optimizer,
    iterations: usize,
    batch_size: usize,
    warm_start: bool,
    seed: u64,
) -> Result<EmOutcome> {
    if iterations == 0 || batch_size == 0 {
        return Err(Error::Config(
            "em_run needs at least one iteration and a positive batch size".into(),
        ));
    }
    let weights = LossWeights {
        contrastive: 1.0,
        synopsis_ce: 0.0,
        distill: 0.0,
    };
    let mut history = Vec::with_capacity(iterations);
    let mut losses = Vec::with_capacity(iterations);
    let mut order: Vec<usize> = (0..movies.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut step = 0u64;
    for it in 0..iterations {
        let syncs = sync_all(nets, store, movies, warm_start && it == 0)?;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut n = 0usize;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&ActMovie> = chunk.iter().map(|&k| &movies[k]).collect();
            let ws: Vec<&BinaryMatrix> = chunk.iter().map(|&k| &syncs[k].w).collect();
            let (v, _, _) = gradient_step(
                nets,
                store,
                opt,
                &batch,
                &ws,
                weights,
                false,
                derive_seed(seed, step),
            )?;
            total += v;
            n += 1;
            step += 1;
        }
        losses.push(total / n as f64);
        history.push(syncs);
    }
    Ok(EmOutcome { history, losses })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActEval {
    /// Predicted shot per movie and turning point.
    pub predictions: Vec<Vec<usize>>,
    /// Per turning point, movies whose prediction falls inside the gold span.
    pub tp_hits: Vec<usize>,
    pub movies: usize,
    /// Turning points hit on at least half of the movies.
    pub tps_passing: usize,
    pub span_hits: usize,
    /// Scene-level agreement, when scene partitions are known.
    pub scene_metrics: Option<TpMetrics>,
}

pub fn evaluate_act(nets: &ActNets, store: &ParamStore, movies: &[ActMovie]) -> Result<ActEval> {
    let mut predictions = Vec::with_capacity(movies.len());
    let mut tp_hits = vec![0usize; NUM_TURNING_POINTS];
    let mut events = Vec::new();
    let mut scene_known = true;
    for m in movies {
        let gold = m.tp_gold_shots.as_ref().ok_or_else(|| {
            Error::Data(format!(
                "movie `{}` has no gold sync for evaluation",
                m.movie_id
            ))
        })?;
        let mut s = Session::eval(store);
        let y = nets.shot.forward_act(&mut s, &m.feats)?;
        let o = s.tape.value(y).softmax(0)?.transpose()?;
        let mut pred = Vec::with_capacity(NUM_TURNING_POINTS);
        for n in 0..NUM_TURNING_POINTS {
            let col = o.row(n);
            let i = argmax(col);
            if gold[n].contains(&i) {
                tp_hits[n] += 1;
            }
            pred.push(i);
            match &m.scene_of_shot {
                Some(scene_of) if !gold[n].is_empty() => {
                    let pooled = max_pool_to_scenes(col, scene_of)?;
                    let mut g: Vec<usize> = gold[n].iter().map(|&i| scene_of[i]).collect();
                    g.dedup();
                    events.push(TpEvent {
                        predicted: argmax(&pooled),
                        gold: g,
                        total_scenes: pooled.len(),
                    });
                }
                _ => scene_known = false,
            }
        }
        predictions.push(pred);
    }
    let half = movies.len().div_ceil(2);
    Ok(ActEval {
        predictions,
        span_hits: tp_hits.iter().sum(),
        tps_passing: tp_hits.iter().filter(|&&h| h >= half).count(),
        tp_hits,
        movies: movies.len(),
        scene_metrics: if scene_known && !events.is_empty() {
            Some(tp_metrics(&events)?)
        } else {
            None
        },
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ActEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_parts: LossParts,
    pub eval: Option<ActEval>,
}

#[derive(Debug, Clone)]
pub struct ActOutcome {
    pub nets: ActNets,
    pub store: ParamStore,
    /// Assignments of the training movies from the last E-step.
    pub syncs: Vec<SyncMatrix>,
    pub initial: Option<ActEval>,
    pub epochs: Vec<ActEpoch>,
    /// Largest deviation of any transferred target column sum from 1.
    pub target_sum_error: f64,
}

pub fn train_act(
    train: &[ActMovie],
    held_out: &[ActMovie],
    shot_cfg: &ModelConfig,
    synopsis_cfg: &ModelConfig,
    sync_cfg: &SyncConfig,
    cfg: &TrainConfig,
    hooks: &mut Hooks,
) -> Result<ActOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training movies".into()));
    }
    let (nets, mut store) = build_act_nets(shot_cfg, synopsis_cfg, sync_cfg, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let evaluate = |store: &ParamStore| -> Result<Option<ActEval>> {
        if held_out.is_empty() {
            Ok(None)
        } else {
            evaluate_act(&nets, store, held_out).map(Some)
        }
    };
    let initial = evaluate(&store)?;
    let meta = serde_json::json!({
        "task": "act",
        "shot_model": shot_cfg,
        "synopsis_model": synopsis_cfg,
        "sync": sync_cfg,
        "train": cfg,
    });
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut syncs = Vec::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut target_sum_error: f64 = 0.0;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        if epoch % cfg.em_every == 0 {
            syncs = sync_all(&nets, &store, train, cfg.warm_start && epoch == 0)?;
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut sums = [0.0; 3];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&ActMovie> = chunk.iter().map(|&k| &train[k]).collect();
            let ws: Vec<&BinaryMatrix> = chunk.iter().map(|&k| &syncs[k].w).collect();
            let (value, parts, err) = gradient_step(
                &nets,
                &mut store,
                &mut opt,
                &batch,
                &ws,
                cfg.loss_weights,
                cfg.joint_distill,
                derive_seed(cfg.seed, step),
            )?;
            target_sum_error = target_sum_error.max(err);
            hooks.log(&LogLine {
                task: "act",
                epoch,
                step,
                loss: value,
                parts: Some(parts),
                lr: cfg.optimizer.lr,
                seed: cfg.seed,
                warning: None,
            })?;
            total += value;
            sums[0] += parts.contrastive;
            sums[1] += parts.synopsis_ce;
            sums[2] += parts.distill;
            batches += 1;
            step += 1;
        }
        let eval = evaluate(&store)?;
        hooks.checkpoint(epoch, &meta, &store)?;
        let b = batches as f64;
        epochs.push(ActEpoch {
            epoch,
            mean_loss: total / b,
            mean_parts: LossParts {
                contrastive: sums[0] / b,
                synopsis_ce: sums[1] / b,
                distill: sums[2] / b,
            },
            eval,
        });
    }
    hooks.flush()?;
    Ok(ActOutcome {
        nets,
        store,
        syncs,
        initial,
        epochs,
        target_sum_error,
    })
}
