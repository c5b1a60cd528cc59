use std::fs;
use std::path::{Path, PathBuf};

use cinefuse::alignfuse::{FusionModel, ModelConfig};
use cinefuse::checkpoint::{load_checkpoint, restore, save_checkpoint};
use cinefuse::dataio::{
    load_manifest, save_manifest, synth_movie, MovieSample, NUM_TURNING_POINTS,
};
use cinefuse::metrics::{gradcam_importance, write_scores_csv, MetricsReport, ScoreRow, Target};
use cinefuse::numcore::{ParamStore, Session, Tensor};
use cinefuse::sync::{write_pgm, SyncConfig, SyncExport, SyncMatrix};
use cinefuse::trainer::{
    build_act_nets, build_scene_model, evaluate_act, evaluate_scene, sync_all, tiny_gradchecks,
    train_act, train_scene, window, ActEval, ActMovie, ActNets, Hooks, SceneEval, SceneMovie,
    TrainConfig,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::CliError;

/// Resolved inputs shared by every command.
pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Task for `eval` without a checkpoint.
    pub task: Option<String>,
}

impl Context {
    fn write_config(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.out).map_err(|e| io_err(&self.out, e))?;
        write(&self.out.join("config.txt"), self.cfg.render())
    }

    fn report(&self, task: &str) -> MetricsReport {
        MetricsReport::new(task, self.cfg.seed, self.cfg.digest())
    }
}

fn io_err(p: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", p.display()))
}

fn write(p: &Path, text: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(p, text).map_err(|e| io_err(p, e))
}

fn write_json(p: &Path, v: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(cinefuse::Error::from)?;
    write(p, text + "\n")
}

/// Movies from `--data`, or synthesized from the config.
fn load_movies(ctx: &Context) -> Result<Vec<MovieSample>, CliError> {
    let cfg = &ctx.cfg;
    let movies = match &ctx.data {
        Some(dir) => {
            let mut paths: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| io_err(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(CliError::Data(format!("no manifests in {}", dir.display())));
            }
            paths
                .iter()
                .map(|p| load_manifest(p))
                .collect::<Result<Vec<_>, _>>()?
        }
        None => (0..cfg.movies as u64)
            .map(|k| synth_movie(&cfg.synth, cfg.seed.wrapping_add(k)))
            .collect::<Result<Vec<_>, _>>()?,
    };
    let dims: Vec<usize> = movies[0].streams.iter().map(|s| s.dim()).collect();
    if let Some(m) = movies
        .iter()
        .find(|m| m.streams.iter().map(|s| s.dim()).ne(dims.iter().copied()))
    {
        return Err(CliError::Data(format!(
            "movie `{}` has different modality widths",
            m.movie_id
        )));
    }
    Ok(movies)
}

fn modality_dims(movies: &[MovieSample]) -> Vec<usize> {
    movies[0].streams.iter().map(|s| s.dim()).collect()
}

/// `(train, held_out)`; the held-out part are the last `held_out` movies.
fn split<T>(items: Vec<T>, held_out: usize) -> Result<(Vec<T>, Vec<T>), CliError> {
    if held_out >= items.len() {
        return Err(CliError::Config(format!(
            "held_out = {held_out} leaves no training movie out of {}",
            items.len()
        )));
    }
    let mut train = items;
    let held = train.split_off(train.len() - held_out);
    Ok((train, held))
}

/// Evaluation movies: the held-out split, or everything when `held_out = 0`.
fn eval_part<T>(mut items: Vec<T>, held_out: usize) -> Vec<T> {
    if held_out == 0 || held_out >= items.len() {
        items
    } else {
        items.split_off(items.len() - held_out)
    }
}

fn scene_cfg(ctx: &Context, movies: &[MovieSample]) -> ModelConfig {
    ModelConfig {
        modality_dims: modality_dims(movies),
        ..ctx.cfg.scene_model.clone()
    }
}

fn act_cfgs(ctx: &Context, movies: &[MovieSample]) -> Result<(ModelConfig, ModelConfig), CliError> {
    let text = movies[0]
        .synopsis
        .as_ref()
        .ok_or_else(|| CliError::Data(format!("movie `{}` has no synopsis", movies[0].movie_id)))?
        .cols();
    let shot = ModelConfig {
        modality_dims: modality_dims(movies),
        ..ctx.cfg.shot_model.clone()
    };
    let syn = ModelConfig {
        modality_dims: vec![text],
        ..ctx.cfg.synopsis_model.clone()
    };
    Ok((shot, syn))
}

fn scene_movies(movies: &[MovieSample]) -> Result<Vec<SceneMovie>, CliError> {
    Ok(movies
        .iter()
        .map(SceneMovie::from_sample)
        .collect::<Result<_, _>>()?)
}

fn act_movies(movies: &[MovieSample]) -> Result<Vec<ActMovie>, CliError> {
    Ok(movies
        .iter()
        .map(ActMovie::from_sample)
        .collect::<Result<_, _>>()?)
}

enum Loaded {
    Scene(FusionModel, ParamStore),
    Act(ActNets, ParamStore),
}

fn meta_field<T: serde::de::DeserializeOwned>(meta: &Value, key: &str) -> Result<T, CliError> {
    serde_json::from_value(meta.get(key).cloned().unwrap_or(Value::Null))
        .map_err(|e| CliError::Data(format!("checkpoint meta `{key}`: {e}")))
}

fn load_model(path: &Path) -> Result<Loaded, CliError> {
    let (meta, store) = load_checkpoint(path)?;
    match meta.get("task").and_then(Value::as_str) {
        Some("scene") => {
            let cfg: ModelConfig = meta_field(&meta, "model")?;
            let (model, mut fresh) = build_scene_model(&cfg, 0)?;
            restore(&mut fresh, &store)?;
            Ok(Loaded::Scene(model, fresh))
        }
        Some("act") => {
            let shot: ModelConfig = meta_field(&meta, "shot_model")?;
            let syn: ModelConfig = meta_field(&meta, "synopsis_model")?;
            let sync: SyncConfig = meta_field(&meta, "sync")?;
            let (nets, mut fresh) = build_act_nets(&shot, &syn, &sync, 0)?;
            restore(&mut fresh, &store)?;
            Ok(Loaded::Act(nets, fresh))
        }
        other => Err(CliError::Data(format!(
            "checkpoint {}: unknown task {other:?}",
            path.display()
        ))),
    }
}

fn check_dims(expected: &[usize], movies: &[MovieSample]) -> Result<(), CliError> {
    let got = modality_dims(movies);
    if got != expected {
        return Err(CliError::Data(format!(
            "data has modality widths {got:?}, model expects {expected:?}"
        )));
    }
    Ok(())
}

pub fn synth(ctx: &Context) -> Result<Value, CliError> {
    ctx.write_config()?;
    let movies = load_movies(ctx)?;
    let dir = ctx.out.join("data");
    let mut rows = Vec::with_capacity(movies.len());
    for m in &movies {
        save_manifest(m, &dir)?;
        rows.push(json!({
            "movie_id": m.movie_id,
            "shots": m.num_shots(),
            "sentences": m.num_sentences(),
            "boundaries": m.scene_labels.as_ref().map_or(0, |l| l.iter().filter(|&&b| b == 1).count()),
        }));
    }
    let summary = json!({ "movies": rows, "config_digest": ctx.cfg.digest() });
    write_json(&ctx.out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn scene_report(ctx: &Context, eval: &SceneEval) -> MetricsReport {
    let mut r = ctx.report("scene");
    r.set("ap", 100.0 * eval.ap)
        .set("ap_macro", 100.0 * eval.ap_macro)
        .set("f1", 100.0 * eval.f1_fixed.f1)
        .set("f1_best", 100.0 * eval.f1_best.f1)
        .set("f1_best_threshold", eval.f1_best.threshold)
        .set("positive_rate", 100.0 * eval.positive_rate)
        .set("padded_shots", eval.padded_shots as f64);
    r.threshold = Some(0.5);
    r.note("windows at movie edges are mirror-padded");
    r
}

fn scene_rows(movies: &[SceneMovie], eval: &SceneEval) -> Vec<ScoreRow> {
    movies
        .iter()
        .zip(&eval.scores)
        .flat_map(|(m, s)| {
            s.iter().enumerate().map(|(i, &score)| ScoreRow {
                movie_id: m.movie_id.clone(),
                shot: i,
                column: "boundary".into(),
                score,
                label: Some(m.labels[i]),
            })
        })
        .collect()
}

pub fn train_scene_cmd(ctx: &Context) -> Result<Value, CliError> {
    ctx.write_config()?;
    let movies = load_movies(ctx)?;
    let model_cfg = scene_cfg(ctx, &movies);
    let (train, held) = split(scene_movies(&movies)?, ctx.cfg.held_out)?;
    let tc = &ctx.cfg.scene_train;
    let mut hooks = Hooks::files(
        Some(ctx.out.join("train.jsonl")),
        Some(ctx.out.join("checkpoints")),
    )?;
    let out = train_scene(&train, &held, &model_cfg, tc, &mut hooks)?;
    let meta = json!({"task": "scene", "model": model_cfg, "train": tc});
    save_checkpoint(&ctx.out.join("model.ckpt"), &meta, &out.store)?;
    let last = out.epochs.last().expect("at least one epoch");
    let mut report = match &last.eval {
        Some(e) => {
            write_scores_csv(&ctx.out.join("scores.csv"), &scene_rows(&held, e))?;
            scene_report(ctx, e)
        }
        None => ctx.report("scene"),
    };
    report.set("final_loss", last.mean_loss);
    if let Some(i) = &out.initial {
        report.set("initial_ap", 100.0 * i.ap);
    }
    let single: usize = out.epochs.iter().map(|e| e.single_class_batches).sum();
    if single > 0 {
        report.note(format!(
            "{single} single-class batches used unweighted cross-entropy"
        ));
    }
    report.write(&ctx.out.join("report.json"))?;
    Ok(serde_json::to_value(&report).map_err(cinefuse::Error::from)?)
}

fn act_report(ctx: &Context, eval: &ActEval) -> MetricsReport {
    let mut r = ctx.report("act");
    r.set("span_hits", eval.span_hits as f64)
        .set("tps_passing", eval.tps_passing as f64)
        .set("movies", eval.movies as f64);
    for (n, h) in eval.tp_hits.iter().enumerate() {
        r.set(&format!("tp{}_hits", n + 1), *h as f64);
    }
    if let Some(m) = &eval.scene_metrics {
        r.set("ta", m.ta).set("pa", m.pa).set("d", m.d);
        r.note("TA/PA/D use this tool's operational definitions over max-pooled scene scores");
    }
    r
}

fn act_probs(nets: &ActNets, store: &ParamStore, m: &ActMovie) -> Result<Tensor, CliError> {
    let mut s = Session::eval(store);
    let y = nets.shot.forward_act(&mut s, &m.feats)?;
    Ok(s.tape.value(y).softmax(0)?)
}

fn act_rows(
    nets: &ActNets,
    store: &ParamStore,
    movies: &[ActMovie],
) -> Result<Vec<ScoreRow>, CliError> {
    let mut rows = Vec::new();
    for m in movies {
        let o = act_probs(nets, store, m)?;
        for i in 0..o.rows() {
            for n in 0..NUM_TURNING_POINTS {
                let label = m
                    .tp_gold_shots
                    .as_ref()
                    .map(|g| u8::from(g[n].contains(&i)));
                rows.push(ScoreRow {
                    movie_id: m.movie_id.clone(),
                    shot: i,
                    column: format!("tp{}", n + 1),
                    score: o.get(i, n),
                    label,
                });
            }
        }
    }
    Ok(rows)
}

fn export_syncs(
    dir: &Path,
    ids: impl Iterator<Item = String>,
    syncs: &[SyncMatrix],
) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for (id, m) in ids.zip(syncs) {
        write_json(&dir.join(format!("{id}.json")), &SyncExport::new(&id, m))?;
        write_pgm(&dir.join(format!("{id}.pgm")), &m.w)?;
    }
    Ok(())
}

pub fn train_act_cmd(ctx: &Context) -> Result<Value, CliError> {
    ctx.write_config()?;
    let movies = load_movies(ctx)?;
    let (shot, syn) = act_cfgs(ctx, &movies)?;
    let (train, held) = split(act_movies(&movies)?, ctx.cfg.held_out)?;
    let tc: &TrainConfig = &ctx.cfg.act_train;
    let sync = &ctx.cfg.sync;
    let mut hooks = Hooks::files(
        Some(ctx.out.join("train.jsonl")),
        Some(ctx.out.join("checkpoints")),
    )?;
    let out = train_act(&train, &held, &shot, &syn, sync, tc, &mut hooks)?;
    let meta = json!({"task": "act", "shot_model": shot, "synopsis_model": syn, "sync": sync, "train": tc});
    save_checkpoint(&ctx.out.join("model.ckpt"), &meta, &out.store)?;
    export_syncs(
        &ctx.out.join("sync"),
        train.iter().map(|m| m.movie_id.clone()),
        &out.syncs,
    )?;
    let last = out.epochs.last().expect("at least one epoch");
    let mut report = match &last.eval {
        Some(e) => {
            write_scores_csv(
                &ctx.out.join("scores.csv"),
                &act_rows(&out.nets, &out.store, &held)?,
            )?;
            act_report(ctx, e)
        }
        None => ctx.report("act"),
    };
    report
        .set("final_loss", last.mean_loss)
        .set("final_contrastive", last.mean_parts.contrastive)
        .set("final_synopsis_ce", last.mean_parts.synopsis_ce)
        .set("final_distill", last.mean_parts.distill)
        .set("target_sum_error", out.target_sum_error);
    if let Some(i) = &out.initial {
        report.set("initial_span_hits", i.span_hits as f64);
    }
    report.write(&ctx.out.join("report.json"))?;
    Ok(serde_json::to_value(&report).map_err(cinefuse::Error::from)?)
}

pub fn sync_cmd(ctx: &Context) -> Result<Value, CliError> {
    ctx.write_config()?;
    let movies = load_movies(ctx)?;
    let (nets, store, warm) = match &ctx.checkpoint {
        Some(p) => match load_model(p)? {
            Loaded::Act(nets, store) => {
                check_dims(&nets.shot.cfg.modality_dims, &movies)?;
                (nets, store, false)
            }
            Loaded::Scene(..) => {
                return Err(CliError::Config("sync needs an act checkpoint".into()))
            }
        },
        None => {
            let (shot, syn) = act_cfgs(ctx, &movies)?;
            let (nets, store) = build_act_nets(&shot, &syn, &ctx.cfg.sync, ctx.cfg.seed)?;
            (nets, store, true)
        }
    };
    let acts = act_movies(&movies)?;
    let syncs = sync_all(&nets, &store, &acts, warm)?;
    export_syncs(
        &ctx.out.join("sync"),
        acts.iter().map(|m| m.movie_id.clone()),
        &syncs,
    )?;
    let mut report = ctx.report("sync");
    let (mut hit, mut ones, mut gold) = (0usize, 0usize, 0usize);
    for (m, s) in acts.iter().zip(&syncs) {
        ones += s.w.count_ones();
        if let Some(g) = &m.gold_sync {
            gold += g.count_ones();
            hit += (0..g.rows())
                .flat_map(|i| (0..g.cols()).map(move |j| (i, j)))
                .filter(|&(i, j)| g.get(i, j) && s.w.get(i, j))
                .count();
        }
    }
    report.set("assigned", ones as f64);
    if gold > 0 {
        report
            .set("precision", 100.0 * hit as f64 / ones.max(1) as f64)
            .set("recall", 100.0 * hit as f64 / gold as f64);
    }
    if warm {
        report.note("no checkpoint: similarities from raw text stream against the synopsis");
    }
    report.write(&ctx.out.join("report.json"))?;
    Ok(serde_json::to_value(&report).map_err(cinefuse::Error::from)?)
}

pub fn eval_cmd(ctx: &Context) -> Result<Value, CliError> {
    ctx.write_config()?;
    let movies = load_movies(ctx)?;
    let loaded = match (&ctx.checkpoint, ctx.task.as_deref()) {
        (Some(p), _) => load_model(p)?,
        (None, Some("scene")) => {
            let (m, s) = build_scene_model(&scene_cfg(ctx, &movies), ctx.cfg.seed)?;
            Loaded::Scene(m, s)
        }
        (None, Some("act")) => {
            let (shot, syn) = act_cfgs(ctx, &movies)?;
            let (n, s) = build_act_nets(&shot, &syn, &ctx.cfg.sync, ctx.cfg.seed)?;
            Loaded::Act(n, s)
        }
        (None, other) => {
            return Err(CliError::Config(format!(
                "eval needs --checkpoint or --task scene|act (got {other:?})"
            )))
        }
    };
    let movies = eval_part(movies, ctx.cfg.held_out);
    let mut report = match &loaded {
        Loaded::Scene(model, store) => {
            check_dims(&model.cfg.modality_dims, &movies)?;
            let sm = scene_movies(&movies)?;
            let e = evaluate_scene(model, store, &sm)?;
            write_scores_csv(&ctx.out.join("scores.csv"), &scene_rows(&sm, &e))?;
            scene_report(ctx, &e)
        }
        Loaded::Act(nets, store) => {
            check_dims(&nets.shot.cfg.modality_dims, &movies)?;
            let am = act_movies(&movies)?;
            let e = evaluate_act(nets, store, &am)?;
            write_scores_csv(&ctx.out.join("scores.csv"), &act_rows(nets, store, &am)?)?;
            act_report(ctx, &e)
        }
    };
    if ctx.checkpoint.is_none() {
        report.note("untrained model");
    }
    report.write(&ctx.out.join("report.json"))?;
    Ok(serde_json::to_value(&report).map_err(cinefuse::Error::from)?)
}

pub fn gradcheck_cmd(ctx: &Context) -> Result<Value, CliError> {
    ctx.write_config()?;
    let rows = tiny_gradchecks(ctx.cfg.seed)?;
    write_json(&ctx.out.join("gradcheck.json"), &rows)?;
    for r in &rows {
        println!(
            "{:<12} {:<40} {:>12.3e} {}",
            r.objective,
            r.report.name,
            r.report.max_rel_err,
            if r.report.passed { "PASS" } else { "FAIL" }
        );
    }
    let failed = rows.iter().filter(|r| !r.report.passed).count();
    if failed > 0 {
        return Err(CliError::GradcheckFailed(failed));
    }
    Ok(json!({ "groups": rows.len(), "failed": 0 }))
}

#[derive(Serialize)]
struct MovieImportance {
    movie_id: String,
    weights: Vec<f64>,
    /// Explained predictions whose raw scores were all zero.
    degenerate: usize,
    explained: usize,
}

pub fn importance_cmd(ctx: &Context) -> Result<Value, CliError> {
    ctx.write_config()?;
    let path = ctx
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("importance needs --checkpoint".into()))?;
    let loaded = load_model(path)?;
    let movies = eval_part(load_movies(ctx)?, ctx.cfg.held_out);
    let names: Vec<String> = movies[0].streams.iter().map(|s| s.name.clone()).collect();
    let mut per_movie = Vec::with_capacity(movies.len());
    match &loaded {
        Loaded::Scene(model, store) => {
            check_dims(&model.cfg.modality_dims, &movies)?;
            let k = model.cfg.seq_len / 2;
            for m in scene_movies(&movies)? {
                let mut acc = vec![0.0; names.len()];
                let (mut degenerate, mut explained) = (0, 0);
                // explain the gold boundaries
                for c in (0..m.len()).filter(|&c| m.labels[c] == 1) {
                    let imp = gradcam_importance(
                        model,
                        store,
                        &window(&m.feats, c, k, true)?,
                        Target::Scene,
                    )?;
                    acc.iter_mut().zip(&imp.weights).for_each(|(a, w)| *a += w);
                    degenerate += usize::from(imp.degenerate);
                    explained += 1;
                }
                let n = explained.max(1) as f64;
                per_movie.push(MovieImportance {
                    movie_id: m.movie_id,
                    weights: acc.iter().map(|a| a / n).collect(),
                    degenerate,
                    explained,
                });
            }
        }
        Loaded::Act(nets, store) => {
            check_dims(&nets.shot.cfg.modality_dims, &movies)?;
            for m in act_movies(&movies)? {
                let imp = gradcam_importance(&nets.shot, store, &m.feats, Target::Act)?;
                per_movie.push(MovieImportance {
                    movie_id: m.movie_id,
                    weights: imp.weights,
                    degenerate: usize::from(imp.degenerate),
                    explained: 1,
                });
            }
        }
    }
    let counted: Vec<&MovieImportance> = per_movie.iter().filter(|p| p.explained > 0).collect();
    let mean: Vec<f64> = (0..names.len())
        .map(|i| counted.iter().map(|p| p.weights[i]).sum::<f64>() / counted.len().max(1) as f64)
        .collect();
    let out = json!({ "modalities": names, "mean": mean, "movies": per_movie });
    write_json(&ctx.out.join("importance.json"), &out)?;
    Ok(json!({ "modalities": names, "mean": mean }))
}
