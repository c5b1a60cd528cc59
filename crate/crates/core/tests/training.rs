use std::fs;

use cinefuse::alignfuse::ModelConfig;
use cinefuse::checkpoint::load_checkpoint;
use cinefuse::dataio::{synth_movie, SynthConfig};
use cinefuse::numcore::{Session, Tensor};
use cinefuse::sync::{cosine_similarity, SyncConfig};
use cinefuse::trainer::{
    act_batch_loss, build_act_nets, build_scene_model, derive_seed, em_run, evaluate_scene,
    scene_batch_loss, train_act, train_scene, training_windows, ActMovie, Hooks, Optimizer,
    OptimizerConfig, SceneMovie, TrainConfig,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scene_movies(n: u64, shots: usize) -> Vec<SceneMovie> {
    let sc = SynthConfig {
        shots,
        scenes: shots / 20,
        sentences: 0,
        ..SynthConfig::default()
    };
    (0..n)
        .map(|i| SceneMovie::from_sample(&synth_movie(&sc, i).unwrap()).unwrap())
        .collect()
}

fn act_movies(n: u64, shots: usize, sentences: usize) -> Vec<ActMovie> {
    let sc = SynthConfig {
        shots,
        scenes: sentences,
        sentences,
        noise: 0.0,
        ..SynthConfig::default()
    };
    (0..n)
        .map(|i| ActMovie::from_sample(&synth_movie(&sc, i).unwrap()).unwrap())
        .collect()
}

fn small_scene_cfg() -> (ModelConfig, TrainConfig) {
    let m = ModelConfig::scene_desk(SynthConfig::default().modality_dims);
    let t = TrainConfig {
        epochs: 3,
        batch_size: 8,
        seed: 3,
        ..TrainConfig::scene_desk()
    };
    (m, t)
}

fn small_act_cfg() -> (ModelConfig, ModelConfig, SyncConfig, TrainConfig) {
    let dims = SynthConfig::default().modality_dims;
    let shot = ModelConfig {
        seq_len: 120,
        align_len: 10,
        channels: 16,
        ffn_hidden: 16,
        ..ModelConfig::act_shot_desk(dims.clone())
    };
    let syn = ModelConfig {
        channels: 32,
        ffn_hidden: 32,
        ..ModelConfig::synopsis_desk(dims[1], dims.len())
    };
    let sync = SyncConfig {
        proj_dim: 8,
        ..SyncConfig::default()
    };
    let t = TrainConfig {
        epochs: 2,
        batch_size: 2,
        seed: 5,
        ..TrainConfig::act_desk()
    };
    (shot, syn, sync, t)
}

#[test]
fn scene_loss_decreases_over_first_epochs() {
    let movies = scene_movies(4, 200);
    // batches of 8 are mostly single-class at a ~5% boundary rate, which makes epoch means noisy
    let (m, mut t) = small_scene_cfg();
    t.batch_size = 32;
    let out = train_scene(&movies, &[], &m, &t, &mut Hooks::none()).unwrap();
    let losses: Vec<f64> = out.epochs.iter().map(|e| e.mean_loss).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn scene_training_is_seed_deterministic_and_leaves_data_alone() {
    let movies = scene_movies(2, 60);
    let before = movies.clone();
    let (m, mut t) = small_scene_cfg();
    t.epochs = 1;
    let a = train_scene(&movies, &[], &m, &t, &mut Hooks::none()).unwrap();
    let b = train_scene(&movies, &[], &m, &t, &mut Hooks::none()).unwrap();
    for ((_, na, ta), (_, nb, tb)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.data(), tb.data(), "{na}");
    }
    t.seed += 1;
    let c = train_scene(&movies, &[], &m, &t, &mut Hooks::none()).unwrap();
    assert!(a
        .store
        .iter()
        .zip(c.store.iter())
        .any(|((_, _, x), (_, _, y))| x.data() != y.data()));
    assert_eq!(movies, before);
}

fn read_log(path: &std::path::Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn logged_scene_loss_matches_recomputation() {
    let movies = scene_movies(2, 60);
    let (m, mut t) = small_scene_cfg();
    t.epochs = 2;
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("train.jsonl");
    let mut hooks = Hooks::files(Some(log.clone()), Some(dir.path().join("ck"))).unwrap();
    train_scene(&movies, &[], &m, &t, &mut hooks).unwrap();
    let lines = read_log(&log);

    let k = m.seq_len / 2;
    let mut windows = training_windows(&movies, k);
    let per_epoch = windows.len().div_ceil(t.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    windows.shuffle(&mut rng);
    let first = windows[..t.batch_size].to_vec();
    windows.shuffle(&mut rng);
    let second = windows[..t.batch_size].to_vec();

    let (model, fresh) = build_scene_model(&m, t.seed).unwrap();
    let (_, after_epoch0) = load_checkpoint(&hooks.checkpoints[0]).unwrap();
    for (store, batch, step) in [
        (&fresh, &first, 0u64),
        (&after_epoch0, &second, per_epoch as u64),
    ] {
        let mut s = Session::new(store, true, derive_seed(t.seed, step));
        let (loss, _) = scene_batch_loss(&model, &mut s, &movies, batch).unwrap();
        let logged = lines[step as usize]["loss"].as_f64().unwrap();
        assert_eq!(lines[step as usize]["step"], step);
        assert!(
            (s.tape.value(loss).item() - logged).abs() < 1e-9,
            "step {step}"
        );
    }
}

#[test]
fn untrained_scene_ap_sits_near_base_rate() {
    let movies = scene_movies(3, 200);
    let (m, _) = small_scene_cfg();
    let (model, store) = build_scene_model(&m, 11).unwrap();
    let ev = evaluate_scene(&model, &store, &movies).unwrap();
    assert!(ev.ap.is_finite());
    assert!(
        (ev.ap - ev.positive_rate).abs() < 0.1,
        "ap {} rate {}",
        ev.ap,
        ev.positive_rate
    );
}

#[test]
fn em_first_iteration_lands_in_gold_spans() {
    let movies = act_movies(3, 90, 6);
    let (shot, syn, sync, t) = small_act_cfg();
    let (nets, mut store) = build_act_nets(&shot, &syn, &sync, t.seed).unwrap();
    let mut opt = Optimizer::new(OptimizerConfig::adam(1e-3)).unwrap();
    let out = em_run(&nets, &mut store, &movies, &mut opt, 2, 2, true, 1).unwrap();
    assert_eq!(out.history.len(), 2);
    assert!(out.losses.iter().all(|l| l.is_finite()));
    for (m, w) in movies.iter().zip(&out.history[0]) {
        let gold = m.gold_sync.as_ref().unwrap();
        let sim = cosine_similarity(m.feats.last().unwrap(), &m.synopsis).unwrap();
        for j in 0..gold.cols() {
            let best = (0..gold.rows())
                .filter(|&i| w.w.get(i, j))
                .max_by(|&a, &b| sim.get(a, j).total_cmp(&sim.get(b, j)))
                .expect("every sentence gets at least one shot");
            assert!(
                gold.get(best, j),
                "{} sentence {j}: shot {best}",
                m.movie_id
            );
        }
    }
}

#[test]
fn logged_act_loss_matches_components_and_recomputation() {
    let movies = act_movies(3, 90, 6);
    let (shot, syn, sync, t) = small_act_cfg();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("act.jsonl");
    let mut hooks = Hooks::files(Some(log.clone()), None).unwrap();
    let out = train_act(&movies, &[], &shot, &syn, &sync, &t, &mut hooks).unwrap();
    assert!(out.target_sum_error < 1e-12);
    let lines = read_log(&log);
    let w = t.loss_weights;
    for l in &lines {
        let p = &l["parts"];
        let sum = w.contrastive * p["contrastive"].as_f64().unwrap()
            + w.synopsis_ce * p["synopsis_ce"].as_f64().unwrap()
            + w.distill * p["distill"].as_f64().unwrap();
        let logged = l["loss"].as_f64().unwrap();
        assert!(logged.is_finite());
        assert!((sum - logged).abs() < 1e-9 * logged.abs().max(1.0));
    }

    let (nets, store) = build_act_nets(&shot, &syn, &sync, t.seed).unwrap();
    let syncs = cinefuse::trainer::sync_all(&nets, &store, &movies, true).unwrap();
    let mut order: Vec<usize> = (0..movies.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(t.seed));
    let batch: Vec<&ActMovie> = order[..t.batch_size].iter().map(|&k| &movies[k]).collect();
    let ws: Vec<_> = order[..t.batch_size].iter().map(|&k| &syncs[k].w).collect();
    let mut s = Session::new(&store, true, derive_seed(t.seed, 0));
    let b = act_batch_loss(&nets, &mut s, &batch, &ws, t.loss_weights, t.joint_distill).unwrap();
    assert!((s.tape.value(b.total).item() - lines[0]["loss"].as_f64().unwrap()).abs() < 1e-9);
}

#[test]
fn act_training_is_seed_deterministic() {
    let movies = act_movies(2, 90, 6);
    let (shot, syn, sync, mut t) = small_act_cfg();
    t.epochs = 1;
    let run = || train_act(&movies, &movies, &shot, &syn, &sync, &t, &mut Hooks::none()).unwrap();
    let (a, b) = (run(), run());
    let flat = |o: &cinefuse::trainer::ActOutcome| -> Vec<f64> {
        o.store
            .iter()
            .flat_map(|(_, _, x): (_, _, &Tensor)| x.data().to_vec())
            .collect()
    };
    assert_eq!(flat(&a), flat(&b));
    assert_eq!(a.epochs[0].mean_loss, b.epochs[0].mean_loss);
    assert_eq!(
        a.epochs[0].eval.as_ref().unwrap().predictions,
        b.epochs[0].eval.as_ref().unwrap().predictions
    );
}
