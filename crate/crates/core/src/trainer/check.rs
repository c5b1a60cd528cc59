//! Finite-difference checks of the three training objectives on a tiny model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{
    act_batch_loss, build_act_nets, build_scene_model, scene_batch_loss, ActMovie, SceneMovie,
};
use crate::alignfuse::ModelConfig;
use crate::dataio::{BinaryMatrix, NUM_TURNING_POINTS};
use crate::distill::LossWeights;
use crate::error::Result;
use crate::numcore::gradcheck::{check_params, CheckSettings, ParamReport};
use crate::numcore::{ParamStore, Session, Tensor};
use crate::sync::SyncConfig;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckRow {
    pub objective: &'static str,
    #[serde(flatten)]
    pub report: ParamReport,
}

/// `L=5, L_n=2, C=8, C_k=16, M=2, N_u=N_f=1`, no dropout.
pub fn tiny_config(num_classes: usize) -> ModelConfig {
    ModelConfig {
        seq_len: 5,
        align_len: 2,
        channels: 8,
        ffn_hidden: 16,
        unimodal_blocks: 1,
        fusion_blocks: 1,
        dropout: 0.0,
        num_classes,
        modality_dims: vec![3, 4],
        heads: 1,
        align_pe: true,
        token_align_pe: true,
        table_std: 0.02,
    }
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .expect("shape")
}

fn tiny_scene_movies(rng: &mut ChaCha8Rng) -> Vec<SceneMovie> {
    (0..2)
        .map(|m| SceneMovie {
            movie_id: format!("tiny-{m}"),
            feats: vec![random(9, 3, rng), random(9, 4, rng)],
            labels: vec![0, 0, 1, 0, 1, 0, 0, 1, 0],
        })
        .collect()
}

fn tiny_act_movies(rng: &mut ChaCha8Rng) -> Vec<ActMovie> {
    // 5 shots, 3 sentences, sentence j on shots [2j−1, 2j] clipped
    let w = BinaryMatrix::from_fn(5, 3, |i, j| i / 2 == j);
    (0..2)
        .map(|m| ActMovie {
            movie_id: format!("tiny-{m}"),
            feats: vec![random(5, 3, rng), random(5, 4, rng)],
            synopsis: random(3, 4, rng),
            tp_labels: (0..NUM_TURNING_POINTS).map(|n| vec![(n + m) % 3]).collect(),
            tp_gold_shots: None,
            scene_of_shot: None,
            gold_sync: Some(w.clone()),
        })
        .collect()
}

/// Runs all three checks; every parameter group gets one row per objective.
pub fn tiny_gradchecks(seed: u64) -> Result<Vec<GradcheckRow>> {
    let settings = CheckSettings::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();

    let scene = tiny_scene_movies(&mut rng);
    let (model, store) = build_scene_model(&tiny_config(2), seed)?;
    let batch: Vec<(usize, usize)> = vec![(0, 2), (0, 3), (0, 4), (1, 5), (1, 6)];
    let scene_loss = |s: &mut Session| scene_batch_loss(&model, s, &scene, &batch).map(|(l, _)| l);
    for report in check(&store, settings, scene_loss)? {
        rows.push(GradcheckRow {
            objective: "scene_ce",
            report,
        });
    }

    let movies = tiny_act_movies(&mut rng);
    let shot_cfg = tiny_config(NUM_TURNING_POINTS);
    let syn_cfg = ModelConfig {
        seq_len: 4,
        modality_dims: vec![4],
        fusion_blocks: 0,
        ..tiny_config(NUM_TURNING_POINTS)
    };
    let sync = SyncConfig {
        proj_dim: 4,
        ..SyncConfig::default()
    };
    let (nets, store) = build_act_nets(&shot_cfg, &syn_cfg, &sync, seed)?;
    let refs: Vec<&ActMovie> = movies.iter().collect();
    let ws: Vec<&BinaryMatrix> = movies
        .iter()
        .map(|m| m.gold_sync.as_ref().expect("set above"))
        .collect();
    for (objective, weights) in [
        (
            "contrastive",
            LossWeights {
                contrastive: 1.0,
                synopsis_ce: 0.0,
                distill: 0.0,
            },
        ),
        ("combined", LossWeights::default()),
    ] {
        // finite differences see the target's dependence on the parameters,
        // so the combined objective is checked with targets on the graph
        let f =
            |s: &mut Session| act_batch_loss(&nets, s, &refs, &ws, weights, true).map(|o| o.total);
        for report in check(&store, settings, f)? {
            rows.push(GradcheckRow { objective, report });
        }
    }
    Ok(rows)
}

fn check(
    store: &ParamStore,
    settings: CheckSettings,
    f: impl Fn(&mut Session) -> Result<crate::numcore::Var>,
) -> Result<Vec<ParamReport>> {
    check_params(
        store,
        settings,
        |p| {
            let mut s = Session::eval(p);
            let l = f(&mut s)?;
            Ok(s.tape.value(l).item())
        },
        |p| {
            let mut s = Session::new(p, true, 0);
            let l = f(&mut s)?;
            s.backward(l)?;
            Ok(s.grads())
        },
    )
}
