//! Synopsis-to-shot label transfer and the combined act objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// Floor applied before every logarithm of a probability.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-softmax of `u vᵀ / τ`: how much each shot attends to each sentence.
pub fn attention_weights(u: &Tensor, v: &Tensor, tau: f64) -> Result<Tensor> {
    let sims = u.matmul(&v.transpose()?)?;
    sims.map(|x| x / tau).softmax(1)
}

/// Shot-axis softmax of `A q`; one distribution over shots per turning point.
pub fn transfer_targets(a: &Tensor, q: &Tensor) -> Result<Tensor> {
    a.matmul(q)?.softmax(0)
}

/// `Σ_n KL(O_·n ‖ P_·n)` with both arguments column-stochastic over shots.
pub fn kd_loss(o: &Tensor, p: &Tensor) -> Result<f64> {
    if o.shape() != p.shape() {
        return Err(Error::shape("kd_loss", o.shape(), p.shape()));
    }
    Ok(o.data()
        .iter()
        .zip(p.data())
        .map(|(&a, &b)| a * (a.max(PROB_FLOOR).ln() - b.max(PROB_FLOOR).ln()))
        .sum())
}

fn gold_weights(l_syn: usize, gold: &[Vec<usize>]) -> Result<Tensor> {
    let n_tp = gold.len();
    let mut w = Tensor::zeros(&[l_syn, n_tp]);
    for (n, g) in gold.iter().enumerate() {
        if g.is_empty() {
            return Err(Error::Data(format!(
                "turning point {n} has no gold sentence"
            )));
        }
        for &j in g {
            if j >= l_syn {
                return Err(Error::Data(format!(
                    "gold sentence {j} out of range for {l_syn} sentences"
                )));
            }
            w.set(j, n, -1.0 / g.len() as f64);
        }
    }
    Ok(w)
}

/// Cross-entropy of the sentence-axis softmax of `q` against a uniform
/// distribution over each turning point's gold sentences, summed over TPs.
pub fn synopsis_ce_loss(q: &Tensor, gold: &[Vec<usize>]) -> Result<f64> {
    if q.rank() != 2 || q.cols() != gold.len() {
        return Err(Error::shape(
            "synopsis_ce_loss",
            q.shape(),
            &[q.rows(), gold.len()],
        ));
    }
    let w = gold_weights(q.rows(), gold)?;
    let lp = q.softmax(0)?.map(|p| p.max(PROB_FLOOR).ln());
    Ok(lp.data().iter().zip(w.data()).map(|(a, b)| a * b).sum())
}

/// Tape form of [`synopsis_ce_loss`].
pub fn synopsis_ce_on_tape(tape: &mut Tape, q: Var, gold: &[Vec<usize>]) -> Result<Var> {
    let shape = tape.shape(q).to_vec();
    if shape.len() != 2 || shape[1] != gold.len() {
        return Err(Error::shape(
            "synopsis_ce_loss",
            &shape,
            &[shape[0], gold.len()],
        ));
    }
    let w = gold_weights(shape[0], gold)?;
    let lp = tape.log_softmax(q, 0, None)?;
    tape.weighted_sum(lp, w)
}

/// Targets `P` on the tape from unit features, `1/τ` and synopsis logits.
pub fn transfer_targets_on_tape(
    tape: &mut Tape,
    u: Var,
    v: Var,
    inv_tau: Var,
    q: Var,
) -> Result<Var> {
    let sims = tape.matmul_nt(u, v)?;
    let scaled = tape.scale_by(sims, inv_tau)?;
    let a = tape.softmax(scaled, 1)?;
    let mixed = tape.matmul(a, q)?;
    tape.softmax(mixed, 0)
}

/// `KL(O ‖ P)` on the tape, `O` the shot-axis softmax of shot logits `y`.
pub fn kd_loss_on_tape(tape: &mut Tape, y: Var, p: Var) -> Result<Var> {
    let o = tape.softmax(y, 0)?;
    let lo = tape.log_floor(o, PROB_FLOOR)?;
    let lp = tape.log_floor(p, PROB_FLOOR)?;
    let d = tape.sub(lo, lp)?;
    let prod = tape.mul(o, d)?;
    tape.sum(prod)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub contrastive: f64,
    pub synopsis_ce: f64,
    pub distill: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            contrastive: 1.0,
            synopsis_ce: 1.0,
            distill: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossParts {
    pub contrastive: f64,
    pub synopsis_ce: f64,
    pub distill: f64,
}

/// `α_c·L_c + α_ce·L_ce + α_kd·L_kd`.
pub fn total_loss(parts: LossParts, w: LossWeights) -> Result<f64> {
    for (name, v) in [
        ("contrastive", parts.contrastive),
        ("synopsis_ce", parts.synopsis_ce),
        ("distill", parts.distill),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component `{name}` is {v}")));
        }
    }
    Ok(w.contrastive * parts.contrastive
        + w.synopsis_ce * parts.synopsis_ce
        + w.distill * parts.distill)
}

/// Tape form of [`total_loss`].
pub fn total_loss_on_tape(
    tape: &mut Tape,
    lc: Var,
    lce: Var,
    lkd: Var,
    w: LossWeights,
) -> Result<Var> {
    let a = tape.scale(lc, w.contrastive)?;
    let b = tape.scale(lce, w.synopsis_ce)?;
    let c = tape.scale(lkd, w.distill)?;
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}
