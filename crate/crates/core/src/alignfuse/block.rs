use rand::Rng;

use crate::error::Result;
use crate::numcore::{init, ParamId, ParamStore, Session, Tensor, Var, LAYER_NORM_EPS};

/// Affine map `x W + b`, `W` stored `[in × out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Linear {
            w: store.insert(format!("{name}.w"), init::xavier_uniform(d_in, d_out, rng)),
            b: store.insert(format!("{name}.b"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.w);
        let b = s.param(self.b);
        let y = s.tape.matmul(x, w)?;
        s.tape.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        LayerNorm {
            gamma: store.insert(format!("{name}.gamma"), Tensor::full(&[c], 1.0)),
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[c])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        s.tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Post-norm transformer encoder block:
/// attention, add & norm, GeLU feed-forward, add & norm, dropout.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub ln1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: LayerNorm,
    pub heads: usize,
    pub dropout: f64,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c: usize,
        hidden: usize,
        heads: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        EncoderBlock {
            q: Linear::new(store, &format!("{name}.attn.q"), c, c, rng),
            k: Linear::new(store, &format!("{name}.attn.k"), c, c, rng),
            v: Linear::new(store, &format!("{name}.attn.v"), c, c, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), c),
            ff1: Linear::new(store, &format!("{name}.ff1"), c, hidden, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), hidden, c, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), c),
            heads,
            dropout,
        }
    }

    /// Full (non-causal) scaled dot-product self-attention.
    pub fn attention(&self, s: &mut Session, x: Var) -> Result<Var> {
        let q = self.q.forward(s, x)?;
        let k = self.k.forward(s, x)?;
        let v = self.v.forward(s, x)?;
        let c = s.tape.shape(x)[1];
        let dh = c / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    s.tape.slice_cols(q, h * dh, dh)?,
                    s.tape.slice_cols(k, h * dh, dh)?,
                    s.tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = s.tape.matmul_nt(qh, kh)?;
            let scores = s.tape.scale(scores, scale)?;
            let attn = s.tape.softmax(scores, 1)?;
            outs.push(s.tape.matmul(attn, vh)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            s.tape.concat_cols(&outs)
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let a = self.attention(s, x)?;
        let r = s.tape.add(x, a)?;
        let x1 = self.ln1.forward(s, r)?;
        let h = self.ff1.forward(s, x1)?;
        let h = s.tape.gelu(h)?;
        let f = self.ff2.forward(s, h)?;
        let r = s.tape.add(x1, f)?;
        let x2 = self.ln2.forward(s, r)?;
        s.dropout(x2, self.dropout)
    }
}
