use rand::Rng;

use super::block::{EncoderBlock, LayerNorm, Linear};
use super::config::{align_indices, ModelConfig};
use crate::error::{Error, Result};
use crate::numcore::{init, ParamId, ParamStore, Session, Tensor, Var};

/// Parameters private to one modality.
#[derive(Debug, Clone)]
pub struct ModalityParams {
    pub proj: Linear,
    pub pos: ParamId,
    pub ln: LayerNorm,
    pub tokens: ParamId,
    pub unimodal: Vec<EncoderBlock>,
    pub fusion: Vec<EncoderBlock>,
}

/// Handles into a [`ParamStore`]; the model itself holds no values.
#[derive(Debug, Clone)]
pub struct FusionModel {
    pub cfg: ModelConfig,
    /// Shared by every modality and every bottleneck set.
    pub align_pe: ParamId,
    pub modalities: Vec<ModalityParams>,
    pub head: Linear,
}

/// Output of the trunk, before any head.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `[L × M·C]`
    pub fused: Var,
    /// Row count of every sequence fed to a fusion block.
    pub fusion_seq_lens: Vec<usize>,
}

impl FusionModel {
    /// Registers all parameters under `prefix` in `store`.
    pub fn new(
        cfg: ModelConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let align_pe = store.insert(
            format!("{prefix}.align_pe"),
            init::normal(&[cfg.align_len, c], cfg.table_std, rng),
        );
        let block = |store: &mut ParamStore, name: String, rng: &mut _| {
            EncoderBlock::new(store, &name, c, cfg.ffn_hidden, cfg.heads, cfg.dropout, rng)
        };
        let mut modalities = Vec::with_capacity(cfg.num_modalities());
        for (m, &dim) in cfg.modality_dims.iter().enumerate() {
            let p = format!("{prefix}.m{m}");
            let proj = Linear::new(store, &format!("{p}.proj"), dim, c, rng);
            let pos = store.insert(
                format!("{p}.pos"),
                init::normal(&[cfg.seq_len, c], cfg.table_std, rng),
            );
            let ln = LayerNorm::new(store, &format!("{p}.embed_ln"), c);
            let tokens = store.insert(
                format!("{p}.tokens"),
                init::normal(&[cfg.align_len, c], cfg.table_std, rng),
            );
            let unimodal = (0..cfg.unimodal_blocks)
                .map(|k| block(store, format!("{p}.uni{k}"), rng))
                .collect();
            let fusion = (0..cfg.fusion_blocks)
                .map(|k| block(store, format!("{p}.fus{k}"), rng))
                .collect();
            modalities.push(ModalityParams {
                proj,
                pos,
                ln,
                tokens,
                unimodal,
                fusion,
            });
        }
        let head = Linear::new(
            store,
            &format!("{prefix}.head"),
            cfg.fused_channels(),
            cfg.num_classes,
            rng,
        );
        Ok(FusionModel {
            cfg,
            align_pe,
            modalities,
            head,
        })
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    fn check_input(&self, m: usize, feats: &Tensor) -> Result<usize> {
        let dim = self.cfg.modality_dims[m];
        if feats.rank() != 2 || feats.cols() != dim {
            return Err(Error::shape(
                "embed_modality",
                feats.shape(),
                &[feats.rows(), dim],
            ));
        }
        let len = feats.rows();
        if len == 0 {
            return Err(Error::Data(format!("modality {m}: empty input")));
        }
        if len > self.cfg.seq_len {
            return Err(Error::Config(format!(
                "input of {len} rows exceeds the configured length {}; split it into chunks first",
                self.cfg.seq_len
            )));
        }
        Ok(len)
    }

    /// `g^m(E) + PE[0:L] + AlignPE[bucket(i)]`, before normalization.
    pub fn embed_pre_norm(&self, s: &mut Session, m: usize, feats: &Tensor) -> Result<Var> {
        let len = self.check_input(m, feats)?;
        let p = &self.modalities[m];
        let x = s.input(feats.clone());
        let h = p.proj.forward(s, x)?;
        let pos = s.param(p.pos);
        let pe = s.tape.slice_rows(pos, 0, len)?;
        let mut out = s.tape.add(h, pe)?;
        if self.cfg.align_pe {
            let table = s.param(self.align_pe);
            let ape = s
                .tape
                .gather_rows(table, align_indices(len, self.cfg.align_len))?;
            out = s.tape.add(out, ape)?;
        }
        Ok(out)
    }

    pub fn embed_modality(&self, s: &mut Session, m: usize, feats: &Tensor) -> Result<Var> {
        let pre = self.embed_pre_norm(s, m, feats)?;
        let normed = self.modalities[m].ln.forward(s, pre)?;
        s.dropout(normed, self.cfg.dropout)
    }

    /// Learnable tokens of modality `m` with AlignPE row `j` added to token `j`.
    pub fn make_bottleneck(&self, s: &mut Session, m: usize) -> Result<Var> {
        let tokens = s.param(self.modalities[m].tokens);
        if !self.cfg.token_align_pe {
            return Ok(tokens);
        }
        let table = s.param(self.align_pe);
        s.tape.add(tokens, table)
    }

    /// Runs the unimodal stack on `[tokens; latents]` and splits the result.
    pub fn unimodal_encode(
        &self,
        s: &mut Session,
        m: usize,
        embedded: Var,
        tokens: Var,
    ) -> Result<(Var, Var)> {
        let ln = self.cfg.align_len;
        let blocks = &self.modalities[m].unimodal;
        if blocks.is_empty() {
            return Ok((embedded, tokens));
        }
        let len = s.tape.shape(embedded)[0];
        let mut x = s.tape.concat_rows(&[tokens, embedded])?;
        for b in blocks {
            x = b.forward(s, x)?;
        }
        let lat = s.tape.slice_rows(x, ln, len)?;
        let tok = s.tape.slice_rows(x, 0, ln)?;
        Ok((lat, tok))
    }

    /// Fusion stage; every modality attends over all token sets plus its own latents.
    pub fn fusion_encode(
        &self,
        s: &mut Session,
        latents: Vec<Var>,
        tokens: Vec<Var>,
    ) -> Result<Encoded> {
        let nm = self.num_modalities();
        if latents.len() != nm || tokens.len() != nm {
            return Err(Error::Contract(format!(
                "fusion expects {nm} modalities, got {} latents and {} token sets",
                latents.len(),
                tokens.len()
            )));
        }
        let ln = self.cfg.align_len;
        let len = s.tape.shape(latents[0])[0];
        if latents.iter().any(|&v| s.tape.shape(v)[0] != len) {
            return Err(Error::Contract(
                "modalities disagree on sequence length".into(),
            ));
        }
        let mut latents = latents;
        let mut tokens = tokens;
        let mut fusion_seq_lens = Vec::new();
        for b in 0..self.cfg.fusion_blocks {
            let mut updates: Vec<Vec<Var>> = vec![Vec::with_capacity(nm); nm];
            let mut next_latents = Vec::with_capacity(nm);
            for (m, p) in self.modalities.iter().enumerate() {
                let mut parts = tokens.clone();
                parts.push(latents[m]);
                let seq = s.tape.concat_rows(&parts)?;
                fusion_seq_lens.push(s.tape.shape(seq)[0]);
                let out = p.fusion[b].forward(s, seq)?;
                next_latents.push(s.tape.slice_rows(out, nm * ln, len)?);
                for (k, u) in updates.iter_mut().enumerate() {
                    u.push(s.tape.slice_rows(out, k * ln, ln)?);
                }
            }
            latents = next_latents;
            tokens = Vec::with_capacity(nm);
            for u in updates {
                let mut acc = u[0];
                for &v in &u[1..] {
                    acc = s.tape.add(acc, v)?;
                }
                tokens.push(if nm == 1 {
                    acc
                } else {
                    s.tape.scale(acc, 1.0 / nm as f64)?
                });
            }
        }
        let fused = if nm == 1 {
            latents[0]
        } else {
            s.tape.concat_cols(&latents)?
        };
        Ok(Encoded {
            fused,
            fusion_seq_lens,
        })
    }

    /// Full trunk from pooled features (one matrix per modality) to `Z^fused`.
    pub fn encode(&self, s: &mut Session, feats: &[Tensor]) -> Result<Encoded> {
        let nm = self.num_modalities();
        if feats.len() != nm {
            return Err(Error::Contract(format!(
                "model has {nm} modalities, input has {}",
                feats.len()
            )));
        }
        let len = feats[0].rows();
        if feats.iter().any(|f| f.rows() != len) {
            return Err(Error::Data(
                "modalities disagree on the number of shots".into(),
            ));
        }
        let mut latents = Vec::with_capacity(nm);
        let mut tokens = Vec::with_capacity(nm);
        for (m, f) in feats.iter().enumerate() {
            let e = self.embed_modality(s, m, f)?;
            let t = self.make_bottleneck(s, m)?;
            let (lat, tok) = self.unimodal_encode(s, m, e, t)?;
            latents.push(lat);
            tokens.push(tok);
        }
        self.fusion_encode(s, latents, tokens)
    }

    pub fn head(&self, s: &mut Session, fused: Var) -> Result<Var> {
        self.head.forward(s, fused)
    }

    /// Two scene logits `[1 × 2]` for the middle shot of a full window.
    pub fn forward_scene(&self, s: &mut Session, window: &[Tensor]) -> Result<Var> {
        let len = self.cfg.seq_len;
        if window.iter().any(|w| w.rows() != len) {
            return Err(Error::Data(format!(
                "scene window must have exactly {len} shots"
            )));
        }
        if len.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "scene window length {len} must be odd"
            )));
        }
        let enc = self.encode(s, window)?;
        let key = s.tape.slice_rows(enc.fused, len / 2, 1)?;
        self.head(s, key)
    }

    /// Per-row logits `[L_actual × N_c]`, plus the fused representation.
    pub fn forward_rows(&self, s: &mut Session, feats: &[Tensor]) -> Result<(Var, Var)> {
        let enc = self.encode(s, feats)?;
        let logits = self.head(s, enc.fused)?;
        Ok((logits, enc.fused))
    }

    pub fn forward_act(&self, s: &mut Session, feats: &[Tensor]) -> Result<Var> {
        Ok(self.forward_rows(s, feats)?.0)
    }

    /// Sentence logits `q` of a single-modality synopsis model.
    pub fn forward_synopsis(&self, s: &mut Session, sentences: &Tensor) -> Result<Var> {
        if self.num_modalities() != 1 {
            return Err(Error::Config(
                "synopsis model must have exactly one modality".into(),
            ));
        }
        self.forward_act(s, std::slice::from_ref(sentences))
    }
}
