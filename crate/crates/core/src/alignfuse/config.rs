use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of one fusion model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Maximum input length `L` (shots or sentences); sizes the regular PE table.
    pub seq_len: usize,
    /// Alignment PE length `L_n`, also the number of bottleneck tokens per modality.
    pub align_len: usize,
    /// Common channel width `C`.
    pub channels: usize,
    /// Feed-forward hidden width `C_k`.
    pub ffn_hidden: usize,
    pub unimodal_blocks: usize,
    pub fusion_blocks: usize,
    pub dropout: f64,
    /// 2 for scene boundaries, 5 for turning points.
    pub num_classes: usize,
    /// Raw feature width of each modality.
    pub modality_dims: Vec<usize>,
    #[serde(default = "one")]
    pub heads: usize,
    /// Add the alignment PE to shot embeddings.
    #[serde(default = "yes")]
    pub align_pe: bool,
    /// Add the alignment PE to bottleneck tokens.
    #[serde(default = "yes")]
    pub token_align_pe: bool,
    /// Std of the Gaussian init of the PE, alignment PE and token tables.
    #[serde(default = "table_std")]
    pub table_std: f64,
}

fn table_std() -> f64 {
    0.02
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    /// Scene model: `L=17, L_n=2, C=768, C_k=3072, N_u=2, N_f=1, p=0.1`.
    pub fn scene_reference(modality_dims: Vec<usize>) -> Self {
        ModelConfig {
            seq_len: 17,
            align_len: 2,
            channels: 768,
            ffn_hidden: 3072,
            unimodal_blocks: 2,
            fusion_blocks: 1,
            dropout: 0.1,
            num_classes: 2,
            modality_dims,
            heads: 1,
            align_pe: true,
            token_align_pe: true,
            table_std: table_std(),
        }
    }

    /// Act shot model: `L=3000, L_n=100, C=C_k=128, N_u=N_f=1, p=0.5`.
    pub fn act_shot_reference(modality_dims: Vec<usize>) -> Self {
        ModelConfig {
            seq_len: 3000,
            align_len: 100,
            channels: 128,
            ffn_hidden: 128,
            unimodal_blocks: 1,
            fusion_blocks: 1,
            dropout: 0.5,
            num_classes: 5,
            modality_dims,
            heads: 1,
            align_pe: true,
            token_align_pe: true,
            table_std: table_std(),
        }
    }

    /// Synopsis model: `L=60, L_n=20, C=C_k=128·M, N_u=1`, no fusion stage.
    pub fn synopsis_reference(text_dim: usize, shot_modalities: usize) -> Self {
        ModelConfig {
            seq_len: 60,
            align_len: 20,
            channels: 128 * shot_modalities,
            ffn_hidden: 128 * shot_modalities,
            unimodal_blocks: 1,
            fusion_blocks: 0,
            dropout: 0.1,
            num_classes: 5,
            modality_dims: vec![text_dim],
            heads: 1,
            align_pe: true,
            token_align_pe: true,
            table_std: table_std(),
        }
    }

    /// Scene model sized for a laptop: `C=32, C_k=64`, tables drawn from
    /// N(0, 1) so positions are distinguishable early in a short schedule.
    pub fn scene_desk(modality_dims: Vec<usize>) -> Self {
        ModelConfig {
            channels: 32,
            ffn_hidden: 64,
            table_std: 1.0,
            ..ModelConfig::scene_reference(modality_dims)
        }
    }

    /// Act shot model sized for a laptop: `C=C_k=32, L_n=20, p=0.1`, N(0, 1) tables.
    pub fn act_shot_desk(modality_dims: Vec<usize>) -> Self {
        ModelConfig {
            align_len: 20,
            channels: 32,
            ffn_hidden: 32,
            dropout: 0.1,
            table_std: 1.0,
            ..ModelConfig::act_shot_reference(modality_dims)
        }
    }

    /// Synopsis model sized for a laptop: `C=C_k=32·M`, N(0, 1) tables.
    pub fn synopsis_desk(text_dim: usize, shot_modalities: usize) -> Self {
        ModelConfig {
            channels: 32 * shot_modalities,
            ffn_hidden: 32 * shot_modalities,
            table_std: 1.0,
            ..ModelConfig::synopsis_reference(text_dim, shot_modalities)
        }
    }

    pub fn num_modalities(&self) -> usize {
        self.modality_dims.len()
    }

    /// Width of the fused representation, `M·C`.
    pub fn fused_channels(&self) -> usize {
        self.channels * self.num_modalities()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seq_len == 0 || self.align_len == 0 || self.align_len > self.seq_len {
            return bad(format!(
                "need 0 < align_len ≤ seq_len, got align_len = {}, seq_len = {}",
                self.align_len, self.seq_len
            ));
        }
        if self.channels == 0 || self.ffn_hidden == 0 {
            return bad("channels and ffn_hidden must be positive".into());
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return bad(format!(
                "heads = {} must divide channels = {}",
                self.heads, self.channels
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout = {} outside [0, 1)", self.dropout));
        }
        if self.num_classes != 2 && self.num_classes != 5 {
            return bad(format!("num_classes = {} must be 2 or 5", self.num_classes));
        }
        if self.modality_dims.is_empty() || self.modality_dims.contains(&0) {
            return bad("need at least one modality, all with positive width".into());
        }
        if !(self.table_std.is_finite() && self.table_std > 0.0) {
            return bad(format!("table_std = {} must be positive", self.table_std));
        }
        Ok(())
    }
}

/// Bucket of position `i` in a sequence of length `len`: `floor(L_n·i/len)`.
pub fn align_index(i: usize, len: usize, align_len: usize) -> Result<usize> {
    if i >= len {
        return Err(Error::Contract(format!(
            "position {i} out of range for length {len}"
        )));
    }
    Ok(align_len * i / len)
}

/// Buckets for every position of a length-`len` sequence.
pub fn align_indices(len: usize, align_len: usize) -> Vec<usize> {
    (0..len).map(|i| align_len * i / len).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifteen_into_three() {
        let b = align_indices(15, 3);
        assert_eq!(b, [0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2]);
    }

    #[test]
    fn single_bucket_and_scene_window() {
        assert!((0..9).all(|i| align_index(i, 9, 1).unwrap() == 0));
        assert_eq!(align_index(8, 17, 2).unwrap(), 0);
        assert_eq!(align_index(9, 17, 2).unwrap(), 1);
        assert_eq!(align_index(20, 40, 20).unwrap(), 10);
        assert!(align_index(17, 17, 2).is_err());
    }

    #[test]
    fn reference_configs_are_valid() {
        ModelConfig::scene_reference(vec![2048, 2048, 768])
            .validate()
            .unwrap();
        ModelConfig::act_shot_reference(vec![768, 384])
            .validate()
            .unwrap();
        let syn = ModelConfig::synopsis_reference(384, 2);
        syn.validate().unwrap();
        assert_eq!(syn.channels, 256);
        assert_eq!(syn.fusion_blocks, 0);
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::scene_reference(vec![4]);
        c.align_len = 18;
        assert!(c.validate().is_err());
        c.align_len = 2;
        c.num_classes = 3;
        assert!(c.validate().is_err());
        c.num_classes = 2;
        c.heads = 5;
        assert!(c.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn buckets_are_monotone_and_balanced(len in 1usize..400, frac in 0.0f64..1.0) {
            let align_len = ((len as f64 * frac) as usize).clamp(1, len);
            let b = align_indices(len, align_len);
            proptest::prop_assert!(b.windows(2).all(|w| w[0] <= w[1]));
            proptest::prop_assert!(b.iter().all(|&x| x < align_len));
            let mut counts = vec![0usize; align_len];
            for &x in &b {
                counts[x] += 1;
            }
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            proptest::prop_assert!(hi - lo <= 1);
        }
    }
}
