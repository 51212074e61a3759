use serde::{Deserialize, Serialize};

use crate::channel::SystemConfig;
use crate::error::{Error, Result};

/// Network hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Latent width.
    pub d_re: usize,
    /// Total hidden width shared by the experts of one MoE layer.
    pub d_hid: usize,
    pub num_experts: usize,
    /// Experts activated per token.
    pub top_k: usize,
    pub num_heads: usize,
    /// Number of deep interaction blocks.
    pub num_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_re: 128,
            d_hid: 256,
            num_experts: 8,
            top_k: 2,
            num_heads: 4,
            num_blocks: 7,
        }
    }
}

impl ModelConfig {
    /// Reduced model used for the CPU-scale experiment.
    pub fn desk() -> Self {
        Self {
            d_re: 64,
            d_hid: 128,
            num_experts: 4,
            top_k: 2,
            num_heads: 4,
            num_blocks: 3,
        }
    }

    /// Smallest useful model, for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            d_re: 8,
            d_hid: 16,
            num_experts: 2,
            top_k: 1,
            num_heads: 2,
            num_blocks: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if [self.d_re, self.d_hid, self.num_experts, self.num_heads]
            .contains(&0)
        {
            return bad("d_re, d_hid, num_experts and num_heads must be >= 1".into());
        }
        if !self.d_re.is_multiple_of(self.num_heads) {
            return bad(format!(
                "d_re = {} is not divisible by num_heads = {}",
                self.d_re, self.num_heads
            ));
        }
        if !self.d_hid.is_multiple_of(self.num_experts) {
            return bad(format!(
                "d_hid = {} is not divisible by num_experts = {}",
                self.d_hid, self.num_experts
            ));
        }
        if !(1..=self.num_experts).contains(&self.top_k) {
            return bad(format!(
                "top_k = {} must lie in 1..={}",
                self.top_k, self.num_experts
            ));
        }
        Ok(())
    }

    /// Hidden width of a single expert.
    pub fn d_e(&self) -> usize {
        self.d_hid / self.num_experts
    }

    pub fn head_dim(&self) -> usize {
        self.d_re / self.num_heads
    }

    /// Number of MoE layers: one in the fusion block plus one per deep block.
    pub fn moe_layers(&self) -> usize {
        1 + self.num_blocks
    }
}

/// Token and feature counts implied by a system configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    /// Sub-6 antenna pairs `M^s`.
    pub tokens_in: usize,
    /// Sub-6 subcarriers `K^s`.
    pub subcarriers_in: usize,
    /// `2K^s`
    pub feat_in: usize,
    /// mmWave antenna pairs `M^m`.
    pub tokens_out: usize,
    /// `2K^m`
    pub feat_out: usize,
}

impl Dims {
    pub fn new(sys: &SystemConfig) -> Self {
        Self {
            tokens_in: sys.sub6.antenna_pairs(),
            subcarriers_in: sys.sub6.subcarriers,
            feat_in: 2 * sys.sub6.subcarriers,
            tokens_out: sys.mmwave.antenna_pairs(),
            feat_out: 2 * sys.mmwave.subcarriers,
        }
    }
}

/// Which gate input the fusion block uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Gate driven by the temporal feature encoder.
    #[default]
    Full,
    /// Ablation without the temporal encoder: the fusion block gates on its
    /// own normalized representation.
    NoTfem,
}

impl Variant {
    pub fn tag(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTfem => "no-tfem",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = ModelConfig::default();
        assert_eq!((c.d_re, c.d_hid, c.num_experts, c.top_k), (128, 256, 8, 2));
        assert_eq!((c.d_e(), c.num_heads, c.num_blocks), (32, 4, 7));
        c.validate().unwrap();
        ModelConfig::desk().validate().unwrap();
    }

    #[test]
    fn invalid_configs() {
        let base = ModelConfig::default();
        for c in [
            ModelConfig { num_heads: 3, ..base.clone() },
            ModelConfig { d_hid: 100, num_experts: 8, ..base.clone() },
            ModelConfig { top_k: 0, ..base.clone() },
            ModelConfig { top_k: 9, ..base.clone() },
        ] {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn dims_follow_system() {
        let d = Dims::new(&SystemConfig::table(16, 32));
        assert_eq!((d.tokens_in, d.feat_in, d.tokens_out, d.feat_out), (32, 256, 64, 512));
    }
}
