//! Analytic multiply-accumulate counts of one forward pass.
//!
//! One MAC is one multiply plus one add; FLOPs are reported as `2·MACs`.
//! Element-wise work (activations, normalization, softmax) is not counted.

use crate::net::{Dims, ModelConfig, Variant};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub macs: u64,
}

/// Per-layer MAC counts of one sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopCount {
    pub layers: Vec<LayerCost>,
}

impl FlopCount {
    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs()
    }

    /// MACs spent inside expert networks.
    pub fn expert_macs(&self) -> u64 {
        self.layers
            .iter()
            .filter(|l| l.name.ends_with(".experts"))
            .map(|l| l.macs)
            .sum()
    }

    pub fn get(&self, name: &str) -> Option<u64> {
        self.layers.iter().find(|l| l.name == name).map(|l| l.macs)
    }
}

/// Sparse count: every token runs through `top_k` experts.
pub fn flops_per_sample(cfg: &ModelConfig, dims: Dims, variant: Variant) -> FlopCount {
    count(cfg, dims, variant, cfg.top_k)
}

/// Count with every expert evaluated on every token.
pub fn dense_flops_per_sample(cfg: &ModelConfig, dims: Dims, variant: Variant) -> FlopCount {
    count(cfg, dims, variant, cfg.num_experts)
}

fn count(cfg: &ModelConfig, dims: Dims, variant: Variant, active: usize) -> FlopCount {
    let t = dims.tokens_in as u64;
    let f = dims.feat_in as u64;
    let d = cfg.d_re as u64;
    let mut layers = Vec::new();
    let mut push = |name: String, macs: u64| layers.push(LayerCost { name, macs });

    if variant == Variant::Full {
        push("tfem.token_ffn".into(), f * (t * 2 * t + 2 * t * t));
        push("tfem.feature_ffn".into(), t * (f * 2 * d + 2 * d * d));
    }
    push("embed".into(), t * f * d);
    let blocks = std::iter::once("fusion".to_string()).chain((0..cfg.num_blocks).map(|i| format!("deep{i}")));
    for name in blocks {
        push(format!("{name}.attention.qkv"), 3 * t * d * d);
        push(format!("{name}.attention.scores"), t * t * d);
        push(format!("{name}.attention.mix"), t * t * d);
        push(format!("{name}.attention.out"), t * d * d);
        push(format!("{name}.gate"), t * d * cfg.num_experts as u64);
        push(
            format!("{name}.experts"),
            active as u64 * t * 2 * d * cfg.d_e() as u64,
        );
    }
    push("output.token_map".into(), d * t * dims.tokens_out as u64);
    push(
        "output.feature_map".into(),
        dims.tokens_out as u64 * d * dims.feat_out as u64,
    );
    FlopCount { layers }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::SystemConfig;

    fn dims() -> Dims {
        Dims::new(&SystemConfig::default())
    }

    #[test]
    fn sparse_experts_are_k_over_n() {
        let cfg = ModelConfig::default();
        let s = flops_per_sample(&cfg, dims(), Variant::Full);
        let dns = dense_flops_per_sample(&cfg, dims(), Variant::Full);
        assert_eq!(4 * s.expert_macs(), dns.expert_macs());
        let all = ModelConfig { top_k: 8, ..cfg };
        assert_eq!(flops_per_sample(&all, dims(), Variant::Full), dns);
    }

    #[test]
    fn monotone_in_depth() {
        let mut prev = 0;
        for n in 0..6 {
            let cfg = ModelConfig { num_blocks: n, ..ModelConfig::default() };
            let c = flops_per_sample(&cfg, dims(), Variant::Full).total_macs();
            assert!(c > prev);
            prev = c;
        }
    }

    #[test]
    fn width_scaling() {
        let a = flops_per_sample(&ModelConfig::default(), dims(), Variant::Full);
        let cfg = ModelConfig { d_re: 256, ..ModelConfig::default() };
        let b = flops_per_sample(&cfg, dims(), Variant::Full);
        for (name, factor) in [("fusion.attention.scores", 2), ("fusion.attention.qkv", 4), ("deep3.attention.out", 4)] {
            assert_eq!(b.get(name).unwrap(), factor * a.get(name).unwrap(), "{name}");
        }
    }
}
