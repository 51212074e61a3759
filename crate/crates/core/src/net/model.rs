//! The full extrapolation network and its batched forward pass.

use crate::channel::{ComplexMatrix, SystemConfig};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{BoundParams, Graph, ParamId, ParamStore, Tensor, Var};

use super::features::{csi_to_real, delay_features, real_to_csi};
use super::layers::{init_rng, Ffn, GateDecision, Init, LayerNorm, Linear, Mhsa, Moe, Registrar};
use super::{Dims, ModelConfig, NormStats, Variant};

/// Temporal feature encoder: an FFN across tokens followed by an FFN across
/// delay-domain features.
#[derive(Clone, Debug)]
pub struct Tfem {
    pub token_ffn: Ffn,
    pub feature_ffn: Ffn,
}

impl Tfem {
    fn new(reg: &mut Registrar, cfg: &ModelConfig, dims: Dims) -> Result<Self> {
        let t = dims.tokens_in;
        Ok(Self {
            token_ffn: Ffn::new(reg, "tfem.token_ffn", t, 2 * t, t)?,
            feature_ffn: Ffn::new(reg, "tfem.feature_ffn", dims.feat_in, 2 * cfg.d_re, cfg.d_re)?,
        })
    }

    /// `[B·M^s, 2K^s]` delay features → `[B·M^s, d_re]` latent.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x_t: Var, tokens: usize) -> Result<Var> {
        let feat = g.value(x_t).dims2().1;
        let xt = g.transpose_blocks(x_t, tokens)?;
        let h = self.token_ffn.forward(g, p, xt)?;
        let h = g.transpose_blocks(h, feat)?;
        self.feature_ffn.forward(g, p, h)
    }
}

/// Attention followed by a mixture of experts, with the normalization
/// placement depending on where the block sits.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub mhsa: Mhsa,
    pub norm2: LayerNorm,
    pub moe: Moe,
}

impl Block {
    pub(crate) fn new(reg: &mut Registrar, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(reg, &format!("{name}.norm1"), cfg.d_re)?,
            mhsa: Mhsa::new(reg, &format!("{name}.mhsa"), cfg.d_re, cfg.num_heads)?,
            norm2: LayerNorm::new(reg, &format!("{name}.norm2"), cfg.d_re)?,
            moe: Moe::new(
                reg,
                &format!("{name}.moe"),
                cfg.d_re,
                cfg.d_e(),
                cfg.num_experts,
                cfg.top_k,
            )?,
        })
    }

    /// Fusion arrangement: `u = LN(x + mhsa(x))`, `y = LN(u + moe(u))`, the
    /// gate reading `gate` when given and `u` otherwise.
    pub fn forward_fusion(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        x: Var,
        gate: Option<Var>,
        tokens: usize,
        evals: &mut usize,
    ) -> Result<(Var, GateDecision)> {
        let a = self.mhsa.forward(g, p, x, tokens)?;
        let u = g.add(x, a)?;
        let u = self.norm1.forward(g, p, u)?;
        let (e, decision) = self.moe.forward(g, p, u, gate.unwrap_or(u), tokens, evals)?;
        let y = g.add(u, e)?;
        Ok((self.norm2.forward(g, p, y)?, decision))
    }

    /// Deep arrangement: `u = x + mhsa(LN(x))`, `y = u + moe(LN(u))` with the
    /// gate reading the same normalized tensor as the experts.
    pub fn forward_deep(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        x: Var,
        tokens: usize,
        evals: &mut usize,
    ) -> Result<(Var, GateDecision)> {
        let n = self.norm1.forward(g, p, x)?;
        let a = self.mhsa.forward(g, p, n, tokens)?;
        let u = g.add(x, a)?;
        let n = self.norm2.forward(g, p, u)?;
        let (e, decision) = self.moe.forward(g, p, n, n, tokens, evals)?;
        Ok((g.add(u, e)?, decision))
    }
}

#[derive(Clone, Debug)]
struct Layout {
    tfem: Option<Tfem>,
    w_re: ParamId,
    pos: ParamId,
    fusion: Block,
    deep: Vec<Block>,
    token_map: ParamId,
    feature_map: ParamId,
}

impl Layout {
    fn register(reg: &mut Registrar, cfg: &ModelConfig, dims: Dims, variant: Variant) -> Result<Self> {
        let tfem = match variant {
            Variant::Full => Some(Tfem::new(reg, cfg, dims)?),
            Variant::NoTfem => None,
        };
        let w_re = Linear::new(reg, "embed", dims.feat_in, cfg.d_re, false)?.w;
        let pos = reg.param("embed.pos", &[dims.tokens_in, cfg.d_re], Init::StandardNormal)?;
        let fusion = Block::new(reg, "fusion", cfg)?;
        let deep = (0..cfg.num_blocks)
            .map(|i| Block::new(reg, &format!("deep{i}"), cfg))
            .collect::<Result<_>>()?;
        let token_map = reg.param(
            "output.token_map",
            &[dims.tokens_in, dims.tokens_out],
            Init::Uniform { fan_in: dims.tokens_in },
        )?;
        let feature_map = reg.param(
            "output.feature_map",
            &[cfg.d_re, dims.feat_out],
            Init::Uniform { fan_in: cfg.d_re },
        )?;
        Ok(Self {
            tfem,
            w_re,
            pos,
            fusion,
            deep,
            token_map,
            feature_map,
        })
    }
}

/// Normalized network inputs for a batch of `B` samples.
#[derive(Clone, Debug)]
pub struct ModelInput {
    /// Normalized sub-6 tokens `[B·M^s, 2K^s]`.
    pub x_f: Tensor,
    /// Delay-domain view of `x_f`, present for the full variant.
    pub x_t: Option<Tensor>,
    pub batch: usize,
}

impl ModelInput {
    /// Stacks per-sample inputs. Each element is `(x_f, x_t)` for one sample.
    pub fn stack(parts: &[&(Tensor, Option<Tensor>)]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        let (t, f) = first.0.dims2();
        let b = parts.len();
        let mut x_f = Vec::with_capacity(b * t * f);
        let mut x_t = first.1.as_ref().map(|_| Vec::with_capacity(b * t * f));
        for (xf, xt) in parts.iter().map(|p| (&p.0, &p.1)) {
            x_f.extend_from_slice(xf.data());
            if let (Some(acc), Some(xt)) = (x_t.as_mut(), xt) {
                acc.extend_from_slice(xt.data());
            }
        }
        Ok(Self {
            x_f: Tensor::new(&[b * t, f], x_f)?,
            x_t: x_t.map(|d| Tensor::new(&[b * t, f], d)).transpose()?,
            batch: b,
        })
    }
}

/// Graph handles produced by one batched forward pass.
#[derive(Debug)]
pub struct Forward {
    /// Normalized prediction `[B·M^m, 2K^m]`.
    pub output: Var,
    /// One decision per MoE layer, fusion block first.
    pub gates: Vec<GateDecision>,
    /// Total (token, expert) evaluations across all MoE layers.
    pub expert_evals: usize,
}

/// A network together with its configuration and frozen statistics.
#[derive(Clone, Debug)]
pub struct MdfceModel {
    config: ModelConfig,
    system: SystemConfig,
    variant: Variant,
    dims: Dims,
    norm: NormStats,
    params: ParamStore,
    layout: Layout,
}

impl MdfceModel {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(
        config: ModelConfig,
        system: SystemConfig,
        variant: Variant,
        norm: NormStats,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        system.validate()?;
        let dims = Dims::new(&system);
        check_norm(&norm, dims)?;
        let mut params = ParamStore::new();
        let mut rng = init_rng(seed);
        let layout = {
            let mut reg = Registrar::create(&mut params, &mut rng);
            Layout::register(&mut reg, &config, dims, variant)?
        };
        Ok(Self {
            config,
            system,
            variant,
            dims,
            norm,
            params,
            layout,
        })
    }

    /// Rebuilds a model around existing parameters, checking every name and
    /// shape.
    pub fn from_parts(
        config: ModelConfig,
        system: SystemConfig,
        variant: Variant,
        norm: NormStats,
        mut params: ParamStore,
    ) -> Result<Self> {
        config.validate()?;
        system.validate()?;
        let dims = Dims::new(&system);
        check_norm(&norm, dims)?;
        let layout = {
            let mut reg = Registrar::attach(&mut params);
            let layout = Layout::register(&mut reg, &config, dims, variant)?;
            reg.finish()?;
            layout
        };
        Ok(Self {
            config,
            system,
            variant,
            dims,
            norm,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn system(&self) -> &SystemConfig {
        &self.system
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_norm(&mut self, norm: NormStats) -> Result<()> {
        check_norm(&norm, self.dims)?;
        self.norm = norm;
        Ok(())
    }

    /// Checks that `h` has the sub-6 shape this model was built for.
    pub fn check_input(&self, h: &ComplexMatrix) -> Result<()> {
        let want = (self.system.sub6.bs_antennas, self.system.sub6.csi_cols());
        if h.shape() != want {
            return Err(Error::Contract(format!(
                "sub-6 CSI has shape {}x{}, model expects {}x{}",
                h.rows(),
                h.cols(),
                want.0,
                want.1
            )));
        }
        Ok(())
    }

    /// Normalized token views `(x_f, x_t)` of one sub-6 CSI matrix.
    pub fn sample_input(&self, h: &ComplexMatrix) -> Result<(Tensor, Option<Tensor>)> {
        self.check_input(h)?;
        let x = csi_to_real(h, self.dims.subcarriers_in)?;
        let x_f = self.norm.normalize_input(&x)?;
        let x_t = match self.variant {
            Variant::Full => Some(delay_features(&x_f)?),
            Variant::NoTfem => None,
        };
        Ok((x_f, x_t))
    }

    /// Normalized target tokens `[M^m, 2K^m]` of one mmWave CSI matrix.
    pub fn sample_target(&self, h: &ComplexMatrix) -> Result<Tensor> {
        let want = (self.system.mmwave.bs_antennas, self.system.mmwave.csi_cols());
        if h.shape() != want {
            return Err(Error::Contract(format!(
                "mmWave CSI has shape {}x{}, model expects {}x{}",
                h.rows(),
                h.cols(),
                want.0,
                want.1
            )));
        }
        self.norm
            .normalize_target(&csi_to_real(h, self.system.mmwave.subcarriers)?)
    }

    /// `x_f·W_re + P` for a batch.
    pub fn project_embed(&self, g: &mut Graph, p: &BoundParams, x_f: Var) -> Result<Var> {
        let (rows, _) = g.value(x_f).dims2();
        let (t, d) = (self.dims.tokens_in, self.config.d_re);
        let y = g.matmul(x_f, p.var(self.layout.w_re))?;
        let y = g.reshape(y, &[rows / t, t * d])?;
        let pos = g.reshape(p.var(self.layout.pos), &[t * d])?;
        let y = g.add_bias(y, pos)?;
        g.reshape(y, &[rows, d])
    }

    /// Latent `[B·M^s, d_re]` → normalized prediction `[B·M^m, 2K^m]`.
    pub fn output_project(&self, g: &mut Graph, p: &BoundParams, latent: Var) -> Result<Var> {
        let y = g.transpose_blocks(latent, self.dims.tokens_in)?;
        let y = g.matmul(y, p.var(self.layout.token_map))?;
        let y = g.transpose_blocks(y, self.config.d_re)?;
        g.matmul(y, p.var(self.layout.feature_map))
    }

    /// Batched forward pass through every module.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, input: &ModelInput) -> Result<Forward> {
        let t = self.dims.tokens_in;
        let mut evals = 0;
        let x_f = g.constant(input.x_f.clone());
        let gate = match (&self.layout.tfem, &input.x_t) {
            (Some(tfem), Some(x_t)) => {
                let x_t = g.constant(x_t.clone());
                Some(tfem.forward(g, p, x_t, t)?)
            }
            (None, _) => None,
            (Some(_), None) => {
                return Err(Error::Contract("full model needs delay-domain input".into()))
            }
        };
        let x = self.project_embed(g, p, x_f)?;
        let (mut x, first) = self.layout.fusion.forward_fusion(g, p, x, gate, t, &mut evals)?;
        let mut gates = vec![first];
        for block in &self.layout.deep {
            let (y, d) = block.forward_deep(g, p, x, t, &mut evals)?;
            x = y;
            gates.push(d);
        }
        let output = self.output_project(g, p, x)?;
        Ok(Forward {
            output,
            gates,
            expert_evals: evals,
        })
    }

    /// Estimated mmWave CSI for each sub-6 input; samples are processed in
    /// parallel chunks.
    pub fn predict_batch(&self, inputs: &[ComplexMatrix]) -> Result<Vec<ComplexMatrix>> {
        const CHUNK: usize = 32;
        let chunks = inputs.len().div_ceil(CHUNK);
        let out = par::map_indexed(chunks, |c| {
            let part = &inputs[c * CHUNK..((c + 1) * CHUNK).min(inputs.len())];
            self.predict_chunk(part)
        });
        let mut all = Vec::with_capacity(inputs.len());
        for chunk in out {
            all.extend(chunk?);
        }
        Ok(all)
    }

    /// Estimated mmWave CSI for one sub-6 CSI matrix.
    pub fn predict(&self, h_sub6: &ComplexMatrix) -> Result<ComplexMatrix> {
        Ok(self.predict_chunk(std::slice::from_ref(h_sub6))?.remove(0))
    }

    fn predict_chunk(&self, inputs: &[ComplexMatrix]) -> Result<Vec<ComplexMatrix>> {
        let parts = inputs
            .iter()
            .map(|h| self.sample_input(h))
            .collect::<Result<Vec<_>>>()?;
        let input = ModelInput::stack(&parts.iter().collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let fwd = self.forward(&mut g, &p, &input)?;
        let out = g.value(fwd.output);
        let per = self.dims.tokens_out * self.dims.feat_out;
        out.data()
            .chunks_exact(per)
            .map(|d| {
                let y = Tensor::new(&[self.dims.tokens_out, self.dims.feat_out], d.to_vec())?;
                real_to_csi(
                    &self.norm.denormalize_target(&y)?,
                    self.system.mmwave.bs_antennas,
                )
            })
            .collect()
    }
}

fn check_norm(norm: &NormStats, dims: Dims) -> Result<()> {
    norm.validate()?;
    let (ni, no) = (dims.tokens_in * dims.feat_in, dims.tokens_out * dims.feat_out);
    if norm.input_mean.len() != ni || norm.target_mean.len() != no {
        return Err(Error::Config(format!(
            "normalization statistics cover {} input and {} target entries, model needs {ni} and {no}",
            norm.input_mean.len(),
            norm.target_mean.len()
        )));
    }
    Ok(())
}
