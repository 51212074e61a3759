//! Building blocks of the network, each owning the ids of its parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BoundParams, Graph, ParamId, ParamStore, Tensor, Var};

/// Layer-norm epsilon used throughout the network.
pub const LN_EPS: f64 = 1e-5;

/// How a freshly created parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in `±1/√fan_in`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
    StandardNormal,
}

enum Mode<'a> {
    Create(&'a mut ChaCha8Rng),
    Attach,
}

/// Hands out parameter ids, either creating fresh tensors or attaching to
/// tensors already present in the store (for loaded checkpoints).
pub struct Registrar<'a> {
    store: &'a mut ParamStore,
    mode: Mode<'a>,
    claimed: usize,
}

impl<'a> Registrar<'a> {
    pub fn create(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            mode: Mode::Create(rng),
            claimed: 0,
        }
    }

    pub fn attach(store: &'a mut ParamStore) -> Self {
        Self {
            store,
            mode: Mode::Attach,
            claimed: 0,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        self.claimed += 1;
        match &mut self.mode {
            Mode::Create(rng) => {
                let value = match init {
                    Init::Uniform { fan_in } => {
                        Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), &mut **rng)
                    }
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Ones => Tensor::full(shape, 1.0),
                    Init::StandardNormal => Tensor::randn(shape, &mut **rng),
                };
                Ok(self.store.add(name, value))
            }
            Mode::Attach => {
                let id = self
                    .store
                    .find(name)
                    .ok_or_else(|| Error::Config(format!("parameter {name} is missing")))?;
                if self.store.get(id).shape() != shape {
                    return Err(Error::Config(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        self.store.get(id).shape()
                    )));
                }
                Ok(id)
            }
        }
    }

    /// Fails when attaching left parameters of the store unclaimed.
    pub fn finish(self) -> Result<()> {
        if self.claimed != self.store.len() {
            return Err(Error::Config(format!(
                "store holds {} parameters but the model uses {}",
                self.store.len(),
                self.claimed
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(reg: &mut Registrar, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let w = reg.param(&format!("{name}.w"), &[d_in, d_out], Init::Uniform { fan_in: d_in })?;
        let b = if bias {
            Some(reg.param(&format!("{name}.b"), &[d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        match self.b {
            Some(b) => g.add_bias(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// Two-layer perceptron `relu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub l1: Linear,
    pub l2: Linear,
}

impl Ffn {
    pub fn new(reg: &mut Registrar, name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(reg, &format!("{name}.l1"), d_in, d_hidden, true)?,
            l2: Linear::new(reg, &format!("{name}.l2"), d_hidden, d_out, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, p, x)?;
        let h = g.relu(h);
        self.l2.forward(g, p, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(reg: &mut Registrar, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: reg.param(&format!("{name}.gain"), &[d], Init::Ones)?,
            bias: reg.param(&format!("{name}.bias"), &[d], Init::Zeros)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gain), p.var(self.bias), LN_EPS)
    }
}

/// Multi-head self-attention without biases.
#[derive(Clone, Debug)]
pub struct Mhsa {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Mhsa {
    pub fn new(reg: &mut Registrar, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            wq: Linear::new(reg, &format!("{name}.wq"), d, d, false)?,
            wk: Linear::new(reg, &format!("{name}.wk"), d, d, false)?,
            wv: Linear::new(reg, &format!("{name}.wv"), d, d, false)?,
            wo: Linear::new(reg, &format!("{name}.wo"), d, d, false)?,
            heads,
        })
    }

    /// `x` is `[B·T, d]` holding `B` independent sequences of `tokens` rows.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var, tokens: usize) -> Result<Var> {
        let d = g.value(x).dims2().1;
        let head_dim = d / self.heads;
        let split = |g: &mut Graph, l: &Linear| -> Result<Var> {
            let y = l.forward(g, p, x)?;
            g.split_heads(y, tokens, self.heads)
        };
        let q = split(g, &self.wq)?;
        let k = split(g, &self.wk)?;
        let v = split(g, &self.wv)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (head_dim as f64).sqrt());
        let bh = g.value(scores).shape()[0];
        let flat = g.reshape(scores, &[bh * tokens, tokens])?;
        let att = g.softmax_rows(flat, None)?;
        let att = g.reshape(att, &[bh, tokens, tokens])?;
        let o = g.bmm(att, v, false)?;
        let o = g.merge_heads(o, self.heads)?;
        self.wo.forward(g, p, o)
    }
}

/// Routing outcome of one MoE layer over a batch of `B·T` tokens.
#[derive(Clone, Debug)]
pub struct GateDecision {
    /// Gate logits `[B·T, N_e]`.
    pub logits: Tensor,
    /// Row-major `[B·T, N_e]` selection mask with exactly `K` ones per row.
    pub mask: Vec<bool>,
    /// Graph node of the routing weights `[B·T, N_e]`.
    pub weights_var: Var,
    pub weights: Tensor,
    /// Per-sample mean routing weight `[B, N_e]`.
    pub mean_gate: Tensor,
    /// Per-sample fraction of tokens routed to each expert `[B, N_e]`.
    pub route_fraction: Tensor,
    pub tokens: usize,
    /// Smallest gap between the K-th and (K+1)-th logit of any row;
    /// infinite when every expert is selected.
    pub margin: f64,
}

impl GateDecision {
    pub fn batch(&self) -> usize {
        self.mean_gate.dims2().0
    }

    pub fn num_experts(&self) -> usize {
        self.mean_gate.dims2().1
    }
}

/// Selects the `k` largest entries of `row`, lowest index first among ties.
/// Returns the mask and the gap between the k-th and (k+1)-th values.
pub fn top_k_mask(row: &[f64], k: usize) -> (Vec<bool>, f64) {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    let mut mask = vec![false; row.len()];
    for &j in &order[..k] {
        mask[j] = true;
    }
    let margin = if k < row.len() {
        row[order[k - 1]] - row[order[k]]
    } else {
        f64::INFINITY
    };
    (mask, margin)
}

/// Sparse mixture of experts with top-K gating.
#[derive(Clone, Debug)]
pub struct Moe {
    pub gate: Linear,
    pub experts: Vec<Ffn>,
    pub top_k: usize,
}

impl Moe {
    pub fn new(
        reg: &mut Registrar,
        name: &str,
        d: usize,
        d_expert: usize,
        num_experts: usize,
        top_k: usize,
    ) -> Result<Self> {
        let gate = Linear::new(reg, &format!("{name}.gate"), d, num_experts, true)?;
        let experts = (0..num_experts)
            .map(|j| Ffn::new(reg, &format!("{name}.expert{j}"), d, d_expert, d))
            .collect::<Result<_>>()?;
        Ok(Self { gate, experts, top_k })
    }

    /// Routes every row of `x` to its top-K experts chosen from `gate_input`
    /// and returns the weighted sum of their outputs. Experts only see the
    /// rows routed to them; `evals` is increased by the number of
    /// (token, expert) evaluations performed.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        x: Var,
        gate_input: Var,
        tokens: usize,
        evals: &mut usize,
    ) -> Result<(Var, GateDecision)> {
        let (rows, d) = g.value(x).dims2();
        if g.value(gate_input).dims2().0 != rows {
            return Err(Error::shape("moe_forward", g.value(x).shape(), g.value(gate_input).shape()));
        }
        if tokens == 0 || rows % tokens != 0 {
            return Err(Error::shape("moe_forward", g.value(x).shape(), &[tokens]));
        }
        let n_e = self.experts.len();
        let logits_var = self.gate.forward(g, p, gate_input)?;
        let logits = g.value(logits_var).clone();
        if !logits.is_finite() {
            return Err(Error::Numeric("gate logits are not finite".into()));
        }
        let mut mask = Vec::with_capacity(rows * n_e);
        let mut margin = f64::INFINITY;
        for i in 0..rows {
            let (m, gap) = top_k_mask(logits.row(i), self.top_k);
            mask.extend(m);
            margin = margin.min(gap);
        }
        let weights_var = g.softmax_rows(logits_var, Some(&mask))?;
        let weights = g.value(weights_var).clone();

        let mut out: Option<Var> = None;
        for (j, expert) in self.experts.iter().enumerate() {
            let routed: Vec<usize> = (0..rows).filter(|&i| mask[i * n_e + j]).collect();
            if routed.is_empty() {
                continue;
            }
            *evals += routed.len();
            let xe = g.gather_rows(x, &routed)?;
            let ye = expert.forward(g, p, xe)?;
            let w = g.gather_column(weights_var, &routed, j)?;
            let ye = g.mul_rows(ye, w)?;
            let ye = g.scatter_rows(ye, &routed, rows)?;
            out = Some(match out {
                Some(acc) => g.add(acc, ye)?,
                None => ye,
            });
        }
        let out = out.ok_or_else(|| Error::Routing("no expert received a token".into()))?;
        debug_assert_eq!(g.value(out).dims2(), (rows, d));

        let batch = rows / tokens;
        let mut mean_gate = vec![0.0; batch * n_e];
        let mut route_fraction = vec![0.0; batch * n_e];
        let inv = 1.0 / tokens as f64;
        for i in 0..rows {
            let b = i / tokens;
            for j in 0..n_e {
                mean_gate[b * n_e + j] += weights.get2(i, j) * inv;
                if mask[i * n_e + j] {
                    route_fraction[b * n_e + j] += inv;
                }
            }
        }
        let decision = GateDecision {
            logits,
            mask,
            weights_var,
            weights,
            mean_gate: Tensor::new(&[batch, n_e], mean_gate)?,
            route_fraction: Tensor::new(&[batch, n_e], route_fraction)?,
            tokens,
            margin,
        };
        Ok((out, decision))
    }
}

/// Draws a fresh generator for parameter creation.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
