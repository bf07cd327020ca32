//! Parameterised building blocks over [`Graph`].

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.xavier(&format!("{name}.weight"), fan_in, fan_out, rng)?;
        let bias = if bias {
            Some(store.zeros(&format!("{name}.bias"), &[fan_out])?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.ones(&format!("{name}.gamma"), &[dim])?,
            beta: store.zeros(&format!("{name}.beta"), &[dim])?,
        })
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        g.layer_norm(x, g.param(store, self.gamma), g.param(store, self.beta))
    }
}

/// Two-layer ReLU feed-forward block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, rng, &format!("{name}.up"), dim, hidden, true)?,
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        self.down.forward(g, store, g.relu(h))
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.up.params(), self.down.params()].concat()
    }
}

/// Multi-head attention with input and output projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MultiHeadAttention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q_proj: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true)?,
            k_proj: Linear::new(store, rng, &format!("{name}.k"), dim, dim, true)?,
            v_proj: Linear::new(store, rng, &format!("{name}.v"), dim, dim, true)?,
            out_proj: Linear::new(store, rng, &format!("{name}.o"), dim, dim, true)?,
            heads,
        })
    }

    /// `query` is `[groups * lq, d]`; `key`/`value` are `[groups * lk, d]`.
    /// Attention never crosses group boundaries.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &Graph,
        store: &ParamStore,
        query: Var,
        key: Var,
        value: Var,
        groups: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let q = self.q_proj.forward(g, store, query)?;
        let k = self.k_proj.forward(g, store, key)?;
        let v = self.v_proj.forward(g, store, value)?;
        let o = g.attention_core(q, k, v, groups, self.heads, mask)?;
        self.out_proj.forward(g, store, o)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [
            self.q_proj.params(),
            self.k_proj.params(),
            self.v_proj.params(),
            self.out_proj.params(),
        ]
        .concat()
    }
}

/// `norm(x + sublayer_out)`
pub fn residual_norm(g: &Graph, store: &ParamStore, norm: &LayerNorm, x: Var, sub: Var) -> Result<Var> {
    let s = g.add(x, sub)?;
    norm.forward(g, store, s)
}

/// Where layer normalisation sits around a residual sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// `norm(x + sub(x))`
    Post,
    /// `x + sub(norm(x))`
    #[default]
    Pre,
}

/// Wraps `sub` in a residual connection with `norm` placed per `placement`.
pub fn residual<F>(g: &Graph, store: &ParamStore, placement: NormPlacement, norm: &LayerNorm, x: Var, sub: F) -> Result<Var>
where
    F: FnOnce(Var) -> Result<Var>,
{
    match placement {
        NormPlacement::Post => {
            let s = sub(x)?;
            residual_norm(g, store, norm, x, s)
        }
        NormPlacement::Pre => {
            let n = norm.forward(g, store, x)?;
            let s = sub(n)?;
            g.add(x, s)
        }
    }
}
