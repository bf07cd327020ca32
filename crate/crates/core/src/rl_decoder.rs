//! Region-language decoder.
//!
//! Each layer refines the object queries with self-attention, cross-attention
//! over the image features and a feed-forward block. The refined query is
//! then prepended to its own `K` text embeddings and the `K + 1` tokens are
//! mixed by the layer's (shared) self-attention and a separate text
//! feed-forward block. The query slot of that mixed sequence is discarded.
//!
//! Text state is stored flat: region `n`, slot `k` lives in row `n * K + k`.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::featurizer::ModelConfig;
use crate::numcore::nn::{residual, FeedForward, LayerNorm, MultiHeadAttention, NormPlacement};
use crate::numcore::{Graph, ParamId, ParamStore, Var};

/// Positional embeddings added to attention queries and keys (not values).
#[derive(Debug, Clone, Copy, Default)]
pub struct AttnPos {
    /// `[N, d]`, one per object query.
    pub query: Option<Var>,
    /// `[M_p, d]`, one per image feature.
    pub memory: Option<Var>,
}

fn with_pos(g: &Graph, x: Var, pos: Option<Var>) -> Result<Var> {
    match pos {
        Some(p) => g.add(x, p),
        None => Ok(x),
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    /// Used by both the query path and the text path.
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn_region: FeedForward,
    pub norm3: LayerNorm,
    pub text_norm1: LayerNorm,
    pub ffn_text: FeedForward,
    pub text_norm2: LayerNorm,
    pub placement: NormPlacement,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let (d, h) = (cfg.dim, cfg.ffn_hidden);
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), d, cfg.heads)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross_attn"), d, cfg.heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
            ffn_region: FeedForward::new(store, rng, &format!("{name}.ffn_region"), d, h)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d)?,
            text_norm1: LayerNorm::new(store, &format!("{name}.text_norm1"), d)?,
            ffn_text: FeedForward::new(store, rng, &format!("{name}.ffn_text"), d, h)?,
            text_norm2: LayerNorm::new(store, &format!("{name}.text_norm2"), d)?,
            placement: cfg.norm,
        })
    }

    /// Query refinement; independent of any text state.
    pub fn query_step(&self, g: &Graph, store: &ParamStore, q: Var, memory: Var, pos: &AttnPos) -> Result<Var> {
        let p = self.placement;
        let h = residual(g, store, p, &self.norm1, q, |n| {
            let qp = with_pos(g, n, pos.query)?;
            self.self_attn.forward(g, store, qp, qp, n, 1, None)
        })?;
        let key = with_pos(g, memory, pos.memory)?;
        let h = residual(g, store, p, &self.norm2, h, |n| {
            self.cross_attn.forward(g, store, with_pos(g, n, pos.query)?, key, memory, 1, None)
        })?;
        residual(g, store, p, &self.norm3, h, |n| self.ffn_region.forward(g, store, n))
    }

    /// Text update for `R` regions: `queries` is `[R, d]` (already refined by
    /// this layer), `text` is `[R * K, d]`.
    pub fn text_step(&self, g: &Graph, store: &ParamStore, queries: Var, text: Var, k: usize) -> Result<Var> {
        let r = g.shape(queries)[0];
        if g.shape(text)[0] != r * k {
            return Err(Error::Dimension(format!(
                "text has {} rows, expected {r} regions x {k}",
                g.shape(text)[0]
            )));
        }
        let stacked = g.concat_rows(queries, text)?;
        let order: Vec<usize> = (0..r)
            .flat_map(|n| std::iter::once(n).chain((0..k).map(move |j| r + n * k + j)))
            .collect();
        let h = g.gather_rows(stacked, &order)?;
        let p = self.placement;
        let h = residual(g, store, p, &self.text_norm1, h, |n| self.self_attn.forward(g, store, n, n, n, r, None))?;
        let h = residual(g, store, p, &self.text_norm2, h, |n| self.ffn_text.forward(g, store, n))?;
        let text_rows: Vec<usize> = (0..r).flat_map(|n| (0..k).map(move |j| n * (k + 1) + 1 + j)).collect();
        g.gather_rows(h, &text_rows)
    }

    /// One full layer: returns the refined queries and text.
    pub fn forward(
        &self,
        g: &Graph,
        store: &ParamStore,
        queries: Var,
        text: Var,
        memory: Var,
        pos: &AttnPos,
        k: usize,
    ) -> Result<(Var, Var)> {
        let q = self.query_step(g, store, queries, memory, pos)?;
        let t = self.text_step(g, store, q, text, k)?;
        Ok((q, t))
    }
}

/// Runs every layer in order.
pub fn run_decoder(
    g: &Graph,
    store: &ParamStore,
    layers: &[DecoderLayer],
    queries: Var,
    text: Var,
    memory: Var,
    pos: &AttnPos,
    k: usize,
) -> Result<(Var, Var)> {
    if layers.is_empty() {
        return Err(Error::Config("decoder needs at least one layer".into()));
    }
    layers
        .iter()
        .try_fold((queries, text), |(q, t), layer| layer.forward(g, store, q, t, memory, pos, k))
}

/// Layers plus the learned text slot embeddings.
#[derive(Debug, Clone)]
pub struct RlDecoder {
    pub layers: Vec<DecoderLayer>,
    /// `[K, d]`, shared by every query.
    pub slots: ParamId,
    pub text_tokens: usize,
    /// Final norms of a pre-norm stack, for queries and text.
    pub out_norms: Option<(LayerNorm, LayerNorm)>,
}

impl RlDecoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        if cfg.decoder_layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        Ok(Self {
            layers: (0..cfg.decoder_layers)
                .map(|i| DecoderLayer::new(store, rng, &format!("dec.{i}"), cfg))
                .collect::<Result<_>>()?,
            slots: store.xavier("dec.slots", cfg.text_tokens, cfg.dim, rng)?,
            text_tokens: cfg.text_tokens,
            out_norms: match cfg.norm {
                NormPlacement::Pre => Some((
                    LayerNorm::new(store, "dec.query_out_norm", cfg.dim)?,
                    LayerNorm::new(store, "dec.text_out_norm", cfg.dim)?,
                )),
                NormPlacement::Post => None,
            },
        })
    }

    /// Initial text state for `regions` queries, `[regions * K, d]`.
    pub fn init_text_state(&self, g: &Graph, store: &ParamStore, regions: usize) -> Result<Var> {
        let idx: Vec<usize> = (0..regions).flat_map(|_| 0..self.text_tokens).collect();
        g.gather_rows(g.param(store, self.slots), &idx)
    }

    /// Query state after each layer, in layer order.
    pub fn query_path(&self, g: &Graph, store: &ParamStore, queries: Var, memory: Var, pos: &AttnPos) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut q = queries;
        for layer in &self.layers {
            q = layer.query_step(g, store, q, memory, pos)?;
            out.push(q);
        }
        Ok(out)
    }

    /// Query features handed to the detection heads.
    pub fn finish_queries(&self, g: &Graph, store: &ParamStore, q: Var) -> Result<Var> {
        match &self.out_norms {
            Some((n, _)) => n.forward(g, store, q),
            None => Ok(q),
        }
    }

    /// Final text for the listed regions given the per-layer query outputs.
    pub fn text_path(&self, g: &Graph, store: &ParamStore, layer_queries: &[Var], regions: &[usize]) -> Result<Var> {
        if layer_queries.len() != self.layers.len() {
            return Err(Error::Dimension(format!(
                "{} query states for {} layers",
                layer_queries.len(),
                self.layers.len()
            )));
        }
        let mut t = self.init_text_state(g, store, regions.len())?;
        for (layer, &q) in self.layers.iter().zip(layer_queries) {
            let q = g.gather_rows(q, regions)?;
            t = layer.text_step(g, store, q, t, self.text_tokens)?;
        }
        match &self.out_norms {
            Some((_, n)) => n.forward(g, store, t),
            None => Ok(t),
        }
    }

    /// Full decoder over all queries.
    pub fn forward(&self, g: &Graph, store: &ParamStore, queries: Var, memory: Var, pos: &AttnPos) -> Result<(Var, Var)> {
        let n = g.shape(queries)[0];
        let t = self.init_text_state(g, store, n)?;
        let (q, t) = run_decoder(g, store, &self.layers, queries, t, memory, pos, self.text_tokens)?;
        match &self.out_norms {
            Some((nq, nt)) => Ok((nq.forward(g, store, q)?, nt.forward(g, store, t)?)),
            None => Ok((q, t)),
        }
    }
}
