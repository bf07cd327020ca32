//! Patch featurizer, transformer encoder and top-N query selection.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::nn::{residual, FeedForward, LayerNorm, Linear, MultiHeadAttention, NormPlacement};
use crate::numcore::{DiffArray, Graph, ParamStore, Var};
use crate::synthdata::Image;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width.
    pub dim: usize,
    /// Object queries kept after selection.
    pub queries: usize,
    /// Text embeddings per query, i.e. DAG vertices.
    pub text_tokens: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub patch: usize,
    pub image_size: usize,
    pub vocab: usize,
    pub ffn_hidden: usize,
    /// Residual normalisation placement in encoder and decoder layers.
    pub norm: NormPlacement,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            queries: 25,
            text_tokens: 8,
            decoder_layers: 6,
            heads: 4,
            encoder_layers: 2,
            patch: 8,
            image_size: 64,
            vocab: 12,
            ffn_hidden: 128,
            norm: NormPlacement::Pre,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if !self.dim.is_multiple_of(4) {
            return bad(format!("dim {} must be a multiple of 4 for 2-D positions", self.dim));
        }
        if self.patch == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch) {
            return bad(format!("image size {} not divisible by patch {}", self.image_size, self.patch));
        }
        if self.queries == 0 || self.queries > self.num_patches() {
            return bad(format!("{} queries but {} patches", self.queries, self.num_patches()));
        }
        if self.text_tokens < 2 {
            return bad(format!("need at least 2 text tokens, got {}", self.text_tokens));
        }
        if self.decoder_layers == 0 {
            return bad("need at least one decoder layer".into());
        }
        if self.vocab < 3 {
            return bad(format!("vocabulary of {} leaves no words", self.vocab));
        }
        if self.ffn_hidden == 0 {
            return bad("ffn_hidden must be positive".into());
        }
        Ok(())
    }
}

/// Fixed 2-D sinusoidal encodings, `[grid * grid, dim]`. The first half of
/// each vector encodes the row, the second half the column.
pub fn sinusoidal_positions(grid: usize, dim: usize) -> DiffArray {
    let half = dim / 2;
    let mut data = vec![0.0; grid * grid * dim];
    for gy in 0..grid {
        for gx in 0..grid {
            let row = &mut data[(gy * grid + gx) * dim..(gy * grid + gx + 1) * dim];
            for (offset, pos) in [(0, gy), (half, gx)] {
                for i in 0..half / 2 {
                    let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                    row[offset + 2 * i] = (pos as f64 * freq).sin();
                    row[offset + 2 * i + 1] = (pos as f64 * freq).cos();
                }
            }
        }
    }
    DiffArray::new(&[grid * grid, dim], data).expect("shape matches data")
}

/// Flattens every `patch x patch x 3` block into one row, row-major over the grid.
pub fn patch_pixels(image: &Image, patch: usize) -> Result<DiffArray> {
    if patch == 0 || !image.width.is_multiple_of(patch) || !image.height.is_multiple_of(patch) {
        return Err(Error::Config(format!(
            "{}x{} image not divisible into {patch}px patches",
            image.width, image.height
        )));
    }
    let (gw, gh) = (image.width / patch, image.height / patch);
    let cols = patch * patch * 3;
    let mut data = Vec::with_capacity(gw * gh * cols);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                for px in 0..patch {
                    data.extend(image.pixel(gx * patch + px, gy * patch + py));
                }
            }
        }
    }
    DiffArray::new(&[gw * gh, cols], data)
}

/// Centre of a grid cell as a normalised `(cx, cy)`.
pub fn patch_center(index: usize, grid: usize) -> (f64, f64) {
    let (gy, gx) = (index / grid, index % grid);
    ((gx as f64 + 0.5) / grid as f64, (gy as f64 + 0.5) / grid as f64)
}

/// Embedded patches before the encoder.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    /// Projected patches plus positions, `[M_p, d]`.
    pub tokens: Var,
    pub positions: DiffArray,
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
    pub placement: NormPlacement,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), cfg.dim, cfg.heads)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.dim)?,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), cfg.dim, cfg.ffn_hidden)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.dim)?,
            placement: cfg.norm,
        })
    }

    /// `pos`, when given, is added to attention queries and keys.
    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var, pos: Option<Var>) -> Result<Var> {
        let h = residual(g, store, self.placement, &self.norm1, x, |n| {
            let qk = match pos {
                Some(p) => g.add(n, p)?,
                None => n,
            };
            self.attn.forward(g, store, qk, qk, n, 1, None)
        })?;
        residual(g, store, self.placement, &self.norm2, h, |n| self.ffn.forward(g, store, n))
    }
}

/// Queries chosen from the encoder output.
#[derive(Debug, Clone)]
pub struct QuerySelection {
    /// Projected selected tokens, `[N, d]`.
    pub queries: Var,
    /// Token indices in selection order.
    pub indices: Vec<usize>,
    /// Objectness logits of every encoder token, `[M_p, 1]`.
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct Featurizer {
    pub patch_proj: Linear,
    pub encoder: Vec<EncoderLayer>,
    /// Closes a pre-norm encoder stack.
    pub final_norm: Option<LayerNorm>,
    pub objectness: Linear,
    pub query_proj: Linear,
    pub positions: DiffArray,
    pub patch: usize,
    pub queries: usize,
}

impl Featurizer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let patch_in = cfg.patch * cfg.patch * 3;
        Ok(Self {
            patch_proj: Linear::new(store, rng, "feat.patch", patch_in, cfg.dim, true)?,
            encoder: (0..cfg.encoder_layers)
                .map(|i| EncoderLayer::new(store, rng, &format!("enc.{i}"), cfg))
                .collect::<Result<_>>()?,
            final_norm: match cfg.norm {
                NormPlacement::Pre if cfg.encoder_layers > 0 => Some(LayerNorm::new(store, "enc.final_norm", cfg.dim)?),
                _ => None,
            },
            objectness: Linear::new(store, rng, "feat.objectness", cfg.dim, 1, true)?,
            query_proj: Linear::new(store, rng, "feat.query", cfg.dim, cfg.dim, true)?,
            positions: sinusoidal_positions(cfg.grid(), cfg.dim),
            patch: cfg.patch,
            queries: cfg.queries,
        })
    }

    pub fn patch_embed(&self, g: &Graph, store: &ParamStore, image: &Image) -> Result<FeatureMap> {
        let pixels = patch_pixels(image, self.patch)?;
        if pixels.rows() != self.positions.rows() {
            return Err(Error::Config(format!(
                "image gives {} patches, model expects {}",
                pixels.rows(),
                self.positions.rows()
            )));
        }
        let proj = self.patch_proj.forward(g, store, g.constant(pixels))?;
        let tokens = g.add(proj, g.constant(self.positions.clone()))?;
        Ok(FeatureMap { tokens, positions: self.positions.clone() })
    }

    pub fn encode(&self, g: &Graph, store: &ParamStore, tokens: Var, pos: Option<Var>) -> Result<Var> {
        let x = self.encoder.iter().try_fold(tokens, |x, layer| layer.forward(g, store, x, pos))?;
        match &self.final_norm {
            Some(n) => n.forward(g, store, x),
            None => Ok(x),
        }
    }

    pub fn select_queries(&self, g: &Graph, store: &ParamStore, features: Var) -> Result<QuerySelection> {
        let logits = self.objectness.forward(g, store, features)?;
        let scores = g.data(logits);
        if self.queries > scores.len() {
            return Err(Error::Config(format!("{} queries but {} tokens", self.queries, scores.len())));
        }
        let indices = top_n(&scores, self.queries);
        let picked = g.gather_rows(features, &indices)?;
        let queries = self.query_proj.forward(g, store, picked)?;
        Ok(QuerySelection { queries, indices, logits })
    }
}

/// Indices of the `n` highest scores, descending; equal scores keep the
/// lower index first.
pub fn top_n(scores: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}
