//! The full detector: featurizer, decoder, box and objectness heads, DAG
//! text head.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dag_head::{build_dags, dag_nll, greedy_decode, viterbi_decode, with_end_marker, DagHead, DagVars, NamePrediction, TokenDag};
use crate::error::{Error, Result};
use crate::evaluation::Detection;
use crate::featurizer::{patch_center, Featurizer, ModelConfig, QuerySelection};
use crate::numcore::checkpoint::{read_tensors, write_tensors};
use crate::numcore::nn::Linear;
use crate::numcore::{sigmoid, DiffArray, Graph, ParamStore, Var};
use crate::objective::{bce_with_logits, hungarian_match, matching_cost, token_targets, total_loss, BoxPred, LossBreakdown, LossWeights, MatchAssignment, PredVars};
use crate::rl_decoder::{AttnPos, RlDecoder};
use crate::synthdata::{DetectionSample, Image};

/// Side of the square prior box placed at each selected patch.
pub const ANCHOR_SIZE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Decode {
    #[default]
    Viterbi,
    Greedy,
}

impl FromStr for Decode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "viterbi" => Ok(Self::Viterbi),
            "greedy" => Ok(Self::Greedy),
            _ => Err(Error::Config(format!("unknown decoding {s:?}"))),
        }
    }
}

impl Decode {
    pub fn run(self, dag: &TokenDag) -> NamePrediction {
        match self {
            Self::Viterbi => viterbi_decode(dag),
            Self::Greedy => greedy_decode(dag),
        }
    }
}

/// Query-side outputs of one image.
#[derive(Debug, Clone)]
pub struct Forward {
    pub selection: QuerySelection,
    /// Query state after each decoder layer.
    pub layer_queries: Vec<Var>,
    pub preds: PredVars,
}

/// One decoded query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub detection: Detection,
    pub prediction: NamePrediction,
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub featurizer: Featurizer,
    pub decoder: RlDecoder,
    pub dag: DagHead,
    pub box_hidden: Linear,
    pub box_out: Linear,
    pub objectness: Linear,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Detector {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let featurizer = Featurizer::new(&mut store, &mut rng, cfg)?;
        let decoder = RlDecoder::new(&mut store, &mut rng, cfg)?;
        let dag = DagHead::new(&mut store, &mut rng, cfg.dim, cfg.vocab)?;
        let box_hidden = Linear::new(&mut store, &mut rng, "head.box_hidden", cfg.dim, cfg.dim, true)?;
        let box_out = Linear::new(&mut store, &mut rng, "head.box_out", cfg.dim, 4, true)?;
        let objectness = Linear::new(&mut store, &mut rng, "head.objectness", cfg.dim, 1, true)?;
        Ok(Self { cfg: cfg.clone(), store, featurizer, decoder, dag, box_hidden, box_out, objectness })
    }

    /// Pre-sigmoid anchor boxes for the selected patches, `[N, 4]`.
    fn anchors(&self, indices: &[usize]) -> Result<DiffArray> {
        let grid = self.cfg.grid();
        let size = logit(ANCHOR_SIZE);
        let data = indices
            .iter()
            .flat_map(|&t| {
                let (cx, cy) = patch_center(t, grid);
                [logit(cx), logit(cy), size, size]
            })
            .collect();
        DiffArray::new(&[indices.len(), 4], data)
    }

    pub fn forward(&self, g: &Graph, image: &Image) -> Result<Forward> {
        let s = &self.store;
        let fm = self.featurizer.patch_embed(g, s, image)?;
        let positions = g.constant(fm.positions);
        let memory = self.featurizer.encode(g, s, fm.tokens, Some(positions))?;
        let selection = self.featurizer.select_queries(g, s, memory)?;
        let pos = AttnPos { query: Some(g.gather_rows(positions, &selection.indices)?), memory: Some(positions) };
        let layer_queries = self.decoder.query_path(g, s, selection.queries, memory, &pos)?;
        let q = *layer_queries.last().expect("at least one layer");
        let q = self.decoder.finish_queries(g, s, q)?;
        let hidden = g.relu(self.box_hidden.forward(g, s, q)?);
        let delta = self.box_out.forward(g, s, hidden)?;
        let anchors = g.constant(self.anchors(&selection.indices)?);
        let boxes = g.sigmoid(g.add(anchors, delta)?);
        let logits = self.objectness.forward(g, s, q)?;
        Ok(Forward { selection, layer_queries, preds: PredVars { boxes, logits } })
    }

    /// Token DAGs for the listed queries.
    pub fn dags(&self, g: &Graph, fwd: &Forward, regions: &[usize]) -> Result<Vec<DagVars>> {
        let text = self.decoder.text_path(g, &self.store, &fwd.layer_queries, regions)?;
        let local: Vec<usize> = (0..regions.len()).collect();
        build_dags(g, &self.store, &self.dag, text, self.cfg.text_tokens, &local)
    }

    /// Training loss of one sample. Matching uses the current predictions
    /// and is not differentiated.
    pub fn loss(&self, g: &Graph, sample: &DetectionSample, w: &LossWeights) -> Result<(Var, LossBreakdown, MatchAssignment)> {
        let fwd = self.forward(g, &sample.image)?;
        let preds = BoxPred::from_values(&g.data(fwd.preds.boxes), &g.data(fwd.preds.logits));
        let assign = if sample.boxes.is_empty() {
            MatchAssignment { pairs: Vec::new(), unmatched: (0..preds.len()).collect() }
        } else {
            hungarian_match(&matching_cost(&preds, &sample.boxes, w))
        };
        let regions: Vec<usize> = assign.pairs.iter().map(|p| p.0).collect();
        let dags = self.dags(g, &fwd, &regions)?;
        let nlls = assign
            .pairs
            .iter()
            .zip(&dags)
            .map(|(&(_, i), dag)| dag_nll(g, dag, &with_end_marker(&sample.names[i])))
            .collect::<Result<Vec<_>>>()?;
        let (total, mut parts) = total_loss(g, &fwd.preds, &nlls, &sample.boxes, &assign, w)?;
        let enc = bce_with_logits(g, fwd.selection.logits, &token_targets(self.cfg.grid(), &sample.boxes))?;
        let total = g.add(total, g.scale(enc, w.enc))?;
        parts.enc = g.item(enc);
        parts.total = g.item(total);
        Ok((total, parts, assign))
    }

    /// Boxes, objectness and decoded names of every query, in query order.
    pub fn detect(&self, image: &Image, decode: Decode) -> Result<Vec<QueryResult>> {
        let g = Graph::new();
        let fwd = self.forward(&g, image)?;
        let n = self.cfg.queries;
        let dags = self.dags(&g, &fwd, &(0..n).collect::<Vec<_>>())?;
        let boxes = g.data(fwd.preds.boxes);
        let logits = g.data(fwd.preds.logits);
        dags.iter()
            .enumerate()
            .map(|(j, dv)| {
                let prediction = decode.run(&TokenDag::from_graph(&g, dv)?);
                let bbox = [boxes[4 * j], boxes[4 * j + 1], boxes[4 * j + 2], boxes[4 * j + 3]];
                let detection = Detection::new(bbox, sigmoid(logits[j]), prediction.token_ids.clone());
                Ok(QueryResult { detection, prediction })
            })
            .collect()
    }

    /// Writes the parameters alone in checkpoint format.
    pub fn save_params(&self, path: &Path) -> Result<()> {
        let tensors: Vec<(String, DiffArray)> = self.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        write_tensors(BufWriter::new(File::create(path)?), &tensors)
    }

    /// Reads parameters by name from a checkpoint; other entries (optimizer
    /// state, counters) are ignored.
    pub fn load_params(&mut self, path: &Path) -> Result<()> {
        let tensors = read_tensors(BufReader::new(File::open(path)?))?;
        let names: Vec<String> = self.store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let t = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            self.store.set(&name, t.1.clone())?;
        }
        Ok(())
    }

    /// Number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.store.numel()
    }
}
