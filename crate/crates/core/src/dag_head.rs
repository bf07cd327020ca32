//! DAG text head.
//!
//! Each region's `K` text embeddings become the vertices of a directed
//! acyclic graph. Edge weights come from scaled dot-product attention
//! restricted to forward edges (`i -> j` with `j > i`); every vertex emits a
//! distribution over the vocabulary. A name is read off a path from the
//! first vertex to the last, the final vertex emitting the end marker.
//!
//! Vertices are 0-based here: paths start at `0` and end at `K - 1`.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::nn::Linear;
use crate::numcore::{CustomOp, DiffArray, Graph, Mask, ParamId, ParamStore, Var};
use crate::synthdata::{EOS, PAD};

/// Learned projections of the text head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DagHead {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub emit: Linear,
    pub dim: usize,
}

impl DagHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, dim: usize, vocab: usize) -> Result<Self> {
        Ok(Self {
            w_query: store.xavier("dag.w_query", dim, dim, rng)?,
            w_key: store.xavier("dag.w_key", dim, dim, rng)?,
            emit: Linear::new(store, rng, "dag.emit", dim, vocab, true)?,
            dim,
        })
    }
}

/// Graph handles for one region's DAG, both in log space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DagVars {
    /// `[K, K]` log transition probabilities; `-inf` off the forward edges.
    pub log_trans: Var,
    /// `[K, V]` log emission probabilities.
    pub log_emit: Var,
}

/// Strictly-upper-triangular `K x K` mask.
pub fn forward_edge_mask(k: usize) -> Mask {
    (0..k * k).map(|p| p % k > p / k).collect::<Vec<_>>().into()
}

/// Builds DAGs for the chosen regions of `text` (`[N, K, d]`).
///
/// Projections are computed once for all regions; attention scores and
/// normalisation are per region.
pub fn build_dags(
    g: &Graph,
    store: &ParamStore,
    head: &DagHead,
    text: Var,
    text_tokens: usize,
    regions: &[usize],
) -> Result<Vec<DagVars>> {
    let k = text_tokens;
    if k < 2 {
        return Err(Error::Config(format!("DAG needs at least 2 vertices, got {k}")));
    }
    if regions.is_empty() {
        return Ok(Vec::new());
    }
    let rows: Vec<usize> = regions.iter().flat_map(|&n| n * k..(n + 1) * k).collect();
    let t = g.gather_rows(text, &rows)?;
    let q = g.matmul(t, g.param(store, head.w_query))?;
    let kk = g.matmul(t, g.param(store, head.w_key))?;
    let logits = head.emit.forward(g, store, t)?;
    let mask = forward_edge_mask(k);
    let scale = 1.0 / (head.dim as f64).sqrt();
    let mut out = Vec::with_capacity(regions.len());
    for r in 0..regions.len() {
        let local: Vec<usize> = (r * k..(r + 1) * k).collect();
        let qr = g.gather_rows(q, &local)?;
        let kr = g.gather_rows(kk, &local)?;
        let scores = g.scale(g.matmul(qr, g.transpose(kr)?)?, scale);
        let log_trans = g.log_softmax(scores, 1, Some(mask.clone()))?;
        let log_emit = g.log_softmax(g.gather_rows(logits, &local)?, 1, None)?;
        out.push(DagVars { log_trans, log_emit });
    }
    Ok(out)
}

/// Builds the DAG of a single region embedding `[K, d]`.
pub fn build_dag(g: &Graph, store: &ParamStore, head: &DagHead, region: Var) -> Result<DagVars> {
    let shape = g.shape(region);
    let k = shape[0];
    Ok(build_dags(g, store, head, region, k, &[0])?.remove(0))
}

/// Transition and emission probabilities of one region.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDag {
    trans: DiffArray,
    emit: DiffArray,
}

impl TokenDag {
    /// Validates support and normalisation.
    pub fn new(trans: DiffArray, emit: DiffArray) -> Result<Self> {
        let k = trans.shape()[0];
        if k < 2 {
            return Err(Error::Config(format!("DAG needs at least 2 vertices, got {k}")));
        }
        if trans.shape() != [k, k] || emit.shape().len() != 2 || emit.shape()[0] != k {
            return Err(Error::Dimension(format!(
                "transition {:?} / emission {:?}",
                trans.shape(),
                emit.shape()
            )));
        }
        for i in 0..k {
            let row = trans.row(i);
            if row[..=i].iter().any(|&p| p != 0.0) {
                return Err(Error::Dimension(format!("row {i} has backward mass")));
            }
            let s: f64 = row.iter().sum();
            let want = if i + 1 == k { 0.0 } else { 1.0 };
            if (s - want).abs() > 1e-6 {
                return Err(Error::Dimension(format!("row {i} sums to {s}")));
            }
            let e: f64 = emit.row(i).iter().sum();
            if (e - 1.0).abs() > 1e-6 {
                return Err(Error::Dimension(format!("emission row {i} sums to {e}")));
            }
        }
        Ok(Self { trans, emit })
    }

    pub fn from_graph(g: &Graph, vars: &DagVars) -> Result<Self> {
        let exp = |v: Var| {
            let a = g.value(v);
            let data = a.data().iter().map(|x| x.exp()).collect();
            DiffArray::new(a.shape(), data)
        };
        Self::new(exp(vars.log_trans)?, exp(vars.log_emit)?)
    }

    pub fn vertices(&self) -> usize {
        self.trans.shape()[0]
    }

    pub fn vocab(&self) -> usize {
        self.emit.shape()[1]
    }

    pub fn transitions(&self) -> &DiffArray {
        &self.trans
    }

    pub fn emissions(&self) -> &DiffArray {
        &self.emit
    }

    fn log_trans(&self, i: usize, j: usize) -> f64 {
        self.trans.at2(i, j).ln()
    }

    /// Per-vertex best token and its log probability; ties go to the lower id.
    fn best_tokens(&self) -> Vec<(u32, f64)> {
        (0..self.vertices())
            .map(|v| {
                let (mut best, mut score) = (0, f64::NEG_INFINITY);
                for (t, &p) in self.emit.row(v).iter().enumerate() {
                    let lp = p.ln();
                    if lp > score {
                        best = t;
                        score = lp;
                    }
                }
                (best as u32, score)
            })
            .collect()
    }

    /// Right-folded path score `s(a1) + (E(a1,a2) + (s(a2) + ...))`.
    fn path_score(&self, best: &[(u32, f64)], path: &[usize]) -> f64 {
        let last = *path.last().expect("non-empty path");
        let mut acc = best[last].1;
        for w in path.windows(2).rev() {
            acc = best[w[0]].1 + (self.log_trans(w[0], w[1]) + acc);
        }
        acc
    }
}

/// A decoded name.
#[derive(Debug, Clone, PartialEq)]
pub struct NamePrediction {
    /// Vocabulary ids with the end marker stripped and repeats collapsed.
    pub token_ids: Vec<u32>,
    /// Strictly increasing vertices from `0` to `K - 1`.
    pub path: Vec<usize>,
    pub log_score: f64,
}

/// Collapses consecutive repeats, then cuts at the first end marker.
pub fn clean_tokens(raw: impl IntoIterator<Item = u32>) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::new();
    let mut prev = None;
    for t in raw {
        if prev == Some(t) {
            continue;
        }
        prev = Some(t);
        if t == EOS {
            break;
        }
        if t != PAD {
            out.push(t);
        }
    }
    out
}

fn prediction(dag: &TokenDag, best: &[(u32, f64)], path: Vec<usize>, log_score: f64) -> NamePrediction {
    debug_assert_eq!(path.first(), Some(&0));
    debug_assert_eq!(path.last(), Some(&(dag.vertices() - 1)));
    NamePrediction {
        token_ids: clean_tokens(path.iter().map(|&v| best[v].0)),
        path,
        log_score,
    }
}

/// Highest-scoring path; among equal scores the path taking the smaller
/// next vertex wins.
pub fn viterbi_decode(dag: &TokenDag) -> NamePrediction {
    let k = dag.vertices();
    let best = dag.best_tokens();
    let mut score = vec![f64::NEG_INFINITY; k];
    let mut next = vec![k - 1; k];
    score[k - 1] = best[k - 1].1;
    for i in (0..k - 1).rev() {
        let (mut tail, mut arg) = (f64::NEG_INFINITY, i + 1);
        for j in i + 1..k {
            let cand = dag.log_trans(i, j) + score[j];
            if cand > tail {
                tail = cand;
                arg = j;
            }
        }
        next[i] = arg;
        score[i] = best[i].1 + tail;
    }
    let mut path = vec![0];
    while *path.last().unwrap() != k - 1 {
        path.push(next[*path.last().unwrap()]);
    }
    prediction(dag, &best, path, score[0])
}

/// Follows the most probable outgoing edge from vertex 0 until the last vertex.
pub fn greedy_decode(dag: &TokenDag) -> NamePrediction {
    let k = dag.vertices();
    let best = dag.best_tokens();
    let mut path = vec![0];
    let mut i = 0;
    while i != k - 1 {
        let mut j_best = i + 1;
        for j in i + 2..k {
            if dag.trans.at2(i, j) > dag.trans.at2(i, j_best) {
                j_best = j;
            }
        }
        path.push(j_best);
        i = j_best;
    }
    let score = dag.path_score(&best, &path);
    prediction(dag, &best, path, score)
}

// ---- training loss ----------------------------------------------------------

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Forward/backward lattices of the path-marginal likelihood.
struct Lattice {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    log_z: f64,
}

fn lattice(lt: &[f64], le: &[f64], k: usize, v: usize, target: &[u32]) -> Lattice {
    let m = target.len();
    let ninf = f64::NEG_INFINITY;
    let emit = |j: usize, t: usize| le[j * v + target[t] as usize];
    let mut alpha = vec![ninf; m * k];
    alpha[0] = emit(0, 0);
    for t in 1..m {
        for j in t..k {
            let mut acc = ninf;
            for i in t - 1..j {
                acc = log_add(acc, alpha[(t - 1) * k + i] + lt[i * k + j]);
            }
            alpha[t * k + j] = acc + emit(j, t);
        }
    }
    let mut beta = vec![ninf; m * k];
    beta[(m - 1) * k + k - 1] = 0.0;
    for t in (0..m - 1).rev() {
        for i in 0..k {
            let mut acc = ninf;
            for j in i + 1..k {
                acc = log_add(acc, lt[i * k + j] + emit(j, t + 1) + beta[(t + 1) * k + j]);
            }
            beta[t * k + i] = acc;
        }
    }
    let log_z = alpha[(m - 1) * k + k - 1];
    Lattice { alpha, beta, log_z }
}

fn check_target(k: usize, v: usize, target: &[u32]) -> Result<()> {
    if target.len() < 2 || target.len() > k {
        return Err(Error::TargetLength { len: target.len(), max: k });
    }
    if let Some(&t) = target.iter().find(|&&t| t as usize >= v) {
        return Err(Error::Vocabulary(format!("target id {t} outside vocabulary of {v}")));
    }
    Ok(())
}

/// Negative log-likelihood of `target` summed over all paths from vertex 0
/// to vertex `K - 1` with exactly `target.len()` vertices.
pub fn dag_nll_value(log_trans: &DiffArray, log_emit: &DiffArray, target: &[u32]) -> Result<f64> {
    let (k, v) = (log_trans.shape()[0], log_emit.shape()[1]);
    check_target(k, v, target)?;
    Ok(-lattice(log_trans.data(), log_emit.data(), k, v, target).log_z)
}

struct DagNll {
    target: Vec<u32>,
}

impl CustomOp for DagNll {
    fn name(&self) -> &'static str {
        "dag_nll"
    }

    fn backward(&self, inputs: &[&DiffArray], _output: &DiffArray, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (lt, le) = (inputs[0], inputs[1]);
        let (k, v) = (lt.shape()[0], le.shape()[1]);
        let m = self.target.len();
        let lat = lattice(lt.data(), le.data(), k, v, &self.target);
        let mut g_trans = vec![0.0; k * k];
        let mut g_emit = vec![0.0; k * v];
        if lat.log_z == f64::NEG_INFINITY {
            return vec![Some(g_trans), Some(g_emit)];
        }
        let g = grad_out[0];
        for t in 0..m {
            let y = self.target[t] as usize;
            for j in 0..k {
                let a = lat.alpha[t * k + j];
                if a == f64::NEG_INFINITY {
                    continue;
                }
                let post = (a + lat.beta[t * k + j] - lat.log_z).exp();
                g_emit[j * v + y] -= g * post;
                if t + 1 == m {
                    continue;
                }
                let y_next = self.target[t + 1] as usize;
                for jn in j + 1..k {
                    let lij = lt.data()[j * k + jn];
                    let b = lat.beta[(t + 1) * k + jn];
                    if lij == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
                        continue;
                    }
                    let edge = (a + lij + le.data()[jn * v + y_next] + b - lat.log_z).exp();
                    g_trans[j * k + jn] -= g * edge;
                }
            }
        }
        vec![Some(g_trans), Some(g_emit)]
    }
}

/// Differentiable [`dag_nll_value`]. `target` includes the end marker.
pub fn dag_nll(g: &Graph, dag: &DagVars, target: &[u32]) -> Result<Var> {
    let value = g.with_values(&[dag.log_trans, dag.log_emit], |v| dag_nll_value(v[0], v[1], target))?;
    Ok(g.custom(
        &[dag.log_trans, dag.log_emit],
        DiffArray::scalar(value),
        Box::new(DagNll { target: target.to_vec() }),
    ))
}

/// `name` followed by the end marker.
pub fn with_end_marker(name: &[u32]) -> Vec<u32> {
    name.iter().copied().chain(std::iter::once(EOS)).collect()
}
