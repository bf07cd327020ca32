//! Catalogue of finite-difference gradient checks, one per differentiable
//! operation plus the composite training loss with frozen matching.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dag_head::{build_dag, dag_nll, DagHead};
use crate::error::Result;
use crate::featurizer::{EncoderLayer, ModelConfig};
use crate::numcore::gradcheck::{check, REL_FLOOR};
use crate::numcore::{sigmoid, DiffArray, Graph, Mask, ParamId, ParamStore, Var};
use crate::objective::{
    bce_with_logits, dag_scales, giou_rows, hungarian_match, matching_cost, total_loss_scaled, BoxPred, LossWeights,
    PredVars,
};
use crate::rl_decoder::{AttnPos, DecoderLayer};
use crate::synthdata::EOS;

/// Central-difference step. Truncation error at this step is around 1e-9
/// relative, while round-off stays near 1e-11 absolute, which matters for
/// parameters whose true gradient is exactly zero (attention key biases).
pub const STEP: f64 = 1e-4;

/// One named check; `run(seed)` returns the largest relative error.
#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    run: fn(u64) -> Result<f64>,
}

impl GradCase {
    pub fn max_rel_err(&self, seed: u64) -> Result<f64> {
        (self.run)(seed)
    }
}

impl std::fmt::Debug for GradCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> DiffArray {
    let n = shape.iter().product();
    DiffArray::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches data")
}

/// Weighted sum so each output element gets its own upstream gradient.
fn probe(g: &Graph, y: Var) -> Result<Var> {
    let shape = g.shape(y);
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
    Ok(g.sum(g.mul(y, g.constant(DiffArray::new(&shape, w)?))?))
}

fn unary(seed: u64, shape: &[usize], lo: f64, hi: f64, f: fn(&Graph, Var) -> Result<Var>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, shape, lo, hi);
    Ok(check(&[x], STEP, |g, v| probe(g, f(g, v[0])?))?.max_rel_err)
}

fn binary(seed: u64, shape: &[usize], f: fn(&Graph, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = uniform(&mut rng, shape, -1.0, 1.0);
    let b = uniform(&mut rng, shape, -1.0, 1.0);
    Ok(check(&[a, b], STEP, |g, v| probe(g, f(g, v[0], v[1])?))?.max_rel_err)
}

/// Checks gradients with respect to `x` and every stored parameter.
fn params_check(store: &ParamStore, x: DiffArray, f: impl Fn(&Graph, &ParamStore, Var) -> Result<Var>) -> Result<f64> {
    let g = Graph::new();
    let xv = g.input(x.clone().with_requires_grad(true));
    let out = probe(&g, f(&g, store, xv)?)?;
    g.backward(out)?;
    let ids: Vec<ParamId> = store.ids().collect();
    let mut analytic = vec![g.grad(xv).unwrap_or_else(|| vec![0.0; x.len()])];
    for &id in &ids {
        let n = store.get(id).len();
        analytic.push(g.param_var(id).and_then(|v| g.grad(v)).unwrap_or_else(|| vec![0.0; n]));
    }

    let eval = |s: &ParamStore, x: &DiffArray| -> Result<f64> {
        let g = Graph::new();
        let y = probe(&g, f(&g, s, g.constant(x.clone()))?)?;
        Ok(g.item(y))
    };
    let mut worst: f64 = 0.0;
    let mut compare = |a: f64, numeric: f64| {
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    };
    let mut xw = x.clone();
    for i in 0..x.len() {
        let x0 = x.data()[i];
        xw.data_mut()[i] = x0 + STEP;
        let fp = eval(store, &xw)?;
        xw.data_mut()[i] = x0 - STEP;
        let fm = eval(store, &xw)?;
        xw.data_mut()[i] = x0;
        compare(analytic[0][i], (fp - fm) / (2.0 * STEP));
    }
    let mut sw = store.clone();
    for (k, &id) in ids.iter().enumerate() {
        for i in 0..store.get(id).len() {
            let p0 = store.get(id).data()[i];
            sw.get_mut(id).data_mut()[i] = p0 + STEP;
            let fp = eval(&sw, &x)?;
            sw.get_mut(id).data_mut()[i] = p0 - STEP;
            let fm = eval(&sw, &x)?;
            sw.get_mut(id).data_mut()[i] = p0;
            compare(analytic[k + 1][i], (fp - fm) / (2.0 * STEP));
        }
    }
    Ok(worst)
}

fn case_matmul(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut rng, &[4, 2], -1.0, 1.0);
    Ok(check(&[a, b], STEP, |g, v| probe(g, g.matmul(v[0], v[1])?))?.max_rel_err)
}

fn case_linear(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let w = uniform(&mut rng, &[4, 2], -1.0, 1.0);
    let b = uniform(&mut rng, &[2], -1.0, 1.0);
    Ok(check(&[x, w, b], STEP, |g, v| probe(g, g.linear(v[0], v[1], Some(v[2]))?))?.max_rel_err)
}

fn case_add_bias(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut rng, &[4], -1.0, 1.0);
    Ok(check(&[x, b], STEP, |g, v| probe(g, g.add_bias(v[0], v[1])?))?.max_rel_err)
}

fn case_shape_ops(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut rng, &[2, 4], -1.0, 1.0);
    Ok(check(&[a, b], STEP, |g, v| {
        let c = g.concat_rows(v[0], v[1])?;
        let r = g.gather_rows(c, &[4, 0, 0, 2])?;
        let s = g.select_cols(r, &[3, 1])?;
        let t = g.transpose(s)?;
        probe(g, g.reshape(t, &[8])?)
    })?
    .max_rel_err)
}

fn case_reductions(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = uniform(&mut rng, &[2, 3], -1.0, 1.0);
    let b = uniform(&mut rng, &[2, 3], -1.0, 1.0);
    Ok(check(&[a, b], STEP, |g, v| {
        let s = g.add_all(&[g.sum(g.mul(v[0], v[0])?), g.mean(g.mul(v[0], v[1])?), g.sum(v[1])])?;
        g.mul(s, s)
    })?
    .max_rel_err)
}

fn case_softmax(seed: u64) -> Result<f64> {
    unary(seed, &[2, 5], -2.0, 2.0, |g, x| g.softmax(x, 1, None))
}

fn case_softmax_middle_axis(seed: u64) -> Result<f64> {
    unary(seed, &[2, 3, 2], -2.0, 2.0, |g, x| g.softmax(x, 1, None))
}

fn case_log_softmax_masked(seed: u64) -> Result<f64> {
    unary(seed, &[3, 3], -2.0, 2.0, |g, x| {
        let mask: Mask = vec![false, true, true, false, false, true, false, false, false].into();
        Ok(g.exp(g.log_softmax(x, 1, Some(mask))?))
    })
}

fn case_layer_norm(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[3, 5], -1.0, 1.0);
    let gamma = uniform(&mut rng, &[5], 0.5, 1.5);
    let beta = uniform(&mut rng, &[5], -0.5, 0.5);
    Ok(check(&[x, gamma, beta], STEP, |g, v| probe(g, g.layer_norm(v[0], v[1], v[2])?))?.max_rel_err)
}

fn case_attention_core(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = uniform(&mut rng, &[6, 4], -1.0, 1.0);
    let k = uniform(&mut rng, &[6, 4], -1.0, 1.0);
    let v = uniform(&mut rng, &[6, 4], -1.0, 1.0);
    Ok(check(&[q, k, v], STEP, |g, x| probe(g, g.attention_core(x[0], x[1], x[2], 2, 2, None)?))?.max_rel_err)
}

fn case_encoder_layer(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig { dim: 4, heads: 2, ffn_hidden: 6, ..ModelConfig::default() };
    let mut store = ParamStore::new();
    let layer = EncoderLayer::new(&mut store, &mut rng, "enc.0", &cfg)?;
    let x = uniform(&mut rng, &[5, 4], -1.0, 1.0);
    params_check(&store, x, |g, s, x| layer.forward(g, s, x, None))
}

fn case_decoder_layer(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig { dim: 4, heads: 2, ffn_hidden: 6, text_tokens: 2, ..ModelConfig::default() };
    let mut store = ParamStore::new();
    let layer = DecoderLayer::new(&mut store, &mut rng, "dec.0", &cfg)?;
    let q = uniform(&mut rng, &[2, 4], -1.0, 1.0);
    let t = uniform(&mut rng, &[4, 4], -1.0, 1.0);
    let m = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let r = check(&[q, t, m], STEP, |g, v| {
        let (q2, t2) = layer.forward(g, &store, v[0], v[1], v[2], &AttnPos::default(), 2)?;
        g.add(probe(g, q2)?, probe(g, t2)?)
    })?;
    Ok(r.max_rel_err)
}

fn case_dag_nll(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, d, v) = (5, 4, 5);
    let mut store = ParamStore::new();
    let head = DagHead::new(&mut store, &mut rng, d, v)?;
    let text = uniform(&mut rng, &[k, d], -1.0, 1.0);
    let target = [2, 3, EOS];
    params_check(&store, text, |g, s, x| {
        let dag = build_dag(g, s, &head, x)?;
        dag_nll(g, &dag, &target)
    })
}

fn case_giou(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = uniform(&mut rng, &[3, 4], -1.5, 1.5);
    let target = DiffArray::new(&[3, 4], vec![0.4, 0.4, 0.2, 0.3, 0.6, 0.5, 0.3, 0.2, 0.5, 0.5, 0.5, 0.5])?;
    Ok(check(&[raw], STEP, |g, v| probe(g, giou_rows(g, g.sigmoid(v[0]), g.constant(target.clone()))?))?.max_rel_err)
}

fn case_bce(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = uniform(&mut rng, &[5, 1], -3.0, 3.0);
    Ok(check(&[logits], STEP, |g, v| bce_with_logits(g, v[0], &[1.0, 0.0, 0.0, 1.0, 0.0]))?.max_rel_err)
}

/// Loss through sigmoid boxes, objectness and the text DAG, with the
/// matching and IoU factors frozen at the starting point.
fn case_composite(seed: u64) -> Result<f64> {
    let (n, k, d, v) = (3, 4, 4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let head = DagHead::new(&mut store, &mut rng, d, v)?;
    let raw = DiffArray::new(
        &[n, 4],
        (0..4 * n).map(|i| if i % 4 < 2 { rng.gen_range(-1.0..1.0) } else { rng.gen_range(-2.0..-0.5) }).collect(),
    )?;
    let logits = uniform(&mut rng, &[n, 1], -1.0, 1.0);
    let text = uniform(&mut rng, &[2 * k, d], -1.0, 1.0);
    let gts = [[0.4, 0.4, 0.2, 0.2], [0.6, 0.5, 0.25, 0.15]];
    let w = LossWeights::default();
    let boxes: Vec<f64> = raw.data().iter().map(|&x| sigmoid(x)).collect();
    let assign = hungarian_match(&matching_cost(&BoxPred::from_values(&boxes, logits.data()), &gts, &w));
    let scales = dag_scales(&boxes, &gts, &assign);
    let targets: [&[u32]; 2] = [&[2, 3, EOS], &[4, EOS]];
    let r = check(&[raw, logits, text], STEP, |g, x| {
        let p = PredVars { boxes: g.sigmoid(x[0]), logits: x[1] };
        let nlls = (0..assign.pairs.len())
            .map(|r| {
                let rows: Vec<usize> = (r * k..(r + 1) * k).collect();
                let dag = build_dag(g, &store, &head, g.gather_rows(x[2], &rows)?)?;
                dag_nll(g, &dag, targets[r])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(total_loss_scaled(g, &p, &nlls, &gts, &assign, &scales, &w)?.0)
    })?;
    Ok(r.max_rel_err)
}

macro_rules! cases {
    ($($name:literal => $run:expr),* $(,)?) => {
        vec![$(GradCase { name: $name, run: $run }),*]
    };
}

/// Every check, in a fixed order.
pub fn cases() -> Vec<GradCase> {
    cases![
        "matmul" => case_matmul,
        "linear" => case_linear,
        "add_bias" => case_add_bias,
        "transpose/reshape/gather/concat/select" => case_shape_ops,
        "sum/mean/add_all" => case_reductions,
        "add" => |s| binary(s, &[2, 3], |g, a, b| g.add(a, b)),
        "sub" => |s| binary(s, &[2, 3], |g, a, b| g.sub(a, b)),
        "mul" => |s| binary(s, &[2, 3], |g, a, b| g.mul(a, b)),
        "div" => |s| binary(s, &[2, 3], |g, a, b| g.div(a, g.add_scalar(g.abs(b), 0.5))),
        "maximum" => |s| binary(s, &[2, 3], |g, a, b| g.maximum(a, b)),
        "minimum" => |s| binary(s, &[2, 3], |g, a, b| g.minimum(a, b)),
        "scale/add_scalar" => |s| unary(s, &[2, 3], -1.0, 1.0, |g, x| Ok(g.add_scalar(g.scale(x, -1.5), 0.25))),
        "relu" => |s| unary(s, &[2, 3], -1.0, 1.0, |g, x| Ok(g.relu(x))),
        "abs" => |s| unary(s, &[2, 3], -1.0, 1.0, |g, x| Ok(g.abs(x))),
        "sigmoid" => |s| unary(s, &[2, 3], -3.0, 3.0, |g, x| Ok(g.sigmoid(x))),
        "softplus" => |s| unary(s, &[2, 3], -3.0, 3.0, |g, x| Ok(g.softplus(x))),
        "exp" => |s| unary(s, &[2, 3], -2.0, 2.0, |g, x| Ok(g.exp(x))),
        "log" => |s| unary(s, &[2, 3], 0.2, 3.0, |g, x| Ok(g.log(x))),
        "softmax" => case_softmax,
        "softmax (middle axis)" => case_softmax_middle_axis,
        "log_softmax (masked)" => case_log_softmax_masked,
        "layer_norm" => case_layer_norm,
        "attention_core" => case_attention_core,
        "encoder layer" => case_encoder_layer,
        "decoder layer" => case_decoder_layer,
        "dag_nll" => case_dag_nll,
        "giou_rows" => case_giou,
        "bce_with_logits" => case_bce,
        "composite loss" => case_composite,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_on_a_few_seeds() {
        for case in cases() {
            for seed in 0..3 {
                let err = case.max_rel_err(seed).unwrap();
                assert!(err < 1e-4, "{case:?} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn names_are_unique() {
        let mut names: Vec<_> = cases().iter().map(|c| c.name).collect();
        names.sort_unstable();
        let n = names.len();
        names.dedup();
        assert_eq!(names.len(), n);
    }
}
