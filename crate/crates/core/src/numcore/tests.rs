use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck;
use super::nn::MultiHeadAttention;
use super::*;
use crate::error::Error;

fn arr(shape: &[usize], data: &[f64]) -> DiffArray {
    DiffArray::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> DiffArray {
    let n = shape.iter().product();
    DiffArray::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn linear_identity_and_sum() {
    let g = Graph::new();
    let x = g.constant(arr(&[1, 2], &[1.0, 0.0]));
    let w = g.constant(arr(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(arr(&[2], &[0.0, 0.0]));
    assert_eq!(g.data(g.linear(x, w, Some(b)).unwrap()), vec![1.0, 0.0]);

    let x = g.constant(arr(&[1, 2], &[1.0, 2.0]));
    let w = g.constant(arr(&[2, 1], &[1.0, 1.0]));
    let b = g.constant(arr(&[1], &[3.0]));
    assert_eq!(g.data(g.linear(x, w, Some(b)).unwrap()), vec![6.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let mut expected = vec![0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            for k in 0..4 {
                expected[i * 2 + j] += a.at2(i, k) * b.at2(k, j);
            }
        }
    }
    let g = Graph::new();
    let y = g.matmul(g.constant(a), g.constant(b)).unwrap();
    assert!(close(&g.data(y), &expected, 1e-12));
}

#[test]
fn matmul_rejects_bad_inner_dim() {
    let g = Graph::new();
    let a = g.constant(DiffArray::zeros(&[2, 3]));
    let b = g.constant(DiffArray::zeros(&[2, 2]));
    assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
}

#[test]
fn softmax_examples() {
    let g = Graph::new();
    let y = g.softmax(g.constant(arr(&[3], &[0.0, 0.0, 0.0])), 0, None).unwrap();
    assert!(close(&g.data(y), &[1.0 / 3.0; 3], 1e-15));
    let y = g.softmax(g.constant(arr(&[2], &[0.0, 2f64.ln()])), 0, None).unwrap();
    assert!(close(&g.data(y), &[1.0 / 3.0, 2.0 / 3.0], 1e-15));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 5], &mut rng);
    let shifted = DiffArray::new(&[2, 5], x.data().iter().map(|v| v + 17.5).collect()).unwrap();
    let a = g.softmax(g.constant(x), 1, None).unwrap();
    let b = g.softmax(g.constant(shifted), 1, None).unwrap();
    assert!(close(&g.data(a), &g.data(b), 1e-12));
}

#[test]
fn softmax_mask_and_fully_masked_rows() {
    let g = Graph::new();
    let mask: Mask = vec![false, true, true, false, false, false].into();
    let x = g.constant(arr(&[2, 3], &[5.0, 1.0, 2.0, 1.0, 2.0, 3.0]));
    let y = g.data(g.softmax(x, 1, Some(mask)).unwrap());
    assert_eq!(y[0], 0.0);
    assert!((y[1] + y[2] - 1.0).abs() < 1e-12);
    assert_eq!(&y[3..], &[0.0, 0.0, 0.0]);
}

#[test]
fn softmax_rows_sum_to_one_along_middle_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = Graph::new();
    let y = g.data(g.softmax(g.constant(random(&[2, 3, 4], &mut rng)), 1, None).unwrap());
    for o in 0..2 {
        for j in 0..4 {
            let s: f64 = (0..3).map(|i| y[(o * 3 + i) * 4 + j]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_examples() {
    let g = Graph::new();
    let ones = g.constant(DiffArray::full(&[3], 1.0));
    let zeros = g.constant(DiffArray::zeros(&[3]));
    let y = g.layer_norm(g.constant(arr(&[3], &[4.0, 4.0, 4.0])), ones, zeros).unwrap();
    assert_eq!(g.data(y), vec![0.0; 3]);

    let ones = g.constant(DiffArray::full(&[2], 1.0));
    let zeros = g.constant(DiffArray::zeros(&[2]));
    let y = g.data(g.layer_norm(g.constant(arr(&[2], &[1.0, -1.0])), ones, zeros).unwrap());
    assert!(close(&y, &[1.0, -1.0], 1e-5));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[6], &mut rng);
    let gamma = random(&[6], &mut rng);
    let beta = random(&[6], &mut rng);
    let mean = x.data().iter().sum::<f64>() / 6.0;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
    let expected: Vec<f64> = (0..6)
        .map(|i| (x.data()[i] - mean) / (var + 1e-5).sqrt() * gamma.data()[i] + beta.data()[i])
        .collect();
    let y = g.layer_norm(g.constant(x), g.constant(gamma), g.constant(beta)).unwrap();
    assert!(close(&g.data(y), &expected, 1e-10));
}

fn identity_mha(dim: usize, heads: usize) -> (ParamStore, MultiHeadAttention) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mha = MultiHeadAttention::new(&mut store, &mut rng, "a", dim, heads).unwrap();
    let eye: Vec<f64> = (0..dim * dim).map(|i| if i / dim == i % dim { 1.0 } else { 0.0 }).collect();
    for name in ["a.q", "a.k", "a.v", "a.o"] {
        store.set(&format!("{name}.weight"), arr(&[dim, dim], &eye)).unwrap();
    }
    (store, mha)
}

#[test]
fn attention_uniform_weights_average_values() {
    let (store, mha) = identity_mha(4, 2);
    let g = Graph::new();
    let q = g.constant(DiffArray::zeros(&[1, 4]));
    let kv = g.constant(arr(&[3, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 0.0, 1.0, 2.0, 0.0]));
    let y = g.data(mha.forward(&g, &store, q, kv, kv, 1, None).unwrap());
    assert!(close(&y, &[2.0, 3.0, 4.0, 4.0], 1e-12));
}

#[test]
fn attention_one_hot_mask_selects_value() {
    let (store, mha) = identity_mha(4, 2);
    let g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = g.constant(random(&[2, 4], &mut rng));
    let kv_arr = random(&[3, 4], &mut rng);
    let kv = g.constant(kv_arr.clone());
    let mask = [false, true, false, false, true, false];
    let y = g.data(mha.forward(&g, &store, q, kv, kv, 1, Some(&mask)).unwrap());
    assert!(close(&y[..4], kv_arr.row(1), 1e-12));
    assert!(close(&y[4..], kv_arr.row(1), 1e-12));
}

#[test]
fn attention_single_head_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, &mut rng, "a", 2, 1).unwrap();
    let mut weights = Vec::new();
    for name in ["a.q", "a.k", "a.v", "a.o"] {
        let w = random(&[2, 2], &mut rng);
        let b = random(&[2], &mut rng);
        store.set(&format!("{name}.weight"), w.clone()).unwrap();
        store.set(&format!("{name}.bias"), b.clone()).unwrap();
        weights.push((w, b));
    }
    let xq = random(&[2, 2], &mut rng);
    let xk = random(&[2, 2], &mut rng);

    let proj = |x: &DiffArray, (w, b): &(DiffArray, DiffArray)| -> Vec<[f64; 2]> {
        (0..2)
            .map(|r| {
                let mut o = [0.0; 2];
                for (c, oc) in o.iter_mut().enumerate() {
                    *oc = b.data()[c] + x.at2(r, 0) * w.at2(0, c) + x.at2(r, 1) * w.at2(1, c);
                }
                o
            })
            .collect()
    };
    let q = proj(&xq, &weights[0]);
    let k = proj(&xk, &weights[1]);
    let v = proj(&xk, &weights[2]);
    let mut expected = Vec::new();
    for qi in &q {
        let s: Vec<f64> = k.iter().map(|kj| (qi[0] * kj[0] + qi[1] * kj[1]) / 2f64.sqrt()).collect();
        let z = s[0].exp() + s[1].exp();
        let p = [s[0].exp() / z, s[1].exp() / z];
        let o = [p[0] * v[0][0] + p[1] * v[1][0], p[0] * v[0][1] + p[1] * v[1][1]];
        let (wo, bo) = &weights[3];
        for c in 0..2 {
            expected.push(bo.data()[c] + o[0] * wo.at2(0, c) + o[1] * wo.at2(1, c));
        }
    }
    let g = Graph::new();
    let kin = g.constant(xk);
    let y = mha.forward(&g, &store, g.constant(xq), kin, kin, 1, None).unwrap();
    assert!(close(&g.data(y), &expected, 1e-10));
}

#[test]
fn attention_rejects_indivisible_heads() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        MultiHeadAttention::new(&mut store, &mut rng, "a", 6, 4),
        Err(Error::Config(_))
    ));
}

#[test]
fn backward_analytic_examples() {
    let g = Graph::new();
    let x = g.input(arr(&[3], &[1.0, -2.0, 0.5]).with_requires_grad(true));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), vec![1.0; 3]);

    let g = Graph::new();
    let x = g.input(arr(&[3], &[1.0, -2.0, 0.5]).with_requires_grad(true));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), vec![2.0, -4.0, 1.0]);
    // repeated backward accumulates
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), vec![4.0, -8.0, 2.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let g = Graph::new();
    let x = g.input(arr(&[2], &[1.0, 2.0]).with_requires_grad(true));
    assert!(matches!(g.backward(x), Err(Error::Usage(_))));
}

#[test]
fn shared_param_leaf_collects_both_uses() {
    let mut store = ParamStore::new();
    let id = store.insert("w", arr(&[1], &[3.0])).unwrap();
    let g = Graph::new();
    let a = g.param(&store, id);
    let b = g.param(&store, id);
    assert_eq!(a, b);
    let y = g.mul(a, b).unwrap();
    g.backward(y).unwrap();
    store.accumulate_grads(&g);
    assert_eq!(store.get(id).grad().unwrap(), &[6.0]);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let g = Graph::new();
        let x = g.constant(random(&[4, 6], &mut rng));
        let w = g.constant(random(&[6, 6], &mut rng));
        let h = g.matmul(x, w).unwrap();
        let o = g.attention_core(h, h, h, 2, 3, None).unwrap();
        g.data(g.softmax(o, 1, None).unwrap())
    };
    assert_eq!(run(), run());
}

// ---- finite-difference checks -------------------------------------------

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn fd(seed: u64, shapes: &[&[usize]], f: impl Fn(&Graph, &[Var]) -> crate::error::Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<DiffArray> = shapes.iter().map(|s| random(s, &mut rng)).collect();
    let r = gradcheck::check(&inputs, H, f).unwrap();
    assert!(r.max_rel_err < TOL, "seed {seed}: rel err {}", r.max_rel_err);
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe(g: &Graph, y: Var) -> Var {
    let n: usize = g.shape(y).iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
    let w = g.constant(DiffArray::new(&g.shape(y), w).unwrap());
    g.sum(g.mul(y, w).unwrap())
}

#[test]
fn gradcheck_primitives() {
    for seed in 0..3 {
        fd(seed, &[&[3, 4], &[4, 2], &[2]], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            Ok(probe(g, y))
        });
        fd(seed, &[&[2, 5]], |g, v| Ok(probe(g, g.softmax(v[0], 1, None)?)));
        fd(seed, &[&[2, 3, 2]], |g, v| Ok(probe(g, g.softmax(v[0], 1, None)?)));
        fd(seed, &[&[3, 3]], |g, v| {
            let mask: Mask = vec![false, true, true, false, false, true, false, false, false].into();
            let y = g.log_softmax(v[0], 1, Some(mask))?;
            let e = g.exp(y);
            Ok(probe(g, e))
        });
        fd(seed, &[&[3, 5], &[5], &[5]], |g, v| Ok(probe(g, g.layer_norm(v[0], v[1], v[2])?)));
        fd(seed, &[&[6, 4], &[6, 4], &[6, 4]], |g, v| {
            Ok(probe(g, g.attention_core(v[0], v[1], v[2], 2, 2, None)?))
        });
        fd(seed, &[&[2, 3], &[2, 3]], |g, v| {
            let a = g.div(v[0], g.add_scalar(g.abs(v[1]), 0.5))?;
            let b = g.maximum(a, v[1])?;
            let c = g.minimum(b, g.sigmoid(v[0]))?;
            let d = g.add(g.softplus(c), g.exp(v[1]))?;
            let e = g.log(g.add_scalar(g.relu(d), 1.0));
            Ok(probe(g, g.scale(e, 1.5)))
        });
        fd(seed, &[&[3, 4], &[2, 4]], |g, v| {
            let c = g.concat_rows(v[0], v[1])?;
            let r = g.gather_rows(c, &[4, 0, 0, 2])?;
            let s = g.select_cols(r, &[3, 1])?;
            let t = g.transpose(s)?;
            let t = g.reshape(t, &[8])?;
            Ok(probe(g, t))
        });
    }
}
