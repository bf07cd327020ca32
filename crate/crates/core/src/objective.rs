//! Set-prediction objective: box geometry, Hungarian matching and the
//! combined training loss.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::numcore::{sigmoid, DiffArray, Graph, Var};
use crate::synthdata::BoxCxcywh;

/// Box as `(x1, y1, x2, y2)`.
pub type BoxXyxy = [f64; 4];

pub fn to_xyxy(b: &BoxCxcywh) -> BoxXyxy {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

fn area(b: &BoxXyxy) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

fn inter_union(a: &BoxXyxy, b: &BoxXyxy) -> (f64, f64) {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    (inter, area(a) + area(b) - inter)
}

pub fn iou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let (inter, union) = inter_union(a, b);
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Generalised IoU in `[-1, 1]`. Two zero-area boxes give 0.
pub fn giou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let (inter, union) = inter_union(a, b);
    if union <= 0.0 {
        return 0.0;
    }
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    inter / union - (hull - union) / hull
}

pub fn l1(a: &BoxCxcywh, b: &BoxCxcywh) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Loss (and matching cost) weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub reg: f64,
    pub iou: f64,
    pub obj: f64,
    pub dag: f64,
    /// Objectness of every encoder token, used to train query selection.
    pub enc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { reg: 5.0, iou: 2.0, obj: 1.0, dag: 1.0, enc: 1.0 }
    }
}

/// One query's box and objectness logit, as plain values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxPred {
    pub bbox: BoxCxcywh,
    pub objectness_logit: f64,
}

impl BoxPred {
    /// Splits `[N, 4]` boxes and `[N]` logits into per-query predictions.
    pub fn from_values(boxes: &[f64], logits: &[f64]) -> Vec<Self> {
        boxes
            .chunks(4)
            .zip(logits)
            .map(|(b, &l)| Self { bbox: [b[0], b[1], b[2], b[3]], objectness_logit: l })
            .collect()
    }
}

/// `[N][G]` cost of assigning query `j` to ground truth `i`.
pub fn matching_cost(preds: &[BoxPred], gts: &[BoxCxcywh], w: &LossWeights) -> Vec<Vec<f64>> {
    preds
        .iter()
        .map(|p| {
            let obj = -sigmoid(p.objectness_logit);
            let pb = to_xyxy(&p.bbox);
            gts.iter()
                .map(|t| w.obj * obj + w.reg * l1(&p.bbox, t) + w.iou * (1.0 - giou(&pb, &to_xyxy(t))))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchAssignment {
    /// `(query, ground truth)` sorted by query.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

impl MatchAssignment {
    pub fn is_matched(&self, query: usize) -> bool {
        self.pairs.iter().any(|&(j, _)| j == query)
    }
}

/// Minimum-cost assignment of the `rows` to distinct `cols`; requires
/// `rows.len() <= cols.len()`. Returns the total and each row's column.
fn solve(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let (n, m) = (rows.len(), cols.len());
    if n == 0 {
        return (0.0, Vec::new());
    }
    if n > m {
        return (f64::INFINITY, Vec::new());
    }
    // potentials method, 1-based with a virtual column 0
    let c = |i: usize, j: usize| cost[cols[j - 1]][rows[i - 1]];
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; m + 1]);
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let (mut delta, mut j1) = (f64::INFINITY, 0);
            for j in 1..=m {
                if !used[j] {
                    let cur = c(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assign[owner[j] - 1] = cols[j - 1];
        }
    }
    let total = (0..n).map(|i| cost[assign[i]][rows[i]]).sum();
    (total, assign)
}

/// Optimal matching of queries (rows of `cost`) to ground truths (columns).
///
/// Among optimal assignments the lexicographically smallest sorted pair list
/// is returned; totals within `1e-9` relative are treated as equal.
pub fn hungarian_match(cost: &[Vec<f64>]) -> MatchAssignment {
    let n = cost.len();
    let g = cost.first().map_or(0, Vec::len);
    let all_gt: Vec<usize> = (0..g).collect();
    let all_q: Vec<usize> = (0..n).collect();
    let (best, _) = solve(cost, &all_gt, &all_q);
    let tol = 1e-9 * (1.0 + best.abs());

    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    let mut free_gt = all_gt;
    let mut spent = 0.0;
    for j in 0..n {
        if free_gt.is_empty() {
            unmatched.push(j);
            continue;
        }
        let later: Vec<usize> = (j + 1..n).collect();
        let mut chosen = None;
        for (pos, &i) in free_gt.iter().enumerate() {
            let rest: Vec<usize> = free_gt.iter().copied().filter(|&x| x != i).collect();
            let (tail, _) = solve(cost, &rest, &later);
            if spent + cost[j][i] + tail <= best + tol {
                chosen = Some(pos);
                break;
            }
        }
        match chosen {
            Some(pos) => {
                let i = free_gt.remove(pos);
                spent += cost[j][i];
                pairs.push((j, i));
            }
            None => unmatched.push(j),
        }
    }
    MatchAssignment { pairs, unmatched }
}

/// Graph handles for the detection outputs of one image.
#[derive(Debug, Clone, Copy)]
pub struct PredVars {
    /// `[N, 4]` cxcywh in `(0, 1)`.
    pub boxes: Var,
    /// `[N, 1]` objectness logits.
    pub logits: Var,
}

/// Unweighted loss terms plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reg: f64,
    pub iou: f64,
    pub obj: f64,
    pub dag: f64,
    pub enc: f64,
}

/// Clamped IoU of every matched pair, used to scale the text loss.
pub fn dag_scales(pred_boxes: &[f64], gts: &[BoxCxcywh], assign: &MatchAssignment) -> Vec<f64> {
    assign
        .pairs
        .iter()
        .map(|&(j, i)| {
            let p = [pred_boxes[4 * j], pred_boxes[4 * j + 1], pred_boxes[4 * j + 2], pred_boxes[4 * j + 3]];
            iou(&to_xyxy(&p), &to_xyxy(&gts[i])).clamp(0.0, 1.0)
        })
        .collect()
}

fn col(g: &Graph, x: Var, c: usize) -> Result<Var> {
    g.select_cols(x, &[c])
}

/// Per-row GIoU of two `[G, 4]` cxcywh tensors, `[G, 1]`.
pub fn giou_rows(g: &Graph, pred: Var, target: Var) -> Result<Var> {
    let corners = |b: Var| -> Result<[Var; 4]> {
        let (cx, cy) = (col(g, b, 0)?, col(g, b, 1)?);
        let (hw, hh) = (g.scale(col(g, b, 2)?, 0.5), g.scale(col(g, b, 3)?, 0.5));
        Ok([g.sub(cx, hw)?, g.sub(cy, hh)?, g.add(cx, hw)?, g.add(cy, hh)?])
    };
    let [px1, py1, px2, py2] = corners(pred)?;
    let [tx1, ty1, tx2, ty2] = corners(target)?;
    let iw = g.relu(g.sub(g.minimum(px2, tx2)?, g.maximum(px1, tx1)?)?);
    let ih = g.relu(g.sub(g.minimum(py2, ty2)?, g.maximum(py1, ty1)?)?);
    let inter = g.mul(iw, ih)?;
    let area_p = g.mul(g.sub(px2, px1)?, g.sub(py2, py1)?)?;
    let area_t = g.mul(g.sub(tx2, tx1)?, g.sub(ty2, ty1)?)?;
    let union = g.sub(g.add(area_p, area_t)?, inter)?;
    let hw = g.sub(g.maximum(px2, tx2)?, g.minimum(px1, tx1)?)?;
    let hh = g.sub(g.maximum(py2, ty2)?, g.minimum(py1, ty1)?)?;
    let hull = g.mul(hw, hh)?;
    let iou = g.div(inter, union)?;
    let penalty = g.div(g.sub(hull, union)?, hull)?;
    g.sub(iou, penalty)
}

/// Mean binary cross-entropy of `[M, 1]` logits against 0/1 targets.
pub fn bce_with_logits(g: &Graph, logits: Var, targets: &[f64]) -> Result<Var> {
    let y = g.constant(DiffArray::new(&g.shape(logits), targets.to_vec())?);
    let per = g.sub(g.softplus(logits), g.mul(y, logits)?)?;
    Ok(g.mean(per))
}

/// Combined loss with the text-loss IoU factors taken from the current boxes.
pub fn total_loss(
    g: &Graph,
    preds: &PredVars,
    nlls: &[Var],
    gts: &[BoxCxcywh],
    assign: &MatchAssignment,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let scales = dag_scales(&g.data(preds.boxes), gts, assign);
    total_loss_scaled(g, preds, nlls, gts, assign, &scales, w)
}

/// Combined loss with explicit text-loss factors (one per matched pair).
///
/// `nlls[p]` is the text loss of `assign.pairs[p]`. Box and objectness terms
/// are sums divided by the ground-truth count; the text term is a plain sum.
pub fn total_loss_scaled(
    g: &Graph,
    preds: &PredVars,
    nlls: &[Var],
    gts: &[BoxCxcywh],
    assign: &MatchAssignment,
    scales: &[f64],
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let n = g.shape(preds.logits)[0];
    if nlls.len() != assign.pairs.len() || scales.len() != assign.pairs.len() {
        return dim_err(format!(
            "{} pairs but {} text losses and {} scales",
            assign.pairs.len(),
            nlls.len(),
            scales.len()
        ));
    }
    let mut targets = vec![0.0; n];
    for &(j, _) in &assign.pairs {
        targets[j] = 1.0;
    }
    // summed over queries and normalised by the box count, floored at one
    let obj = g.scale(bce_with_logits(g, preds.logits, &targets)?, n as f64 / gts.len().max(1) as f64);

    let zero = || g.constant(DiffArray::scalar(0.0));
    let (reg, iou_term, dag) = if assign.pairs.is_empty() {
        (zero(), zero(), zero())
    } else {
        let count = gts.len() as f64;
        let rows: Vec<usize> = assign.pairs.iter().map(|p| p.0).collect();
        let pred = g.gather_rows(preds.boxes, &rows)?;
        let tgt: Vec<f64> = assign.pairs.iter().flat_map(|p| gts[p.1]).collect();
        let tgt = g.constant(DiffArray::new(&[rows.len(), 4], tgt)?);
        let reg = g.scale(g.sum(g.abs(g.sub(pred, tgt)?)), 1.0 / count);
        let gi = g.sum(giou_rows(g, pred, tgt)?);
        let iou_term = g.scale(g.add_scalar(g.scale(gi, -1.0), rows.len() as f64), 1.0 / count);
        let parts: Vec<Var> = nlls.iter().zip(scales).map(|(&l, &s)| g.scale(l, s)).collect();
        (reg, iou_term, g.add_all(&parts)?)
    };
    let total = g.add_all(&[g.scale(reg, w.reg), g.scale(iou_term, w.iou), g.scale(obj, w.obj), g.scale(dag, w.dag)])?;
    let breakdown = LossBreakdown {
        total: g.item(total),
        reg: g.item(reg),
        iou: g.item(iou_term),
        obj: g.item(obj),
        dag: g.item(dag),
        enc: 0.0,
    };
    Ok((total, breakdown))
}

/// 1 for grid cells whose centre lies inside any ground-truth box.
pub fn token_targets(grid: usize, gts: &[BoxCxcywh]) -> Vec<f64> {
    (0..grid * grid)
        .map(|t| {
            let (x, y) = ((t % grid) as f64 + 0.5, (t / grid) as f64 + 0.5);
            let (x, y) = (x / grid as f64, y / grid as f64);
            let inside = gts.iter().map(to_xyxy).any(|b| x >= b[0] && x <= b[2] && y >= b[1] && y <= b[3]);
            f64::from(u8::from(inside))
        })
        .collect()
}
