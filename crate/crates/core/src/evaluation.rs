//! Open-ended evaluation: name similarity, score rescaling and COCO-style AP.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{iou, to_xyxy};
use crate::synthdata::BoxCxcywh;

/// Similarity between a generated name and a reference name, in `[0, 1]`.
pub trait Similarity {
    fn score(&self, generated: &[u32], reference: &[u32]) -> f64;
}

/// Dice overlap of token multisets.
#[derive(Debug, Clone, Copy, Default)]
pub struct Dice;

impl Similarity for Dice {
    fn score(&self, generated: &[u32], reference: &[u32]) -> f64 {
        if generated.is_empty() || reference.is_empty() {
            return 0.0;
        }
        let mut rest = reference.to_vec();
        let mut common = 0;
        for t in generated {
            if let Some(p) = rest.iter().position(|r| r == t) {
                rest.swap_remove(p);
                common += 1;
            }
        }
        2.0 * common as f64 / (generated.len() + reference.len()) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoxCxcywh,
    pub objectness: f64,
    pub name: Vec<u32>,
    pub final_score: f64,
    /// Category the name was credited to by [`rescale_scores`].
    pub category: Option<Vec<u32>>,
}

impl Detection {
    pub fn new(bbox: BoxCxcywh, objectness: f64, name: Vec<u32>) -> Self {
        Self { bbox, objectness, name, final_score: objectness, category: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BoxCxcywh,
    pub name: Vec<u32>,
}

/// Credits each detection to its most similar category (first on ties) and
/// scales its score by that similarity.
pub fn rescale_scores(dets: &[Detection], categories: &[Vec<u32>], sim: &dyn Similarity) -> Vec<Detection> {
    dets.iter()
        .map(|d| {
            let mut best: Option<(f64, &Vec<u32>)> = None;
            for c in categories {
                let s = sim.score(&d.name, c);
                if best.is_none_or(|(b, _)| s > b) {
                    best = Some((s, c));
                }
            }
            let (s, cat) = best.map_or((0.0, None), |(s, c)| (s, Some(c.clone())));
            Detection { final_score: d.objectness * s, category: cat, ..d.clone() }
        })
        .collect()
}

pub const RECALL_POINTS: usize = 101;

/// Interpolated precision at the 101 recall points for one IoU threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub iou_threshold: f64,
    pub precision: Vec<f64>,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub curves: Vec<PrCurve>,
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

fn area(b: &BoxCxcywh) -> f64 {
    b[2] * b[3]
}

/// Detection order: score, then larger box, then input position.
fn ranked(dets: &[Vec<Detection>]) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> =
        dets.iter().enumerate().flat_map(|(im, ds)| (0..ds.len()).map(move |k| (im, k))).collect();
    order.sort_by(|&(ia, ka), &(ib, kb)| {
        let (a, b) = (&dets[ia][ka], &dets[ib][kb]);
        b.final_score
            .total_cmp(&a.final_score)
            .then(area(&b.bbox).total_cmp(&area(&a.bbox)))
            .then((ia, ka).cmp(&(ib, kb)))
    });
    order
}

fn curve_at(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], order: &[(usize, usize)], thr: f64) -> PrCurve {
    let total: usize = gts.iter().map(Vec::len).sum();
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for &(im, k) in order {
        let d = &dets[im][k];
        let db = to_xyxy(&d.bbox);
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.get(im).map_or(&[][..], Vec::as_slice).iter().enumerate() {
            if taken[im][gi] || d.category.as_ref() != Some(&gt.name) {
                continue;
            }
            let o = iou(&db, &to_xyxy(&gt.bbox));
            if o >= thr && best.is_none_or(|(_, b)| o > b) {
                best = Some((gi, o));
            }
        }
        match best {
            Some((gi, _)) => {
                taken[im][gi] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        recall.push(if total == 0 { 0.0 } else { tp as f64 / total as f64 });
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let sampled: Vec<f64> = (0..RECALL_POINTS)
        .map(|r| {
            let target = r as f64 / (RECALL_POINTS - 1) as f64;
            let pos = recall.partition_point(|&x| x < target);
            precision.get(pos).copied().unwrap_or(0.0)
        })
        .collect();
    let ap = if total == 0 { 0.0 } else { sampled.iter().sum::<f64>() / RECALL_POINTS as f64 };
    PrCurve { iou_threshold: thr, precision: sampled, ap }
}

/// Class-agnostic AP pooled over all images. A detection is a true positive
/// only if its credited category equals the ground-truth name.
pub fn compute_ap(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], thresholds: &[f64]) -> EvalReport {
    let order = ranked(dets);
    let curves: Vec<PrCurve> = thresholds.iter().map(|&t| curve_at(dets, gts, &order, t)).collect();
    let ap = if curves.is_empty() { 0.0 } else { curves.iter().map(|c| c.ap).sum::<f64>() / curves.len() as f64 };
    let at = |t: f64| {
        curves
            .iter()
            .find(|c| (c.iou_threshold - t).abs() < 1e-9)
            .map_or_else(|| curve_at(dets, gts, &order, t).ap, |c| c.ap)
    };
    EvalReport { ap, ap50: at(0.5), ap75: at(0.75), curves }
}

/// Fraction of ground truths whose most confident overlapping detection
/// (IoU at least 0.5) carries exactly the right name.
pub fn exact_name_rate(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>]) -> f64 {
    let (mut hits, mut total) = (0usize, 0usize);
    for (im, gs) in gts.iter().enumerate() {
        let ds = dets.get(im).map_or(&[][..], Vec::as_slice);
        for gt in gs {
            total += 1;
            let gb = to_xyxy(&gt.bbox);
            let best = ds
                .iter()
                .filter(|d| iou(&to_xyxy(&d.bbox), &gb) >= 0.5)
                .max_by(|a, b| a.objectness.partial_cmp(&b.objectness).unwrap_or(Ordering::Equal));
            if best.is_some_and(|d| d.name == gt.name) {
                hits += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// One line of the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: usize,
    #[serde(rename = "box")]
    pub bbox: BoxCxcywh,
    pub objectness: f64,
    pub name: String,
    pub final_score: f64,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// PR export: one row per (IoU threshold, recall point).
pub fn write_pr_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    let csv_err = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(["iou_threshold", "recall", "precision"]).map_err(csv_err)?;
    for c in &report.curves {
        for (r, p) in c.precision.iter().enumerate() {
            let recall = r as f64 / (RECALL_POINTS - 1) as f64;
            w.write_record([format!("{:.2}", c.iou_threshold), format!("{recall:.2}"), p.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}
