//! The five commands. Each validates its inputs before writing anything.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rtgen_core::evaluation::{write_json, write_pr_csv, EvalReport, PredictionRecord};
use rtgen_core::featurizer::ModelConfig;
use rtgen_core::model::{Decode, Detector};
use rtgen_core::objective::LossBreakdown;
use rtgen_core::synthdata::{generate_scene, read_dataset, read_ppm, write_dataset, DetectionSample, Vocabulary};
use rtgen_core::train::{categories, evaluate, Trainer};

use crate::config::{check_vocab, RunConfig};
use crate::error::{CliError, CliResult};

pub const BEST_CHECKPOINT: &str = "best.rtgk";
pub const LAST_CHECKPOINT: &str = "last.rtgk";
pub const MODEL_SIDECAR: &str = "model.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const METRICS_HEADER: [&str; 9] = ["epoch", "total", "reg", "iou", "obj", "dag", "enc", "val_ap50", "val_exact_name"];
pub const SWEEP_HEADER: [&str; 6] = ["axis", "value", "AP", "AP50", "AP75", "params"];

/// Model shape and vocabulary stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSidecar {
    pub model: ModelConfig,
    pub vocab: Vec<String>,
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Data(e.to_string())
}

/// Names the file behind a bare IO failure.
fn at_path<T>(path: &Path, r: rtgen_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| match e {
        rtgen_core::Error::Io(io) => CliError::Data(format!("{}: {io}", path.display())),
        other => other.into(),
    })
}

fn max_name_len(samples: &[DetectionSample]) -> usize {
    samples.iter().flat_map(|s| &s.names).map(Vec::len).max().unwrap_or(0)
}

/// Reads `dir/train` and `dir/val`; both must exist, be non-empty and share
/// a vocabulary.
pub fn load_splits(dir: &Path) -> CliResult<(Vec<DetectionSample>, Vec<DetectionSample>, Vocabulary)> {
    let (train_dir, val_dir) = (dir.join("train"), dir.join("val"));
    let (train, vocab) = at_path(&train_dir, read_dataset(&train_dir))?;
    let (val, val_vocab) = at_path(&val_dir, read_dataset(&val_dir))?;
    if vocab != val_vocab {
        return Err(CliError::Data("train and val vocabularies differ".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(CliError::Data(format!("{}: empty split", dir.display())));
    }
    Ok((train, val, vocab))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenSummary {
    pub train: usize,
    pub val: usize,
    pub out: PathBuf,
}

/// Writes `out/train` and `out/val` from disjoint seed ranges.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> CliResult<GenSummary> {
    cfg.gen_cfg.validate()?;
    cfg.data.validate()?;
    let vocab = cfg.gen_cfg.vocabulary()?;
    let scenes = |seeds: std::ops::Range<u64>| -> CliResult<Vec<DetectionSample>> {
        seeds.map(|s| Ok(generate_scene(s, &cfg.gen_cfg, &vocab)?)).collect()
    };
    let train = scenes(cfg.data.train_seeds())?;
    let val = scenes(cfg.data.val_seeds())?;
    write_dataset(&out.join("train"), &train, &vocab)?;
    write_dataset(&out.join("val"), &val, &vocab)?;
    Ok(GenSummary { train: train.len(), val: val.len(), out: out.to_path_buf() })
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_ap50: f64,
    pub val_exact_name: f64,
}

impl EpochRow {
    fn record(&self) -> Vec<String> {
        let l = &self.loss;
        [self.epoch.to_string()]
            .into_iter()
            .chain([l.total, l.reg, l.iou, l.obj, l.dag, l.enc, self.val_ap50, self.val_exact_name].map(|v| v.to_string()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_ap50: f64,
    pub out: PathBuf,
}

fn check_model_fits(model: &ModelConfig, vocab: &Vocabulary, samples: &[DetectionSample]) -> CliResult<()> {
    check_vocab(model, vocab.len(), max_name_len(samples))?;
    if let Some(s) = samples.iter().find(|s| s.image.width != model.image_size || s.image.height != model.image_size) {
        return Err(CliError::Config(format!(
            "dataset image {}x{} but model expects {}",
            s.image.width, s.image.height, model.image_size
        )));
    }
    Ok(())
}

/// Trains on `data/train`, scoring `data/val` after every epoch. Writes
/// `metrics.csv`, the best-AP50 parameters with their sidecar, and the full
/// trainer state of the last epoch. With `resume`, continues from that state.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, resume: bool) -> CliResult<TrainSummary> {
    cfg.model.validate()?;
    cfg.train.validate()?;
    let (train, val, vocab) = load_splits(data)?;
    check_model_fits(&cfg.model, &vocab, &train)?;
    check_model_fits(&cfg.model, &vocab, &val)?;

    let mut trainer = Trainer::new(&cfg.model, &cfg.train)?;
    let last = out.join(LAST_CHECKPOINT);
    let metrics = out.join(METRICS_FILE);
    let mut kept = Vec::new();
    if resume {
        at_path(&last, trainer.load(&last))?;
        kept = read_rows(&metrics, trainer.epoch)?;
    }
    let mut best = best_of(&kept)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), cfg.to_json())?;
    let sidecar = ModelSidecar { model: cfg.model.clone(), vocab: vocab.words().to_vec() };
    write_json(&out.join(MODEL_SIDECAR), &sidecar)?;

    // rows past the resumed epoch are dropped
    let mut w = csv::Writer::from_path(&metrics).map_err(csv_err)?;
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for row in &kept {
        w.write_record(row).map_err(csv_err)?;
    }
    let cats = categories(&val);
    let start = trainer.epoch;
    for epoch in start..cfg.train.epochs {
        let loss = trainer.train_epoch(&train)?;
        let run = evaluate(&trainer.model, &val, &cats, Decode::Viterbi)?;
        let row = EpochRow { epoch, loss, val_ap50: run.report.ap50, val_exact_name: run.exact_name_rate };
        w.write_record(row.record()).map_err(csv_err)?;
        w.flush()?;
        if best.is_none_or(|(_, b)| row.val_ap50 > b) {
            best = Some((epoch, row.val_ap50));
            trainer.model.save_params(&out.join(BEST_CHECKPOINT))?;
        }
        trainer.save(&last)?;
    }
    Ok(TrainSummary {
        epochs_run: cfg.train.epochs.saturating_sub(start),
        best_epoch: best.map(|b| b.0),
        best_val_ap50: best.map_or(0.0, |b| b.1),
        out: out.to_path_buf(),
    })
}

/// The first `epochs` data rows of a metrics file.
fn read_rows(path: &Path, epochs: usize) -> CliResult<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let rows: Vec<csv::StringRecord> = r.records().take(epochs).collect::<Result<_, _>>().map_err(csv_err)?;
    if rows.len() < epochs {
        return Err(CliError::Data(format!("{}: {} rows for {epochs} epochs", path.display(), rows.len())));
    }
    Ok(rows)
}

/// Best `(epoch, val_ap50)` among metrics rows; earlier epochs win ties.
fn best_of(rows: &[csv::StringRecord]) -> CliResult<Option<(usize, f64)>> {
    let mut best: Option<(usize, f64)> = None;
    for rec in rows {
        let epoch = rec.get(0).and_then(|s| s.parse::<usize>().ok());
        let ap = rec.get(7).and_then(|s| s.parse::<f64>().ok());
        let (Some(epoch), Some(ap)) = (epoch, ap) else {
            return Err(CliError::Data("malformed metrics row".into()));
        };
        if best.is_none_or(|(_, b)| ap > b) {
            best = Some((epoch, ap));
        }
    }
    Ok(best)
}

/// Loads a parameter checkpoint and the sidecar stored beside it.
pub fn load_model(checkpoint: &Path) -> CliResult<(Detector, Vocabulary)> {
    let sidecar_path = checkpoint.with_file_name(MODEL_SIDECAR);
    let text = fs::read_to_string(&sidecar_path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", sidecar_path.display())))?;
    let sidecar: ModelSidecar =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", sidecar_path.display())))?;
    let vocab = Vocabulary::from_full_list(sidecar.vocab)?;
    let mut model = Detector::new(&sidecar.model, 0)?;
    at_path(checkpoint, model.load_params(checkpoint))?;
    Ok((model, vocab))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub exact_name_rate: f64,
    pub images: usize,
}

#[derive(Serialize)]
struct ReportFile<'a> {
    #[serde(flatten)]
    report: &'a EvalReport,
    exact_name_rate: f64,
    images: usize,
}

/// Scores a checkpoint on one dataset directory. Writes `report.json`,
/// `pr.csv` and `predictions.json` into `out`.
pub fn cmd_eval(checkpoint: &Path, dataset: &Path, out: &Path, decode: Decode) -> CliResult<EvalSummary> {
    let (model, vocab) = load_model(checkpoint)?;
    let (samples, data_vocab) = at_path(dataset, read_dataset(dataset))?;
    if data_vocab != vocab {
        return Err(CliError::Config("dataset vocabulary differs from the checkpoint's".into()));
    }
    if samples.is_empty() {
        return Err(CliError::Data(format!("{}: empty dataset", dataset.display())));
    }
    check_model_fits(&model.cfg, &vocab, &samples)?;
    let run = evaluate(&model, &samples, &categories(&samples), decode)?;
    fs::create_dir_all(out)?;
    write_json(
        &out.join("report.json"),
        &ReportFile { report: &run.report, exact_name_rate: run.exact_name_rate, images: samples.len() },
    )?;
    write_pr_csv(&out.join("pr.csv"), &run.report)?;
    let predictions: Vec<PredictionRecord> = run
        .detections
        .iter()
        .enumerate()
        .flat_map(|(image_id, dets)| dets.iter().map(move |d| (image_id, d)))
        .map(|(image_id, d)| PredictionRecord {
            image_id,
            bbox: d.bbox,
            objectness: d.objectness,
            name: vocab.render(&d.name),
            final_score: d.final_score,
        })
        .collect();
    write_json(&out.join("predictions.json"), &predictions)?;
    Ok(EvalSummary {
        ap: run.report.ap,
        ap50: run.report.ap50,
        ap75: run.report.ap75,
        exact_name_rate: run.exact_name_rate,
        images: samples.len(),
    })
}

/// One detection printed by `infer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferRecord {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub objectness: f64,
    pub name: String,
    pub token_ids: Vec<u32>,
    pub log_score: f64,
}

/// Top `topk` queries by objectness, keeping those at or above `threshold`.
pub fn cmd_infer(checkpoint: &Path, image: &Path, decode: Decode, topk: usize, threshold: f64) -> CliResult<Vec<InferRecord>> {
    let (model, vocab) = load_model(checkpoint)?;
    let img = at_path(image, read_ppm(image))?;
    if img.width != model.cfg.image_size || img.height != model.cfg.image_size {
        return Err(CliError::Data(format!(
            "{}: image is {}x{}, model expects {}",
            image.display(),
            img.width,
            img.height,
            model.cfg.image_size
        )));
    }
    let mut results = model.detect(&img, decode)?;
    // stable sort keeps query order among equal scores
    results.sort_by(|a, b| b.detection.objectness.total_cmp(&a.detection.objectness));
    Ok(results
        .into_iter()
        .filter(|r| r.detection.objectness >= threshold)
        .take(topk)
        .map(|r| InferRecord {
            bbox: r.detection.bbox,
            objectness: r.detection.objectness,
            name: vocab.render(&r.prediction.token_ids),
            token_ids: r.prediction.token_ids,
            log_score: r.prediction.log_score,
        })
        .collect())
}

/// The two ablation axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    TextTokens,
    DecoderLayers,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::TextTokens => "text_tokens",
            Self::DecoderLayers => "decoder_layers",
        }
    }

    pub fn apply(self, model: &ModelConfig, value: usize) -> ModelConfig {
        match self {
            Self::TextTokens => ModelConfig { text_tokens: value, ..model.clone() },
            Self::DecoderLayers => ModelConfig { decoder_layers: value, ..model.clone() },
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "text_tokens" => Ok(Self::TextTokens),
            "decoder_layers" => Ok(Self::DecoderLayers),
            _ => Err(CliError::Config(format!("unknown sweep axis {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: &'static str,
    pub value: usize,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub params: usize,
}

/// Trains one model per value on `data/train` and scores it on `data/val`.
/// Every value is validated before the first run starts.
pub fn cmd_sweep(cfg: &RunConfig, data: &Path, out: &Path, axis: SweepAxis, values: &[usize]) -> CliResult<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(CliError::Config("no sweep values".into()));
    }
    cfg.train.validate()?;
    let (train, val, vocab) = load_splits(data)?;
    let models: Vec<ModelConfig> = values.iter().map(|&v| axis.apply(&cfg.model, v)).collect();
    for (m, v) in models.iter().zip(values) {
        m.validate().map_err(|e| CliError::Config(format!("{}={v}: {e}", axis.name())))?;
        check_model_fits(m, &vocab, &train).map_err(|e| CliError::Config(format!("{}={v}: {e}", axis.name())))?;
    }
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join(SWEEP_FILE)).map_err(csv_err)?;
    w.write_record(SWEEP_HEADER).map_err(csv_err)?;
    let cats = categories(&val);
    let mut rows = Vec::with_capacity(values.len());
    for (m, &value) in models.iter().zip(values) {
        let mut trainer = Trainer::new(m, &cfg.train)?;
        for _ in 0..cfg.train.epochs {
            trainer.train_epoch(&train)?;
        }
        let run = evaluate(&trainer.model, &val, &cats, Decode::Viterbi)?;
        let row = SweepRow {
            axis: axis.name(),
            value,
            ap: run.report.ap,
            ap50: run.report.ap50,
            ap75: run.report.ap75,
            params: trainer.model.num_params(),
        };
        w.write_record([
            row.axis.to_string(),
            value.to_string(),
            row.ap.to_string(),
            row.ap50.to_string(),
            row.ap75.to_string(),
            row.params.to_string(),
        ])
        .map_err(csv_err)?;
        w.flush()?;
        rows.push(row);
    }
    Ok(rows)
}
