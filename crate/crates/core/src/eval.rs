//! One-pass evaluation: per-frame center error and overlap, precision and
//! success curves, suite runs, ablation tables and memory-size sweeps.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::Variant;
use crate::error::{contract, Error, Result};
use crate::geometry::BoundingBox;
use crate::model::Model;
use crate::synthetic::{Sequence, Tier};
use crate::tracker;

/// Precision thresholds: 0..=50 pixels.
pub const PRECISION_THRESHOLDS: usize = 51;
/// Success thresholds: 0, 0.05, ..., 1.
pub const SUCCESS_THRESHOLDS: usize = 21;
pub const PRECISION_AT: f64 = 20.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub center_errors: Vec<f64>,
    pub ious: Vec<f64>,
    pub precision: Vec<f64>,
    pub success: Vec<f64>,
    pub auc: f64,
}

pub fn success_threshold(i: usize) -> f64 {
    i as f64 * 0.05
}

impl EvalResult {
    pub fn mean_iou(&self) -> f64 {
        self.ious.iter().sum::<f64>() / self.ious.len() as f64
    }

    pub fn precision_at(&self, px: f64) -> f64 {
        let n = self.center_errors.len() as f64;
        self.center_errors.iter().filter(|&&e| e <= px).count() as f64 / n
    }

    pub fn precision_curve(&self) -> Vec<CurvePoint> {
        self.precision
            .iter()
            .enumerate()
            .map(|(i, &v)| CurvePoint { threshold: i as f64, value: v })
            .collect()
    }

    pub fn success_curve(&self) -> Vec<CurvePoint> {
        self.success
            .iter()
            .enumerate()
            .map(|(i, &v)| CurvePoint {
                threshold: success_threshold(i),
                value: v,
            })
            .collect()
    }
}

/// Fraction of overlaps reaching each threshold; the zero threshold counts
/// only frames with some overlap.
fn success_curve(ious: &[f64]) -> Vec<f64> {
    let n = ious.len() as f64;
    (0..SUCCESS_THRESHOLDS)
        .map(|i| {
            let th = success_threshold(i);
            let hits = if i == 0 {
                ious.iter().filter(|&&o| o > 0.0).count()
            } else {
                // Guard against 0.05·i landing a hair above the exact value.
                ious.iter().filter(|&&o| o >= th - 1e-12).count()
            };
            hits as f64 / n
        })
        .collect()
}

/// Score `results` against `truth`; the first (initialization) frame is
/// excluded.
pub fn evaluate(results: &[BoundingBox], truth: &[BoundingBox]) -> Result<EvalResult> {
    if results.len() != truth.len() {
        return contract(format!("evaluate: {} results for {} ground-truth boxes", results.len(), truth.len()));
    }
    if results.len() < 2 {
        return contract("evaluate: need at least two frames (the first is not scored)");
    }
    let pairs = results.iter().zip(truth).skip(1);
    let center_errors: Vec<f64> = pairs.clone().map(|(r, t)| r.center_distance(t)).collect();
    let ious: Vec<f64> = pairs.map(|(r, t)| r.iou(t)).collect();
    let n = center_errors.len() as f64;
    let precision = (0..PRECISION_THRESHOLDS)
        .map(|th| center_errors.iter().filter(|&&e| e <= th as f64).count() as f64 / n)
        .collect();
    let success = success_curve(&ious);
    let auc = success.iter().sum::<f64>() / SUCCESS_THRESHOLDS as f64;
    Ok(EvalResult {
        center_errors,
        ious,
        precision,
        success,
        auc,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct SequenceResult {
    pub name: String,
    pub boxes: Vec<BoundingBox>,
    pub eval: EvalResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceRow {
    pub sequence: String,
    pub tier: String,
    pub auc: f64,
    pub mean_iou: f64,
    pub precision_20: f64,
}

impl SequenceResult {
    pub fn row(&self) -> SequenceRow {
        SequenceRow {
            sequence: self.name.clone(),
            tier: Tier::of_name(&self.name).map_or("-", |t| t.name()).to_string(),
            auc: self.eval.auc,
            mean_iou: self.eval.mean_iou(),
            precision_20: self.eval.precision_at(PRECISION_AT),
        }
    }
}

pub fn run_sequence(model: &Model, seq: &Sequence) -> Result<SequenceResult> {
    let first = *seq.truth.first().ok_or_else(|| Error::Data(format!("{}: empty sequence", seq.name)))?;
    let boxes = tracker::track(model, &seq.frames, first)?;
    let eval = evaluate(&boxes, &seq.truth)?;
    Ok(SequenceResult {
        name: seq.name.clone(),
        boxes,
        eval,
    })
}

/// Track every sequence (in parallel); results keep the input order.
pub fn run_suite(model: &Model, seqs: &[Sequence]) -> Result<Vec<SequenceResult>> {
    seqs.par_iter().map(|s| run_sequence(model, s)).collect()
}

pub fn mean_auc(results: &[SequenceResult]) -> f64 {
    results.iter().map(|r| r.eval.auc).sum::<f64>() / results.len().max(1) as f64
}

pub fn mean_iou(results: &[SequenceResult]) -> f64 {
    results.iter().map(|r| r.eval.mean_iou()).sum::<f64>() / results.len().max(1) as f64
}

/// Success curve averaged over sequences.
pub fn mean_success(results: &[SequenceResult]) -> Vec<CurvePoint> {
    let n = results.len().max(1) as f64;
    (0..SUCCESS_THRESHOLDS)
        .map(|i| CurvePoint {
            threshold: success_threshold(i),
            value: results.iter().map(|r| r.eval.success[i]).sum::<f64>() / n,
        })
        .collect()
}

pub fn mean_precision(results: &[SequenceResult]) -> Vec<CurvePoint> {
    let n = results.len().max(1) as f64;
    (0..PRECISION_THRESHOLDS)
        .map(|i| CurvePoint {
            threshold: i as f64,
            value: results.iter().map(|r| r.eval.precision[i]).sum::<f64>() / n,
        })
        .collect()
}

pub fn filter_tier(seqs: &[Sequence], tier: Tier) -> Vec<Sequence> {
    seqs.iter().filter(|s| Tier::of_name(&s.name) == Some(tier)).cloned().collect()
}

pub fn variant_checkpoint(dir: &Path, variant: Variant) -> PathBuf {
    dir.join(format!("{}.ckpt", variant.name()))
}

pub fn size_checkpoint(dir: &Path, slots: usize) -> PathBuf {
    dir.join(format!("slots_{slots}.ckpt"))
}

fn load_required(path: &Path, label: &str) -> Result<Model> {
    if !path.is_file() {
        return Err(Error::MissingCheckpoint {
            variant: label.to_string(),
            path: path.to_path_buf(),
        });
    }
    Checkpoint::load(path)?.into_model()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mean_auc: f64,
    pub mean_iou: f64,
}

/// Mean AUC and IoU of each variant's checkpoint (`<dir>/<variant>.ckpt`).
/// All checkpoints are located before any tracking starts.
pub fn run_ablation(ckpt_dir: &Path, variants: &[Variant], seqs: &[Sequence]) -> Result<Vec<AblationRow>> {
    let models = variants
        .iter()
        .map(|&v| {
            let m = load_required(&variant_checkpoint(ckpt_dir, v), v.name())?;
            if m.config.variant != v {
                return Err(Error::Config(format!(
                    "checkpoint for `{}` was trained as `{}`",
                    v.name(),
                    m.config.variant.name()
                )));
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    ablation_table(variants.iter().map(|v| v.name().to_string()).zip(&models), seqs)
}

/// Ablation table for already-loaded models.
pub fn ablation_table<'a>(models: impl IntoIterator<Item = (String, &'a Model)>, seqs: &[Sequence]) -> Result<Vec<AblationRow>> {
    models
        .into_iter()
        .map(|(name, m)| {
            let r = run_suite(m, seqs)?;
            Ok(AblationRow {
                variant: name,
                mean_auc: mean_auc(&r),
                mean_iou: mean_iou(&r),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub slots: usize,
    pub auc: f64,
}

pub const SWEEP_SIZES: [usize; 5] = [1, 2, 4, 8, 16];

/// Mean AUC for each memory size, from `<dir>/slots_<N>.ckpt`.
pub fn memory_size_sweep(ckpt_dir: &Path, sizes: &[usize], seqs: &[Sequence]) -> Result<Vec<SweepRow>> {
    let models = sizes
        .iter()
        .map(|&n| {
            let m = load_required(&size_checkpoint(ckpt_dir, n), &format!("slots_{n}"))?;
            if m.config.memory.slots != n {
                return Err(Error::Config(format!("checkpoint slots_{n} has {} slots", m.config.memory.slots)));
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    sizes
        .iter()
        .zip(&models)
        .map(|(&slots, m)| Ok(SweepRow { slots, auc: mean_auc(&run_suite(m, seqs)?) }))
        .collect()
}

pub fn to_csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

pub fn from_csv_str<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    std::fs::write(path, to_csv_string(rows)?)?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    from_csv_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn walk(n: usize) -> Vec<BoundingBox> {
        (0..n).map(|i| BoundingBox::new(20.0 + i as f64, 30.0, 10.0, 12.0)).collect()
    }

    #[test]
    fn perfect_tracking() {
        let t = walk(10);
        let e = evaluate(&t, &t).unwrap();
        assert_eq!(e.auc, 1.0);
        assert_eq!(e.precision_at(20.0), 1.0);
        assert_eq!(e.ious.len(), 9);
    }

    #[test]
    fn disjoint_tracking() {
        let t = walk(10);
        let r: Vec<_> = t.iter().map(|b| BoundingBox::new(b.cx + 100.0, b.cy, b.width, b.height)).collect();
        let e = evaluate(&r, &t).unwrap();
        assert!(e.success.iter().all(|&s| s == 0.0));
        assert_eq!(e.auc, 0.0);
    }

    #[test]
    fn half_and_half() {
        let t = walk(11);
        let r: Vec<_> = t
            .iter()
            .enumerate()
            .map(|(i, b)| if i % 2 == 0 { BoundingBox::new(500.0, 500.0, 5.0, 5.0) } else { *b })
            .collect();
        let e = evaluate(&r, &t).unwrap();
        assert!(e.success.iter().all(|&s| s == 0.5), "{:?}", e.success);
        assert!((e.auc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn first_frame_is_ignored() {
        let t = walk(5);
        let mut r = t.clone();
        r[0] = BoundingBox::new(900.0, 900.0, 1.0, 1.0);
        assert_eq!(evaluate(&r, &t).unwrap().auc, 1.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(evaluate(&walk(4), &walk(5)).is_err());
        assert!(evaluate(&walk(1), &walk(1)).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            AblationRow {
                variant: "full".into(),
                mean_auc: 0.1 + 0.2,
                mean_iou: 1.0 / 3.0,
            },
            AblationRow {
                variant: "queue".into(),
                mean_auc: 1e-300,
                mean_iou: 0.0,
            },
        ];
        let text = to_csv_string(&rows).unwrap();
        assert!(text.starts_with("variant,mean_auc,mean_iou\n"));
        assert_eq!(from_csv_str::<AblationRow>(&text).unwrap(), rows);
    }

    #[test]
    fn missing_checkpoint_names_variant() {
        let dir = tempfile::tempdir().unwrap();
        match run_ablation(dir.path(), &[Variant::Queue], &[]) {
            Err(Error::MissingCheckpoint { variant, .. }) => assert_eq!(variant, "queue"),
            other => panic!("{other:?}"),
        }
    }
}
