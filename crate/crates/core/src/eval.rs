//! Confusion counts, detection metrics and windowed streaming detection.

use std::fmt::Write as _;
use std::io;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{build_windows, GraphError, WindowGraph};
use crate::ingest::CanMessage;
use crate::model::{attack_probability, GatModel, ModelError};

/// Decision threshold on the attack probability.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{preds} predictions but {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("confusion counts are all zero")]
    EmptyCounts,
    #[error("value {0} is not a binary label")]
    InvalidLabel(u8),
    #[error("trace is empty or shorter than one window")]
    EmptyTrace,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Positive class is attack (`1`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

pub fn confusion(preds: &[u8], labels: &[u8]) -> Result<ConfusionCounts> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), labels: labels.len() });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in preds.iter().zip(labels) {
        match (p, y) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => return Err(EvalError::InvalidLabel(p.max(y))),
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No positive predictions; precision reported as 0.
    pub precision_undefined: bool,
    /// No positive labels; recall reported as 0.
    pub recall_undefined: bool,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn metrics(c: &ConfusionCounts) -> Result<Metrics> {
    let total = c.total();
    if total == 0 {
        return Err(EvalError::EmptyCounts);
    }
    let ratio = |num: u64, den: u64| if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) };
    let accuracy = (c.tp + c.tn) as f64 / total as f64;
    let (precision, precision_undefined) = ratio(c.tp, c.tp + c.fp);
    let (recall, recall_undefined) = ratio(c.tp, c.tp + c.fn_);
    Ok(Metrics { accuracy, precision, recall, f1: f1_score(precision, recall), precision_undefined, recall_undefined })
}

/// `prob ≥ threshold`, with the threshold clamped to `[0, 1]`.
pub fn verdict(prob: f64, threshold: f64) -> bool {
    prob >= threshold.clamp(0.0, 1.0)
}

/// Attack probabilities of `graphs` under `model`, in input order.
pub fn score_graphs(model: &GatModel, graphs: &[&WindowGraph], batch_size: usize) -> Result<Vec<f64>> {
    Ok(model.predict_logits(graphs, batch_size)?.into_iter().map(attack_probability).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub graphs: usize,
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

pub fn evaluate(model: &GatModel, graphs: &[WindowGraph], threshold: f64, batch_size: usize) -> Result<EvalReport> {
    if graphs.is_empty() {
        return Err(EvalError::Empty);
    }
    let refs: Vec<&WindowGraph> = graphs.iter().collect();
    let probs = score_graphs(model, &refs, batch_size)?;
    let preds: Vec<u8> = probs.iter().map(|&p| verdict(p, threshold) as u8).collect();
    let labels: Vec<u8> = graphs.iter().map(|g| g.label).collect();
    let counts = confusion(&preds, &labels)?;
    Ok(EvalReport { graphs: graphs.len(), threshold: threshold.clamp(0.0, 1.0), counts, metrics: metrics(&counts)? })
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let m = &self.metrics;
        let c = &self.counts;
        let mut s = String::new();
        let _ = writeln!(s, "windows    {}", self.graphs);
        let _ = writeln!(s, "threshold  {:.4}", self.threshold);
        let _ = writeln!(s, "TP {}  TN {}  FP {}  FN {}", c.tp, c.tn, c.fp, c.fn_);
        let _ = writeln!(s, "accuracy   {:.4}", m.accuracy);
        let flag = |u: bool| if u { "  (undefined, reported as 0)" } else { "" };
        let _ = writeln!(s, "precision  {:.4}{}", m.precision, flag(m.precision_undefined));
        let _ = writeln!(s, "recall     {:.4}{}", m.recall, flag(m.recall_undefined));
        let _ = writeln!(s, "f1         {:.4}", m.f1);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionRecord {
    pub window_index: usize,
    pub start_ts: f64,
    pub end_ts: f64,
    pub prob: f64,
    pub verdict: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub records: Vec<DetectionRecord>,
    pub threshold: f64,
    /// Windows scored per second of wall time, graph building included.
    pub windows_per_second: f64,
}

impl Detection {
    pub fn attack_windows(&self) -> usize {
        self.records.iter().filter(|r| r.verdict).count()
    }
}

/// Slides a window over `messages`, scores each complete window and applies
/// the threshold.
pub fn detect_stream(
    model: &GatModel,
    messages: &[CanMessage],
    window: usize,
    stride: usize,
    threshold: f64,
) -> Result<Detection> {
    let started = Instant::now();
    let graphs = match build_windows(messages, window, stride) {
        Err(GraphError::EmptyTrace) => return Err(EvalError::EmptyTrace),
        r => r?,
    };
    if graphs.is_empty() {
        return Err(EvalError::EmptyTrace);
    }
    let refs: Vec<&WindowGraph> = graphs.iter().collect();
    let probs = score_graphs(model, &refs, 128)?;
    let threshold = threshold.clamp(0.0, 1.0);
    let records = graphs
        .iter()
        .zip(probs)
        .enumerate()
        .map(|(i, (g, prob))| DetectionRecord {
            window_index: i,
            start_ts: messages[g.window_start_index].timestamp,
            end_ts: messages[g.window_start_index + window - 1].timestamp,
            prob,
            verdict: verdict(prob, threshold),
        })
        .collect::<Vec<_>>();
    let secs = started.elapsed().as_secs_f64();
    let windows_per_second = if secs > 0.0 { records.len() as f64 / secs } else { f64::INFINITY };
    Ok(Detection { records, threshold, windows_per_second })
}

/// `window_index,start_ts,end_ts,prob,verdict` with a header row.
pub fn write_detections_csv<W: io::Write>(mut out: W, records: &[DetectionRecord]) -> io::Result<()> {
    writeln!(out, "window_index,start_ts,end_ts,prob,verdict")?;
    for r in records {
        writeln!(out, "{},{:.6},{:.6},{:.9},{}", r.window_index, r.start_ts, r.end_ts, r.prob, r.verdict as u8)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_examples() {
        assert_eq!(confusion(&[1, 0], &[1, 0]).unwrap(), ConfusionCounts { tp: 1, tn: 1, fp: 0, fn_: 0 });
        assert_eq!(confusion(&[1, 1], &[0, 0]).unwrap(), ConfusionCounts { tp: 0, tn: 0, fp: 2, fn_: 0 });
        assert!(matches!(confusion(&[1], &[1, 0]), Err(EvalError::LengthMismatch { .. })));
        assert!(matches!(confusion(&[], &[]), Err(EvalError::Empty)));
        assert!(matches!(confusion(&[2], &[0]), Err(EvalError::InvalidLabel(2))));
    }

    #[test]
    fn metric_examples() {
        let m = metrics(&ConfusionCounts { tp: 1, tn: 1, fp: 0, fn_: 0 }).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));

        let m = metrics(&ConfusionCounts { tp: 0, tn: 10, fp: 0, fn_: 0 }).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert!(m.precision_undefined && m.recall_undefined);

        assert!(matches!(metrics(&ConfusionCounts::default()), Err(EvalError::EmptyCounts)));
        assert!((f1_score(1.0, 0.9993) - 0.99965).abs() < 1e-5);
    }

    #[test]
    fn threshold_is_clamped() {
        assert!(verdict(1.0, 1.0 + 1e-9));
        assert!(!verdict(0.999_999, 1.0));
        assert!(verdict(0.0, -0.5));
        assert!(verdict(0.5, 0.5));
    }
}
