//! Accuracy metrics, evaluation reports and dev-accuracy curves.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::FeatureDataset;
use crate::error::{Error, Result};
use crate::numkit::MlpClassifier;
use crate::uncertainty::argmax;

/// Unweighted (mean per-class recall) and plain accuracy with the confusion
/// matrix they were computed from. Rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub unweighted_accuracy: f64,
    pub plain_accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub n: usize,
    /// Classes with no support, left out of the unweighted mean.
    pub excluded_classes: usize,
}

impl EvalReport {
    pub fn from_predictions(
        labels: &[usize],
        predictions: &[usize],
        n_classes: usize,
    ) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::Shape(format!(
                "{} labels vs {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Validation("cannot evaluate on an empty set".into()));
        }
        let mut confusion = vec![vec![0usize; n_classes]; n_classes];
        for (&y, &p) in labels.iter().zip(predictions) {
            if y >= n_classes || p >= n_classes {
                return Err(Error::Validation(format!(
                    "class index out of range ({y}, {p}) for {n_classes} classes"
                )));
            }
            confusion[y][p] += 1;
        }
        Ok(Self::from_confusion(confusion))
    }

    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Self {
        let n: usize = confusion.iter().flatten().sum();
        let trace: usize = (0..confusion.len()).map(|i| confusion[i][i]).sum();
        let mut recalls = Vec::new();
        let mut excluded = 0;
        for (i, row) in confusion.iter().enumerate() {
            let support: usize = row.iter().sum();
            if support == 0 {
                excluded += 1;
            } else {
                recalls.push(row[i] as f64 / support as f64);
            }
        }
        let unweighted_accuracy = if recalls.is_empty() {
            0.0
        } else {
            recalls.iter().sum::<f64>() / recalls.len() as f64
        };
        Self {
            unweighted_accuracy,
            plain_accuracy: if n == 0 { 0.0 } else { trace as f64 / n as f64 },
            confusion,
            n,
            excluded_classes: excluded,
        }
    }

    /// Number of predictions per class (column sums).
    pub fn predicted_histogram(&self) -> Vec<usize> {
        let c = self.confusion.len();
        (0..c)
            .map(|j| self.confusion.iter().map(|row| row[j]).sum())
            .collect()
    }
}

/// Eval-mode argmax for every record.
pub fn predict_all(model: &MlpClassifier, data: &FeatureDataset) -> Result<Vec<usize>> {
    data.records()
        .iter()
        .map(|r| {
            model
                .forward_eval(&r.features)
                .map(|(logits, _)| argmax(&logits))
        })
        .collect()
}

pub fn evaluate(model: &MlpClassifier, data: &FeatureDataset) -> Result<EvalReport> {
    let labels = data.labels()?;
    if model.dims().classes != data.n_classes() {
        return Err(Error::Shape(format!(
            "model predicts {} classes, data has {}",
            model.dims().classes,
            data.n_classes()
        )));
    }
    let preds = predict_all(model, data)?;
    EvalReport::from_predictions(&labels, &preds, data.n_classes())
}

/// One line of a training metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub loss: f64,
    pub dev_ua: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub dev_ua: f64,
}

/// Dev-accuracy points from a metrics log. Repeated steps keep the last
/// value; a step going backwards is rejected as corruption.
pub fn curve_export(log: &[MetricRecord]) -> Result<Vec<CurvePoint>> {
    if log.is_empty() {
        return Err(Error::Validation("metric log is empty".into()));
    }
    let mut points: Vec<CurvePoint> = Vec::new();
    let mut last_step = None;
    for rec in log {
        if let Some(prev) = last_step {
            if rec.step < prev {
                return Err(Error::Validation(format!(
                    "metric log out of order: step {} after {prev}",
                    rec.step
                )));
            }
        }
        last_step = Some(rec.step);
        let Some(dev_ua) = rec.dev_ua else { continue };
        match points.last_mut() {
            Some(p) if p.step == rec.step => p.dev_ua = dev_ua,
            _ => points.push(CurvePoint {
                step: rec.step,
                dev_ua,
            }),
        }
    }
    Ok(points)
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("step,dev_ua\n");
    for p in points {
        writeln!(out, "{},{}", p.step, p.dev_ua).expect("writing to a String");
    }
    out
}

/// Evaluation report as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    #[serde(flatten)]
    pub report: EvalReport,
    pub config_hash: String,
    pub seed: u64,
}

/// Hex SHA-256 of a value's JSON serialization.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex_digest(&bytes))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        write!(s, "{b:02x}").expect("writing to a String");
        s
    })
}
