//! Runs every fusion strategy on the same data, seeds, and cached teachers.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{adapt_student, AdaptConfig, AdaptOptions, ProviderTeacher};
use crate::dataio::FeatureDataset;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, EvalReport};
use crate::fusion::{ablation_cells, AblationCell, GateKind, KL_TAU_GRID};
use crate::numkit::MlpClassifier;

/// Dev accuracy of one threshold tried for a Kl cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauTrial {
    pub tau: f64,
    pub dev_ua: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    /// Chosen threshold, Kl cells only.
    pub tau: Option<f64>,
    pub tau_trials: Vec<TauTrial>,
    pub dev_ua: f64,
    pub report: EvalReport,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    /// Index into `rows` of the highest test unweighted accuracy.
    pub best: usize,
}

impl AblationOutcome {
    pub fn row(&self, cell: &AblationCell) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.cell == *cell)
    }

    /// Table layout: one line per cell, accuracies in percent.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("generation,strategy,weighting,tau,dev_ua,ua,accuracy,steps,best\n");
        for (i, r) in self.rows.iter().enumerate() {
            let (g, s, w) = r.cell.label();
            let tau = r.tau.map(|t| t.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{g},{s},{w},{tau},{:.2},{:.2},{:.2},{},{}",
                100.0 * r.dev_ua,
                100.0 * r.report.unweighted_accuracy,
                100.0 * r.report.plain_accuracy,
                r.steps,
                if i == self.best { "*" } else { "" }
            )
            .expect("writing to a String");
        }
        out
    }
}

/// Adapts once per cell (once per threshold for Kl cells, keeping the
/// threshold with the best dev accuracy) and scores each chosen student on
/// `test`. The provider caches must already hold every sample needed.
pub fn run_ablation(
    target: &FeatureDataset,
    dev: &FeatureDataset,
    test: &FeatureDataset,
    source_model: &MlpClassifier,
    provider: &ProviderTeacher<'_>,
    config: &AdaptConfig,
) -> Result<AblationOutcome> {
    if !dev.is_labeled() || !test.is_labeled() {
        return Err(Error::Validation(
            "ablation needs labeled dev and test sets".into(),
        ));
    }
    let mut rows = Vec::new();
    for cell in ablation_cells() {
        let taus: Vec<Option<f64>> = match cell.gate {
            GateKind::Kl => KL_TAU_GRID.iter().map(|&t| Some(t)).collect(),
            _ => vec![None],
        };
        let mut chosen: Option<(Option<f64>, f64, MlpClassifier, u64)> = None;
        let mut tau_trials = Vec::new();
        for tau in taus {
            let fusion = cell.config(tau.unwrap_or(KL_TAU_GRID[0]));
            let out = adapt_student(
                target,
                source_model,
                provider,
                &fusion,
                config,
                AdaptOptions::default(),
            )?;
            let dev_ua = evaluate(&out.student, dev)?.unweighted_accuracy;
            if let Some(t) = tau {
                tau_trials.push(TauTrial { tau: t, dev_ua });
            }
            // strict comparison keeps the smaller threshold on ties
            if chosen.as_ref().is_none_or(|c| dev_ua > c.1) {
                chosen = Some((tau, dev_ua, out.student, out.state.step));
            }
        }
        let (tau, dev_ua, student, steps) = chosen.expect("at least one run per cell");
        let report = evaluate(&student, test)?;
        let (g, s, w) = cell.label();
        log::info!(
            "{g}/{s}/{w}: UA {:.2}% (dev {:.2}%)",
            100.0 * report.unweighted_accuracy,
            100.0 * dev_ua
        );
        rows.push(AblationRow {
            cell,
            tau,
            tau_trials,
            dev_ua,
            report,
            steps,
        });
    }
    let best = (0..rows.len())
        .reduce(|b, i| {
            if rows[i].report.unweighted_accuracy > rows[b].report.unweighted_accuracy {
                i
            } else {
                b
            }
        })
        .expect("twelve cells");
    Ok(AblationOutcome { rows, best })
}
