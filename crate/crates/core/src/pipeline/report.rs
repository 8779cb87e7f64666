use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AdaptationConfig;
use crate::{Error, Result};

/// Version of the report, dataset and checkpoint formats written by this build.
pub const FORMAT_VERSION: u32 = 1;

/// Mean losses over one adaptation epoch. Components a variant does not
/// compute are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub im: f64,
    pub en: Option<f64>,
    pub cmc: Option<f64>,
    pub ac: Option<f64>,
    pub total: f64,
}

/// One examiner (curriculum) stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub selected: usize,
    pub triplets: usize,
    /// Fraction of selected pseudo labels that match the ground truth,
    /// measured after adaptation finished.
    pub pseudo_label_purity: Option<f64>,
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub config: AdaptationConfig,
    /// Accuracy on the held-out source split after pre-training.
    pub source_accuracy: Option<f64>,
    /// Target accuracy of the source model before adaptation.
    pub initial_accuracy: f64,
    /// Target accuracy after each adaptation epoch.
    pub accuracy_trajectory: Vec<f64>,
    pub final_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub confusion: Vec<Vec<usize>>,
    pub epochs: Vec<EpochLosses>,
    pub stages: Vec<StageReport>,
    /// Reads of hidden target labels while adaptation was running.
    pub label_reads_during_adaptation: usize,
    pub head_unchanged: bool,
    pub wall_time_secs: f64,
}

impl RunReport {
    /// Equality of everything except wall time.
    pub fn same_numerics(&self, other: &RunReport) -> bool {
        let strip = |r: &RunReport| RunReport {
            wall_time_secs: 0.0,
            ..r.clone()
        };
        strip(self) == strip(other)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<RunReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
