use std::path::Path;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use super::train::{run_from_pretrained, Pretrained};
use super::{AdaptationConfig, Variant};
use crate::data_synth::{generate_domain_pair, GeneratorConfig};
use crate::par::{self, Exec};
use crate::tensor::Real;
use crate::{Error, Result};

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Summary {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Summary { mean, std: var.sqrt() }
    }
}

/// Target accuracies of every protocol on one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub source_accuracy: f64,
    pub source_only: f64,
    pub baseline: f64,
    pub full: f64,
    pub without_ac: f64,
    pub without_cmc: f64,
    /// Target-label reads across all adaptation runs of this seed.
    pub label_reads: usize,
    pub heads_unchanged: bool,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub accuracies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    /// `full`, `w/o AC`, `w/o CMC`, `baseline`, in that order.
    pub rows: Vec<AblationRow>,
    pub source_only: Summary,
    pub per_seed: Vec<SeedResult>,
    pub data: GeneratorConfig,
    pub config: AdaptationConfig,
    pub wall_time_secs: f64,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,mean,std");
        for seed in &self.seeds {
            s.push_str(&format!(",seed_{seed}"));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{:.6},{:.6}", r.name, r.mean, r.std));
            for a in &r.accuracies {
                s.push_str(&format!(",{a:.6}"));
            }
            s.push('\n');
        }
        s
    }

    /// Writes `ablation.csv` and `ablation.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let csv = dir.join("ablation.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("ablation.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))
    }
}

fn run_seed<T: Real>(data: &GeneratorConfig, cfg: &AdaptationConfig, seed: u64) -> Result<SeedResult> {
    let start = Instant::now();
    let data = GeneratorConfig { seed, ..data.clone() };
    let (source, target) = generate_domain_pair(&data)?;
    let cin = if cfg.variant.uses_examiner() {
        cfg.variant
    } else {
        Variant::Cin
    };
    let cfg = AdaptationConfig {
        seed,
        ..cfg.for_variant(cin)
    };
    let pre = Pretrained::<T>::train(&source, &cfg)?;
    let run = |c: AdaptationConfig| run_from_pretrained(&pre, &target, &c).map(|o| o.report);
    let source_only = run(cfg.for_variant(Variant::SourceOnly))?;
    let baseline = run(cfg.for_variant(Variant::Shot))?;
    let full = run(cfg.with_terms(true, true))?;
    let without_ac = run(cfg.with_terms(true, false))?;
    let without_cmc = run(cfg.with_terms(false, true))?;
    let reports = [&baseline, &full, &without_ac, &without_cmc];
    let result = SeedResult {
        seed,
        source_accuracy: pre.source_accuracy.unwrap_or(f64::NAN),
        source_only: source_only.final_accuracy,
        baseline: baseline.final_accuracy,
        full: full.final_accuracy,
        without_ac: without_ac.final_accuracy,
        without_cmc: without_cmc.final_accuracy,
        label_reads: reports.iter().map(|r| r.label_reads_during_adaptation).sum(),
        heads_unchanged: reports.iter().all(|r| r.head_unchanged),
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    info!(
        "seed {seed}: source-only {:.4} shot {:.4} full {:.4} w/o AC {:.4} w/o CMC {:.4}",
        result.source_only, result.baseline, result.full, result.without_ac, result.without_cmc
    );
    Ok(result)
}

/// Runs the four ablation rows (full CIN, without attention consistency,
/// without correlation-matrix consistency, SHOT baseline) on every seed,
/// sharing the dataset and source model per seed. Seeds run concurrently.
pub fn ablation_run<T: Real>(data: &GeneratorConfig, cfg: &AdaptationConfig, seeds: &[u64]) -> Result<AblationTable> {
    if seeds.len() < 3 {
        return Err(Error::Config(format!(
            "ablation needs at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    cfg.validate()?;
    let start = Instant::now();
    let per_seed = par::map_range(Exec::auto(), seeds.len(), |i| run_seed::<T>(data, cfg, seeds[i]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let column = |f: fn(&SeedResult) -> f64| -> Vec<f64> { per_seed.iter().map(f).collect() };
    let row = |name: &str, acc: Vec<f64>| {
        let s = Summary::of(&acc);
        AblationRow {
            name: name.to_string(),
            mean: s.mean,
            std: s.std,
            accuracies: acc,
        }
    };
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows: vec![
            row("full", column(|r| r.full)),
            row("w/o AC", column(|r| r.without_ac)),
            row("w/o CMC", column(|r| r.without_cmc)),
            row("baseline", column(|r| r.baseline)),
        ],
        source_only: Summary::of(&column(|r| r.source_only)),
        per_seed,
        data: data.clone(),
        config: cfg.clone(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}
