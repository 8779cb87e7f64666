//! Source pre-training, target adaptation (SHOT and CIN), evaluation and
//! the ablation runner.

mod ablation;
mod eval;
mod report;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::losses::LossWeights;
use crate::pseudo::{AugmentConfig, TripletRule};
use crate::{Error, Result};

pub use ablation::{ablation_run, AblationRow, AblationTable, SeedResult, Summary};
pub use eval::{evaluate, export_feature_projection, feature_projection, Evaluation, Projection};
pub use report::{EpochLosses, RunReport, StageReport, FORMAT_VERSION};
pub use train::{
    adapt_cin, adapt_shot, examiner_triplet_accuracy, pretrain_examiner_source, pretrain_source, run_experiment,
    run_from_pretrained, train_examiner, AdaptTrace, ExaminerStage, Pretrained,
};

/// Which adaptation protocol a run follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// No adaptation: the source model is evaluated on the target as is.
    SourceOnly,
    /// Information-maximisation adaptation of the feature extractor.
    Shot,
    /// SHOT plus a freshly initialised examiner and the consistency terms.
    Cin,
    /// As `Cin`, with the examiner first trained on labeled source triplets.
    CinPretrained,
}

impl Variant {
    pub fn uses_examiner(self) -> bool {
        matches!(self, Variant::Cin | Variant::CinPretrained)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::SourceOnly => "source_only",
            Variant::Shot => "shot",
            Variant::Cin => "cin",
            Variant::CinPretrained => "cin_pretrained",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source_only" | "source-only" => Ok(Variant::SourceOnly),
            "shot" => Ok(Variant::Shot),
            "cin" => Ok(Variant::Cin),
            "cin_pretrained" | "cin-pretrained" => Ok(Variant::CinPretrained),
            _ => Err(Error::Config(format!(
                "unknown variant `{s}` (expected source_only, shot, cin or cin_pretrained)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

/// Hyperparameters of one run. Field names double as CLI flag names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    pub variant: Variant,
    pub seed: u64,
    /// Mini-batch size `M`.
    pub batch_size: usize,
    pub source_epochs: usize,
    pub source_lr: f64,
    /// Fraction of the source set held out to measure source accuracy.
    pub holdout_fraction: f64,
    pub adapt_epochs: usize,
    pub adapt_lr: f64,
    pub momentum: f64,
    /// Learning rate of the examiner's ordering (BCE) updates.
    pub examiner_lr: f64,
    /// Passes over the curriculum-selected pool per examiner stage.
    pub examiner_passes: usize,
    /// Epochs of labeled-source examiner training for `cin_pretrained`.
    pub examiner_pretrain_epochs: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Curriculum length; `None` means one stage per adaptation epoch.
    pub total_stages: Option<usize>,
    /// Triplets per examiner mini-batch; `None` means `batch_size`.
    pub triplets_per_batch: Option<usize>,
    pub enable_cmc: bool,
    pub enable_ac: bool,
    /// Keep the consistency terms from updating the examiner.
    pub stop_grad_examiner: bool,
    /// Let the correlation term update the examiner as well as the base.
    /// Off by default: with both sides free the two matrices collapse
    /// together to all ones within a few steps.
    pub cmc_updates_examiner: bool,
    /// Start the `cin_pretrained` examiner encoder from the source-trained
    /// base encoder.
    pub examiner_init_from_base: bool,
    /// Use the label rule exactly as printed instead of the corrected one.
    pub eq4_literal: bool,
    /// Map base cosine similarities to `[0, 1]`.
    pub rescale_cosine: bool,
    pub symmetrize_examiner_corr: bool,
    pub augment: AugmentConfig,
    pub precision: Precision,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            variant: Variant::Cin,
            seed: 0,
            batch_size: 8,
            source_epochs: 12,
            source_lr: 0.01,
            holdout_fraction: 0.1,
            adapt_epochs: 10,
            adapt_lr: 0.001,
            momentum: 0.9,
            examiner_lr: 0.01,
            examiner_passes: 3,
            examiner_pretrain_epochs: 3,
            lambda1: 10.0,
            lambda2: 10.0,
            total_stages: None,
            triplets_per_batch: None,
            enable_cmc: true,
            enable_ac: true,
            stop_grad_examiner: false,
            cmc_updates_examiner: false,
            examiner_init_from_base: true,
            eq4_literal: false,
            rescale_cosine: true,
            symmetrize_examiner_corr: false,
            augment: AugmentConfig::default(),
            precision: Precision::F32,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.triplets() == 0 {
            return bad("triplets_per_batch must be at least 1".into());
        }
        if self.total_stages == Some(0) {
            return bad("total_stages must be at least 1".into());
        }
        for (name, v) in [
            ("source_lr", self.source_lr),
            ("adapt_lr", self.adapt_lr),
            ("examiner_lr", self.examiner_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(0.0..0.9).contains(&self.holdout_fraction) {
            return bad(format!(
                "holdout_fraction must be in [0, 0.9), got {}",
                self.holdout_fraction
            ));
        }
        if !(self.augment.max_rotation_deg >= 0.0 && self.augment.noise_sigma >= 0.0) {
            return bad(format!(
                "augmentation parameters must be non-negative, got {:?}",
                self.augment
            ));
        }
        self.weights().validate()?;
        let defaults = AdaptationConfig::default();
        let examiner_switches = self.enable_cmc != defaults.enable_cmc
            || self.enable_ac != defaults.enable_ac
            || self.stop_grad_examiner
            || self.cmc_updates_examiner != defaults.cmc_updates_examiner
            || self.eq4_literal
            || self.symmetrize_examiner_corr;
        if !self.variant.uses_examiner() && examiner_switches {
            return bad(format!(
                "examiner and ablation switches only apply to cin variants, not `{}`",
                self.variant.name()
            ));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }

    pub fn stages(&self) -> usize {
        self.total_stages.unwrap_or(self.adapt_epochs.max(1))
    }

    pub fn triplets(&self) -> usize {
        self.triplets_per_batch.unwrap_or(self.batch_size)
    }

    pub fn triplet_rule(&self) -> TripletRule {
        if self.eq4_literal {
            TripletRule::Literal
        } else {
            TripletRule::Corrected
        }
    }

    /// A copy with the ablation switches set, for the cin variants.
    pub fn with_terms(&self, cmc: bool, ac: bool) -> Self {
        AdaptationConfig {
            enable_cmc: cmc,
            enable_ac: ac,
            ..self.clone()
        }
    }

    /// A copy for `variant` with examiner-only switches reset when they do
    /// not apply.
    pub fn for_variant(&self, variant: Variant) -> Self {
        let mut c = self.clone();
        c.variant = variant;
        if !variant.uses_examiner() {
            let d = AdaptationConfig::default();
            c.enable_cmc = d.enable_cmc;
            c.enable_ac = d.enable_ac;
            c.stop_grad_examiner = false;
            c.cmc_updates_examiner = d.cmc_updates_examiner;
            c.eq4_literal = false;
            c.symmetrize_examiner_corr = false;
        }
        c
    }

    pub(crate) fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream);
        r
    }
}

/// Independent random streams derived from the run seed. Keeping base
/// batching apart from examiner sampling lets CIN with both consistency
/// terms disabled replay SHOT exactly.
pub(crate) mod streams {
    pub const BASE_INIT: u64 = 10;
    pub const SOURCE_SPLIT: u64 = 11;
    pub const SOURCE_BATCHES: u64 = 12;
    pub const EXAMINER_INIT: u64 = 20;
    pub const EXAMINER_SOURCE: u64 = 21;
    pub const TARGET_BATCHES: u64 = 30;
    pub const EXAMINER_TARGET: u64 = 31;
}

#[cfg(test)]
mod tests;
