//! Experiment configuration (TOML).
//!
//! Every section and field is optional; missing values take the defaults
//! below. Unknown keys are rejected. `jobs` and `output_dir` do not affect
//! results and are excluded from the config hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::array::{receptive_kernel, ArrayLayout, ReceptiveKernel, WindowConvention};
use crate::dataset::{hex_digest, ShiftPairing, SplitSpec};
use crate::metrics::GridSpec;
use crate::seed;
use crate::shift::{BinNorm, ShiftDistribution, MAX_SHIFT_MM};
use crate::synth_eye::{AnatomyRanges, EyeModelParams, HeadWalk, ImageSpec, StimulusSpec};
use crate::trainer::{Regimen, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub subjects: u32,
    pub stimulus: StimulusSpec,
    pub anatomy: AnatomyRanges,
    /// Starting point for per-subject anatomy draws.
    pub eye: EyeModelParams,
    pub image: ImageSpec,
    pub head_walk: HeadWalk,
    /// Shifts drawn per image.
    pub pairing: ShiftPairing,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            subjects: 12,
            stimulus: StimulusSpec::default(),
            anatomy: AnatomyRanges::default(),
            eye: EyeModelParams::default(),
            image: ImageSpec::default(),
            head_walk: HeadWalk::default(),
            pairing: ShiftPairing::Single,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArrayConfig {
    /// Window size, read according to `window_convention`.
    pub window_px: usize,
    pub window_convention: WindowConvention,
    pub pitch_px: usize,
    pub array_center_px: (i64, i64),
    pub max_shift_mm: f64,
    pub compensate_head: bool,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        let l = ArrayLayout::default();
        Self {
            window_px: l.window_side_px,
            window_convention: WindowConvention::Side,
            pitch_px: l.pitch_px,
            array_center_px: l.array_center_px,
            max_shift_mm: MAX_SHIFT_MM,
            compensate_head: l.compensate_head,
        }
    }
}

impl ArrayConfig {
    pub fn layout(&self) -> Result<ArrayLayout> {
        let layout = ArrayLayout {
            window_side_px: self.window_convention.side_for(self.window_px)?,
            pitch_px: self.pitch_px,
            array_center_px: self.array_center_px,
            max_shift_mm: self.max_shift_mm,
            compensate_head: self.compensate_head,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn kernel(&self) -> Result<ReceptiveKernel> {
        receptive_kernel(self.layout()?.window_side_px)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataScaleConfig {
    pub shift: ShiftDistribution,
    /// Train (the training superset) / validation / test.
    pub split: [f64; 3],
    /// Fractions of the training superset.
    pub fractions: Vec<f64>,
    /// Fraction whose FS test predictions feed the spatial accuracy map.
    pub map_fraction: f64,
    /// Relative change is reported from `fractions` max to this fraction.
    pub reduced_fraction: f64,
}

impl Default for DataScaleConfig {
    fn default() -> Self {
        Self {
            shift: ShiftDistribution::Gaussian { sigma_mm: 1.0 },
            split: [0.6, 0.1, 0.3],
            fractions: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            map_fraction: 0.4,
            reduced_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftBinConfig {
    pub shift: ShiftDistribution,
    /// Applied to in-range (B1) records only.
    pub split: [f64; 3],
    pub bin_norm: BinNorm,
}

impl Default for ShiftBinConfig {
    fn default() -> Self {
        Self {
            shift: ShiftDistribution::Gaussian { sigma_mm: 1.0 },
            split: [0.56, 0.14, 0.30],
            bin_norm: BinNorm::Euclidean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtendedRangeConfig {
    pub shift: ShiftDistribution,
    pub split: [f64; 3],
}

impl Default for ExtendedRangeConfig {
    fn default() -> Self {
        Self {
            shift: ShiftDistribution::Gaussian { sigma_mm: 2.5 },
            split: [0.24, 0.06, 0.70],
        }
    }
}

/// Uses the data-scale shift distribution and split with the full
/// training superset; early stopping is disabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpochCurveConfig {
    /// Checkpoints at which validation accuracy is reported; 0 is the
    /// starting weights.
    pub epochs: Vec<usize>,
}

impl Default for EpochCurveConfig {
    fn default() -> Self {
        Self {
            epochs: vec![0, 1, 2, 5, 10, 20, 50, 100, 200, 300],
        }
    }
}

/// Shift-trained versus unshifted-trained models, both tested on shifted
/// data. Uses the data-scale shift distribution and split, FS only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftRobustnessConfig {
    /// Gaussian sigma of the reference model's training shifts; small
    /// enough to quantise to zero pixels.
    pub baseline_sigma_mm: f64,
}

impl Default for ShiftRobustnessConfig {
    fn default() -> Self {
        Self { baseline_sigma_mm: 1e-9 }
    }
}

/// Pre-training schedule for FT; the optimiser moments come from `train`.
/// The pooled data is many times larger than one subject's, so far fewer
/// epochs are needed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: TrainConfig::default().learning_rate,
            batch_size: TrainConfig::default().batch_size,
            max_epochs: 30,
            patience: 8,
        }
    }
}

impl PretrainConfig {
    pub fn train_config(&self, train: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: Some(self.patience),
            seed,
            ..*train
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Fixes the cohort and, mixed with each replicate seed, every other
    /// random process.
    #[serde(with = "seed::serde_u64")]
    pub master_seed: u64,
    /// One replicate per entry.
    pub seeds: Vec<u64>,
    pub regimens: Vec<Regimen>,
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub cohort: CohortConfig,
    pub array: ArrayConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub accuracy_grid: GridSpec,
    pub data_scale: DataScaleConfig,
    pub shift_bins: ShiftBinConfig,
    pub extended_range: ExtendedRangeConfig,
    pub epoch_curves: EpochCurveConfig,
    pub shift_robustness: ShiftRobustnessConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 2024,
            seeds: vec![0, 1, 2, 3, 4],
            regimens: vec![Regimen::FromScratch, Regimen::FineTune],
            output_dir: PathBuf::from("results"),
            jobs: 0,
            cohort: CohortConfig::default(),
            array: ArrayConfig::default(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            accuracy_grid: GridSpec::default(),
            data_scale: DataScaleConfig::default(),
            shift_bins: ShiftBinConfig::default(),
            extended_range: ExtendedRangeConfig::default(),
            epoch_curves: EpochCurveConfig::default(),
            shift_robustness: ShiftRobustnessConfig::default(),
        }
    }
}

fn check_split(name: &str, split: [f64; 3]) -> Result<()> {
    SplitSpec::random(split, 0)
        .validate()
        .map_err(|e| Error::config(format!("{name}: {e}")))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::config("seeds must be distinct"));
        }
        if self.regimens.is_empty() {
            return Err(Error::config("regimens must not be empty"));
        }
        if self.cohort.subjects == 0 {
            return Err(Error::config("cohort.subjects must be ≥ 1"));
        }
        if self.regimens.contains(&Regimen::FineTune) && self.cohort.subjects < 2 {
            return Err(Error::config("fine-tuning needs at least 2 subjects"));
        }
        if let ShiftPairing::Repeat(0) = self.cohort.pairing {
            return Err(Error::config("cohort.pairing repeat count must be ≥ 1"));
        }
        self.cohort.image.validate()?;
        self.cohort.eye.validate()?;
        self.array.layout()?;
        self.train.validate()?;
        self.pretrain.train_config(&self.train, 0).validate()?;
        self.accuracy_grid.validate()?;
        for (name, dist) in [
            ("data_scale.shift", &self.data_scale.shift),
            ("shift_bins.shift", &self.shift_bins.shift),
            ("extended_range.shift", &self.extended_range.shift),
        ] {
            dist.validate().map_err(|e| Error::config(format!("{name}: {e}")))?;
        }
        check_split("data_scale.split", self.data_scale.split)?;
        check_split("shift_bins.split", self.shift_bins.split)?;
        check_split("extended_range.split", self.extended_range.split).map_err(|e| {
            Error::config(format!("{e} (train/validation/test such as [0.24, 0.06, 0.70])"))
        })?;
        let ds = &self.data_scale;
        if ds.fractions.is_empty() || ds.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::config("data_scale.fractions must be non-empty and within (0, 1]"));
        }
        for (name, f) in [("map_fraction", ds.map_fraction), ("reduced_fraction", ds.reduced_fraction)] {
            if !ds.fractions.contains(&f) {
                return Err(Error::config(format!("data_scale.{name} {f} is not one of the fractions")));
            }
        }
        if self.epoch_curves.epochs.is_empty() || self.epoch_curves.epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("epoch_curves.epochs must be strictly increasing and non-empty"));
        }
        if !(self.shift_robustness.baseline_sigma_mm > 0.0) {
            return Err(Error::config("shift_robustness.baseline_sigma_mm must be > 0"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// SHA-256 of the canonical serialisation, ignoring `jobs` and
    /// `output_dir`.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig {
            jobs: 0,
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        hex_digest(canonical.to_toml().expect("config serialises").as_bytes())
    }

    /// `# config_hash=<hex> seeds=[..]`, the first line of every output.
    pub fn header_comment(&self) -> String {
        format!("# config_hash={} seeds={:?}", self.hash(), self.seeds)
    }

    pub fn data_scale_split(&self, seed: u64) -> SplitSpec {
        SplitSpec::random(self.data_scale.split, seed)
    }
}
