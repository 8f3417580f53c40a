//! Run configuration: one TOML document covering dataset generation, model
//! shape, training and evaluation. Every field has a default, so an empty file
//! is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{FrequencyAxis, SynthParams, DEFAULT_PROPORTIONS};
use crate::error::{Error, Result};
use crate::network::Architecture;
use crate::optim::TrainConfig;
use crate::sh::{ShtConfig, DEFAULT_CONDITION_THRESHOLD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 means the available parallelism.
    pub threads: usize,
    pub grid: GridConfig,
    pub dataset: DatasetConfig,
    pub synth: SynthParams,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub dense_points: usize,
    pub known_points: usize,
    pub condition_threshold: f64,
    pub ridge: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub subjects: usize,
    pub bins: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    /// SH order of the ground-truth fields.
    pub gt_order: usize,
    /// Train/validation/test proportions.
    pub proportions: [u32; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_map_in: usize,
    pub n_conv: usize,
    pub n_map_out: usize,
    /// Kernels in the first block; 0 means "same as the number of bins".
    pub width: usize,
    pub bias: bool,
    pub skip: bool,
    pub relu: [bool; 2],
}

/// [`TrainConfig`] minus the seed, which derives from [`RunConfig::seed`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub baseline_order: usize,
    pub slice_phi: f64,
    pub slice_tolerance: f64,
    /// Subject whose spectra slice is exported; 0 means the first test subject.
    pub slice_subject: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            threads: 0,
            grid: GridConfig::default(),
            dataset: DatasetConfig::default(),
            synth: SynthParams::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            dense_points: 480,
            known_points: 120,
            condition_threshold: DEFAULT_CONDITION_THRESHOLD,
            ridge: 0.0,
        }
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            subjects: 94,
            bins: FrequencyAxis::DEFAULT_BINS,
            f_min_hz: FrequencyAxis::DEFAULT_MIN_HZ,
            f_max_hz: FrequencyAxis::DEFAULT_MAX_HZ,
            gt_order: 16,
            proportions: DEFAULT_PROPORTIONS,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        let a = Architecture::new(1);
        Self {
            n_map_in: a.n_map_in,
            n_conv: a.n_conv,
            n_map_out: a.n_map_out,
            width: 0,
            bias: a.bias,
            skip: a.skip,
            relu: a.relu,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            baseline_order: 8,
            slice_phi: std::f64::consts::PI,
            slice_tolerance: 0.15,
            slice_subject: 0,
        }
    }
}

/// Seed streams derived from the run seed, one per consumer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedStream {
    Subjects,
    Split,
    KnownGrid,
    Init,
    Shuffle,
}

impl RunConfig {
    pub fn from_toml(text: &str, source: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
            field: source.to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn seed_for(&self, stream: SeedStream) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(stream as u64 + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.dense_points == 0 {
            return Err(Error::config("grid.dense_points", "must be >= 1"));
        }
        if g.known_points == 0 || g.known_points > g.dense_points {
            return Err(Error::config(
                "grid.known_points",
                format!("must be in 1..={}", g.dense_points),
            ));
        }
        if g.condition_threshold.is_nan() || g.condition_threshold < 1.0 {
            return Err(Error::config("grid.condition_threshold", "must be >= 1"));
        }
        if !(g.ridge >= 0.0 && g.ridge.is_finite()) {
            return Err(Error::config("grid.ridge", "must be finite and >= 0"));
        }

        let d = &self.dataset;
        if d.subjects < 3 {
            return Err(Error::config(
                "dataset.subjects",
                format!(
                    "need at least 3 subjects for a train/validation/test split, got {}",
                    d.subjects
                ),
            ));
        }
        if d.subjects > u32::MAX as usize {
            return Err(Error::config("dataset.subjects", "too many subjects"));
        }
        if d.bins == 0 {
            return Err(Error::config("dataset.bins", "must be >= 1"));
        }
        if !(d.f_min_hz > 0.0 && d.f_max_hz > d.f_min_hz && d.f_max_hz.is_finite()) {
            return Err(Error::config(
                "dataset.f_max_hz",
                "need 0 < f_min_hz < f_max_hz",
            ));
        }
        if crate::sh::num_coeffs(d.gt_order) > g.dense_points {
            return Err(Error::config(
                "dataset.gt_order",
                format!(
                    "order {} needs more than {} dense points",
                    d.gt_order, g.dense_points
                ),
            ));
        }
        if d.proportions[0] == 0 {
            return Err(Error::config(
                "dataset.proportions",
                "training share must be positive",
            ));
        }
        self.synth.validate()?;
        self.architecture(d.bins)
            .validate(g.known_points, g.dense_points)?;
        self.train_config().validate()?;
        let e = &self.eval;
        if crate::sh::num_coeffs(e.baseline_order) > g.known_points {
            return Err(Error::config(
                "eval.baseline_order",
                format!(
                    "order {} needs more than {} known points",
                    e.baseline_order, g.known_points
                ),
            ));
        }
        if e.slice_tolerance.is_nan() || e.slice_tolerance <= 0.0 || !e.slice_phi.is_finite() {
            return Err(Error::config(
                "eval.slice_tolerance",
                "must be > 0 with a finite slice_phi",
            ));
        }
        Ok(())
    }

    pub fn architecture(&self, channels: usize) -> Architecture {
        let m = &self.model;
        Architecture {
            n_map_in: m.n_map_in,
            n_conv: m.n_conv,
            n_map_out: m.n_map_out,
            channels,
            width: if m.width == 0 { channels } else { m.width },
            bias: m.bias,
            skip: m.skip,
            relu: m.relu,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            seed: self.seed_for(SeedStream::Shuffle),
        }
    }

    pub fn sht_config(&self) -> ShtConfig {
        ShtConfig {
            condition_threshold: self.grid.condition_threshold,
            ridge: self.grid.ridge,
        }
    }

    pub fn frequency_axis(&self) -> Result<FrequencyAxis> {
        FrequencyAxis::linear(
            self.dataset.f_min_hz,
            self.dataset.f_max_hz,
            self.dataset.bins,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_toml("", "empty").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.dataset.subjects, 94);
        assert_eq!(cfg.dataset.proportions, [77, 10, 7]);
        assert_eq!(cfg.grid.dense_points, 480);
        assert_eq!(cfg.grid.known_points, 120);
        assert_eq!(cfg.architecture(93).width, 93);
    }

    #[test]
    fn snapshot_roundtrip() {
        let mut cfg = RunConfig {
            seed: 9,
            ..RunConfig::default()
        };
        cfg.model.relu = [false, true];
        cfg.synth.freq_correlation_hz = 1234.5;
        let back = RunConfig::from_toml(&cfg.to_toml(), "snap").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = RunConfig::from_toml("[grid]\ndense_pionts = 3\n", "typo.toml").unwrap_err();
        assert!(
            matches!(&err, Error::Config { field, message } if field == "typo.toml" && message.contains("dense_pionts")),
            "{err}"
        );
    }

    fn field_of(text: &str) -> String {
        match RunConfig::from_toml(text, "t") {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn validation_names_the_offending_field() {
        assert_eq!(field_of("[dataset]\nsubjects = 2\n"), "dataset.subjects");
        assert_eq!(
            field_of("[grid]\nknown_points = 500\n"),
            "grid.known_points"
        );
        assert_eq!(field_of("[grid]\nknown_points = 40\n"), "model.n_map_in");
        assert_eq!(field_of("[train]\nbatch_size = 0\n"), "train.batch_size");
        assert_eq!(
            field_of("[eval]\nbaseline_order = 11\n"),
            "eval.baseline_order"
        );
        assert_eq!(field_of("[dataset]\ngt_order = 30\n"), "dataset.gt_order");
        assert_eq!(field_of("[model]\nwidth = 5\n"), "model.width");
        assert_eq!(
            field_of("[dataset]\nf_min_hz = 20000.0\n"),
            "dataset.f_max_hz"
        );
    }

    #[test]
    fn seed_streams_are_distinct() {
        let cfg = RunConfig::default();
        let seeds = [
            SeedStream::Subjects,
            SeedStream::Split,
            SeedStream::KnownGrid,
            SeedStream::Init,
            SeedStream::Shuffle,
        ]
        .map(|s| cfg.seed_for(s));
        let unique: std::collections::BTreeSet<u64> = seeds.iter().copied().collect();
        assert_eq!(unique.len(), seeds.len());
        assert_eq!(cfg.train_config().seed, cfg.seed_for(SeedStream::Shuffle));
    }
}
