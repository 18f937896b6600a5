//! One JSON document configuring an end-to-end experiment.
//!
//! Every section has defaults, so `{}` is a valid config; unknown keys are
//! rejected at every level so typos fail loudly instead of silently running
//! the defaults. [`ExperimentConfig::validate`] reports the first offending
//! field by its dotted path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusSpec;
use crate::diffusion::{NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::mmd::KernelConfig;
use crate::models::{ScoreNetConfig, SedConfig, SerConfig};
use crate::rng::subseed;
use crate::train::{SedTrainConfig, SerTrainConfig, TtsModelConfig, TtsTrainConfig};

/// Seed streams for [`ExperimentConfig::reseed`]. Stage seeds are derived
/// from the master seed so one `--seed` flag reseeds the whole run.
const STREAM_CORPUS_SEED: u64 = 0xc0_9f;
const STREAM_SER_SEED: u64 = 0x5e_01;
const STREAM_SED_SEED: u64 = 0xd3_01;
const STREAM_TTS_SEED: u64 = 0x77_01;

/// Seeds and sample counts for the multi-seed report runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Seeds for the per-mode detector comparison.
    pub ladder_seeds: Vec<u64>,
    /// Seeds for the synthesizer ablation grid. Checkpoints for these seeds
    /// must exist before the ablation runs.
    pub ablation_seeds: Vec<u64>,
    /// Syntheses per trained synthesizer when estimating reclassification
    /// accuracy.
    pub n_syntheses: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            ladder_seeds: vec![0, 1, 2, 3, 4],
            ablation_seeds: vec![0, 1, 2],
            n_syntheses: 50,
        }
    }
}

impl EvaluationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ladder_seeds.is_empty() {
            return Err(Error::config("evaluation.ladder_seeds", "must be non-empty"));
        }
        if self.ablation_seeds.is_empty() {
            return Err(Error::config(
                "evaluation.ablation_seeds",
                "must be non-empty",
            ));
        }
        if self.n_syntheses == 0 {
            return Err(Error::config("evaluation.n_syntheses", "must be positive"));
        }
        Ok(())
    }
}

/// Where run artifacts land. Relative paths are resolved against the
/// process working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Reports, metrics logs, and generated corpora.
    pub workdir: PathBuf,
    /// Model checkpoints, one subdirectory per seed.
    pub checkpoints: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            workdir: PathBuf::from("out"),
            checkpoints: PathBuf::from("out/checkpoints"),
        }
    }
}

impl PathsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workdir.as_os_str().is_empty() {
            return Err(Error::config("paths.workdir", "must be non-empty"));
        }
        if self.checkpoints.as_os_str().is_empty() {
            return Err(Error::config("paths.checkpoints", "must be non-empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub schedule: NoiseSchedule,
    pub sampler: SamplerConfig,
    pub kernel: KernelConfig,
    pub ser_model: SerConfig,
    pub sed_model: SedConfig,
    pub tts_model: TtsModelConfig,
    pub ser_train: SerTrainConfig,
    pub sed_train: SedTrainConfig,
    pub tts_train: TtsTrainConfig,
    pub evaluation: EvaluationConfig,
    pub paths: PathsConfig,
    /// Master seed; see [`ExperimentConfig::reseed`].
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            schedule: NoiseSchedule::default(),
            sampler: SamplerConfig::default(),
            kernel: KernelConfig::default(),
            ser_model: SerConfig::default(),
            sed_model: SedConfig::default(),
            tts_model: TtsModelConfig::default(),
            ser_train: SerTrainConfig::default(),
            sed_train: SedTrainConfig::default(),
            tts_train: TtsTrainConfig::default(),
            evaluation: EvaluationConfig::default(),
            paths: PathsConfig::default(),
            seed: 7,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.schedule
            .validate()
            .map_err(|e| Error::config("schedule", e.to_string()))?;
        self.sampler
            .validate()
            .map_err(|e| Error::config("sampler", e.to_string()))?;
        with_path_prefix("kernel", self.kernel.validate())?;
        validate_ser_model(&self.ser_model)?;
        validate_sed_model(&self.sed_model)?;
        validate_score_model(&self.tts_model.score)?;
        self.tts_model.validate()?;
        self.ser_train.validate()?;
        self.sed_train.validate()?;
        self.tts_train.validate()?;
        self.evaluation.validate()?;
        self.paths.validate()?;
        self.check_cross_section()
    }

    /// Dimensions that must agree across sections for the pipeline to wire
    /// together.
    fn check_cross_section(&self) -> Result<()> {
        let m = self.corpus.n_mel_channels;
        if self.ser_model.n_mel != m {
            return Err(Error::config(
                "ser_model.n_mel",
                format!("must equal corpus.n_mel_channels ({m})"),
            ));
        }
        if self.sed_model.n_mel != m {
            return Err(Error::config(
                "sed_model.n_mel",
                format!("must equal corpus.n_mel_channels ({m})"),
            ));
        }
        if self.tts_model.score.n_mel != m {
            return Err(Error::config(
                "tts_model.score.n_mel",
                format!("must equal corpus.n_mel_channels ({m})"),
            ));
        }
        let c = self.corpus.n_classes;
        if self.ser_model.n_classes != c {
            return Err(Error::config(
                "ser_model.n_classes",
                format!("must equal corpus.n_classes ({c})"),
            ));
        }
        if self.sed_model.n_classes != c {
            return Err(Error::config(
                "sed_model.n_classes",
                format!("must equal corpus.n_classes ({c})"),
            ));
        }
        if self.sed_model.d_style != self.ser_model.d_style {
            return Err(Error::config(
                "sed_model.d_style",
                format!("must equal ser_model.d_style ({})", self.ser_model.d_style),
            ));
        }
        if self.tts_model.score.d_style != self.ser_model.d_style {
            return Err(Error::config(
                "tts_model.score.d_style",
                format!("must equal ser_model.d_style ({})", self.ser_model.d_style),
            ));
        }
        if self.tts_model.n_phoneme_vocab != self.corpus.n_phoneme_vocab {
            return Err(Error::config(
                "tts_model.n_phoneme_vocab",
                format!(
                    "must equal corpus.n_phoneme_vocab ({})",
                    self.corpus.n_phoneme_vocab
                ),
            ));
        }
        if self.tts_model.n_speakers != self.corpus.n_speakers {
            return Err(Error::config(
                "tts_model.n_speakers",
                format!("must equal corpus.n_speakers ({})", self.corpus.n_speakers),
            ));
        }
        Ok(())
    }

    /// Replace the master seed and rederive every stage seed from it. Stage
    /// seeds written explicitly in the file are kept only when no reseed
    /// happens.
    pub fn reseed(&mut self, master: u64) {
        self.seed = master;
        self.corpus.seed = subseed(master, STREAM_CORPUS_SEED);
        self.ser_train.seed = subseed(master, STREAM_SER_SEED);
        self.sed_train.seed = subseed(master, STREAM_SED_SEED);
        self.tts_train.seed = subseed(master, STREAM_TTS_SEED);
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::config("<document>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::missing_input(format!("config {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    /// Fully materialized form, defaults included; what a run echoes to disk.
    pub fn to_json_pretty(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        text
    }
}

fn with_path_prefix(prefix: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config { path, message } => Error::Config {
            path: format!("{prefix}.{path}"),
            message,
        },
        other => other,
    })
}

fn validate_ser_model(cfg: &SerConfig) -> Result<()> {
    for (path, v) in [
        ("ser_model.n_mel", cfg.n_mel),
        ("ser_model.hidden", cfg.hidden),
        ("ser_model.n_classes", cfg.n_classes),
        ("ser_model.d_style", cfg.d_style),
    ] {
        if v == 0 {
            return Err(Error::config(path, "must be positive"));
        }
    }
    Ok(())
}

fn validate_sed_model(cfg: &SedConfig) -> Result<()> {
    for (path, v) in [
        ("sed_model.n_mel", cfg.n_mel),
        ("sed_model.d_style", cfg.d_style),
        ("sed_model.n_classes", cfg.n_classes),
    ] {
        if v == 0 {
            return Err(Error::config(path, "must be positive"));
        }
    }
    if cfg.conv_channels.is_empty() || cfg.conv_channels.contains(&0) {
        return Err(Error::config(
            "sed_model.conv_channels",
            "must be non-empty with positive entries",
        ));
    }
    if cfg.kernel_width == 0 || cfg.kernel_width % 2 == 0 {
        return Err(Error::config(
            "sed_model.kernel_width",
            "must be odd and positive",
        ));
    }
    Ok(())
}

fn validate_score_model(cfg: &ScoreNetConfig) -> Result<()> {
    for (path, v) in [
        ("tts_model.score.n_mel", cfg.n_mel),
        ("tts_model.score.d_style", cfg.d_style),
        ("tts_model.score.hidden", cfg.hidden),
    ] {
        if v == 0 {
            return Err(Error::config(path, "must be positive"));
        }
    }
    if cfg.d_time == 0 || cfg.d_time % 2 != 0 {
        return Err(Error::config(
            "tts_model.score.d_time",
            "must be even and positive",
        ));
    }
    Ok(())
}
