//! Multi-seed experiment drivers and their report tables.
//!
//! Two stages share a checkpoint directory keyed by run seed. The detector
//! ladder trains the recognizer and every adaptation mode of the detector
//! per seed, saving checkpoints plus a manifest of the exact configuration
//! they were trained under. The ablation suite reloads those checkpoints,
//! trains the synthesizer once per ablation variant, and scores each with
//! the adapted detector as judge. Reloading instead of retraining keeps the
//! two stages independently rerunnable and their reports comparable.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::corpus::{generate_corpus, Corpus, CorpusSpec, SyntheticUtterance};
use crate::error::{Error, Result};
use crate::io::MetricsWriter;
use crate::mmd::KernelConfig;
use crate::models::{Checkpoint, SedConfig, SerConfig, ToySed, ToySer};
use crate::rng::subseed;
use crate::train::{
    mean_reclassification_accuracy, prepare_tts_examples, sed_mean_eder, train_sed_cross_domain,
    train_ser, train_tts, AdaptationMode, SedEpochRecord, SedTrainConfig, SerTrainConfig,
    TtsStepRecord, TtsTrainConfig,
};

/// Stage seed streams under a run seed. Every stage of one run draws from
/// its own stream so stages stay decoupled from one another's draw counts.
const STREAM_RUN_CORPUS: u64 = 0x9000_0001;
const STREAM_RUN_SER: u64 = 0x9000_0002;
const STREAM_RUN_SED: u64 = 0x9000_0003;
const STREAM_RUN_TTS: u64 = 0x9000_0004;
const STREAM_RUN_ERA: u64 = 0x9000_0005;
const STREAM_RUN_SYNTH: u64 = 0x9000_0006;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// The adaptation mode whose detector judges synthesized signals and
/// supplies the cross-domain soft labels.
pub const ADAPTED_MODE: AdaptationMode = AdaptationMode::Mlmmd;

/// Per-seed checkpoint directory.
pub fn seed_dir(checkpoints: &Path, run_seed: u64) -> PathBuf {
    checkpoints.join(format!("seed{run_seed}"))
}

pub fn ser_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("ser.json")
}

pub fn sed_checkpoint_path(dir: &Path, mode: AdaptationMode) -> PathBuf {
    dir.join(format!("sed_{mode}.json"))
}

pub fn tts_checkpoint_path(dir: &Path, variant: AblationVariant) -> PathBuf {
    dir.join(format!("tts_{}.json", variant.as_str()))
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("run.json")
}

/// Everything the detector stage's outputs depend on, written next to the
/// checkpoints. The ablation stage refuses to mix checkpoints with a config
/// they were not trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedRunManifest {
    pub format_version: u32,
    pub run_seed: u64,
    /// Corpus spec with the stage seed materialized; the ablation stage
    /// regenerates the identical corpus from this.
    pub corpus: CorpusSpec,
    pub ser_model: SerConfig,
    pub sed_model: SedConfig,
    pub ser_train: SerTrainConfig,
    pub sed_train: SedTrainConfig,
    pub kernel: KernelConfig,
}

impl SeedRunManifest {
    fn expected(cfg: &ExperimentConfig, run_seed: u64) -> Self {
        Self {
            format_version: MANIFEST_FORMAT_VERSION,
            run_seed,
            corpus: CorpusSpec {
                seed: subseed(run_seed, STREAM_RUN_CORPUS),
                ..cfg.corpus.clone()
            },
            ser_model: cfg.ser_model,
            sed_model: cfg.sed_model.clone(),
            ser_train: SerTrainConfig {
                seed: subseed(run_seed, STREAM_RUN_SER),
                ..cfg.ser_train.clone()
            },
            sed_train: SedTrainConfig {
                seed: subseed(run_seed, STREAM_RUN_SED),
                ..cfg.sed_train.clone()
            },
            kernel: cfg.kernel.clone(),
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::missing_input(format!("manifest {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// Detector ladder
// ---------------------------------------------------------------------------

/// One detector training run: a (seed, mode) cell with its epoch log.
#[derive(Debug, Clone, Serialize)]
pub struct LadderRun {
    pub seed: u64,
    pub mode: AdaptationMode,
    pub target_eder: f64,
    pub source_accuracy: f64,
    pub log: Vec<SedEpochRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeSummary {
    pub mode: AdaptationMode,
    pub eder_mean: f64,
    pub eder_std: f64,
    pub accuracy_mean: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LadderReport {
    pub runs: Vec<LadderRun>,
    pub summary: Vec<ModeSummary>,
    /// Seeds on which the expected ordering
    /// mlmmd <= {mmmd, lmmd} <= mmd <= none held for target EDER.
    pub ordered_seeds: Vec<u64>,
}

impl LadderReport {
    pub fn eder(&self, seed: u64, mode: AdaptationMode) -> Option<f64> {
        self.runs
            .iter()
            .find(|r| r.seed == seed && r.mode == mode)
            .map(|r| r.target_eder)
    }

    pub fn mode_summary(&self, mode: AdaptationMode) -> Option<&ModeSummary> {
        self.summary.iter().find(|s| s.mode == mode)
    }

    /// Long-format table: one `(run, seed, metric, value)` row per number.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,seed,metric,value\n");
        for r in &self.runs {
            let _ = writeln!(out, "sed_{},{},target_eder,{:.6}", r.mode, r.seed, r.target_eder);
            let _ = writeln!(
                out,
                "sed_{},{},source_accuracy,{:.6}",
                r.mode, r.seed, r.source_accuracy
            );
        }
        for s in &self.summary {
            let _ = writeln!(out, "sed_{},summary,eder_mean,{:.6}", s.mode, s.eder_mean);
            let _ = writeln!(out, "sed_{},summary,eder_std,{:.6}", s.mode, s.eder_std);
            let _ = writeln!(
                out,
                "sed_{},summary,accuracy_mean,{:.6}",
                s.mode, s.accuracy_mean
            );
        }
        out
    }

    /// Write `ladder.csv`, `ladder.json`, and per-run epoch logs under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("logs"))?;
        std::fs::write(dir.join("ladder.csv"), self.to_csv())?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(dir.join("ladder.json"), json)?;
        for r in &self.runs {
            let mut w = MetricsWriter::create(
                &dir.join("logs")
                    .join(format!("sed_seed{}_{}.jsonl", r.seed, r.mode)),
            )?;
            for rec in &r.log {
                w.write(rec)?;
            }
            w.finish()?;
        }
        Ok(())
    }
}

fn ordering_holds(eder: impl Fn(AdaptationMode) -> f64) -> bool {
    use AdaptationMode::*;
    eder(Mlmmd) <= eder(Mmmd)
        && eder(Mlmmd) <= eder(Lmmd)
        && eder(Mmmd) <= eder(Mmd)
        && eder(Lmmd) <= eder(Mmd)
        && eder(Mmd) <= eder(None)
}

/// Train the recognizer and all five detector variants for each ladder
/// seed, saving checkpoints under `checkpoints/seed<k>/`.
///
/// Within one seed every mode shares the same corpus, recognizer, detector
/// initialization, and batch order, so mode differences come from the
/// adaptation term alone.
pub fn run_sed_ladder(cfg: &ExperimentConfig, checkpoints: &Path) -> Result<LadderReport> {
    cfg.validate()?;
    let mut runs = Vec::new();
    for &s in &cfg.evaluation.ladder_seeds {
        let manifest = SeedRunManifest::expected(cfg, s);
        let corpus = generate_corpus(&manifest.corpus)?;
        let source: Vec<&SyntheticUtterance> = corpus.source().collect();
        let (ser, _) = train_ser(&manifest.ser_train, cfg.ser_model, &source)?;

        let dir = seed_dir(checkpoints, s);
        std::fs::create_dir_all(&dir)?;
        ser.to_checkpoint().save(&ser_checkpoint_path(&dir))?;
        manifest.save(&manifest_path(&dir))?;

        for mode in AdaptationMode::ALL {
            let sed_cfg = SedTrainConfig {
                adaptation_mode: mode,
                ..manifest.sed_train.clone()
            };
            let outcome =
                train_sed_cross_domain(&sed_cfg, cfg.sed_model.clone(), &corpus, &cfg.kernel)?;
            outcome
                .model
                .to_checkpoint()
                .save(&sed_checkpoint_path(&dir, mode))?;
            let last = outcome.log.last().expect("at least one epoch");
            runs.push(LadderRun {
                seed: s,
                mode,
                target_eder: last.target_eder,
                source_accuracy: last.source_accuracy,
                log: outcome.log,
            });
        }
    }

    let summary = AdaptationMode::ALL
        .into_iter()
        .map(|mode| {
            let eders: Vec<f64> = runs
                .iter()
                .filter(|r| r.mode == mode)
                .map(|r| r.target_eder)
                .collect();
            let accs: Vec<f64> = runs
                .iter()
                .filter(|r| r.mode == mode)
                .map(|r| r.source_accuracy)
                .collect();
            let (eder_mean, eder_std) = mean_std(&eders);
            ModeSummary {
                mode,
                eder_mean,
                eder_std,
                accuracy_mean: accs.iter().sum::<f64>() / accs.len() as f64,
            }
        })
        .collect();

    let ordered_seeds = cfg
        .evaluation
        .ladder_seeds
        .iter()
        .copied()
        .filter(|&s| {
            let report_eder = |mode| {
                runs.iter()
                    .find(|r| r.seed == s && r.mode == mode)
                    .expect("every (seed, mode) cell was trained")
                    .target_eder
            };
            ordering_holds(report_eder)
        })
        .collect();

    Ok(LadderReport {
        runs,
        summary,
        ordered_seeds,
    })
}

// ---------------------------------------------------------------------------
// Synthesizer ablations
// ---------------------------------------------------------------------------

/// One ablation per conditioning ingredient, plus the full system. Each
/// variant flips exactly one training flag off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "no_sed")]
    WithoutSed,
    #[serde(rename = "no_frame_label")]
    WithoutFrameLabel,
    #[serde(rename = "no_cross_domain")]
    WithoutCrossDomain,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Full,
        AblationVariant::WithoutSed,
        AblationVariant::WithoutFrameLabel,
        AblationVariant::WithoutCrossDomain,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::WithoutSed => "no_sed",
            AblationVariant::WithoutFrameLabel => "no_frame_label",
            AblationVariant::WithoutCrossDomain => "no_cross_domain",
        }
    }

    pub fn apply(&self, base: &TtsTrainConfig) -> TtsTrainConfig {
        let mut cfg = base.clone();
        match self {
            AblationVariant::Full => {}
            AblationVariant::WithoutSed => cfg.use_sed_conditioning = false,
            AblationVariant::WithoutFrameLabel => cfg.use_frame_label_loss = false,
            AblationVariant::WithoutCrossDomain => cfg.use_cross_domain_sed = false,
        }
        cfg
    }
}

impl std::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Parse(format!(
                    "unknown ablation variant `{s}` (expected full|no_sed|no_frame_label|no_cross_domain)"
                ))
            })
    }
}

/// Stage seeds derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSeeds {
    pub corpus: u64,
    pub ser: u64,
    pub sed: u64,
    pub tts: u64,
    pub era: u64,
    pub synthesis: u64,
}

pub fn stage_seeds(run_seed: u64) -> StageSeeds {
    StageSeeds {
        corpus: subseed(run_seed, STREAM_RUN_CORPUS),
        ser: subseed(run_seed, STREAM_RUN_SER),
        sed: subseed(run_seed, STREAM_RUN_SED),
        tts: subseed(run_seed, STREAM_RUN_TTS),
        era: subseed(run_seed, STREAM_RUN_ERA),
        synthesis: subseed(run_seed, STREAM_RUN_SYNTH),
    }
}

/// Detector-stage artifacts for one run seed, manifest-verified against the
/// current config.
pub struct SeedArtifacts {
    pub manifest: SeedRunManifest,
    pub corpus: Corpus,
    pub ser: ToySer,
    pub sed_adapted: ToySed,
    pub sed_unadapted: ToySed,
}

/// Load one seed's detector checkpoints, failing with the full list of
/// absent files or a mismatch against the config they should have been
/// trained under.
pub fn load_seed_artifacts(
    cfg: &ExperimentConfig,
    checkpoints: &Path,
    run_seed: u64,
) -> Result<SeedArtifacts> {
    let dir = seed_dir(checkpoints, run_seed);
    let missing: Vec<String> = required_checkpoints(&dir)
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::missing_input(format!(
            "checkpoints not found: {}; run the detector training stage first",
            missing.join(", ")
        )));
    }
    let manifest = SeedRunManifest::load(&manifest_path(&dir))?;
    if manifest != SeedRunManifest::expected(cfg, run_seed) {
        return Err(Error::Parse(format!(
            "checkpoints in {} were trained under a different configuration; \
             re-run the detector training stage",
            dir.display()
        )));
    }
    let corpus = generate_corpus(&manifest.corpus)?;
    let ser = ToySer::from_checkpoint(&Checkpoint::load(&ser_checkpoint_path(&dir))?)?;
    let sed_adapted =
        ToySed::from_checkpoint(&Checkpoint::load(&sed_checkpoint_path(&dir, ADAPTED_MODE))?)?;
    let sed_unadapted = ToySed::from_checkpoint(&Checkpoint::load(&sed_checkpoint_path(
        &dir,
        AdaptationMode::None,
    ))?)?;
    Ok(SeedArtifacts {
        manifest,
        corpus,
        ser,
        sed_adapted,
        sed_unadapted,
    })
}

/// One synthesizer training run with its evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRun {
    pub seed: u64,
    pub variant: AblationVariant,
    /// Judge agreement with reference frame labels over the synthesis sweep.
    pub era: f64,
    /// Final target EDER of the detector this variant trained against.
    pub detector_eder: f64,
    pub log: Vec<TtsStepRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub era_mean: f64,
    pub era_std: f64,
    pub detector_eder_mean: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: AblationVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn era_mean(&self, variant: AblationVariant) -> Option<f64> {
        self.row(variant).map(|r| r.era_mean)
    }

    /// Long-format table matching [`LadderReport::to_csv`].
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,seed,metric,value\n");
        for r in &self.runs {
            let _ = writeln!(out, "tts_{},{},era,{:.6}", r.variant, r.seed, r.era);
            let _ = writeln!(
                out,
                "tts_{},{},detector_eder,{:.6}",
                r.variant, r.seed, r.detector_eder
            );
        }
        for row in &self.rows {
            let _ = writeln!(out, "tts_{},summary,era_mean,{:.6}", row.variant, row.era_mean);
            let _ = writeln!(out, "tts_{},summary,era_std,{:.6}", row.variant, row.era_std);
            let _ = writeln!(
                out,
                "tts_{},summary,detector_eder_mean,{:.6}",
                row.variant, row.detector_eder_mean
            );
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("logs"))?;
        std::fs::write(dir.join("ablation.csv"), self.to_csv())?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(dir.join("ablation.json"), json)?;
        for r in &self.runs {
            let mut w = MetricsWriter::create(
                &dir.join("logs")
                    .join(format!("tts_seed{}_{}.jsonl", r.seed, r.variant)),
            )?;
            for rec in &r.log {
                w.write(rec)?;
            }
            w.finish()?;
        }
        Ok(())
    }
}

/// Paths the ablation suite needs for one seed.
fn required_checkpoints(dir: &Path) -> [PathBuf; 4] {
    [
        manifest_path(dir),
        ser_checkpoint_path(dir),
        sed_checkpoint_path(dir, ADAPTED_MODE),
        sed_checkpoint_path(dir, AdaptationMode::None),
    ]
}

/// Train and evaluate every ablation variant for each ablation seed, using
/// the detector-stage checkpoints under `checkpoints`.
///
/// Per seed, all variants share the reference corpus, training seed, and
/// synthesis seeds; the adapted detector is the judge throughout, so ERA
/// differences come from the synthesizer alone. Fails up front, listing
/// every absent file, when checkpoints are missing.
pub fn run_ablation_suite(cfg: &ExperimentConfig, checkpoints: &Path) -> Result<AblationReport> {
    cfg.validate()?;
    let missing: Vec<String> = cfg
        .evaluation
        .ablation_seeds
        .iter()
        .flat_map(|&s| required_checkpoints(&seed_dir(checkpoints, s)))
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::missing_input(format!(
            "checkpoints not found: {}; run the detector training stage first",
            missing.join(", ")
        )));
    }

    let mut runs = Vec::new();
    for &s in &cfg.evaluation.ablation_seeds {
        let art = load_seed_artifacts(cfg, checkpoints, s)?;
        runs.extend(ablation_runs_for_seed(cfg, s, &seed_dir(checkpoints, s), &art)?);
    }

    let rows = AblationVariant::ALL
        .into_iter()
        .map(|variant| {
            let eras: Vec<f64> = runs
                .iter()
                .filter(|r| r.variant == variant)
                .map(|r| r.era)
                .collect();
            let eders: Vec<f64> = runs
                .iter()
                .filter(|r| r.variant == variant)
                .map(|r| r.detector_eder)
                .collect();
            let (era_mean, era_std) = mean_std(&eras);
            AblationRow {
                variant,
                era_mean,
                era_std,
                detector_eder_mean: eders.iter().sum::<f64>() / eders.len() as f64,
            }
        })
        .collect();

    Ok(AblationReport { runs, rows })
}

fn ablation_runs_for_seed(
    cfg: &ExperimentConfig,
    s: u64,
    dir: &Path,
    art: &SeedArtifacts,
) -> Result<Vec<AblationRun>> {
    let target: Vec<&SyntheticUtterance> = art.corpus.target().collect();
    let eder_adapted = sed_mean_eder(&art.sed_adapted, &target)?;
    let eder_unadapted = sed_mean_eder(&art.sed_unadapted, &target)?;
    let examples_adapted = prepare_tts_examples(&art.ser, &art.sed_adapted, &target)?;
    let examples_unadapted = prepare_tts_examples(&art.ser, &art.sed_unadapted, &target)?;

    let mut runs = Vec::with_capacity(AblationVariant::ALL.len());
    for variant in AblationVariant::ALL {
        let tts_cfg = TtsTrainConfig {
            seed: subseed(s, STREAM_RUN_TTS),
            ..variant.apply(&cfg.tts_train)
        };
        let (sed, examples, detector_eder) = if tts_cfg.use_cross_domain_sed {
            (&art.sed_adapted, &examples_adapted, eder_adapted)
        } else {
            (&art.sed_unadapted, &examples_unadapted, eder_unadapted)
        };
        let outcome = train_tts(&tts_cfg, cfg.tts_model.clone(), sed, examples, &cfg.schedule)?;
        outcome
            .model
            .to_checkpoint()
            .save(&tts_checkpoint_path(dir, variant))?;
        let era = mean_reclassification_accuracy(
            &outcome.model,
            &art.ser,
            sed,
            &art.sed_adapted,
            &target,
            cfg.evaluation.n_syntheses,
            tts_cfg.use_sed_conditioning,
            &cfg.schedule,
            &cfg.sampler,
            subseed(s, STREAM_RUN_ERA),
        )?;
        runs.push(AblationRun {
            seed: s,
            variant,
            era,
            detector_eder,
            log: outcome.log,
        });
    }
    Ok(runs)
}
