//! Command surface for the experiment pipeline.
//!
//! Every run echoes its fully resolved config and the tool version into the
//! output directory, and all randomness flows from the config seed, so
//! rerunning a command with the same inputs rewrites the same bytes.
//!
//! Exit codes: 0 success, 1 invalid configuration or arguments, 2 missing
//! input files or checkpoints, 3 numeric failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use emosynth_core::config::ExperimentConfig;
use emosynth_core::corpus::{generate_corpus, save_corpus, SyntheticUtterance};
use emosynth_core::diarization::{eder, SegmentList};
use emosynth_core::io::{read_matrix, write_matrix, MetricsWriter};
use emosynth_core::models::Checkpoint;
use emosynth_core::report::{
    load_seed_artifacts, run_ablation_suite, run_sed_ladder, seed_dir, stage_seeds,
    tts_checkpoint_path, AblationVariant,
};
use emosynth_core::rng::subrng;
use emosynth_core::train::{
    prepare_tts_examples, reclassification_accuracy, smoothed_endpoints, synthesize, train_tts,
    TtsModel, TtsTrainConfig,
};
use emosynth_core::{Error, Result};

const SYNTH_MANIFEST_VERSION: u32 = 1;

#[derive(Parser)]
#[command(
    name = "emosynth",
    version,
    about = "Emotion-conditioned diffusion synthesis lab",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config JSON; built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override; rederives every stage seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the configured workdir and places
    /// checkpoints under it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthesizeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Which trained synthesizer checkpoint to load.
    #[arg(long, default_value = "full")]
    variant: AblationVariant,
    /// Number of reconstructions; defaults to evaluation.n_syntheses.
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args)]
struct EvalEraArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory written by `synthesize`; defaults to <workdir>/synth.
    #[arg(long)]
    synth: Option<PathBuf>,
}

#[derive(Args)]
struct EvalEderArgs {
    /// Reference segmentation CSV.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Hypothesis segmentation CSV.
    #[arg(long)]
    hyp: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the two-domain synthetic corpus and write it to disk.
    GenCorpus(CommonArgs),
    /// Train the recognizer and every detector adaptation mode per ladder
    /// seed, saving checkpoints and the comparison report.
    TrainSed(CommonArgs),
    /// Train one synthesizer with the configured conditioning flags, using
    /// detector checkpoints from the first ablation seed.
    TrainTts(CommonArgs),
    /// Reconstruct reference utterances with a trained synthesizer.
    Synthesize(SynthesizeArgs),
    /// Emotion detection error rate between two segmentation files.
    EvalEder(EvalEderArgs),
    /// Reclassification accuracy of previously synthesized utterances.
    EvalEra(EvalEraArgs),
    /// Train and evaluate all synthesizer ablations from saved detector
    /// checkpoints, writing the report tables.
    Ablate(CommonArgs),
    /// Run the built-in oracle checks.
    Selftest(CommonArgs),
}

/// Parse and run, mapping every outcome to a process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut argv: Vec<OsString> = vec![OsString::from("emosynth")];
    argv.extend(args.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Domain(_) | Error::Shape(_) | Error::Degenerate(_) => 1,
        Error::MissingInput(_) | Error::Io(_) | Error::Parse(_) | Error::Json(_) => 2,
        Error::Numeric(_) | Error::DegenerateNoise { .. } => 3,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus(c) => cmd_gen_corpus(&load_config(&c)?),
        Command::TrainSed(c) => cmd_train_sed(&load_config(&c)?),
        Command::TrainTts(c) => cmd_train_tts(&load_config(&c)?),
        Command::Synthesize(a) => cmd_synthesize(&load_config(&a.common)?, a.variant, a.count),
        Command::EvalEder(a) => cmd_eval_eder(&a),
        Command::EvalEra(a) => cmd_eval_era(&load_config(&a.common)?, a.synth),
        Command::Ablate(c) => cmd_ablate(&load_config(&c)?),
        Command::Selftest(c) => cmd_selftest(&load_config(&c)?),
    }
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.reseed(seed);
    }
    if let Some(out) = &common.out {
        cfg.paths.workdir = out.clone();
        cfg.paths.checkpoints = out.join("checkpoints");
    }
    Ok(cfg)
}

/// Create the workdir and echo the resolved config and tool version into it.
fn prepare_out(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.paths.workdir)?;
    std::fs::write(
        cfg.paths.workdir.join("resolved_config.json"),
        cfg.to_json_pretty(),
    )?;
    std::fs::write(
        cfg.paths.workdir.join("version.txt"),
        format!("emosynth {}\n", env!("CARGO_PKG_VERSION")),
    )?;
    Ok(())
}

fn cmd_gen_corpus(cfg: &ExperimentConfig) -> Result<()> {
    prepare_out(cfg)?;
    let corpus = generate_corpus(&cfg.corpus)?;
    let dir = cfg.paths.workdir.join("corpus");
    save_corpus(&corpus, &dir)?;
    let frames: usize = corpus.utterances.iter().map(|u| u.n_frames()).sum();
    println!(
        "wrote {} utterances ({} per domain, {} frames total) to {}",
        corpus.utterances.len(),
        cfg.corpus.n_utterances,
        frames,
        dir.display()
    );
    Ok(())
}

fn cmd_train_sed(cfg: &ExperimentConfig) -> Result<()> {
    prepare_out(cfg)?;
    let report = run_sed_ladder(cfg, &cfg.paths.checkpoints)?;
    report.write(&cfg.paths.workdir)?;
    for s in &report.summary {
        println!(
            "sed {:<5} target eder {:.6} +/- {:.6}  source accuracy {:.4}",
            s.mode.to_string(),
            s.eder_mean,
            s.eder_std,
            s.accuracy_mean
        );
    }
    println!(
        "expected ordering held on {}/{} seeds; report in {}",
        report.ordered_seeds.len(),
        cfg.evaluation.ladder_seeds.len(),
        cfg.paths.workdir.display()
    );
    Ok(())
}

/// Name for a flag combination: a known ablation variant, or `custom`.
fn variant_name(cfg: &TtsTrainConfig) -> String {
    AblationVariant::ALL
        .into_iter()
        .find(|v| {
            let f = v.apply(&TtsTrainConfig::default());
            (
                f.use_sed_conditioning,
                f.use_frame_label_loss,
                f.use_cross_domain_sed,
            ) == (
                cfg.use_sed_conditioning,
                cfg.use_frame_label_loss,
                cfg.use_cross_domain_sed,
            )
        })
        .map(|v| v.as_str().to_string())
        .unwrap_or_else(|| "custom".to_string())
}

fn cmd_train_tts(cfg: &ExperimentConfig) -> Result<()> {
    prepare_out(cfg)?;
    let s = cfg.evaluation.ablation_seeds[0];
    let art = load_seed_artifacts(cfg, &cfg.paths.checkpoints, s)?;
    let tts_cfg = TtsTrainConfig {
        seed: stage_seeds(s).tts,
        ..cfg.tts_train.clone()
    };
    let sed = if tts_cfg.use_cross_domain_sed {
        &art.sed_adapted
    } else {
        &art.sed_unadapted
    };
    let target: Vec<&SyntheticUtterance> = art.corpus.target().collect();
    let examples = prepare_tts_examples(&art.ser, sed, &target)?;
    let outcome = train_tts(&tts_cfg, cfg.tts_model.clone(), sed, &examples, &cfg.schedule)?;

    let name = variant_name(&tts_cfg);
    let path = seed_dir(&cfg.paths.checkpoints, s).join(format!("tts_{name}.json"));
    outcome.model.to_checkpoint().save(&path)?;
    let mut w = MetricsWriter::create(
        &cfg.paths
            .workdir
            .join(format!("tts_train_{name}.jsonl")),
    )?;
    for rec in &outcome.log {
        w.write(rec)?;
    }
    w.finish()?;

    let totals: Vec<f64> = outcome.log.iter().map(|r| r.total).collect();
    let (head, tail) = smoothed_endpoints(&totals, 50);
    println!(
        "trained synthesizer `{name}` on run seed {s}: smoothed loss {head:.4} -> {tail:.4} over {} steps; checkpoint {}",
        totals.len(),
        path.display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SynthManifest {
    format_version: u32,
    run_seed: u64,
    variant: String,
    entries: Vec<SynthEntry>,
}

#[derive(Serialize, Deserialize)]
struct SynthEntry {
    mel_file: String,
    segments_file: String,
    reference_index: usize,
    n_frames: usize,
}

fn cmd_synthesize(
    cfg: &ExperimentConfig,
    variant: AblationVariant,
    count: Option<usize>,
) -> Result<()> {
    prepare_out(cfg)?;
    let s = cfg.evaluation.ablation_seeds[0];
    let art = load_seed_artifacts(cfg, &cfg.paths.checkpoints, s)?;
    let ck_path = tts_checkpoint_path(&seed_dir(&cfg.paths.checkpoints, s), variant);
    if !ck_path.exists() {
        return Err(Error::missing_input(format!(
            "checkpoint not found: {}; train the synthesizer first",
            ck_path.display()
        )));
    }
    let model = TtsModel::from_checkpoint(&Checkpoint::load(&ck_path)?)?;
    let flags = variant.apply(&TtsTrainConfig::default());
    let sed = if flags.use_cross_domain_sed {
        &art.sed_adapted
    } else {
        &art.sed_unadapted
    };
    let target: Vec<&SyntheticUtterance> = art.corpus.target().collect();
    let n = count.unwrap_or(cfg.evaluation.n_syntheses);
    if n == 0 {
        return Err(Error::config("count", "must be positive"));
    }

    let synth_dir = cfg.paths.workdir.join("synth");
    std::fs::create_dir_all(&synth_dir)?;
    let synth_seed = stage_seeds(s).synthesis;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let reference = target[i % target.len()];
        let mut rng = subrng(synth_seed, i as u64);
        let out = synthesize(
            &model,
            &art.ser,
            sed,
            reference,
            flags.use_sed_conditioning,
            &cfg.schedule,
            &cfg.sampler,
            &mut rng,
        )?;
        let stem = format!("s{i:04}_u{:04}", reference.index);
        let mel_file = format!("{stem}.mel.bin");
        let segments_file = format!("{stem}.segments.csv");
        write_matrix(&synth_dir.join(&mel_file), &out.mel)?;
        reference.segments.write_csv(&synth_dir.join(&segments_file))?;
        entries.push(SynthEntry {
            mel_file,
            segments_file,
            reference_index: reference.index,
            n_frames: reference.n_frames(),
        });
    }
    let manifest = SynthManifest {
        format_version: SYNTH_MANIFEST_VERSION,
        run_seed: s,
        variant: variant.to_string(),
        entries,
    };
    std::fs::write(
        synth_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    println!(
        "wrote {n} reconstructions from the `{variant}` synthesizer to {}",
        synth_dir.display()
    );
    Ok(())
}

fn cmd_eval_eder(args: &EvalEderArgs) -> Result<()> {
    let reference = SegmentList::read_csv(&args.reference)?;
    let hypothesis = SegmentList::read_csv(&args.hyp)?;
    let rate = eder(&reference, &hypothesis)?;
    println!("{rate:.6}");
    Ok(())
}

fn cmd_eval_era(cfg: &ExperimentConfig, synth: Option<PathBuf>) -> Result<()> {
    prepare_out(cfg)?;
    let synth_dir = synth.unwrap_or_else(|| cfg.paths.workdir.join("synth"));
    let manifest_file = synth_dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_file).map_err(|e| {
        Error::missing_input(format!("synthesis manifest {}: {e}", manifest_file.display()))
    })?;
    let manifest: SynthManifest = serde_json::from_str(&text)?;
    if manifest.format_version != SYNTH_MANIFEST_VERSION {
        return Err(Error::Parse(format!(
            "synthesis manifest version {} unsupported",
            manifest.format_version
        )));
    }
    let art = load_seed_artifacts(cfg, &cfg.paths.checkpoints, manifest.run_seed)?;
    let target: Vec<&SyntheticUtterance> = art.corpus.target().collect();

    let mut w = MetricsWriter::create(&cfg.paths.workdir.join("era.jsonl"))?;
    let mut total = 0.0;
    for entry in &manifest.entries {
        let mel = read_matrix(&synth_dir.join(&entry.mel_file))?;
        let reference = target
            .iter()
            .find(|u| u.index == entry.reference_index)
            .ok_or_else(|| {
                Error::missing_input(format!(
                    "reference utterance {} not in regenerated corpus",
                    entry.reference_index
                ))
            })?;
        let accuracy = reclassification_accuracy(&art.sed_adapted, reference, &mel)?;
        total += accuracy;
        w.write(&serde_json::json!({
            "mel_file": entry.mel_file,
            "reference_index": entry.reference_index,
            "era": accuracy,
        }))?;
    }
    w.finish()?;
    let mean = total / manifest.entries.len() as f64;
    let summary = serde_json::json!({
        "variant": manifest.variant,
        "n_syntheses": manifest.entries.len(),
        "era_mean": mean,
    });
    std::fs::write(
        cfg.paths.workdir.join("era.json"),
        format!("{}\n", serde_json::to_string_pretty(&summary)?),
    )?;
    println!("{mean:.6}");
    Ok(())
}

fn cmd_ablate(cfg: &ExperimentConfig) -> Result<()> {
    prepare_out(cfg)?;
    let report = run_ablation_suite(cfg, &cfg.paths.checkpoints)?;
    report.write(&cfg.paths.workdir)?;
    for row in &report.rows {
        println!(
            "tts {:<16} era {:.6} +/- {:.6}  detector eder {:.6}",
            row.variant.to_string(),
            row.era_mean,
            row.era_std,
            row.detector_eder_mean
        );
    }
    println!("report in {}", cfg.paths.workdir.display());
    Ok(())
}

fn cmd_selftest(cfg: &ExperimentConfig) -> Result<()> {
    let checks = emosynth_core::selftest::run_all(cfg.seed);
    let mut failed = Vec::new();
    for c in &checks {
        let status = if c.passed { "ok  " } else { "FAIL" };
        println!("{status} {}: {}", c.name, c.detail);
        if !c.passed {
            failed.push(c.name.clone());
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed", checks.len());
        Ok(())
    } else {
        Err(Error::numeric(format!(
            "self test failed: {}",
            failed.join(", ")
        )))
    }
}
