//! Training loops: recognizer pretraining, cross-domain detector training
//! with the kernel adaptation ladder, and the conditioned diffusion
//! synthesizer with its frame-label loss.
//!
//! Every loop derives all randomness from the config seed through fixed
//! streams, so reruns are bit-reproducible and variants that only change a
//! loss term share identical batch and noise draws.

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::seq::SliceRandom as _;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::corpus::{Corpus, SyntheticUtterance};
use crate::diarization::{eder, era, frames_to_segments, EmotionId, FrameLabelSequence};
use crate::diffusion::{
    draw_training_time, reverse_sample, standard_normal, NoiseSchedule, SamplerConfig,
};
use crate::error::{Error, Result};
use crate::mmd::{lmmd2_node, mmd2_node, normalized_class_columns, KernelConfig, SoftLabels};
use crate::models::{
    cross_entropy_node, grads_for, softmax_rows, uniform_init, Checkpoint, ParamSet,
    ScoreNetConfig, SedConfig, SerConfig, Sgd, ToyScoreNet, ToySed, ToySer,
};
use crate::rng::{subrng, Rng};
use crate::style::{
    cross_attention_align, cross_attention_node, sinusoidal_positions, AttentionNodes,
    AttentionParams, ContentSequence, StyleBundle,
};

const STREAM_SER_INIT: u64 = 0x5e71;
const STREAM_SER_STEP: u64 = 0x5e72;
const STREAM_SED_INIT: u64 = 0xd371;
const STREAM_SED_STEP: u64 = 0xd372;
const STREAM_TTS_INIT: u64 = 0x7751;
const STREAM_TTS_STEP: u64 = 0x7752;

/// Which distribution distance couples the two domains during detector
/// training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptationMode {
    /// Classification only; the adaptation term is zero.
    None,
    /// Global kernel distance on the bottleneck layer.
    Mmd,
    /// Global kernel distance averaged over all layers.
    Mmmd,
    /// Class-conditional kernel distance on the bottleneck layer.
    Lmmd,
    /// Class-conditional kernel distance averaged over all layers.
    Mlmmd,
}

impl AdaptationMode {
    pub const ALL: [AdaptationMode; 5] = [
        AdaptationMode::None,
        AdaptationMode::Mmd,
        AdaptationMode::Mmmd,
        AdaptationMode::Lmmd,
        AdaptationMode::Mlmmd,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AdaptationMode::None => "none",
            AdaptationMode::Mmd => "mmd",
            AdaptationMode::Mmmd => "mmmd",
            AdaptationMode::Lmmd => "lmmd",
            AdaptationMode::Mlmmd => "mlmmd",
        }
    }

    fn local(&self) -> bool {
        matches!(self, AdaptationMode::Lmmd | AdaptationMode::Mlmmd)
    }

    fn multi_layer(&self) -> bool {
        matches!(self, AdaptationMode::Mmmd | AdaptationMode::Mlmmd)
    }
}

impl std::fmt::Display for AdaptationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AdaptationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AdaptationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Parse(format!(
                    "unknown adaptation mode `{s}` (expected none|mmd|mmmd|lmmd|mlmmd)"
                ))
            })
    }
}

// ---------------------------------------------------------------------------
// Recognizer pretraining
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

impl SerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("ser_train.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("ser_train.batch_size", "must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(
                "ser_train.learning_rate",
                format!("must be positive, got {}", self.learning_rate),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SerEpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub dominant_accuracy: f64,
}

/// Duration-weighted class distribution of an utterance, the soft target the
/// recognizer trains against.
pub fn utterance_class_distribution(u: &SyntheticUtterance, n_classes: usize) -> Array1<f64> {
    let mut counts = Array1::zeros(n_classes);
    for &label in &u.frame_labels.labels {
        counts[label.0] += 1.0;
    }
    counts / u.n_frames() as f64
}

fn dominant_class(u: &SyntheticUtterance, n_classes: usize) -> usize {
    let dist = utterance_class_distribution(u, n_classes);
    dist.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap()
}

fn batched_indices(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch.min(n).max(1))
        .filter(|c| !c.is_empty())
        .map(|c| c.to_vec())
        .collect()
}

/// Pretrain the utterance recognizer on labeled source data against the
/// duration-weighted class distributions.
pub fn train_ser(
    cfg: &SerTrainConfig,
    model_cfg: SerConfig,
    source: &[&SyntheticUtterance],
) -> Result<(ToySer, Vec<SerEpochRecord>)> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::domain("ser training: empty source corpus"));
    }
    let n_classes = model_cfg.n_classes;
    let mut model = ToySer::new(model_cfg, &mut subrng(cfg.seed, STREAM_SER_INIT));
    let mut opt = Sgd::new(cfg.learning_rate);
    let mut rng = subrng(cfg.seed, STREAM_SER_STEP);

    let targets: Vec<Array1<f64>> = source
        .iter()
        .map(|u| utterance_class_distribution(u, n_classes))
        .collect();

    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let batches = batched_indices(source.len(), cfg.batch_size, &mut rng);
        let n_batches = batches.len();
        for batch in batches {
            let mut tape = Tape::new();
            let nodes = model.insert_params(&mut tape);
            let mut logit_rows = Vec::with_capacity(batch.len());
            let mut target_rows = Array2::zeros((batch.len(), n_classes));
            for (row, &i) in batch.iter().enumerate() {
                let mel = tape.leaf(source[i].mel.clone());
                let out = model.forward_nodes(&mut tape, mel, &nodes);
                logit_rows.push(out.logits);
                target_rows.row_mut(row).assign(&targets[i]);
            }
            let logits = tape.concat_rows(&logit_rows);
            let target_leaf = tape.leaf(target_rows);
            let loss = cross_entropy_node(&mut tape, logits, target_leaf);
            let loss_val = tape.value(loss)[[0, 0]];
            if !loss_val.is_finite() {
                return Err(diverged("ser", epoch, loss_val, cfg)?);
            }
            epoch_loss += loss_val;
            let grads = tape.backward(loss);
            let g = grads_for(&tape, &grads, &nodes.params);
            opt.step(model.param_refs_mut(), &g);
        }
        let correct = source
            .iter()
            .map(|u| {
                let (logits, _) = model.forward(&u.mel)?;
                let pred = logits
                    .row(0)
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap();
                Ok(usize::from(pred == dominant_class(u, n_classes)))
            })
            .sum::<Result<usize>>()?;
        log.push(SerEpochRecord {
            epoch,
            loss: epoch_loss / n_batches as f64,
            dominant_accuracy: correct as f64 / source.len() as f64,
        });
    }
    Ok((model, log))
}

fn diverged<C: Serialize>(what: &str, epoch: usize, value: f64, cfg: &C) -> Result<Error> {
    Ok(Error::numeric(format!(
        "{what} training diverged at epoch {epoch}: loss {value}; config {}",
        serde_json::to_string(cfg)?
    )))
}

// ---------------------------------------------------------------------------
// Cross-domain detector training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SedTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight on the adaptation distance in the total loss.
    pub lambda_weight: f64,
    pub adaptation_mode: AdaptationMode,
    /// Frames sampled per utterance for the adaptation statistics; keeps the
    /// kernel matrices small while still seeing within-utterance variety.
    pub adaptation_frames: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SedTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 12,
            lambda_weight: 0.5,
            adaptation_mode: AdaptationMode::Mlmmd,
            adaptation_frames: 8,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

impl SedTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("sed_train.epochs", "must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config(
                "sed_train.batch_size",
                "need at least 2 utterances per batch for the pairwise distances",
            ));
        }
        if !(self.lambda_weight.is_finite() && self.lambda_weight >= 0.0) {
            return Err(Error::config(
                "sed_train.lambda_weight",
                format!("must be finite and nonnegative, got {}", self.lambda_weight),
            ));
        }
        if self.adaptation_frames == 0 {
            return Err(Error::config(
                "sed_train.adaptation_frames",
                "must be positive",
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(
                "sed_train.learning_rate",
                format!("must be positive, got {}", self.learning_rate),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SedEpochRecord {
    pub epoch: usize,
    pub classification: f64,
    pub adaptation: f64,
    pub total: f64,
    pub source_accuracy: f64,
    pub target_eder: f64,
}

#[derive(Debug)]
pub struct SedTrainOutcome {
    pub model: ToySed,
    pub log: Vec<SedEpochRecord>,
}

/// Mean frame-level accuracy of hard predictions against ground truth.
pub fn sed_frame_accuracy(sed: &ToySed, utts: &[&SyntheticUtterance]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for u in utts {
        let pred = sed.frame_argmax(&u.mel)?;
        correct += pred
            .iter()
            .zip(&u.frame_labels.labels)
            .filter(|(p, l)| **p == l.0)
            .count();
        total += pred.len();
    }
    Ok(correct as f64 / total as f64)
}

/// Mean detection error rate of the model's segmentations against ground
/// truth.
pub fn sed_mean_eder(sed: &ToySed, utts: &[&SyntheticUtterance]) -> Result<f64> {
    if utts.is_empty() {
        return Err(Error::domain("eder evaluation: empty utterance list"));
    }
    let mut total = 0.0;
    for u in utts {
        let labels = sed
            .frame_argmax(&u.mel)?
            .into_iter()
            .map(EmotionId)
            .collect();
        let hyp = FrameLabelSequence::new(labels, u.frame_labels.frame_hop)?;
        total += eder(&u.segments, &frames_to_segments(&hyp))?;
    }
    Ok(total / utts.len() as f64)
}

fn one_hot_frames(u: &SyntheticUtterance, n_classes: usize) -> Array2<f64> {
    let mut m = Array2::zeros((u.n_frames(), n_classes));
    for (i, &label) in u.frame_labels.labels.iter().enumerate() {
        m[[i, label.0]] = 1.0;
    }
    m
}

/// Pick the layer stacks the configured mode couples: the bottleneck alone,
/// or every layer.
fn adaptation_layers(mode: AdaptationMode, stacked: &[NodeId]) -> Vec<NodeId> {
    if mode.multi_layer() {
        stacked.to_vec()
    } else {
        vec![*stacked.last().expect("detector exposes layers")]
    }
}

/// Train the frame-level detector on labeled source utterances while pulling
/// the two domains together with the configured kernel distance on frame
/// activations sampled from each layer. Target labels are never read by the
/// loss; class-conditional weights use true labels on the source side and
/// the model's own detached frame posteriors on the target side.
pub fn train_sed_cross_domain(
    cfg: &SedTrainConfig,
    model_cfg: SedConfig,
    corpus: &Corpus,
    kernel: &KernelConfig,
) -> Result<SedTrainOutcome> {
    cfg.validate()?;
    if model_cfg.n_classes != corpus.spec.n_classes {
        return Err(Error::config(
            "sed.n_classes",
            format!(
                "model has {} classes but corpus has {}",
                model_cfg.n_classes, corpus.spec.n_classes
            ),
        ));
    }
    let source: Vec<&SyntheticUtterance> = corpus.source().collect();
    let target: Vec<&SyntheticUtterance> = corpus.target().collect();
    if source.is_empty() || target.is_empty() {
        return Err(Error::domain("sed training: empty domain"));
    }
    let n_classes = model_cfg.n_classes;
    let mut model = ToySed::new(model_cfg, &mut subrng(cfg.seed, STREAM_SED_INIT));
    let mut opt = Sgd::new(cfg.learning_rate);
    let mut rng = subrng(cfg.seed, STREAM_SED_STEP);

    let targets: Vec<Array2<f64>> = source.iter().map(|u| one_hot_frames(u, n_classes)).collect();

    // First k of a full shuffle: a without-replacement frame sample.
    let sample_frames = |n: usize, k: usize, rng: &mut Rng| -> Vec<usize> {
        let mut all: Vec<usize> = (0..n).collect();
        let take = k.min(n);
        for i in 0..take {
            let j = rng.gen_range(i..n);
            all.swap(i, j);
        }
        all.truncate(take);
        all
    };

    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        // Both refinements arrive late and stay on. Class-conditional
        // pressure waits until the target posteriors have sharpened under
        // plain matching, then ramps to full weight; the shallow layers
        // join even later and gently, acting as a tie-break that prefers
        // solutions whose intermediate features agree too. Until its ramp
        // begins, each richer mode retraces its plainer counterpart
        // exactly.
        let t = epoch as f64 / cfg.epochs.max(1) as f64;
        let local_ramp = ((t - 0.4) / 0.4).clamp(0.0, 1.0);
        let shallow_weight = 0.3 * ((t - 0.6) / 0.2).clamp(0.0, 1.0);
        let mut sums = (0.0, 0.0, 0.0);
        let src_batches = batched_indices(source.len(), cfg.batch_size, &mut rng);
        let tgt_batches = batched_indices(target.len(), cfg.batch_size, &mut rng);
        let n_steps = src_batches.len();
        for (src_batch, tgt_batch) in src_batches.iter().zip(tgt_batches.iter().cycle()) {
            let mut tape = Tape::new();
            let nodes = model.insert_params(&mut tape);

            let forward_batch = |tape: &mut Tape,
                                 idx: &[usize],
                                 utts: &[&SyntheticUtterance],
                                 rng: &mut Rng|
             -> (Vec<NodeId>, Vec<NodeId>, Vec<Vec<usize>>) {
                let mut logits = Vec::with_capacity(idx.len());
                let mut picked: Vec<Vec<NodeId>> = Vec::new();
                let mut frames = Vec::with_capacity(idx.len());
                for &i in idx {
                    let u = utts[i];
                    let mel = tape.leaf(u.mel.clone());
                    let out = model.forward_nodes(tape, mel, &nodes);
                    logits.push(out.frame_logits);
                    let picks = sample_frames(u.n_frames(), cfg.adaptation_frames, rng);
                    let mut sel = Array2::zeros((picks.len(), u.n_frames()));
                    for (r, &f) in picks.iter().enumerate() {
                        sel[[r, f]] = 1.0;
                    }
                    let sel = tape.leaf(sel);
                    for (l, &layer) in out.layer_frames.iter().enumerate() {
                        if picked.len() <= l {
                            picked.push(Vec::new());
                        }
                        picked[l].push(tape.matmul(sel, layer));
                    }
                    frames.push(picks);
                }
                let stacked: Vec<NodeId> =
                    picked.iter().map(|rows| tape.concat_rows(rows)).collect();
                (logits, stacked, frames)
            };
            let (src_logits, src_stacked, src_frames) =
                forward_batch(&mut tape, src_batch, &source, &mut rng);
            let (tgt_logits, tgt_stacked, tgt_frames) =
                forward_batch(&mut tape, tgt_batch, &target, &mut rng);

            // Source classification loss over all frames of the batch.
            let logits = tape.concat_rows(&src_logits);
            let mut target_rows = Vec::with_capacity(src_batch.len());
            for &i in src_batch {
                target_rows.push(targets[i].view());
            }
            let stacked_targets = concatenate(Axis(0), &target_rows)
                .map_err(|e| Error::shape(e.to_string()))?;
            let target_leaf = tape.leaf(stacked_targets);
            let ce = cross_entropy_node(&mut tape, logits, target_leaf);
            // Catch runaway weights before their values feed the soft
            // labels below, so divergence is reported as such.
            let ce_val = tape.value(ce)[[0, 0]];
            if !ce_val.is_finite() {
                return Err(diverged("sed", epoch, ce_val, cfg)?);
            }

            let adaptation = match cfg.adaptation_mode {
                AdaptationMode::None => None,
                mode => {
                    let s_layers = adaptation_layers(mode, &src_stacked);
                    let t_layers = adaptation_layers(mode, &tgt_stacked);
                    let class_columns = if mode.local() {
                        let n_s: usize = src_frames.iter().map(Vec::len).sum();
                        let mut w_s = Array2::zeros((n_s, n_classes));
                        let mut r = 0;
                        for (b, &i) in src_batch.iter().enumerate() {
                            for &f in &src_frames[b] {
                                w_s[[r, source[i].frame_labels.labels[f].0]] = 1.0;
                                r += 1;
                            }
                        }
                        let n_t: usize = tgt_frames.iter().map(Vec::len).sum();
                        let mut w_t = Array2::zeros((n_t, n_classes));
                        let mut r = 0;
                        for (b, _) in tgt_batch.iter().enumerate() {
                            let probs = softmax_rows(tape.value(tgt_logits[b]));
                            for &f in &tgt_frames[b] {
                                w_t.row_mut(r).assign(&probs.row(f));
                                r += 1;
                            }
                        }
                        if w_t.iter().any(|v| !v.is_finite()) {
                            return Err(diverged("sed", epoch, f64::NAN, cfg)?);
                        }
                        let sl_s = SoftLabels::new(w_s)?;
                        let sl_t = SoftLabels::new(w_t)?;
                        Some(normalized_class_columns(&sl_s, &sl_t)?)
                    } else {
                        None
                    };
                    let mut acc: Option<NodeId> = None;
                    let last = s_layers.len() - 1;
                    for (l, (&s, &t)) in s_layers.iter().zip(&t_layers).enumerate() {
                        let layer_w = if l == last { 1.0 } else { shallow_weight };
                        if layer_w == 0.0 {
                            continue;
                        }
                        let pooled_vals =
                            concatenate(Axis(0), &[tape.value(s).view(), tape.value(t).view()])
                                .map_err(|e| Error::shape(e.to_string()))?;
                        let sigmas = kernel.resolve(pooled_vals.view())?;
                        let term = match &class_columns {
                            Some(cols) if cols.is_empty() => tape.leaf(Array2::zeros((1, 1))),
                            Some(cols) if local_ramp >= 1.0 => {
                                lmmd2_node(&mut tape, s, t, cols, &sigmas)
                            }
                            Some(cols) => {
                                let local = lmmd2_node(&mut tape, s, t, cols, &sigmas);
                                let global = mmd2_node(&mut tape, s, t, &sigmas);
                                let local = tape.scale(local, local_ramp);
                                let global = tape.scale(global, 1.0 - local_ramp);
                                tape.add(local, global)
                            }
                            None => mmd2_node(&mut tape, s, t, &sigmas),
                        };
                        let term = if layer_w < 1.0 { tape.scale(term, layer_w) } else { term };
                        acc = Some(match acc {
                            Some(prev) => tape.add(prev, term),
                            None => term,
                        });
                    }
                    // Layer penalties add up rather than average out, so the
                    // final layer feels the same pull whether or not earlier
                    // layers are being matched too.
                    Some(acc.expect("at least one adaptation layer"))
                }
            };

            let total = match adaptation {
                Some(adapt) => {
                    let weighted = tape.scale(adapt, cfg.lambda_weight);
                    tape.add(ce, weighted)
                }
                None => ce,
            };

            let adapt_val = adaptation.map_or(0.0, |n| tape.value(n)[[0, 0]]);
            let total_val = tape.value(total)[[0, 0]];
            if !total_val.is_finite() {
                return Err(diverged("sed", epoch, total_val, cfg)?);
            }
            sums.0 += ce_val;
            sums.1 += adapt_val;
            sums.2 += total_val;

            let grads = tape.backward(total);
            let g = grads_for(&tape, &grads, &nodes.params);
            opt.step(model.param_refs_mut(), &g);
        }
        log.push(SedEpochRecord {
            epoch,
            classification: sums.0 / n_steps as f64,
            adaptation: sums.1 / n_steps as f64,
            total: sums.2 / n_steps as f64,
            source_accuracy: sed_frame_accuracy(&model, &source)?,
            target_eder: sed_mean_eder(&model, &target)?,
        });
    }
    Ok(SedTrainOutcome { model, log })
}

// ---------------------------------------------------------------------------
// Conditioned diffusion synthesizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtsTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Weight on the frame-label cross entropy.
    pub ce_weight: f64,
    /// Condition on attention-aligned frame-level style from the detector.
    pub use_sed_conditioning: bool,
    /// Include the frame-label cross entropy on the denoised estimate.
    pub use_frame_label_loss: bool,
    /// Take soft labels and styles from the domain-adapted detector rather
    /// than the unadapted one.
    pub use_cross_domain_sed: bool,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TtsTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 8,
            ce_weight: 1.0,
            use_sed_conditioning: true,
            use_frame_label_loss: true,
            use_cross_domain_sed: true,
            learning_rate: 0.02,
            seed: 0,
        }
    }
}

impl TtsTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("tts_train.steps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("tts_train.batch_size", "must be positive"));
        }
        if !(self.ce_weight.is_finite() && self.ce_weight >= 0.0) {
            return Err(Error::config(
                "tts_train.ce_weight",
                format!("must be finite and nonnegative, got {}", self.ce_weight),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(
                "tts_train.learning_rate",
                format!("must be positive, got {}", self.learning_rate),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtsModelConfig {
    pub score: ScoreNetConfig,
    pub n_heads: usize,
    pub n_phoneme_vocab: usize,
    pub n_speakers: usize,
    /// Add sinusoidal positions to the frame-rate content queries.
    pub positional_content: bool,
    /// Add sinusoidal positions to the style keys inside the aligner.
    pub positional_style_keys: bool,
}

impl Default for TtsModelConfig {
    fn default() -> Self {
        Self {
            score: ScoreNetConfig::default(),
            n_heads: 2,
            n_phoneme_vocab: 12,
            n_speakers: 4,
            positional_content: true,
            positional_style_keys: true,
        }
    }
}

impl TtsModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.score.d_style % self.n_heads != 0 {
            return Err(Error::config(
                "tts_model.n_heads",
                format!(
                    "style width {} not divisible by {} heads",
                    self.score.d_style, self.n_heads
                ),
            ));
        }
        if self.n_phoneme_vocab == 0 {
            return Err(Error::config("tts_model.n_phoneme_vocab", "must be positive"));
        }
        if self.n_speakers == 0 {
            return Err(Error::config("tts_model.n_speakers", "must be positive"));
        }
        Ok(())
    }
}

/// The trainable synthesizer: per-phoneme content embeddings, a projection
/// to the conditional mean, the style aligner, speaker embeddings, and the
/// score network.
#[derive(Debug, Clone, PartialEq)]
pub struct TtsModel {
    pub cfg: TtsModelConfig,
    /// (vocab x d_style) content embedding per phoneme.
    pub phoneme_emb: Array2<f64>,
    /// (d_style x n_mel) projection producing the conditional mean.
    pub w_mu: Array2<f64>,
    pub b_mu: Array2<f64>,
    pub attention: AttentionParams,
    /// (n_speakers x d_style) speaker embeddings.
    pub speaker_emb: Array2<f64>,
    pub score_net: ToyScoreNet,
}

impl TtsModel {
    pub fn new(cfg: TtsModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.score.d_style;
        let mut attention = AttentionParams::new(d, cfg.n_heads, rng)?;
        attention.positional_keys = cfg.positional_style_keys;
        Ok(Self {
            phoneme_emb: uniform_init((cfg.n_phoneme_vocab, d), rng),
            w_mu: uniform_init((d, cfg.score.n_mel), rng),
            b_mu: Array2::zeros((1, cfg.score.n_mel)),
            attention,
            speaker_emb: uniform_init((cfg.n_speakers, d), rng),
            score_net: ToyScoreNet::new(cfg.score, rng),
            cfg,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model("tts", serde_json::to_value(&self.cfg).unwrap(), self)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("tts")?;
        let cfg: TtsModelConfig = serde_json::from_value(ck.meta.clone())?;
        let mut model = Self::new(cfg, &mut crate::rng::rng_from_seed(0))?;
        ck.load_into(&mut model)?;
        Ok(model)
    }

    /// Frame-rate content embedding from the phoneme alignment, before any
    /// positional term.
    fn content_frames(&self, u: &SyntheticUtterance) -> Result<Array2<f64>> {
        let d = self.cfg.score.d_style;
        let mut out = Array2::zeros((u.n_frames(), d));
        for (i, p) in u.frame_to_phoneme().into_iter().enumerate() {
            let id = u.phoneme_ids[p];
            if id >= self.cfg.n_phoneme_vocab {
                return Err(Error::domain(format!(
                    "phoneme id {id} outside vocabulary of {}",
                    self.cfg.n_phoneme_vocab
                )));
            }
            out.row_mut(i).assign(&self.phoneme_emb.row(id));
        }
        Ok(out)
    }

    fn queries(&self, content: &Array2<f64>) -> Array2<f64> {
        if self.cfg.positional_content {
            content + &sinusoidal_positions(content.nrows(), content.ncols())
        } else {
            content.clone()
        }
    }
}

impl ParamSet for TtsModel {
    fn param_names(&self) -> Vec<String> {
        let mut names = vec![
            "phoneme_emb".to_string(),
            "mu.w".to_string(),
            "mu.b".to_string(),
        ];
        for part in ["wq", "wk", "wv", "wo"] {
            for h in 0..self.cfg.n_heads {
                names.push(format!("attn.{part}{h}"));
            }
        }
        names.push("speaker_emb".to_string());
        names.extend(
            self.score_net
                .param_names()
                .into_iter()
                .map(|n| format!("score.{n}")),
        );
        names
    }

    fn param_refs(&self) -> Vec<&Array2<f64>> {
        let mut refs = vec![&self.phoneme_emb, &self.w_mu, &self.b_mu];
        refs.extend(self.attention.param_refs());
        refs.push(&self.speaker_emb);
        refs.extend(self.score_net.param_refs());
        refs
    }

    fn param_refs_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut refs: Vec<&mut Array2<f64>> =
            vec![&mut self.phoneme_emb, &mut self.w_mu, &mut self.b_mu];
        refs.extend(self.attention.param_refs_mut());
        refs.push(&mut self.speaker_emb);
        refs.extend(self.score_net.param_refs_mut());
        refs
    }
}

/// One training reference with everything the frozen models contribute,
/// precomputed once per run.
#[derive(Debug, Clone)]
pub struct TtsExample {
    pub utterance: SyntheticUtterance,
    /// (n_frames x n_classes) soft labels from the detector.
    pub soft_labels: Array2<f64>,
    /// (1 x d_style) recognizer embedding of the reference.
    pub utterance_emb: Array2<f64>,
    /// (n_frames x d_style) detector frame styles of the reference.
    pub style_frames: Array2<f64>,
}

/// Run the frozen recognizer and detector over the references once.
pub fn prepare_tts_examples(
    ser: &ToySer,
    sed: &ToySed,
    utts: &[&SyntheticUtterance],
) -> Result<Vec<TtsExample>> {
    utts.iter()
        .map(|u| {
            let fwd = sed.forward(&u.mel)?;
            let (_, emb) = ser.forward(&u.mel)?;
            Ok(TtsExample {
                utterance: (*u).clone(),
                soft_labels: crate::models::softmax_rows(&fwd.frame_logits),
                utterance_emb: emb,
                style_frames: fwd.frame_style,
            })
        })
        .collect()
}

/// Closed-form single-step estimate of the clean signal from a noisy state
/// and a predicted score: `(x_t + lambda * score) / mean_coef`.
pub fn estimate_x0(
    x_t: &Array2<f64>,
    score: &Array2<f64>,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if x_t.dim() != score.dim() {
        return Err(Error::shape(format!(
            "estimate_x0: state {:?} vs score {:?}",
            x_t.dim(),
            score.dim()
        )));
    }
    let mp = schedule.marginal_params(t)?;
    Ok(ndarray::Zip::from(x_t)
        .and(score)
        .map_collect(|&x, &s| (x + mp.variance * s) / mp.mean_coef))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub diff: f64,
    pub ce: f64,
    pub total: f64,
}

/// One optimizer step of the synthesizer on a batch of references.
///
/// Per reference: diffuse to a fresh time, score the noisy state conditioned
/// on content and style, take the denoising loss, invert the marginal for a
/// clean estimate, and cross-entropy the frozen detector's logits on that
/// estimate against the reference soft labels. Only the synthesizer's own
/// parameters are updated; gradients pass through the frozen detector.
pub fn tts_training_step(
    model: &mut TtsModel,
    sed: &ToySed,
    batch: &[&TtsExample],
    schedule: &NoiseSchedule,
    cfg: &TtsTrainConfig,
    opt: &mut Sgd,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::domain("tts step: empty batch"));
    }
    let d = model.cfg.score.d_style;
    let mut tape = Tape::new();

    // Parameter leaves in ParamSet order so gradients line up with the
    // optimizer state.
    let param_nodes: Vec<NodeId> = model
        .param_refs()
        .into_iter()
        .map(|m| tape.leaf(m.clone()))
        .collect();
    let (phon_node, mu_w_node, mu_b_node) = (param_nodes[0], param_nodes[1], param_nodes[2]);
    let h = model.cfg.n_heads;
    let attn_nodes = AttentionNodes {
        wq: param_nodes[3..3 + h].to_vec(),
        wk: param_nodes[3 + h..3 + 2 * h].to_vec(),
        wv: param_nodes[3 + 2 * h..3 + 3 * h].to_vec(),
        wo: param_nodes[3 + 3 * h..3 + 4 * h].to_vec(),
    };
    let speaker_node = param_nodes[3 + 4 * h];
    let score_nodes = crate::models::ScoreNetNodes {
        params: param_nodes[4 + 4 * h..].to_vec(),
    };
    let sed_nodes = sed.insert_params(&mut tape);

    let mut diff_acc: Option<NodeId> = None;
    let mut ce_acc: Option<NodeId> = None;
    for ex in batch {
        let u = &ex.utterance;
        let n = u.n_frames();

        // Content pathway: one-hot phoneme selection keeps the embedding
        // table differentiable.
        let mut onehot = Array2::zeros((n, model.cfg.n_phoneme_vocab));
        for (i, p) in u.frame_to_phoneme().into_iter().enumerate() {
            onehot[[i, u.phoneme_ids[p]]] = 1.0;
        }
        let onehot_leaf = tape.leaf(onehot);
        let content = tape.matmul(onehot_leaf, phon_node);
        let mu = tape.linear(content, mu_w_node, mu_b_node);
        let queries = if model.cfg.positional_content {
            let pe = tape.leaf(sinusoidal_positions(n, d));
            tape.add(content, pe)
        } else {
            content
        };

        // Style pathway.
        let aligned = if cfg.use_sed_conditioning {
            let style_leaf = tape.leaf(ex.style_frames.clone());
            cross_attention_node(&mut tape, queries, style_leaf, &attn_nodes, &model.attention)
        } else {
            tape.leaf(Array2::zeros((n, d)))
        };
        let utt_leaf = tape.leaf(ex.utterance_emb.clone());
        let with_utt = tape.add_row(aligned, utt_leaf);
        let mut spk_onehot = Array2::zeros((1, model.cfg.n_speakers));
        spk_onehot[[0, u.speaker_id]] = 1.0;
        let spk_leaf = tape.leaf(spk_onehot);
        let spk = tape.matmul(spk_leaf, speaker_node);
        let z_s = tape.add_row(with_utt, spk);

        // Diffusion target; `draw_training_time` already resamples past
        // degenerate noise scales.
        let t = draw_training_time(schedule, rng);
        let mp = schedule.marginal_params(t)?;
        let z = standard_normal((n, model.cfg.score.n_mel), rng);
        let eps = z.mapv(|v| v * mp.variance.sqrt());
        let x_t = u.mel.mapv(|v| v * mp.mean_coef) + &eps;
        let x_t_leaf = tape.leaf(x_t);
        let s_hat = model
            .score_net
            .forward_nodes(&mut tape, x_t_leaf, mu, t, z_s, &score_nodes);

        let target_leaf = tape.leaf(eps.mapv(|e| e / mp.variance));
        let resid = tape.add(s_hat, target_leaf);
        let sq = tape.square(resid);
        let diff = tape.mean_all(sq);
        diff_acc = Some(match diff_acc {
            Some(prev) => tape.add(prev, diff),
            None => diff,
        });

        if cfg.use_frame_label_loss {
            let scaled = tape.scale(s_hat, mp.variance);
            let x0_raw = tape.add(x_t_leaf, scaled);
            let x0_hat = tape.scale(x0_raw, 1.0 / mp.mean_coef);
            let sed_out = sed.forward_nodes(&mut tape, x0_hat, &sed_nodes);
            let soft_leaf = tape.leaf(ex.soft_labels.clone());
            let ce = cross_entropy_node(&mut tape, sed_out.frame_logits, soft_leaf);
            ce_acc = Some(match ce_acc {
                Some(prev) => tape.add(prev, ce),
                None => ce,
            });
        }
    }

    let inv_b = 1.0 / batch.len() as f64;
    let diff_mean = tape.scale(diff_acc.expect("non-empty batch"), inv_b);
    let (total, ce_val) = match ce_acc {
        Some(ce_sum) => {
            let ce_mean = tape.scale(ce_sum, inv_b);
            let weighted = tape.scale(ce_mean, cfg.ce_weight);
            (tape.add(diff_mean, weighted), tape.value(ce_mean)[[0, 0]])
        }
        None => (diff_mean, 0.0),
    };

    let breakdown = LossBreakdown {
        diff: tape.value(diff_mean)[[0, 0]],
        ce: ce_val,
        total: tape.value(total)[[0, 0]],
    };
    if !breakdown.total.is_finite() {
        return Err(Error::numeric(format!(
            "tts step produced non-finite loss: {breakdown:?}"
        )));
    }

    let grads = tape.backward(total);
    let g = grads_for(&tape, &grads, &param_nodes);
    opt.step(model.param_refs_mut(), &g);
    Ok(breakdown)
}

#[derive(Debug, Clone, Serialize)]
pub struct TtsStepRecord {
    pub step: usize,
    pub diff: f64,
    pub ce: f64,
    pub total: f64,
}

pub struct TtsTrainOutcome {
    pub model: TtsModel,
    pub log: Vec<TtsStepRecord>,
}

/// Train the synthesizer on prepared references.
pub fn train_tts(
    cfg: &TtsTrainConfig,
    model_cfg: TtsModelConfig,
    sed: &ToySed,
    examples: &[TtsExample],
    schedule: &NoiseSchedule,
) -> Result<TtsTrainOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::domain("tts training: no references"));
    }
    let mut model = TtsModel::new(model_cfg, &mut subrng(cfg.seed, STREAM_TTS_INIT))?;
    let mut opt = Sgd::new(cfg.learning_rate);
    let mut rng = subrng(cfg.seed, STREAM_TTS_STEP);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&TtsExample> = (0..cfg.batch_size)
            .map(|_| &examples[rng.gen_range(0..examples.len())])
            .collect();
        let breakdown =
            tts_training_step(&mut model, sed, &batch, schedule, cfg, &mut opt, &mut rng)
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!(
                        "{msg}; step {step}; config {}",
                        serde_json::to_string(cfg).unwrap_or_default()
                    )),
                    other => other,
                })?;
        log.push(TtsStepRecord {
            step,
            diff: breakdown.diff,
            ce: breakdown.ce,
            total: breakdown.total,
        });
    }
    Ok(TtsTrainOutcome { model, log })
}

/// Mean of the last `window` values against the first `window`, the smoke
/// signal that training moved at all.
pub fn smoothed_endpoints(values: &[f64], window: usize) -> (f64, f64) {
    let w = window.min(values.len()).max(1);
    let head: f64 = values[..w].iter().sum::<f64>() / w as f64;
    let tail: f64 = values[values.len() - w..].iter().sum::<f64>() / w as f64;
    (head, tail)
}

/// Reconstruct a reference: build conditioning from its content, speaker,
/// and frozen-model styles, then integrate the reverse chain. The output
/// carries the reference's alignment metadata with the generated signal.
pub fn synthesize(
    model: &TtsModel,
    ser: &ToySer,
    sed: &ToySed,
    reference: &SyntheticUtterance,
    use_sed_conditioning: bool,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    rng: &mut Rng,
) -> Result<SyntheticUtterance> {
    let n = reference.n_frames();
    let d = model.cfg.score.d_style;
    if reference.speaker_id >= model.cfg.n_speakers {
        return Err(Error::domain(format!(
            "speaker {} outside table of {}",
            reference.speaker_id, model.cfg.n_speakers
        )));
    }
    let content = model.content_frames(reference)?;
    let mu = content.dot(&model.w_mu) + &model.b_mu.row(0);

    let fwd = sed.forward(&reference.mel)?;
    let (_, utt_emb) = ser.forward(&reference.mel)?;
    let aligned = if use_sed_conditioning {
        let queries = ContentSequence::new(model.queries(&content))?;
        cross_attention_align(&queries, &fwd.frame_style, &model.attention)?
    } else {
        Array2::zeros((n, d))
    };
    let bundle = StyleBundle::new(
        utt_emb.row(0).to_owned(),
        fwd.frame_style.clone(),
        model.speaker_emb.row(reference.speaker_id).to_owned(),
    )?;
    let z_s = crate::style::combine_multi_scale(&aligned, &bundle)?;

    let cond = (mu, z_s);
    let mel = reverse_sample(
        |x, t, c: &(Array2<f64>, Array2<f64>)| match model.score_net.forward(x, &c.0, t, &c.1) {
            Ok(s) => s,
            Err(_) => Array2::from_elem(x.dim(), f64::NAN),
        },
        (n, model.cfg.score.n_mel),
        &cond,
        schedule,
        sampler,
        rng,
    )?;
    Ok(SyntheticUtterance {
        mel,
        ..reference.clone()
    })
}

/// Fraction of frames where the judge's labels on the synthesized signal
/// agree with the reference ground truth.
pub fn reclassification_accuracy(
    judge: &ToySed,
    reference: &SyntheticUtterance,
    synth_mel: &Array2<f64>,
) -> Result<f64> {
    let labels = judge
        .frame_argmax(synth_mel)?
        .into_iter()
        .map(EmotionId)
        .collect();
    let hyp = FrameLabelSequence::new(labels, reference.frame_labels.frame_hop)?;
    era(&reference.frame_labels, &hyp)
}

/// Convenience wrapper used by evaluation sweeps: reconstruct each utterance
/// of `refs` (cycling when more syntheses than references are requested) and
/// average the judge's agreement. Each synthesis gets its own seed stream.
pub fn mean_reclassification_accuracy(
    model: &TtsModel,
    ser: &ToySer,
    sed: &ToySed,
    judge: &ToySed,
    refs: &[&SyntheticUtterance],
    n_syntheses: usize,
    use_sed_conditioning: bool,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<f64> {
    if refs.is_empty() || n_syntheses == 0 {
        return Err(Error::domain("era sweep: nothing to synthesize"));
    }
    let mut total = 0.0;
    for i in 0..n_syntheses {
        let reference = refs[i % refs.len()];
        let mut rng = subrng(seed, 0x3a0000 + i as u64);
        let out = synthesize(
            model,
            ser,
            sed,
            reference,
            use_sed_conditioning,
            schedule,
            sampler,
            &mut rng,
        )?;
        total += reclassification_accuracy(judge, reference, &out.mel)?;
    }
    Ok(total / n_syntheses as f64)
}
