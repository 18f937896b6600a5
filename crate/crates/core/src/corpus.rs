//! Deterministic synthetic "mel-spectrogram" corpus with known emotion
//! segments, speakers, phoneme alignment, and a controllable source-to-target
//! domain shift.
//!
//! Every class owns a distinct spectral template: a per-channel mean plus a
//! class-specific low-frequency temporal modulation. Utterances are 1 to 3
//! contiguous emotion segments over that template with additive noise;
//! target-domain utterances additionally pass through a per-channel affine
//! shift with extra noise. Everything derives from the corpus seed.

use std::fmt;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diarization::{
    frames_to_segments, segments_to_frames, EmotionId, FrameLabelSequence, SegmentList,
};
use crate::error::{Error, Result};
use crate::io::{read_matrix, write_matrix};
use crate::models::ToySed;
use crate::rng::{subrng, Rng};

const STREAM_PATTERNS: u64 = 0x70a77e52;
const STREAM_SHIFT: u64 = 0x54f1f7;
const STREAM_SOURCE_BASE: u64 = 0x10_000_000;
const STREAM_TARGET_BASE: u64 = 0x20_000_000;

pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Source => write!(f, "source"),
            Domain::Target => write!(f, "target"),
        }
    }
}

/// Ranges the target-domain shift is drawn from, once per corpus seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShiftSpec {
    pub gain_min: f64,
    pub gain_max: f64,
    pub bias_min: f64,
    pub bias_max: f64,
    /// Half-width of the per-class channel offsets: emotions are expressed
    /// differently in the target domain, not just recorded differently.
    pub class_bias_scale: f64,
    /// Blend weight toward a random channel permutation, applied before the
    /// affine map. Smears energy across bands the way a mismatched frontend
    /// would; 0 disables, values near 1 scramble channels outright.
    pub channel_mix_strength: f64,
    /// Blend weight toward a 3-frame moving average, the spectral footprint
    /// of a more reverberant room. Applied before the channel mix.
    pub temporal_smear: f64,
    pub extra_noise_std: f64,
}

impl Default for DomainShiftSpec {
    fn default() -> Self {
        Self {
            gain_min: 0.6,
            gain_max: 1.4,
            bias_min: -0.3,
            bias_max: 0.3,
            class_bias_scale: 0.0,
            channel_mix_strength: 0.0,
            temporal_smear: 0.0,
            extra_noise_std: 0.1,
        }
    }
}

impl DomainShiftSpec {
    /// No-op shift, for controls.
    pub fn identity() -> Self {
        Self {
            gain_min: 1.0,
            gain_max: 1.0,
            bias_min: 0.0,
            bias_max: 0.0,
            class_bias_scale: 0.0,
            channel_mix_strength: 0.0,
            temporal_smear: 0.0,
            extra_noise_std: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.gain_min <= self.gain_max && self.gain_min > 0.0) {
            return Err(Error::config(
                "corpus.domain_shift.gain_min",
                format!("bad gain range [{}, {}]", self.gain_min, self.gain_max),
            ));
        }
        if self.bias_min > self.bias_max {
            return Err(Error::config(
                "corpus.domain_shift.bias_min",
                format!("bad bias range [{}, {}]", self.bias_min, self.bias_max),
            ));
        }
        if !(self.class_bias_scale >= 0.0 && self.class_bias_scale.is_finite()) {
            return Err(Error::config(
                "corpus.domain_shift.class_bias_scale",
                format!("must be finite and nonnegative, got {}", self.class_bias_scale),
            ));
        }
        if !(self.channel_mix_strength >= 0.0 && self.channel_mix_strength <= 1.0) {
            return Err(Error::config(
                "corpus.domain_shift.channel_mix_strength",
                format!("must lie in [0, 1], got {}", self.channel_mix_strength),
            ));
        }
        if !(self.temporal_smear >= 0.0 && self.temporal_smear <= 1.0) {
            return Err(Error::config(
                "corpus.domain_shift.temporal_smear",
                format!("must lie in [0, 1], got {}", self.temporal_smear),
            ));
        }
        if !(self.extra_noise_std >= 0.0 && self.extra_noise_std.is_finite()) {
            return Err(Error::config(
                "corpus.domain_shift.extra_noise_std",
                format!("must be finite and nonnegative, got {}", self.extra_noise_std),
            ));
        }
        Ok(())
    }
}

/// Generator parameters. `n_utterances` counts each domain separately, so a
/// corpus holds twice that many utterances in total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_utterances: usize,
    pub n_mel_channels: usize,
    pub frame_hop: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    pub n_classes: usize,
    pub n_speakers: usize,
    pub n_phoneme_vocab: usize,
    pub noise_std: f64,
    /// Distance scale between class centers; pairwise separation is
    /// `sqrt(2)` times this value.
    pub class_separation: f64,
    pub domain_shift: DomainShiftSpec,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_utterances: 48,
            n_mel_channels: 16,
            frame_hop: 0.01,
            min_frames: 40,
            max_frames: 80,
            n_classes: 4,
            n_speakers: 4,
            n_phoneme_vocab: 12,
            noise_std: 0.2,
            class_separation: 2.0,
            domain_shift: DomainShiftSpec::default(),
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_utterances == 0 {
            return Err(Error::config("corpus.n_utterances", "must be positive"));
        }
        if self.n_mel_channels == 0 {
            return Err(Error::config("corpus.n_mel_channels", "must be positive"));
        }
        if !(self.frame_hop.is_finite() && self.frame_hop > 0.0) {
            return Err(Error::config(
                "corpus.frame_hop",
                format!("must be positive, got {}", self.frame_hop),
            ));
        }
        if self.min_frames < 8 {
            return Err(Error::config(
                "corpus.min_frames",
                format!("must be at least 8, got {}", self.min_frames),
            ));
        }
        if self.max_frames < self.min_frames {
            return Err(Error::config(
                "corpus.max_frames",
                format!(
                    "must be >= min_frames ({}), got {}",
                    self.min_frames, self.max_frames
                ),
            ));
        }
        if self.n_classes < 2 {
            return Err(Error::config(
                "corpus.n_classes",
                format!("need at least 2 classes, got {}", self.n_classes),
            ));
        }
        if self.n_classes > self.n_mel_channels {
            return Err(Error::config(
                "corpus.n_classes",
                format!(
                    "class centers are mutually orthogonal, so at most n_mel_channels ({}) classes fit; got {}",
                    self.n_mel_channels, self.n_classes
                ),
            ));
        }
        if self.n_speakers == 0 {
            return Err(Error::config("corpus.n_speakers", "must be positive"));
        }
        if self.n_phoneme_vocab == 0 {
            return Err(Error::config("corpus.n_phoneme_vocab", "must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config(
                "corpus.noise_std",
                format!("must be finite and nonnegative, got {}", self.noise_std),
            ));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return Err(Error::config(
                "corpus.class_separation",
                format!("must be finite and positive, got {}", self.class_separation),
            ));
        }
        self.domain_shift.validate()
    }
}

/// Spectral identity of each class plus small per-speaker offsets, drawn
/// once per corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPatterns {
    /// (n_classes x n_mel) per-channel means.
    pub channel_means: Array2<f64>,
    /// (n_classes x n_mel) modulation depth per channel.
    pub mod_amplitude: Array2<f64>,
    /// Per-class modulation frequency in Hz.
    pub mod_freq: Vec<f64>,
    /// Per-class modulation phase.
    pub mod_phase: Vec<f64>,
    /// (n_speakers x n_mel) additive speaker colors.
    pub speaker_offsets: Array2<f64>,
}

// Random orthonormal class directions scaled to a common length: every
// corpus draw places its classes at identical pairwise distances, so task
// difficulty depends on the configured shift rather than pattern luck.
fn equidistant_means(c: usize, m: usize, scale: f64, rng: &mut Rng) -> Array2<f64> {
    let mut means = Array2::zeros((c, m));
    for i in 0..c {
        let mut v = Array1::from_shape_simple_fn(m, || {
            let x: f64 = StandardNormal.sample(rng);
            x
        });
        for j in 0..i {
            let proj = v.dot(&means.row(j));
            v.zip_mut_with(&means.row(j).to_owned(), |a, &b| *a -= proj * b);
        }
        let norm = v.dot(&v).sqrt();
        // A degenerate draw after projection is vanishingly rare for c <= m;
        // fall back to a basis vector rather than dividing by zero.
        if norm < 1e-9 {
            v.fill(0.0);
            v[i % m] = 1.0;
        } else {
            v /= norm;
        }
        means.row_mut(i).assign(&v);
    }
    means * scale
}

fn draw_patterns(spec: &CorpusSpec, rng: &mut Rng) -> ClassPatterns {
    let c = spec.n_classes;
    let m = spec.n_mel_channels;
    ClassPatterns {
        channel_means: equidistant_means(c, m, spec.class_separation, rng),
        mod_amplitude: Array2::from_shape_simple_fn((c, m), || rng.gen_range(0.05..0.3)),
        mod_freq: (0..c).map(|i| 0.5 + 0.35 * i as f64).collect(),
        mod_phase: (0..c).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect(),
        speaker_offsets: Array2::from_shape_simple_fn((spec.n_speakers, m), || {
            rng.gen_range(-0.1..0.1)
        }),
    }
}

/// Noise-free frame of class `class` for speaker `speaker` at frame index
/// `frame`: the exact value the generator adds noise to.
pub fn template_frame(
    patterns: &ClassPatterns,
    class: usize,
    speaker: usize,
    frame: usize,
    frame_hop: f64,
) -> Array1<f64> {
    let t = frame as f64 * frame_hop;
    let phase = std::f64::consts::TAU * patterns.mod_freq[class] * t + patterns.mod_phase[class];
    let wave = phase.sin();
    let mut out = patterns.channel_means.row(class).to_owned();
    out.zip_mut_with(&patterns.mod_amplitude.row(class), |o, &a| *o += a * wave);
    out += &patterns.speaker_offsets.row(speaker);
    out
}

/// Realized target-domain transform: per-channel affine, per-class channel
/// offsets, and extra noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
    /// (n_classes x n_mel) offsets added on top of the affine map.
    pub class_bias: Array2<f64>,
    /// Each channel blends toward its partner under this permutation.
    #[serde(default)]
    pub mix_perm: Vec<usize>,
    #[serde(default)]
    pub mix: f64,
    #[serde(default)]
    pub smear: f64,
    pub noise_std: f64,
}

fn draw_shift(spec: &CorpusSpec, rng: &mut Rng) -> DomainShift {
    let m = spec.n_mel_channels;
    let s = &spec.domain_shift;
    let draw_range = |lo: f64, hi: f64, rng: &mut Rng| {
        if hi > lo {
            rng.gen_range(lo..hi)
        } else {
            lo
        }
    };
    // A rotation by a random step coprime with the channel count: one full
    // cycle, no fixed points, so the mix bites equally hard on every draw.
    let mix_perm = if s.channel_mix_strength > 0.0 && m > 1 {
        let gcd = |mut a: usize, mut b: usize| {
            while b != 0 {
                (a, b) = (b, a % b);
            }
            a
        };
        let mut k = rng.gen_range(1..m);
        while gcd(k, m) != 1 {
            k = rng.gen_range(1..m);
        }
        (0..m).map(|j| (j + k) % m).collect()
    } else {
        Vec::new()
    };
    DomainShift {
        gain: Array1::from_shape_simple_fn(m, || draw_range(s.gain_min, s.gain_max, rng)),
        bias: Array1::from_shape_simple_fn(m, || draw_range(s.bias_min, s.bias_max, rng)),
        class_bias: Array2::from_shape_simple_fn((spec.n_classes, m), || {
            s.class_bias_scale * rng.gen_range(-1.0..1.0)
        }),
        mix_perm,
        mix: s.channel_mix_strength,
        smear: s.temporal_smear,
        noise_std: s.extra_noise_std,
    }
}

impl DomainShift {
    fn apply(&self, mel: &mut Array2<f64>, labels: &[EmotionId], rng: &mut Rng) {
        if self.smear > 0.0 && mel.nrows() > 1 {
            let orig = mel.clone();
            let n = orig.nrows();
            for i in 0..n {
                let prev = orig.row(i.saturating_sub(1));
                let next = orig.row((i + 1).min(n - 1));
                let mut row = mel.row_mut(i);
                for j in 0..row.len() {
                    let avg = 0.25 * prev[j] + 0.5 * orig[[i, j]] + 0.25 * next[j];
                    row[j] = (1.0 - self.smear) * orig[[i, j]] + self.smear * avg;
                }
            }
        }
        let mut mixed = Array1::zeros(mel.ncols());
        for (i, mut row) in mel.rows_mut().into_iter().enumerate() {
            let class_bias = self.class_bias.row(labels[i].0);
            if self.mix > 0.0 && !self.mix_perm.is_empty() {
                for j in 0..row.len() {
                    mixed[j] = (1.0 - self.mix) * row[j] + self.mix * row[self.mix_perm[j]];
                }
                row.assign(&mixed);
            }
            for j in 0..row.len() {
                let noise: f64 = StandardNormal.sample(rng);
                row[j] = row[j] * self.gain[j] + self.bias[j] + class_bias[j]
                    + self.noise_std * noise;
            }
        }
    }
}

/// One generated utterance with full ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticUtterance {
    pub index: usize,
    pub domain: Domain,
    pub speaker_id: usize,
    pub mel: Array2<f64>,
    pub frame_labels: FrameLabelSequence,
    pub segments: SegmentList,
    pub phoneme_ids: Vec<usize>,
    pub frames_per_phoneme: Vec<usize>,
}

impl SyntheticUtterance {
    pub fn n_frames(&self) -> usize {
        self.mel.nrows()
    }

    /// Phoneme index owning each frame, from the alignment.
    pub fn frame_to_phoneme(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_frames());
        for (p, &len) in self.frames_per_phoneme.iter().enumerate() {
            out.extend(std::iter::repeat(p).take(len));
        }
        out
    }

    fn validate(&self, spec: &CorpusSpec) -> Result<()> {
        let n = self.n_frames();
        if self.mel.ncols() != spec.n_mel_channels {
            return Err(Error::shape(format!(
                "utterance {}: {} channels, expected {}",
                self.index,
                self.mel.ncols(),
                spec.n_mel_channels
            )));
        }
        if self.frame_labels.len() != n {
            return Err(Error::shape(format!(
                "utterance {}: {} labels for {} frames",
                self.index,
                self.frame_labels.len(),
                n
            )));
        }
        let total: usize = self.frames_per_phoneme.iter().sum();
        if total != n || self.frames_per_phoneme.len() != self.phoneme_ids.len() {
            return Err(Error::shape(format!(
                "utterance {}: phoneme alignment covers {total} of {n} frames",
                self.index
            )));
        }
        let derived = frames_to_segments(&self.frame_labels);
        if derived != self.segments {
            return Err(Error::domain(format!(
                "utterance {}: segments inconsistent with frame labels",
                self.index
            )));
        }
        Ok(())
    }
}

/// A generated pair of domains plus everything needed to regenerate or
/// persist it.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub patterns: ClassPatterns,
    pub shift: DomainShift,
    pub utterances: Vec<SyntheticUtterance>,
}

impl Corpus {
    pub fn source(&self) -> impl Iterator<Item = &SyntheticUtterance> {
        self.utterances.iter().filter(|u| u.domain == Domain::Source)
    }

    pub fn target(&self) -> impl Iterator<Item = &SyntheticUtterance> {
        self.utterances.iter().filter(|u| u.domain == Domain::Target)
    }
}

/// Segment labels for one utterance: 1 to 3 runs, adjacent labels distinct,
/// every run at least two frames.
fn draw_structure(n_frames: usize, n_classes: usize, rng: &mut Rng) -> Vec<EmotionId> {
    let max_segments = (n_frames / 2).min(3).max(1);
    let k = rng.gen_range(1..=max_segments);
    let mut lens = vec![2usize; k];
    for _ in 0..n_frames - 2 * k {
        lens[rng.gen_range(0..k)] += 1;
    }
    let mut labels = Vec::with_capacity(k);
    for i in 0..k {
        loop {
            let cand = rng.gen_range(0..n_classes);
            if i == 0 || labels[i - 1] != EmotionId(cand) {
                labels.push(EmotionId(cand));
                break;
            }
        }
    }
    let mut frames = Vec::with_capacity(n_frames);
    for (len, &label) in lens.iter().zip(&labels) {
        frames.extend(std::iter::repeat(label).take(*len));
    }
    frames
}

/// Uniform 2-6 frames per phoneme, partitioning the frame axis exactly.
fn draw_alignment(n_frames: usize, vocab: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut lens = Vec::new();
    let mut remaining = n_frames;
    while remaining > 6 {
        let d = loop {
            let d = rng.gen_range(2..=6);
            if remaining - d >= 2 {
                break d;
            }
        };
        lens.push(d);
        remaining -= d;
    }
    lens.push(remaining);
    let ids = (0..lens.len()).map(|_| rng.gen_range(0..vocab)).collect();
    (ids, lens)
}

fn generate_utterance(
    spec: &CorpusSpec,
    patterns: &ClassPatterns,
    shift: Option<&DomainShift>,
    domain: Domain,
    index: usize,
    rng: &mut Rng,
) -> SyntheticUtterance {
    let n_frames = rng.gen_range(spec.min_frames..=spec.max_frames);
    let frame_labels = draw_structure(n_frames, spec.n_classes, rng);
    let speaker_id = rng.gen_range(0..spec.n_speakers);
    let (phoneme_ids, frames_per_phoneme) =
        draw_alignment(n_frames, spec.n_phoneme_vocab, rng);

    let mut mel = Array2::zeros((n_frames, spec.n_mel_channels));
    for (i, &label) in frame_labels.iter().enumerate() {
        let base = template_frame(patterns, label.0, speaker_id, i, spec.frame_hop);
        for j in 0..spec.n_mel_channels {
            let noise: f64 = StandardNormal.sample(rng);
            mel[[i, j]] = base[j] + spec.noise_std * noise;
        }
    }
    if let Some(shift) = shift {
        shift.apply(&mut mel, &frame_labels, rng);
    }

    let frame_labels = FrameLabelSequence::new(frame_labels, spec.frame_hop)
        .expect("generator produces at least min_frames labels");
    let segments = frames_to_segments(&frame_labels);
    SyntheticUtterance {
        index,
        domain,
        speaker_id,
        mel,
        frame_labels,
        segments,
        phoneme_ids,
        frames_per_phoneme,
    }
}

/// Generate both domains deterministically from the spec seed. Source
/// utterances come first, then target, each ordered by index.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let patterns = draw_patterns(spec, &mut subrng(spec.seed, STREAM_PATTERNS));
    let shift = draw_shift(spec, &mut subrng(spec.seed, STREAM_SHIFT));

    let mut utterances = Vec::with_capacity(2 * spec.n_utterances);
    for index in 0..spec.n_utterances {
        let mut rng = subrng(spec.seed, STREAM_SOURCE_BASE + index as u64);
        utterances.push(generate_utterance(
            spec,
            &patterns,
            None,
            Domain::Source,
            index,
            &mut rng,
        ));
    }
    for index in 0..spec.n_utterances {
        let mut rng = subrng(spec.seed, STREAM_TARGET_BASE + index as u64);
        utterances.push(generate_utterance(
            spec,
            &patterns,
            Some(&shift),
            Domain::Target,
            index,
            &mut rng,
        ));
    }
    Ok(Corpus {
        spec: spec.clone(),
        patterns,
        shift,
        utterances,
    })
}

/// Frame-level class probabilities from a trained detector, one
/// (n_frames x n_classes) matrix per utterance, in corpus order. Ground
/// truth is not consulted.
pub fn soft_label_corpus(sed: &ToySed, corpus: &Corpus) -> Result<Vec<Array2<f64>>> {
    corpus
        .utterances
        .iter()
        .map(|u| sed.frame_probs(&u.mel))
        .collect()
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct UtteranceMeta {
    index: usize,
    domain: Domain,
    speaker_id: usize,
    n_frames: usize,
    phoneme_ids: Vec<usize>,
    frames_per_phoneme: Vec<usize>,
    mel_file: String,
    segments_file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    spec: CorpusSpec,
    patterns: ClassPatterns,
    shift: DomainShift,
    utterances: Vec<UtteranceMeta>,
}

/// Write a corpus directory: manifest plus one matrix and one segment CSV
/// per utterance.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut metas = Vec::with_capacity(corpus.utterances.len());
    for u in &corpus.utterances {
        let stem = format!("u{:04}_{}", u.index, u.domain);
        let mel_file = format!("{stem}.mel.bin");
        let segments_file = format!("{stem}.segments.csv");
        write_matrix(&dir.join(&mel_file), &u.mel)?;
        u.segments.write_csv(&dir.join(&segments_file))?;
        metas.push(UtteranceMeta {
            index: u.index,
            domain: u.domain,
            speaker_id: u.speaker_id,
            n_frames: u.n_frames(),
            phoneme_ids: u.phoneme_ids.clone(),
            frames_per_phoneme: u.frames_per_phoneme.clone(),
            mel_file,
            segments_file,
        });
    }
    let manifest = Manifest {
        format_version: CORPUS_FORMAT_VERSION,
        spec: corpus.spec.clone(),
        patterns: corpus.patterns.clone(),
        shift: corpus.shift.clone(),
        utterances: metas,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Load and fully revalidate a corpus directory.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
        Error::MissingInput(format!("manifest {}: {e}", manifest_path.display()))
    })?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != CORPUS_FORMAT_VERSION {
        return Err(Error::Parse(format!(
            "corpus manifest: unsupported format version {}",
            manifest.format_version
        )));
    }
    manifest.spec.validate()?;
    let mut utterances = Vec::with_capacity(manifest.utterances.len());
    for meta in &manifest.utterances {
        let mel = read_matrix(&dir.join(&meta.mel_file))?;
        let segments = SegmentList::read_csv(&dir.join(&meta.segments_file))?;
        let frame_labels = segments_to_frames(&segments, manifest.spec.frame_hop)?;
        let u = SyntheticUtterance {
            index: meta.index,
            domain: meta.domain,
            speaker_id: meta.speaker_id,
            mel,
            frame_labels,
            // Re-derive so the stored CSV and the labels agree exactly.
            segments: frames_to_segments(&segments_to_frames(
                &segments,
                manifest.spec.frame_hop,
            )?),
            phoneme_ids: meta.phoneme_ids.clone(),
            frames_per_phoneme: meta.frames_per_phoneme.clone(),
        };
        if u.n_frames() != meta.n_frames {
            return Err(Error::Parse(format!(
                "utterance {}: matrix has {} frames, manifest says {}",
                meta.index,
                u.n_frames(),
                meta.n_frames
            )));
        }
        u.validate(&manifest.spec)?;
        utterances.push(u);
    }
    Ok(Corpus {
        spec: manifest.spec,
        patterns: manifest.patterns,
        shift: manifest.shift,
        utterances,
    })
}
