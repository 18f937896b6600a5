//! Segment and frame label timelines plus the two evaluation metrics:
//! emotion diarization error rate over piecewise-constant timelines, and
//! frame-level reclassification accuracy.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Emotion class index. Class 0 is the neutral background by convention.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct EmotionId(pub usize);

impl EmotionId {
    pub const NEUTRAL: EmotionId = EmotionId(0);

    pub fn is_neutral(self) -> bool {
        self == Self::NEUTRAL
    }
}

impl fmt::Display for EmotionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Half-open labeled time span in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub label: EmotionId,
}

impl Segment {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Slack allowed when checking that segments tile the timeline; absorbs
/// rounding from text round-trips.
const TILING_TOLERANCE: f64 = 1e-6;

/// Labeled timeline: sorted segments that tile `[0, total_duration]` exactly,
/// with neutral spans spelled out rather than implied by gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentList {
    segments: Vec<Segment>,
    total_duration: f64,
}

impl SegmentList {
    pub fn new(segments: Vec<Segment>, total_duration: f64) -> Result<Self> {
        if !(total_duration.is_finite() && total_duration > 0.0) {
            return Err(Error::domain(format!(
                "segment list: total duration must be positive, got {total_duration}"
            )));
        }
        if segments.is_empty() {
            return Err(Error::domain("segment list: no segments"));
        }
        for seg in &segments {
            if !(seg.start.is_finite() && seg.end.is_finite()) || seg.start >= seg.end {
                return Err(Error::domain(format!(
                    "segment list: bad span [{}, {}]",
                    seg.start, seg.end
                )));
            }
        }
        if segments[0].start.abs() > TILING_TOLERANCE {
            return Err(Error::domain(format!(
                "segment list: must start at 0, got {}",
                segments[0].start
            )));
        }
        for pair in segments.windows(2) {
            if (pair[0].end - pair[1].start).abs() > TILING_TOLERANCE {
                return Err(Error::domain(format!(
                    "segment list: gap or overlap between {} and {}",
                    pair[0].end, pair[1].start
                )));
            }
        }
        let last_end = segments.last().unwrap().end;
        if (last_end - total_duration).abs() > TILING_TOLERANCE {
            return Err(Error::domain(format!(
                "segment list: ends at {last_end}, expected {total_duration}"
            )));
        }
        Ok(Self {
            segments,
            total_duration,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_duration(&self) -> f64 {
        self.total_duration
    }

    /// Label at time `t`; times past the end clamp to the last segment.
    pub fn label_at(&self, t: f64) -> EmotionId {
        for seg in &self.segments {
            if t < seg.end {
                return seg.label;
            }
        }
        self.segments.last().unwrap().label
    }

    /// Distinct labels present, sorted.
    pub fn labels_present(&self) -> Vec<EmotionId> {
        let mut out: Vec<EmotionId> = self.segments.iter().map(|s| s.label).collect();
        out.sort();
        out.dedup();
        out
    }

    /// Fraction of the timeline carrying each class, indexed by class id.
    pub fn class_durations(&self, n_classes: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; n_classes];
        for seg in &self.segments {
            let c = seg.label.0;
            if c >= n_classes {
                return Err(Error::domain(format!(
                    "segment list: label {c} out of range for {n_classes} classes"
                )));
            }
            out[c] += seg.duration();
        }
        Ok(out)
    }

    /// CSV serialization: header plus start,end,label rows, six decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("start,end,label\n");
        for seg in &self.segments {
            out.push_str(&format!(
                "{:.6},{:.6},{}\n",
                seg.start, seg.end, seg.label.0
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut segments = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with("start") {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Parse(format!(
                    "segment csv line {}: expected start,end,label, got {line:?}",
                    lineno + 1
                )));
            }
            let parse_f = |s: &str, what: &str| -> Result<f64> {
                s.trim().parse::<f64>().map_err(|_| {
                    Error::Parse(format!(
                        "segment csv line {}: bad {what} {s:?}",
                        lineno + 1
                    ))
                })
            };
            let start = parse_f(parts[0], "start")?;
            let end = parse_f(parts[1], "end")?;
            let label: usize = parts[2].trim().parse().map_err(|_| {
                Error::Parse(format!(
                    "segment csv line {}: bad label {:?}",
                    lineno + 1,
                    parts[2]
                ))
            })?;
            segments.push(Segment {
                start,
                end,
                label: EmotionId(label),
            });
        }
        let total = segments
            .last()
            .map(|s| s.end)
            .ok_or_else(|| Error::Parse("segment csv: no segments".into()))?;
        Self::new(segments, total)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::MissingInput(format!("segment csv {}: {e}", path.display()))
        })?;
        Self::from_csv(&text)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::MissingInput(format!("segment json {}: {e}", path.display()))
        })?;
        let raw: SegmentListRaw = serde_json::from_str(&text)?;
        Self::new(raw.segments, raw.total_duration)
    }
}

/// Mirror of the serialized shape so reads re-run validation.
#[derive(Deserialize)]
struct SegmentListRaw {
    segments: Vec<Segment>,
    total_duration: f64,
}

/// Hard per-frame emotion labels at a fixed hop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLabelSequence {
    pub labels: Vec<EmotionId>,
    pub frame_hop: f64,
}

impl FrameLabelSequence {
    pub fn new(labels: Vec<EmotionId>, frame_hop: f64) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::domain("frame labels: empty sequence"));
        }
        if !(frame_hop.is_finite() && frame_hop > 0.0) {
            return Err(Error::domain(format!(
                "frame labels: hop must be positive, got {frame_hop}"
            )));
        }
        Ok(Self { labels, frame_hop })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn total_duration(&self) -> f64 {
        self.labels.len() as f64 * self.frame_hop
    }
}

/// Merge maximal runs of equal frame labels into a segment timeline.
pub fn frames_to_segments(frames: &FrameLabelSequence) -> SegmentList {
    let hop = frames.frame_hop;
    let mut segments = Vec::new();
    let mut run_start = 0usize;
    for i in 1..=frames.labels.len() {
        if i == frames.labels.len() || frames.labels[i] != frames.labels[run_start] {
            segments.push(Segment {
                start: run_start as f64 * hop,
                end: i as f64 * hop,
                label: frames.labels[run_start],
            });
            run_start = i;
        }
    }
    SegmentList::new(segments, frames.total_duration())
        .expect("run-length segments tile the frame span by construction")
}

/// Sample a segment timeline at frame midpoints. The frame count is the
/// rounded duration/hop ratio, so boundary-aligned segments round-trip.
pub fn segments_to_frames(segments: &SegmentList, frame_hop: f64) -> Result<FrameLabelSequence> {
    if !(frame_hop.is_finite() && frame_hop > 0.0) {
        return Err(Error::domain(format!(
            "segments_to_frames: hop must be positive, got {frame_hop}"
        )));
    }
    let n = (segments.total_duration() / frame_hop).round() as usize;
    if n == 0 {
        return Err(Error::domain(format!(
            "segments_to_frames: hop {frame_hop} longer than timeline {}",
            segments.total_duration()
        )));
    }
    let labels = (0..n)
        .map(|i| segments.label_at((i as f64 + 0.5) * frame_hop))
        .collect();
    FrameLabelSequence::new(labels, frame_hop)
}

/// Duration breakdown of diarization errors over a shared timeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EderBreakdown {
    /// Hypothesis emotional while reference neutral.
    pub false_alarm: f64,
    /// Hypothesis neutral while reference emotional.
    pub missed: f64,
    /// Both emotional with different labels.
    pub confusion: f64,
    pub total_duration: f64,
}

impl EderBreakdown {
    pub fn rate(&self) -> f64 {
        let raw = (self.false_alarm + self.missed + self.confusion) / self.total_duration;
        // Tiling timelines put each instant in at most one category, so the
        // mathematical rate is bounded by 1; only summation rounding can
        // push past it.
        debug_assert!(raw <= 1.0 + 1e-9, "error durations exceed the timeline");
        raw.min(1.0)
    }
}

/// Exact piecewise overlap of the two timelines: walk the merged breakpoint
/// set and attribute each elementary interval to one error category.
pub fn eder_components(
    reference: &SegmentList,
    hypothesis: &SegmentList,
) -> Result<EderBreakdown> {
    let total = reference.total_duration();
    if (total - hypothesis.total_duration()).abs() > TILING_TOLERANCE {
        return Err(Error::domain(format!(
            "eder: durations differ, reference {total} vs hypothesis {}",
            hypothesis.total_duration()
        )));
    }
    let mut cuts: Vec<f64> = Vec::new();
    for seg in reference.segments().iter().chain(hypothesis.segments()) {
        cuts.push(seg.start);
        cuts.push(seg.end);
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let mut out = EderBreakdown {
        false_alarm: 0.0,
        missed: 0.0,
        confusion: 0.0,
        total_duration: total,
    };
    for pair in cuts.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b - a <= 0.0 {
            continue;
        }
        let mid = 0.5 * (a + b);
        let r = reference.label_at(mid);
        let h = hypothesis.label_at(mid);
        let dur = b - a;
        match (r.is_neutral(), h.is_neutral()) {
            (true, false) => out.false_alarm += dur,
            (false, true) => out.missed += dur,
            (false, false) if r != h => out.confusion += dur,
            _ => {}
        }
    }
    Ok(out)
}

/// Emotion diarization error rate: (false alarm + missed + confusion) over
/// the total duration.
pub fn eder(reference: &SegmentList, hypothesis: &SegmentList) -> Result<f64> {
    Ok(eder_components(reference, hypothesis)?.rate())
}

/// Emotion reclassification accuracy: fraction of frames whose reclassified
/// label matches the reference.
pub fn era(reference: &FrameLabelSequence, reclassified: &FrameLabelSequence) -> Result<f64> {
    if reference.len() != reclassified.len() {
        return Err(Error::shape(format!(
            "era: lengths differ, {} vs {}",
            reference.len(),
            reclassified.len()
        )));
    }
    if (reference.frame_hop - reclassified.frame_hop).abs() > 1e-9 {
        return Err(Error::domain(format!(
            "era: frame hops differ, {} vs {}",
            reference.frame_hop, reclassified.frame_hop
        )));
    }
    let matches = reference
        .labels
        .iter()
        .zip(&reclassified.labels)
        .filter(|(a, b)| a == b)
        .count();
    Ok(matches as f64 / reference.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn seg(start: f64, end: f64, label: usize) -> Segment {
        Segment {
            start,
            end,
            label: EmotionId(label),
        }
    }

    fn timeline(parts: &[(f64, f64, usize)]) -> SegmentList {
        let segs: Vec<Segment> = parts.iter().map(|&(s, e, l)| seg(s, e, l)).collect();
        let total = segs.last().unwrap().end;
        SegmentList::new(segs, total).unwrap()
    }

    #[test]
    fn tiling_violations_rejected() {
        assert!(SegmentList::new(vec![seg(1.0, 2.0, 0)], 2.0).is_err());
        assert!(SegmentList::new(vec![seg(0.0, 1.0, 0), seg(1.5, 2.0, 1)], 2.0).is_err());
        assert!(SegmentList::new(vec![seg(0.0, 1.0, 0), seg(0.5, 2.0, 1)], 2.0).is_err());
        assert!(SegmentList::new(vec![seg(0.0, 1.0, 0)], 2.0).is_err());
        assert!(SegmentList::new(vec![seg(0.0, 0.0, 0)], 0.0).is_err());
        assert!(SegmentList::new(vec![], 1.0).is_err());
    }

    #[test]
    fn frames_round_length_merge() {
        let frames = FrameLabelSequence::new(
            vec![EmotionId(1), EmotionId(1), EmotionId(2)],
            0.01,
        )
        .unwrap();
        let segs = frames_to_segments(&frames);
        assert_eq!(segs.segments().len(), 2);
        assert_abs_diff_eq!(segs.segments()[0].start, 0.0);
        assert_abs_diff_eq!(segs.segments()[0].end, 0.02, epsilon = 1e-12);
        assert_eq!(segs.segments()[0].label, EmotionId(1));
        assert_abs_diff_eq!(segs.segments()[1].end, 0.03, epsilon = 1e-12);
        assert_eq!(segs.segments()[1].label, EmotionId(2));
    }

    #[test]
    fn uniform_frames_make_single_segment() {
        let frames =
            FrameLabelSequence::new(vec![EmotionId(3); 50], 0.02).unwrap();
        let segs = frames_to_segments(&frames);
        assert_eq!(segs.segments().len(), 1);
        assert_abs_diff_eq!(segs.total_duration(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn alternating_frames_make_one_segment_each() {
        let labels: Vec<EmotionId> = (0..6).map(|i| EmotionId(i % 2)).collect();
        let frames = FrameLabelSequence::new(labels, 0.01).unwrap();
        assert_eq!(frames_to_segments(&frames).segments().len(), 6);
    }

    #[test]
    fn segment_frame_round_trip() {
        let segs = timeline(&[(0.0, 0.04, 0), (0.04, 0.10, 2), (0.10, 0.12, 1)]);
        let frames = segments_to_frames(&segs, 0.01).unwrap();
        assert_eq!(frames.len(), 12);
        let back = frames_to_segments(&frames);
        assert_eq!(back.segments().len(), 3);
        for (a, b) in back.segments().iter().zip(segs.segments()) {
            assert_eq!(a.label, b.label);
            assert_abs_diff_eq!(a.start, b.start, epsilon = 1e-9);
            assert_abs_diff_eq!(a.end, b.end, epsilon = 1e-9);
        }
    }

    #[test]
    fn eder_zero_for_identical() {
        let segs = timeline(&[(0.0, 2.0, 0), (2.0, 6.0, 1), (6.0, 10.0, 0)]);
        assert_abs_diff_eq!(eder(&segs, &segs).unwrap(), 0.0);
    }

    #[test]
    fn eder_shifted_hypothesis_hand_value() {
        // Emotional span shifted by 1 s: 1 s missed plus 1 s false alarm
        // out of 10 s.
        let reference = timeline(&[(0.0, 2.0, 0), (2.0, 6.0, 1), (6.0, 10.0, 0)]);
        let hypothesis = timeline(&[(0.0, 3.0, 0), (3.0, 7.0, 1), (7.0, 10.0, 0)]);
        let parts = eder_components(&reference, &hypothesis).unwrap();
        assert_abs_diff_eq!(parts.missed, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(parts.false_alarm, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(parts.confusion, 0.0);
        assert_abs_diff_eq!(parts.rate(), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn eder_wrong_label_hand_value() {
        let reference = timeline(&[(0.0, 2.0, 0), (2.0, 6.0, 1), (6.0, 10.0, 0)]);
        let hypothesis = timeline(&[(0.0, 2.0, 0), (2.0, 6.0, 2), (6.0, 10.0, 0)]);
        let parts = eder_components(&reference, &hypothesis).unwrap();
        assert_abs_diff_eq!(parts.confusion, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(parts.rate(), 0.4, epsilon = 1e-12);
    }

    #[test]
    fn eder_duration_mismatch_rejected() {
        let a = timeline(&[(0.0, 10.0, 0)]);
        let b = timeline(&[(0.0, 8.0, 0)]);
        assert!(eder(&a, &b).is_err());
    }

    #[test]
    fn eder_components_are_disjoint() {
        // Every second falls in exactly one category (or none), so the
        // breakdown sums to the mismatch duration.
        let reference = timeline(&[(0.0, 2.0, 0), (2.0, 5.0, 1), (5.0, 8.0, 2), (8.0, 10.0, 0)]);
        let hypothesis = timeline(&[(0.0, 1.0, 1), (1.0, 4.0, 0), (4.0, 9.0, 2), (9.0, 10.0, 0)]);
        let parts = eder_components(&reference, &hypothesis).unwrap();
        // Mismatch spans: [0,1) FA, [2,4) missed, [4,5) confusion, [8,9) FA.
        assert_abs_diff_eq!(parts.false_alarm, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(parts.missed, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(parts.confusion, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(parts.rate(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn era_hand_values() {
        let a = FrameLabelSequence::new(
            vec![EmotionId(0), EmotionId(1), EmotionId(1), EmotionId(2)],
            0.01,
        )
        .unwrap();
        let b = FrameLabelSequence::new(
            vec![EmotionId(0), EmotionId(1), EmotionId(1), EmotionId(0)],
            0.01,
        )
        .unwrap();
        assert_abs_diff_eq!(era(&a, &a).unwrap(), 1.0);
        assert_abs_diff_eq!(era(&a, &b).unwrap(), 0.75, epsilon = 1e-12);
        let disjoint = FrameLabelSequence::new(
            vec![EmotionId(3), EmotionId(3), EmotionId(3), EmotionId(3)],
            0.01,
        )
        .unwrap();
        assert_abs_diff_eq!(era(&a, &disjoint).unwrap(), 0.0);
    }

    #[test]
    fn era_length_mismatch_rejected() {
        let a = FrameLabelSequence::new(vec![EmotionId(0); 4], 0.01).unwrap();
        let b = FrameLabelSequence::new(vec![EmotionId(0); 5], 0.01).unwrap();
        assert!(era(&a, &b).is_err());
    }

    #[test]
    fn csv_round_trip_preserves_labels_and_spans() {
        let segs = timeline(&[(0.0, 1.25, 0), (1.25, 3.5, 2), (3.5, 4.0, 1)]);
        let text = segs.to_csv();
        assert!(text.starts_with("start,end,label\n"));
        assert!(text.contains("1.250000,3.500000,2"));
        let back = SegmentList::from_csv(&text).unwrap();
        assert_eq!(back.segments().len(), 3);
        for (a, b) in back.segments().iter().zip(segs.segments()) {
            assert_eq!(a.label, b.label);
            assert_abs_diff_eq!(a.start, b.start, epsilon = 1e-6);
        }
    }

    #[test]
    fn csv_rejects_malformed_rows() {
        assert!(SegmentList::from_csv("0.0,1.0\n").is_err());
        assert!(SegmentList::from_csv("0.0,1.0,x\n").is_err());
        assert!(SegmentList::from_csv("").is_err());
    }

    #[test]
    fn json_round_trip_revalidates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("segs.json");
        let segs = timeline(&[(0.0, 2.0, 0), (2.0, 5.0, 3)]);
        segs.write_json(&path).unwrap();
        let back = SegmentList::read_json(&path).unwrap();
        assert_eq!(back, segs);
    }

    proptest! {
        #[test]
        fn eder_bounded_and_zero_on_self(
            labels_a in proptest::collection::vec(0usize..4, 1..30),
            labels_b in proptest::collection::vec(0usize..4, 1..30),
        ) {
            let n = labels_a.len().min(labels_b.len());
            let a = FrameLabelSequence::new(
                labels_a[..n].iter().map(|&l| EmotionId(l)).collect(),
                0.02,
            ).unwrap();
            let b = FrameLabelSequence::new(
                labels_b[..n].iter().map(|&l| EmotionId(l)).collect(),
                0.02,
            ).unwrap();
            let sa = frames_to_segments(&a);
            let sb = frames_to_segments(&b);
            let rate = eder(&sa, &sb).unwrap();
            prop_assert!((0.0..=1.0).contains(&rate));
            prop_assert!(eder(&sa, &sa).unwrap().abs() < 1e-12);
            // Frame-quantized EDER with hop-aligned segments equals the
            // mismatch fraction counted on frames, restricted to the three
            // error cases.
            let frame_err = a.labels.iter().zip(&b.labels)
                .filter(|(x, y)| x != y)
                .count() as f64 / n as f64;
            prop_assert!(rate <= frame_err + 1e-9);
        }

        #[test]
        fn frame_segment_round_trip_identity(
            labels in proptest::collection::vec(0usize..5, 1..60),
        ) {
            let frames = FrameLabelSequence::new(
                labels.iter().map(|&l| EmotionId(l)).collect(),
                0.0125,
            ).unwrap();
            let there = frames_to_segments(&frames);
            let back = segments_to_frames(&there, 0.0125).unwrap();
            prop_assert_eq!(back.labels, frames.labels);
        }
    }
}
