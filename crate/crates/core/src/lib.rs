//! Core algorithms for a small emotion-conditioned speech synthesis lab:
//! score-based diffusion in mel space, kernel-based domain adaptation losses,
//! segment-level emotion metrics, multi-scale style conditioning, and the toy
//! models plus training loops that tie them together.

pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod diarization;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod mmd;
pub mod models;
pub mod report;
pub mod rng;
pub mod selftest;
pub mod style;
pub mod train;

pub use config::ExperimentConfig;
pub use corpus::{Corpus, CorpusSpec, Domain, SyntheticUtterance};
pub use diarization::{EmotionId, FrameLabelSequence, Segment, SegmentList};
pub use diffusion::{NoiseSchedule, SamplerConfig};
pub use error::{Error, Result};
pub use mmd::KernelConfig;
pub use models::{Checkpoint, ToyScoreNet, ToySed, ToySer};
pub use report::AblationVariant;
pub use rng::Rng;
pub use train::{AdaptationMode, TtsModel};
