//! Multimodal dialogue understanding and scene-aware prompted response
//! generation at desk scale.
//!
//! The crate covers a synthetic corpus generator, a timeline-aligned fusion
//! encoder with scene and session boundary heads, stub captioners, prompt
//! construction, a small encoder-decoder generator, the evaluation metrics
//! and an experiment harness.

pub mod autodiff;
pub mod captioning;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod fusion;
pub mod generation;
pub mod harness;
pub mod jsonl;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod prompting;
pub mod understanding;
pub mod vocab;

pub use error::{Error, Result};

pub use captioning::{Caption, CaptionSource, Captioner, StubCaptioner};
pub use corpus::{generate_corpus, load_corpus, save_corpus, Corpus, DialogueEpisode, GenConfig, Split, Utterance};
pub use fusion::{EncodedDialogue, Encoder, EncoderConfig};
pub use generation::{DecodeMethod, GenerationResult, GeneratorModel};
pub use harness::{MetricReport, RunConfig};
pub use metrics::{BoundaryScore, GenScore};
pub use prompting::{AblationFlags, GeneratorInput, PromptText};
pub use understanding::{BoundaryPrediction, MultiTaskConfig, TaskMode, UnderstandingModel};
pub use vocab::Vocab;
