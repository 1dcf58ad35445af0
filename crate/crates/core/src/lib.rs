//! Spoken dialect identification toolkit.
//!
//! The pipeline runs from audio to a fused decision:
//!
//! 1. [`dsp`] decodes WAV audio, computes 80-dim MFCCs with per-utterance
//!    normalization and reads/writes ADIF feature files (the same format the
//!    external pretrained-feature exporter emits at 1024 dims).
//! 2. [`augment`] prepares extra training copies (additive noise, impulse
//!    responses, speed perturbation).
//! 3. [`nn`] holds the tensor layers with hand-written backward passes and
//!    [`model`] composes them into ResNet34 and ECAPA-TDNN classifiers with an
//!    additive angular margin head.
//! 4. [`train`] runs the two-phase segment-sampling schedule with Adam and a
//!    triangular learning rate, and owns the checkpoint format.
//! 5. [`inference`] mixes softmax scores with cohort cosine similarities and
//!    fuses several systems; [`eval`] reports accuracy and macro
//!    precision/recall.

pub mod augment;
pub mod config;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod inference;
pub mod model;
pub mod nn;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
