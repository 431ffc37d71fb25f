//! Code-switching text generation and injection into a
//! transformer-transducer speech recognizer.
//!
//! The crate is organised bottom-up:
//!
//! * [`textgen`] builds code-switched sentences from parallel pairs.
//! * [`synthcorpus`] turns sentences into deterministic synthetic speech,
//!   forced-alignment durations and simulated TTS renditions.
//! * [`model`] is the dual-path network (speech encoder, text embedding
//!   extractor, upsampler, smoother, shared encoder, predictor, joiner).
//! * [`transducer`] holds the transducer loss and greedy decoding.
//! * [`xmodal`] provides the interchangeable cross-modality tying strategies.
//! * [`trainer`] composes losses and runs the optimizer loop.
//! * [`metrics`] scores mixed-script transcripts.
//! * [`harness`] runs whole experiments and writes report tables.

pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod synthcorpus;
pub mod tape;
pub mod textgen;
pub mod trainer;
pub mod transducer;
pub mod util;
pub mod xmodal;

pub use error::{Error, Result};
