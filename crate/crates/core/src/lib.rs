//! Desk-scale spoken language understanding with a frozen transformer
//! backbone and per-domain light encoders.
//!
//! The crate covers the full pipeline: synthetic labeled-data generation with
//! an ASR-style noise channel, conversational masked-LM pre-training of a
//! mini-BERT backbone, light-encoder fine-tuning for joint intent
//! classification and CRF slot labeling, and metric / parameter-efficiency
//! reporting.

pub mod backbone;
pub mod bio;
pub mod clm_data;
pub mod crf;
pub mod datasim;
pub mod error;
pub mod gradcheck;
pub mod light_encoder;
pub mod metrics;
pub mod optim;
pub mod param;
pub mod pretrain;
pub mod report;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use param::{ParamSet, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
