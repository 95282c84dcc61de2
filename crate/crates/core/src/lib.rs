//! Emotion-anchored contrastive learning for utterance-level emotion
//! classification in conversations, at desk scale.
//!
//! The pipeline: [`corpus`] turns dialogues into prompt-context windows and
//! hashed feature vectors; [`encoder`] maps them to representations and
//! derives one anchor per emotion label; [`losses`] holds the training
//! objectives; [`trainer`] runs representation learning followed by anchor
//! adaptation and predicts by nearest anchor; [`metrics`] scores the result.

pub mod cli;
pub mod corpus;
pub mod diffmath;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod seed;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
