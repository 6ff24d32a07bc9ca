//! Concept-conditioned language model pretraining at desk scale.
//!
//! The pipeline: train a small decoder-only teacher, fit a sparse autoencoder
//! (SAE) on one of its hidden layers, score which sparse concepts mattered
//! for each next-token prediction, then pretrain a student whose loss adds a
//! concept-prediction term and whose hidden sequence is interleaved with a
//! compressed continuous concept vector. Baselines (plain next-token, logit
//! distillation, pause tokens, direct hidden-state regression) and component
//! ablations share the same trainer.

pub mod attribution;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod mixer;
pub mod optim;
pub mod persist;
pub mod pipeline;
pub mod sae;
pub mod steer;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
