//! Object-induced action prediction.
//!
//! A scene arrives as frozen detector features: one backbone map plus N
//! per-object proposal blocks. A global module compresses the backbone into
//! a scene-context tensor, each proposal is concatenated with that context,
//! a learned selector scores the objects, and the top-k weighted blocks feed
//! a fully connected head that emits 4 action and 21 explanation logits.
//! Training, metrics, dense autograd, binary persistence, and a synthetic
//! dataset with planted causal structure all live in this crate.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod seeding;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{OiaError, Result};
