//! Cross-domain sequential recommendation with a mixture of sequence experts
//! that reduces negative transfer between domains.

pub mod acmoe;
pub mod autograd;
pub mod cli;
pub mod embedding;
pub mod evaluation;
pub mod error;
pub mod expert;
pub mod model;
pub mod objectives;
pub mod params;
pub mod seqdata;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
pub use model::{ModelConfig, SyncRecModel};
