//! Cross-inferential networks for source-free unsupervised domain adaptation.
//!
//! A base classifier and an examiner network that orders image triplets are
//! co-adapted on an unlabeled target domain. The examiner learns from pseudo
//! labels produced by the base network, and two consistency terms (pairwise
//! correlation matrices and channel attention) feed its view back into the
//! base network's feature extractor.

pub mod cli;
pub mod data_synth;
pub mod error;
pub mod gradsuite;
pub mod losses;
pub mod nets;
pub mod par;
pub mod pipeline;
pub mod pseudo;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
