//! Grounded multimodal NER pipeline.
//!
//! A small CRF tagger trained on LLM-synthesized data labels mentions; an
//! entropy router sends uncertain mentions to a multimodal LLM for
//! refinement; the merged mentions are grounded to image regions with
//! in-context examples picked by entity, sentence and image similarity.

pub mod artifact;
pub mod bio;
pub mod crf;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod icl;
pub mod pipeline;
pub mod prompt;
pub mod refine;
pub mod synthesis;
pub mod text;
pub mod uncertainty;

pub use error::{Error, Result};
