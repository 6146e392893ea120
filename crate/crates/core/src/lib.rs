//! Post-hoc correction of few-shot species classifiers with a large
//! multimodal model: data model, exemplar sampling, prompt construction,
//! answer parsing and evaluation.

pub mod data_model;
pub mod eval;
pub mod names;
pub mod parser;
pub mod prompt;
pub mod sampler;

pub use data_model::{
    ClassId, DataError, ExemplarSet, ExpertPrediction, ImageRef, SpeciesRecord, SpeciesVocabulary,
    TestItem,
};
