#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use poc_core::data_model::{
    load_attributes, load_exemplars, load_predictions, load_test_items, load_vocabulary,
};
use poc_core::{ClassId, ExemplarSet, ExpertPrediction, SpeciesVocabulary, TestItem};

pub struct Gulls {
    pub vocab: SpeciesVocabulary,
    pub test: Vec<TestItem>,
    pub experts: Vec<ExpertPrediction>,
    pub exemplars: BTreeMap<ClassId, ExemplarSet>,
    pub attributes: BTreeMap<ClassId, Vec<String>>,
}

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/gulls")
}

pub fn gulls() -> Gulls {
    let dir = fixture_dir();
    let vocab = load_vocabulary(&dir.join("vocab.jsonl")).unwrap();
    Gulls {
        test: load_test_items(&dir.join("test.jsonl"), &vocab).unwrap(),
        experts: load_predictions(&dir.join("predictions.jsonl"), &vocab).unwrap(),
        exemplars: load_exemplars(&dir.join("exemplars.jsonl"), &vocab).unwrap(),
        attributes: load_attributes(&dir.join("attributes.jsonl"), &vocab).unwrap(),
        vocab,
    }
}
