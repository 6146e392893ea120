#![allow(dead_code)]

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use poc_client::mock::{serve_mock, FailureRule, MockConfig, MockHandle, MockMode};
use poc_client::{Backoff, EndpointConfig};
use poc_core::data_model::{load_predictions, load_test_items, load_vocabulary};
use poc_core::prompt::PromptStrategy;
use poc_core::{ClassId, ExpertPrediction, SpeciesVocabulary, TestItem};
use poc_pipeline::config::{DataPaths, RunConfig};
use poc_pipeline::synth::{generate, SynthSpec};

pub struct Synth {
    pub dir: PathBuf,
    pub vocab: SpeciesVocabulary,
    pub test: Vec<TestItem>,
    pub experts: Vec<ExpertPrediction>,
}

impl Synth {
    pub fn create(dir: &Path, classes: usize, items: usize, seed: u64) -> Self {
        let spec = SynthSpec {
            classes,
            items,
            seed,
            ..Default::default()
        };
        generate(&spec, dir).expect("synthetic dataset");
        let vocab = load_vocabulary(&dir.join("vocab.jsonl")).unwrap();
        let test = load_test_items(&dir.join("test.jsonl"), &vocab).unwrap();
        let experts = load_predictions(&dir.join("predictions.jsonl"), &vocab).unwrap();
        Self {
            dir: dir.to_path_buf(),
            vocab,
            test,
            experts,
        }
    }

    pub fn answer_key(&self) -> HashMap<String, ClassId> {
        self.test
            .iter()
            .map(|t| (t.image_id.clone(), t.ground_truth))
            .collect()
    }

    pub async fn mock(&self, mode: MockMode, failures: Vec<FailureRule>) -> MockHandle {
        let mut cfg = MockConfig::new(mode, self.vocab.clone(), self.answer_key());
        cfg.failures = failures;
        serve_mock(cfg, SocketAddr::from(([127, 0, 0, 1], 0)))
            .await
            .unwrap()
    }

    pub fn config(&self, mock: &MockHandle, strategy: PromptStrategy, out: &Path) -> RunConfig {
        let mut endpoint = EndpointConfig::new(mock.base_url(), "mock-model");
        endpoint.max_retries = 2;
        endpoint.max_parallel = 16;
        endpoint.backoff = Backoff {
            base_ms: 1,
            factor: 2.0,
            cap_ms: 10,
        };
        RunConfig {
            data: DataPaths {
                vocab: self.dir.join("vocab.jsonl"),
                test: self.dir.join("test.jsonl"),
                predictions: Some(self.dir.join("predictions.jsonl")),
                exemplars: Some(self.dir.join("exemplars.jsonl")),
                train: None,
                shots: None,
                attributes: Some(self.dir.join("attributes.jsonl")),
            },
            strategy,
            endpoint,
            seed: 0,
            threshold: None,
            output_dir: out.to_path_buf(),
            cache_dir: Some(out.join("cache")),
            templates_dir: None,
            dump_prompts: false,
            plots: false,
        }
    }
}
