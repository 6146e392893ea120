use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use poc_client::mock::{serve_mock, FailureRule, MockConfig, MockHandle, MockMode};
use poc_client::{Backoff, CacheHandle, ClientError, EndpointConfig, LmmClient};
use poc_core::data_model::{load_predictions, load_test_items, load_vocabulary};
use poc_core::prompt::{
    content_hash, Part, PocOptions, PromptBundle, PromptContext, PromptStrategy, Provenance,
};
use poc_core::{ClassId, SpeciesRecord, SpeciesVocabulary};

fn tiny_vocab() -> SpeciesVocabulary {
    SpeciesVocabulary::new(
        "tiny",
        (0..2)
            .map(|i| SpeciesRecord {
                class_id: ClassId(i),
                scientific_name: format!("Genus species{i}"),
                common_names: vec![],
                taxonomy: vec![],
            })
            .collect(),
    )
    .unwrap()
}

fn bundle(id: &str) -> PromptBundle {
    let system_text = "sys".to_string();
    let user_parts = vec![Part::Text(format!("What is in image {id}?"))];
    let hash = content_hash(&system_text, &user_parts);
    PromptBundle {
        system_text,
        user_parts,
        strategy: PromptStrategy::OpenVocab,
        candidates: vec![],
        provenance: Provenance {
            image_id: id.into(),
            expert_tag: None,
            content_hash: hash,
        },
    }
}

fn canned(ids: &[String]) -> MockMode {
    MockMode::CannedText(Arc::new(
        ids.iter()
            .map(|i| (i.clone(), format!("answer for {i}")))
            .collect(),
    ))
}

async fn start(mode: MockMode, failures: Vec<FailureRule>, latency: Duration) -> MockHandle {
    let mut cfg = MockConfig::new(mode, tiny_vocab(), HashMap::new());
    cfg.failures = failures;
    cfg.latency = latency;
    serve_mock(cfg, SocketAddr::from(([127, 0, 0, 1], 0)))
        .await
        .unwrap()
}

fn endpoint(mock: &MockHandle) -> EndpointConfig {
    let mut cfg = EndpointConfig::new(mock.base_url(), "mock-model");
    cfg.backoff = Backoff {
        base_ms: 1,
        factor: 2.0,
        cap_ms: 20,
    };
    cfg.max_retries = 3;
    cfg.timeout_secs = 5.0;
    cfg
}

#[tokio::test]
async fn second_query_is_served_from_cache() {
    let mock = start(canned(&["a".into()]), vec![], Duration::ZERO).await;
    let dir = tempfile::tempdir().unwrap();
    let client = LmmClient::new(endpoint(&mock), CacheHandle::at(dir.path())).unwrap();
    let b = bundle("a");
    let first = client.query(&b).await.unwrap();
    assert!(!first.served_from_cache);
    assert_eq!(first.attempt_count, 1);
    assert_eq!(first.content_hash, b.content_hash());
    let second = client.query(&b).await.unwrap();
    assert!(second.served_from_cache);
    assert_eq!(second.text, first.text);
    assert_eq!(second.usage, first.usage);
    assert_eq!(mock.counters().requests(), 1);
    mock.shutdown().await;
}

#[tokio::test]
async fn rate_limit_then_success_takes_two_attempts() {
    let rule = FailureRule {
        item_id: Some("a".into()),
        status: 429,
        times: Some(1),
    };
    let mock = start(canned(&["a".into()]), vec![rule], Duration::ZERO).await;
    let client = LmmClient::new(endpoint(&mock), CacheHandle::disabled()).unwrap();
    let r = client.query(&bundle("a")).await.unwrap();
    assert_eq!(r.attempt_count, 2);
    assert_eq!(r.text, "answer for a");
    mock.shutdown().await;
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    for (status, check) in [
        (
            401u16,
            (|e: &ClientError| matches!(e, ClientError::AuthFailure(401)))
                as fn(&ClientError) -> bool,
        ),
        (403, |e| matches!(e, ClientError::AuthFailure(403))),
        (413, |e| matches!(e, ClientError::PayloadTooLarge)),
        (400, |e| {
            matches!(e, ClientError::Rejected { status: 400, .. })
        }),
    ] {
        let rule = FailureRule {
            item_id: None,
            status,
            times: None,
        };
        let mock = start(canned(&[]), vec![rule], Duration::ZERO).await;
        let client = LmmClient::new(endpoint(&mock), CacheHandle::disabled()).unwrap();
        let err = client.query(&bundle("a")).await.unwrap_err();
        assert!(check(&err), "{status}: {err:?}");
        assert_eq!(mock.counters().requests(), 1, "{status} was retried");
        mock.shutdown().await;
    }
}

#[tokio::test]
async fn one_failing_item_does_not_sink_the_batch() {
    let ids: Vec<String> = (0..10).map(|i| format!("i{i}")).collect();
    let rule = FailureRule {
        item_id: Some("i4".into()),
        status: 500,
        times: None,
    };
    let mock = start(canned(&ids), vec![rule], Duration::ZERO).await;
    let cfg = endpoint(&mock);
    let client = LmmClient::new(cfg.clone(), CacheHandle::disabled()).unwrap();
    let bundles: Vec<PromptBundle> = ids.iter().map(|i| bundle(i)).collect();
    let results = client.run_batch(&bundles).await;
    assert_eq!(results.iter().filter(|r| r.is_ok()).count(), 9);
    match &results[4] {
        Err(ClientError::Exhausted { attempts, .. }) => assert_eq!(*attempts, cfg.max_retries + 1),
        other => panic!("item 4: {other:?}"),
    }
    mock.shutdown().await;
}

#[tokio::test]
async fn batch_keeps_order_and_bounds_concurrency() {
    let ids: Vec<String> = (0..100).map(|i| format!("i{i:03}")).collect();
    let mock = start(canned(&ids), vec![], Duration::from_millis(15)).await;
    let mut cfg = endpoint(&mock);
    cfg.max_parallel = 8;
    let dir = tempfile::tempdir().unwrap();
    let cache = CacheHandle::at(dir.path());
    let client = LmmClient::new(cfg, cache.clone()).unwrap();
    let bundles: Vec<PromptBundle> = ids.iter().map(|i| bundle(i)).collect();
    let results = client.run_batch(&bundles).await;
    for (id, r) in ids.iter().zip(&results) {
        assert_eq!(r.as_ref().unwrap().text, format!("answer for {id}"));
    }
    let peak = mock.counters().max_in_flight();
    assert!(peak <= 8 && peak > 1, "peak in flight {peak}");
    assert_eq!(cache.len("mock-model"), 100);

    let (requests, connections) = (mock.counters().requests(), mock.counters().connections());
    let again = client.run_batch(&bundles).await;
    assert!(again.iter().all(|r| r.as_ref().unwrap().served_from_cache));
    assert_eq!(mock.counters().requests(), requests);
    assert_eq!(mock.counters().connections(), connections);
    mock.shutdown().await;
}

#[tokio::test]
async fn slow_endpoint_times_out() {
    let mock = start(canned(&["a".into()]), vec![], Duration::from_millis(500)).await;
    let mut cfg = endpoint(&mock);
    cfg.timeout_secs = 0.05;
    cfg.max_retries = 1;
    let client = LmmClient::new(cfg, CacheHandle::disabled()).unwrap();
    let err = client.query(&bundle("a")).await.unwrap_err();
    assert!(
        matches!(err, ClientError::Timeout { attempts: 2 }),
        "{err:?}"
    );
    mock.shutdown().await;
}

#[tokio::test]
async fn unreachable_endpoint_is_exhausted() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let mut cfg = EndpointConfig::new(format!("http://{addr}/v1"), "m");
    cfg.backoff.base_ms = 1;
    cfg.max_retries = 2;
    let client = LmmClient::new(cfg, CacheHandle::disabled()).unwrap();
    let err = client.query(&bundle("a")).await.unwrap_err();
    assert!(
        matches!(err, ClientError::Exhausted { attempts: 3, .. }),
        "{err:?}"
    );
}

#[tokio::test]
async fn echo_mock_names_the_expert_top1_end_to_end() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/gulls");
    let vocab = load_vocabulary(&dir.join("vocab.jsonl")).unwrap();
    let test = load_test_items(&dir.join("test.jsonl"), &vocab).unwrap();
    let experts = load_predictions(&dir.join("predictions.jsonl"), &vocab).unwrap();
    let key: HashMap<String, ClassId> = test
        .iter()
        .map(|t| (t.image_id.clone(), t.ground_truth))
        .collect();
    let mock = serve_mock(
        MockConfig::new(MockMode::ExpertEcho, vocab.clone(), key),
        SocketAddr::from(([127, 0, 0, 1], 0)),
    )
    .await
    .unwrap();
    let client = LmmClient::new(endpoint(&mock), CacheHandle::disabled()).unwrap();
    for (item, expert) in test.iter().zip(&experts) {
        let ctx = PromptContext {
            expert: Some(expert),
            ..Default::default()
        };
        let b = poc_core::prompt::build_prompt(
            &PromptStrategy::Poc(PocOptions::names_only(5)),
            item,
            &vocab,
            ctx,
        )
        .unwrap();
        let r = client.query(&b).await.unwrap();
        let first = r.text.lines().nth(1).unwrap();
        assert_eq!(
            first,
            format!("1. {}", vocab.get(expert.top1()).display_name())
        );
    }
    mock.shutdown().await;
}
