use proptest::prelude::*;

use poc_core::parser::{parse, Candidates, ParseMode, ParseStatus};
use poc_core::{ClassId, ExpertPrediction, SpeciesRecord, SpeciesVocabulary};

fn vocab() -> SpeciesVocabulary {
    let names: [(&str, &[&str]); 8] = [
        ("Larus canus", &["Common Gull", "Mew Gull"]),
        ("Larus argentatus", &["Herring Gull"]),
        ("Larus fuscus", &["Lesser Black-backed Gull"]),
        ("Larus marinus", &["Great Black-backed Gull"]),
        ("Chroicocephalus ridibundus", &["Black-headed Gull"]),
        ("Rissa tridactyla", &["Black-legged Kittiwake"]),
        ("Anas platyrhynchos", &["Mallard"]),
        ("Aythya fuligula", &["Tufted Duck"]),
    ];
    SpeciesVocabulary::new(
        "props",
        names
            .iter()
            .enumerate()
            .map(|(i, (s, c))| SpeciesRecord {
                class_id: ClassId(i as u32),
                scientific_name: s.to_string(),
                common_names: c.iter().map(|x| x.to_string()).collect(),
                taxonomy: vec![],
            })
            .collect(),
    )
    .unwrap()
}

fn expert_over(order: &[u32]) -> ExpertPrediction {
    let n = order.len() as f64;
    ExpertPrediction {
        image_id: "x".into(),
        expert_tag: "e".into(),
        entries: order
            .iter()
            .enumerate()
            .map(|(i, c)| (ClassId(*c), (n - i as f64) / (n * (n + 1.0) / 2.0)))
            .collect(),
    }
}

/// Fragments that stress the parser: names in odd casing, accents, markers,
/// numbering and noise.
fn fragment(v: &SpeciesVocabulary) -> impl Strategy<Value = String> {
    let names: Vec<String> = v
        .records()
        .iter()
        .flat_map(|r| {
            std::iter::once(r.scientific_name.clone()).chain(r.common_names.iter().cloned())
        })
        .collect();
    prop_oneof![
        proptest::sample::select(names.clone()),
        proptest::sample::select(names).prop_map(|n| n.to_uppercase().replace('a', "á")),
        Just("<ranking>".to_string()),
        Just("</ranking>".to_string()),
        Just("\n".to_string()),
        Just("1. ".to_string()),
        Just("Larus".to_string()),
        Just("Gull".to_string()),
        "\\PC{0,12}",
        "[ -~]{0,20}",
    ]
}

fn response(v: &SpeciesVocabulary) -> impl Strategy<Value = String> {
    proptest::collection::vec(fragment(v), 0..12).prop_map(|parts| parts.join(" "))
}

fn candidates() -> impl Strategy<Value = Vec<u32>> {
    (2usize..=8).prop_flat_map(|k| {
        Just((0..8u32).collect::<Vec<_>>())
            .prop_shuffle()
            .prop_map(move |v| v[..k].to_vec())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn rerank_is_total(order in candidates(), text in response(&vocab())) {
        let v = vocab();
        let e = expert_over(&order);
        let cands: Vec<ClassId> = order.iter().map(|c| ClassId(*c)).collect();
        let p = parse("x", &text, Candidates::Classes(&cands), &v, Some(&e), ParseMode::Rerank);
        let mut got = p.ranking.clone();
        got.sort();
        let mut want = cands.clone();
        want.sort();
        prop_assert_eq!(got, want);
        prop_assert_eq!(p.match_quality.len(), p.ranking.len());
        if p.parse_status == ParseStatus::FallbackToExpert {
            prop_assert_eq!(&p.ranking, &cands);
        }
    }

    #[test]
    fn select_names_one_candidate(order in candidates(), text in response(&vocab())) {
        let v = vocab();
        let e = expert_over(&order);
        let cands: Vec<ClassId> = order.iter().map(|c| ClassId(*c)).collect();
        let p = parse("x", &text, Candidates::Classes(&cands), &v, Some(&e), ParseMode::Select);
        prop_assert_eq!(p.ranking.len(), 1);
        prop_assert!(cands.contains(&p.ranking[0]));
    }

    #[test]
    fn garbage_falls_back_to_expert(order in candidates(), text in "[0-9 .,;:!?()<>/\\-\n]{0,80}") {
        let v = vocab();
        let e = expert_over(&order);
        let cands: Vec<ClassId> = order.iter().map(|c| ClassId(*c)).collect();
        for mode in [ParseMode::Rerank, ParseMode::Select] {
            let p = parse("x", &text, Candidates::Classes(&cands), &v, Some(&e), mode);
            prop_assert_eq!(p.parse_status, ParseStatus::FallbackToExpert);
            prop_assert_eq!(p.top1(), Some(e.top1()));
        }
    }

    #[test]
    fn clean_ranking_block_round_trips(order in candidates(), perm_seed in any::<u64>()) {
        let v = vocab();
        let e = expert_over(&order);
        let cands: Vec<ClassId> = order.iter().map(|c| ClassId(*c)).collect();
        let mut answer = cands.clone();
        // Deterministic rotation keeps the test independent of the parser's order.
        answer.rotate_left((perm_seed % cands.len() as u64) as usize);
        let body: Vec<String> = answer
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}. {}", i + 1, v.get(*c).display_name()))
            .collect();
        let text = format!("Reasoning...\n<ranking>\n{}\n</ranking>", body.join("\n"));
        let p = parse("x", &text, Candidates::Classes(&cands), &v, Some(&e), ParseMode::Rerank);
        prop_assert_eq!(p.parse_status, ParseStatus::MarkerBlock);
        prop_assert_eq!(p.ranking, answer);
    }
}
