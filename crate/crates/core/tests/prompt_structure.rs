mod common;

use poc_core::prompt::{
    build_prompt, DecisionMode, Part, PocOptions, PromptBuilder, PromptContext, PromptError,
    PromptStrategy,
};
use poc_core::{ClassId, ExpertPrediction};

fn ctx(g: &common::Gulls, i: usize) -> PromptContext<'_> {
    PromptContext {
        expert: Some(&g.experts[i]),
        exemplars: Some(&g.exemplars),
        attributes: Some(&g.attributes),
    }
}

fn candidate_lines(text: &str) -> Vec<&str> {
    text.lines()
        .filter(|l| l.starts_with("Candidate "))
        .collect()
}

#[test]
fn open_vocab_is_the_bare_question_plus_one_image() {
    let g = common::gulls();
    let b = build_prompt(
        &PromptStrategy::OpenVocab,
        &g.test[1],
        &g.vocab,
        PromptContext::default(),
    )
    .unwrap();
    assert_eq!(b.image_count(), 1);
    let template = include_str!("../templates/open_vocab.txt").trim_end();
    assert_eq!(b.user_text(), format!("{template}\nTest image:"));
    assert!(matches!(b.user_parts.last(), Some(Part::Image(_))));
    assert!(b.candidates.is_empty());
}

#[test]
fn names_only_top5() {
    let g = common::gulls();
    let s = PromptStrategy::Poc(PocOptions::names_only(5));
    let b = build_prompt(&s, &g.test[0], &g.vocab, ctx(&g, 0)).unwrap();
    assert_eq!(candidate_lines(&b.user_text()).len(), 5);
    assert_eq!(b.image_count(), 1);
    assert!(!b.user_text().contains("confidence"));
}

#[test]
fn two_candidates_with_images_and_confidences() {
    let g = common::gulls();
    let mut o = PocOptions::full();
    o.k = 2;
    let b = build_prompt(&PromptStrategy::Poc(o), &g.test[0], &g.vocab, ctx(&g, 0)).unwrap();
    let text = b.user_text();
    assert!(text.contains("0.6200") && text.contains("0.2100"));
    assert!(text.contains("Re-rank all 2 candidate species"));
    assert_eq!(b.image_count(), 3);
    // Each grid directly follows its candidate's text block; the test image is last.
    let kinds: Vec<bool> = b
        .user_parts
        .iter()
        .map(|p| matches!(p, Part::Image(_)))
        .collect();
    assert_eq!(kinds, [false, true, false, true, false, true]);
    match &b.user_parts[2] {
        Part::Text(t) => assert!(t.starts_with("Candidate 2: Larus argentatus")),
        Part::Image(_) => unreachable!(),
    }
}

#[test]
fn candidate_order_follows_expert() {
    let g = common::gulls();
    for (i, e) in g.experts.iter().enumerate() {
        for k in 1..=6 {
            let s = PromptStrategy::Poc(PocOptions::names_only(k));
            let b = build_prompt(&s, &g.test[i], &g.vocab, ctx(&g, i)).unwrap();
            let expected: Vec<ClassId> = e.top_classes(k).collect();
            assert_eq!(b.candidates, expected);
            let lines = candidate_lines(&b.user_text())
                .into_iter()
                .map(String::from)
                .collect::<Vec<_>>();
            for (line, c) in lines.iter().zip(&expected) {
                assert!(line.contains(&g.vocab.get(*c).display_name()));
            }
        }
    }
}

#[test]
fn zs_icl_lists_every_class_in_id_order() {
    let g = common::gulls();
    let b = build_prompt(
        &PromptStrategy::ZsIclAllNames,
        &g.test[0],
        &g.vocab,
        PromptContext::default(),
    )
    .unwrap();
    let text = b.user_text();
    let listed: Vec<&str> = text
        .lines()
        .filter(|l| {
            l.split_once(". ")
                .is_some_and(|(n, _)| n.parse::<usize>().is_ok())
        })
        .filter(|l| !l.contains('<'))
        .collect();
    assert_eq!(listed.len(), g.vocab.len());
    for (i, r) in g.vocab.records().iter().enumerate() {
        assert_eq!(listed[i], format!("{}. {}", i + 1, r.display_name()));
    }
}

#[test]
fn confidences_change_only_candidate_lines() {
    let g = common::gulls();
    for images in [false, true] {
        for decision in [DecisionMode::Select, DecisionMode::Rerank] {
            let base = PocOptions {
                exemplar_images: images,
                confidences: false,
                taxonomy: true,
                text_attributes: true,
                decision,
                k: 4,
            };
            let with = PocOptions {
                confidences: true,
                ..base.clone()
            };
            let a =
                build_prompt(&PromptStrategy::Poc(base), &g.test[1], &g.vocab, ctx(&g, 1)).unwrap();
            let b =
                build_prompt(&PromptStrategy::Poc(with), &g.test[1], &g.vocab, ctx(&g, 1)).unwrap();
            assert_eq!(a.user_parts.len(), b.user_parts.len());
            let (ta, tb) = (a.user_text(), b.user_text());
            let (la, lb): (Vec<&str>, Vec<&str>) = (ta.lines().collect(), tb.lines().collect());
            assert_eq!(la.len(), lb.len());
            let mut changed = 0;
            for (x, y) in la.iter().zip(&lb) {
                if x != y {
                    changed += 1;
                    assert!(x.starts_with("Candidate "));
                    let suffix = y.strip_prefix(x).expect("confidence is a pure suffix");
                    assert!(suffix.starts_with(" (confidence: "));
                }
            }
            assert_eq!(changed, 4);
        }
    }
}

#[test]
fn identical_inputs_identical_hash() {
    let g = common::gulls();
    let s = PromptStrategy::Poc(PocOptions::full());
    let a = PromptBuilder::default()
        .build(&s, &g.test[0], &g.vocab, ctx(&g, 0))
        .unwrap();
    let b = PromptBuilder::default()
        .build(&s, &g.test[0], &g.vocab, ctx(&g, 0))
        .unwrap();
    assert_eq!(a.content_hash(), b.content_hash());
    assert_eq!(a, b);
    let c = PromptBuilder::default()
        .build(&s, &g.test[1], &g.vocab, ctx(&g, 1))
        .unwrap();
    assert_ne!(a.content_hash(), c.content_hash());
}

#[test]
fn preconditions() {
    let g = common::gulls();
    let full = PromptStrategy::Poc(PocOptions::full());
    assert!(matches!(
        build_prompt(&full, &g.test[0], &g.vocab, PromptContext::default()),
        Err(PromptError::MissingExpert)
    ));
    let short = ExpertPrediction {
        entries: g.experts[0].entries[..3].to_vec(),
        ..g.experts[0].clone()
    };
    let c = PromptContext {
        expert: Some(&short),
        ..ctx(&g, 0)
    };
    assert!(matches!(
        build_prompt(&full, &g.test[0], &g.vocab, c),
        Err(PromptError::TooFewPredictions { have: 3, need: 5 })
    ));
    let mut partial = g.exemplars.clone();
    partial.remove(&ClassId(1));
    let c = PromptContext {
        exemplars: Some(&partial),
        ..ctx(&g, 0)
    };
    assert!(matches!(
        build_prompt(&full, &g.test[0], &g.vocab, c),
        Err(PromptError::MissingExemplars(ClassId(1)))
    ));
}
