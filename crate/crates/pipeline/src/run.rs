//! One run: load, route, prompt, query, parse, score, write artifacts.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use poc_client::{CacheHandle, LmmClient};
use poc_core::data_model::{
    load_attributes, load_exemplars, load_predictions, load_test_items, load_vocabulary,
};
use poc_core::eval::{
    confusion_diff, evaluate, expert_top1, threshold_select, topk_curve, EvalReport,
    FinalPredictions, Metrics, ReportMetadata,
};
use poc_core::parser::{
    open_vocab_correct, parse, Candidates, MatchQuality, ParseMode, ParseStatus,
};
use poc_core::prompt::{DecisionMode, PromptBuilder, PromptContext, PromptStrategy, TemplateSet};
use poc_core::sampler::sample_few_shot;
use poc_core::{ClassId, ExemplarSet, ExpertPrediction, SpeciesVocabulary, TestItem};

use crate::config::RunConfig;
use crate::report;

/// Expert top-k values recorded in every report.
pub const TOPK_GRID: [usize; 6] = [1, 3, 5, 7, 10, 15];

pub struct Dataset {
    pub vocab: SpeciesVocabulary,
    pub test: Vec<TestItem>,
    pub experts: Option<Vec<ExpertPrediction>>,
    pub exemplars: Option<BTreeMap<ClassId, ExemplarSet>>,
    pub attributes: Option<BTreeMap<ClassId, Vec<String>>>,
}

impl Dataset {
    pub fn load(cfg: &RunConfig) -> anyhow::Result<Self> {
        let d = &cfg.data;
        let vocab = load_vocabulary(&d.vocab)?;
        let test = load_test_items(&d.test, &vocab)?;
        let experts = d
            .predictions
            .as_ref()
            .map(|p| load_predictions(p, &vocab))
            .transpose()?;
        let exemplars = match (&d.exemplars, &d.train, d.shots) {
            (Some(p), _, _) => Some(load_exemplars(p, &vocab)?),
            (None, Some(train), Some(m)) => {
                let items = load_test_items(train, &vocab)?;
                let sets = sample_few_shot(&items, &vocab, m, cfg.seed)?;
                Some(sets.into_iter().map(|s| (s.class_id, s)).collect())
            }
            _ => None,
        };
        let attributes = d
            .attributes
            .as_ref()
            .map(|p| load_attributes(p, &vocab))
            .transpose()?;
        Ok(Self {
            vocab,
            test,
            experts,
            exemplars,
            attributes,
        })
    }
}

/// Per-item outcome, one line of `parsed.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub image_id: String,
    pub ground_truth: ClassId,
    pub routed: bool,
    pub final_prediction: Option<ClassId>,
    #[serde(default)]
    pub parse_status: Option<ParseStatus>,
    #[serde(default)]
    pub ranking: Vec<ClassId>,
    #[serde(default)]
    pub match_quality: Vec<MatchQuality>,
    #[serde(default)]
    pub response: Option<String>,
    #[serde(default)]
    pub error: Option<String>,
}

/// Volatile run accounting, kept out of `report.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub routed: usize,
    pub cache_hits: usize,
    pub http_attempts: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub hard_errors: usize,
    pub wall_ms: u64,
}

pub struct RunOutcome {
    pub report: EvalReport,
    pub expert_report: Option<EvalReport>,
    pub answers: Vec<AnswerRecord>,
    pub stats: RunStats,
}

fn parse_setup(strategy: &PromptStrategy) -> (ParseMode, bool) {
    match strategy {
        PromptStrategy::Poc(o) => match o.decision {
            DecisionMode::Select => (ParseMode::Select, true),
            DecisionMode::Rerank => (ParseMode::Rerank, true),
        },
        PromptStrategy::ZsIclAllNames => (ParseMode::Select, false),
        PromptStrategy::OpenVocab
        | PromptStrategy::OpenVocabCot
        | PromptStrategy::OpenVocabVerify => (ParseMode::OpenVocab, false),
    }
}

fn with_topk(
    mut m: Metrics,
    experts: Option<&[ExpertPrediction]>,
    test: &[TestItem],
    classes: usize,
    k: Option<usize>,
) -> anyhow::Result<Metrics> {
    if let Some(e) = experts {
        let ks: BTreeSet<usize> = TOPK_GRID
            .iter()
            .copied()
            .filter(|&g| g <= classes)
            .chain(k)
            .collect();
        m.topk_accuracy = topk_curve(e, test, ks)?;
    }
    Ok(m)
}

/// Runs `cfg` end to end and writes its artifacts to `cfg.output_dir`.
pub async fn run(cfg: &RunConfig) -> anyhow::Result<RunOutcome> {
    let started = Instant::now();
    cfg.validate()?;
    let templates = match &cfg.templates_dir {
        Some(dir) => TemplateSet::from_dir(dir)?,
        None => TemplateSet::default(),
    };
    let canonical = cfg.canonical(&templates)?;
    let fingerprint = cfg.fingerprint(&templates)?;
    let data = Dataset::load(cfg)?;
    let by_id: HashMap<&str, &ExpertPrediction> = data
        .experts
        .iter()
        .flatten()
        .map(|e| (e.image_id.as_str(), e))
        .collect();
    if data.experts.is_some() {
        if let Some(missing) = data
            .test
            .iter()
            .find(|t| !by_id.contains_key(t.image_id.as_str()))
        {
            bail!("no expert prediction for test image {}", missing.image_id);
        }
    }
    let k = cfg.strategy.poc().map(|o| o.k);
    if let (Some(k), Some(experts)) = (k, &data.experts) {
        let fewest = experts.iter().map(|e| e.entries.len()).min().unwrap_or(0);
        if k > fewest {
            bail!("k={k} exceeds the shortest expert prediction list ({fewest} entries)");
        }
    }

    let routed: BTreeSet<String> = match cfg.threshold {
        Some(t) => threshold_select(data.experts.as_deref().unwrap_or_default(), t),
        None => data.test.iter().map(|t| t.image_id.clone()).collect(),
    };
    let routed_items: Vec<&TestItem> = data
        .test
        .iter()
        .filter(|t| routed.contains(&t.image_id))
        .collect();

    // Every prompt is built before the first request, so a data problem
    // surfaces without spending anything.
    let builder = PromptBuilder::new(templates);
    let mut bundles = Vec::with_capacity(routed_items.len());
    for item in &routed_items {
        let ctx = PromptContext {
            expert: by_id.get(item.image_id.as_str()).copied(),
            exemplars: data.exemplars.as_ref(),
            attributes: data.attributes.as_ref(),
        };
        let bundle = builder
            .build(&cfg.strategy, item, &data.vocab, ctx)
            .with_context(|| format!("building prompt for {}", item.image_id))?;
        bundles.push(bundle);
    }
    if cfg.dump_prompts {
        let dir = cfg.output_dir.join("prompts");
        fs::create_dir_all(&dir)?;
        for b in &bundles {
            fs::write(
                dir.join(format!("{}.txt", b.provenance.image_id)),
                b.render_canonical(),
            )?;
        }
    }

    let default_cache = cfg
        .cache_dir
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("cache"));
    let client = LmmClient::new(
        cfg.endpoint.clone(),
        CacheHandle::from_env_or(default_cache),
    )?;
    let responses = if bundles.is_empty() {
        Vec::new()
    } else {
        client.run_batch(&bundles).await
    };

    let (mode, fallback_to_expert) = parse_setup(&cfg.strategy);
    let mut stats = RunStats {
        routed: bundles.len(),
        ..Default::default()
    };
    let truth_of: HashMap<&str, ClassId> = data
        .test
        .iter()
        .map(|t| (t.image_id.as_str(), t.ground_truth))
        .collect();
    let mut answers_by_id: HashMap<String, AnswerRecord> = HashMap::new();
    for (bundle, result) in bundles.iter().zip(responses) {
        let item_id = &bundle.provenance.image_id;
        let expert = by_id.get(item_id.as_str()).copied();
        let truth = truth_of[item_id.as_str()];
        let mut record = AnswerRecord {
            image_id: item_id.clone(),
            ground_truth: truth,
            routed: true,
            final_prediction: None,
            parse_status: None,
            ranking: Vec::new(),
            match_quality: Vec::new(),
            response: None,
            error: None,
        };
        match result {
            Ok(resp) => {
                stats.cache_hits += resp.served_from_cache as usize;
                stats.http_attempts += resp.attempt_count as u64;
                stats.prompt_tokens += resp.usage.prompt_tokens;
                stats.completion_tokens += resp.usage.completion_tokens;
                let candidates = if bundle.candidates.is_empty() {
                    Candidates::AllClasses
                } else {
                    Candidates::Classes(&bundle.candidates)
                };
                let parsed = parse(
                    item_id,
                    &resp.text,
                    candidates,
                    &data.vocab,
                    expert.filter(|_| fallback_to_expert),
                    mode,
                );
                record.final_prediction = if mode == ParseMode::OpenVocab {
                    // Free answers score by whether the true species is named
                    // anywhere; a wrong answer keeps the parser's pick for the
                    // confusion matrix.
                    if open_vocab_correct(&resp.text, data.vocab.get(truth)) {
                        Some(truth)
                    } else {
                        parsed.top1().filter(|c| *c != truth)
                    }
                } else {
                    parsed.top1()
                };
                record.parse_status = Some(parsed.parse_status);
                record.ranking = parsed.ranking;
                record.match_quality = parsed.match_quality;
                record.response = Some(resp.text);
            }
            Err(e) => {
                tracing::error!(image_id = %item_id, "request failed: {e}");
                stats.hard_errors += 1;
                record.error = Some(e.to_string());
            }
        }
        answers_by_id.insert(item_id.clone(), record);
    }

    let mut answers = Vec::with_capacity(data.test.len());
    let mut finals: FinalPredictions = BTreeMap::new();
    for item in &data.test {
        let record = answers_by_id
            .remove(&item.image_id)
            .unwrap_or_else(|| AnswerRecord {
                image_id: item.image_id.clone(),
                ground_truth: item.ground_truth,
                routed: false,
                final_prediction: by_id.get(item.image_id.as_str()).map(|e| e.top1()),
                parse_status: None,
                ranking: Vec::new(),
                match_quality: Vec::new(),
                response: None,
                error: None,
            });
        finals.insert(item.image_id.clone(), record.final_prediction);
        answers.push(record);
    }

    let mut parse_status: BTreeMap<String, usize> = BTreeMap::new();
    for a in &answers {
        if let Some(s) = a.parse_status {
            let key = serde_json::to_value(s)?
                .as_str()
                .unwrap_or_default()
                .to_string();
            *parse_status.entry(key).or_default() += 1;
        }
    }

    let experts = data.experts.as_deref();
    let metrics = with_topk(
        evaluate(&finals, &data.test, &data.vocab)?,
        experts,
        &data.test,
        data.vocab.len(),
        k,
    )?;
    let report = EvalReport {
        metrics,
        metadata: ReportMetadata {
            strategy: cfg.strategy.label(),
            model: Some(cfg.endpoint.model_name.clone()),
            k,
            seed: Some(cfg.seed),
            threshold: cfg.threshold,
            dataset: data.vocab.dataset_name.clone(),
            items: data.test.len(),
            routed: stats.routed,
            fingerprint: fingerprint.clone(),
            config: canonical.clone(),
            parse_status,
            hard_errors: stats.hard_errors,
        },
    };
    let expert_report = match experts {
        Some(e) => {
            let m = with_topk(
                evaluate(&expert_top1(e), &data.test, &data.vocab)?,
                experts,
                &data.test,
                data.vocab.len(),
                k,
            )?;
            Some(EvalReport {
                metrics: m,
                metadata: ReportMetadata {
                    strategy: "expert_top1".into(),
                    model: None,
                    k,
                    seed: Some(cfg.seed),
                    threshold: None,
                    dataset: data.vocab.dataset_name.clone(),
                    items: data.test.len(),
                    routed: 0,
                    fingerprint,
                    config: canonical,
                    parse_status: BTreeMap::new(),
                    hard_errors: 0,
                },
            })
        }
        None => None,
    };
    stats.wall_ms = started.elapsed().as_millis() as u64;

    let outcome = RunOutcome {
        report,
        expert_report,
        answers,
        stats,
    };
    write_artifacts(&cfg.output_dir, &outcome, Some(&data.vocab), cfg.plots)?;
    Ok(outcome)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_artifacts(
    dir: &Path,
    outcome: &RunOutcome,
    vocab: Option<&SpeciesVocabulary>,
    plots: bool,
) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("report.json"), &outcome.report)?;
    fs::write(
        dir.join("confusion.csv"),
        outcome.report.metrics.confusion.to_csv(),
    )?;
    if let Some(expert) = &outcome.expert_report {
        write_json(&dir.join("expert_report.json"), expert)?;
        let diff = confusion_diff(&expert.metrics, &outcome.report.metrics)?;
        fs::write(dir.join("diff.csv"), diff.to_csv())?;
    }
    fs::write(
        dir.join("parsed.jsonl"),
        poc_core::data_model::to_jsonl(&outcome.answers),
    )?;
    write_json(&dir.join("run_stats.json"), &outcome.stats)?;
    report::write_human_artifacts(
        dir,
        &outcome.report,
        outcome.expert_report.as_ref(),
        vocab,
        plots,
    )?;
    Ok(())
}
