use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use poc_client::mock::{serve_mock, MockConfig, MockMode};
use poc_core::data_model::{load_test_items, load_vocabulary, parse_jsonl, write_jsonl};
use poc_core::sampler::sample_few_shot;
use poc_core::{ClassId, SpeciesVocabulary};
use poc_pipeline::config::{ConfigError, RunConfig};
use poc_pipeline::synth::{generate, SynthSpec};
use poc_pipeline::{report, run, sweep};

#[derive(Parser)]
#[command(
    name = "poc",
    version,
    about = "Post-hoc correction of expert species classifiers with a multimodal model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration end to end.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run every row of a sweep grid.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
    },
    /// Draw few-shot exemplars from a training manifest.
    Sample {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        shots: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a deterministic stand-in for the model endpoint.
    Mock {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        vocab: PathBuf,
        /// Answer key for oracle mode: a test manifest, or JSONL of
        /// `{"image_id", "class_id"}`.
        #[arg(long)]
        key: Option<PathBuf>,
        /// JSONL of `{"image_id", "text"}` for canned mode.
        #[arg(long)]
        canned: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        p: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8089)]
        port: u16,
        #[arg(long, default_value_t = 0)]
        latency_ms: u64,
    },
    /// Re-render report.md (and plots) from a finished run directory.
    Report {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        plots: bool,
    },
    /// Generate a synthetic dataset with a controllable expert.
    Synth {
        #[arg(long, default_value_t = 20)]
        classes: usize,
        #[arg(long, default_value_t = 500)]
        items: usize,
        #[arg(long, default_value_t = 2)]
        shots: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Oracle,
    Echo,
    Fixed,
    Canned,
}

#[derive(Deserialize)]
struct CannedLine {
    image_id: String,
    text: String,
}

/// One answer-key line: a test manifest line, or just `{"image_id", "class_id"}`.
#[derive(Deserialize)]
struct KeyLine {
    image_id: String,
    #[serde(alias = "class_id")]
    ground_truth: ClassId,
}

fn answer_key(
    vocab: &Path,
    key: Option<&Path>,
) -> anyhow::Result<(SpeciesVocabulary, HashMap<String, ClassId>)> {
    let vocab = load_vocabulary(vocab)?;
    let mut out = HashMap::new();
    if let Some(p) = key {
        for (line, k) in parse_jsonl::<KeyLine>(p)? {
            anyhow::ensure!(
                vocab.contains(k.ground_truth),
                "{}:{line}: class {} is not in the vocabulary",
                p.display(),
                k.ground_truth
            );
            out.insert(k.image_id, k.ground_truth);
        }
    }
    Ok((vocab, out))
}

async fn mock_command(cmd: Command) -> anyhow::Result<()> {
    let Command::Mock {
        mode,
        vocab,
        key,
        canned,
        p,
        seed,
        port,
        latency_ms,
    } = cmd
    else {
        unreachable!()
    };
    let (vocab, key) = answer_key(&vocab, key.as_deref())?;
    let mode = match mode {
        Mode::Oracle => {
            anyhow::ensure!(!key.is_empty(), "oracle mode needs --key");
            MockMode::OracleIfInTopK { p, seed }
        }
        Mode::Echo => MockMode::ExpertEcho,
        Mode::Fixed => MockMode::FixedRank { seed },
        Mode::Canned => {
            let path = canned.context("canned mode needs --canned")?;
            let lines = parse_jsonl::<CannedLine>(&path)?;
            MockMode::CannedText(Arc::new(
                lines
                    .into_iter()
                    .map(|(_, l)| (l.image_id, l.text))
                    .collect(),
            ))
        }
    };
    let mut cfg = MockConfig::new(mode, vocab, key);
    cfg.latency = Duration::from_millis(latency_ms);
    let handle = serve_mock(cfg, SocketAddr::from(([127, 0, 0, 1], port))).await?;
    println!("mock endpoint listening at {}", handle.base_url());
    tokio::signal::ctrl_c().await?;
    eprintln!("{} requests served", handle.counters().requests());
    handle.shutdown().await;
    Ok(())
}

async fn dispatch(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Run { config } => {
            let cfg = RunConfig::from_path(&config)?;
            cfg.validate()?;
            let outcome = run(&cfg).await?;
            let m = &outcome.report.metrics;
            println!(
                "{}: mean accuracy {:.2}%{} -> {}",
                outcome.report.metadata.strategy,
                100.0 * m.mean_accuracy,
                outcome
                    .expert_report
                    .as_ref()
                    .map(|e| format!(" (expert {:.2}%)", 100.0 * e.metrics.mean_accuracy))
                    .unwrap_or_default(),
                cfg.output_dir.display()
            );
            if outcome.stats.hard_errors > 0 {
                eprintln!("{} items failed after retries", outcome.stats.hard_errors);
                return Ok(ExitCode::from(1));
            }
        }
        Command::Sweep { grid } => {
            let outcome = sweep::sweep(&grid).await?;
            print!("{}", sweep::markdown(&outcome.rows));
            if outcome.rows.iter().any(|r| r.hard_errors > 0) {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Sample {
            vocab,
            train,
            shots,
            seed,
            out,
        } => {
            let vocab = load_vocabulary(&vocab)?;
            let items = load_test_items(&train, &vocab)?;
            let sets = sample_few_shot(&items, &vocab, shots, seed)?;
            write_jsonl(&out, &sets)?;
            println!("wrote {} exemplar sets to {}", sets.len(), out.display());
        }
        cmd @ Command::Mock { .. } => mock_command(cmd).await?,
        Command::Report { from, vocab, plots } => {
            let vocab = vocab.map(|p| load_vocabulary(&p)).transpose()?;
            report::rerender(&from, vocab.as_ref(), plots)?;
        }
        Command::Synth {
            classes,
            items,
            shots,
            seed,
            out,
        } => {
            let spec = SynthSpec {
                classes,
                items,
                shots,
                seed,
                ..Default::default()
            };
            generate(&spec, &out)?;
            println!(
                "wrote a {classes}-class synthetic dataset to {}",
                out.display()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match dispatch(Cli::parse().command).await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
