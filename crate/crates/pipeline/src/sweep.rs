//! Parameter sweeps: one base config, many rows, one summary table.
//!
//! ```toml
//! output_root = "sweep-out"
//! ks = [1, 3, 5, 7, 10]          # optional shorthand, one row per k
//!
//! [base]                         # a full run config minus output_dir
//! ...
//!
//! [[rows]]
//! name = "no-confidences"
//! set = { strategy = { confidences = false } }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::config::{merge_toml, RunConfig};
use crate::run::{run, write_json};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    pub base: toml::Value,
    pub output_root: PathBuf,
    #[serde(default)]
    pub ks: Vec<usize>,
    #[serde(default)]
    pub rows: Vec<GridRow>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRow {
    pub name: String,
    #[serde(default = "empty_table")]
    pub set: toml::Value,
}

fn empty_table() -> toml::Value {
    toml::Value::Table(Default::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub name: String,
    pub strategy: String,
    pub k: Option<usize>,
    pub mean_accuracy: f64,
    pub expert_mean_accuracy: Option<f64>,
    /// Expert top-k accuracy at this row's k, the ceiling for reranking.
    pub expert_topk: Option<f64>,
    pub routed: usize,
    pub hard_errors: usize,
    pub output_dir: PathBuf,
}

impl GridFile {
    /// Expands `ks` and `rows` into named configs, `ks` rows first.
    pub fn expand(
        &self,
        base_dir: &Path,
        origin: &Path,
    ) -> anyhow::Result<Vec<(String, RunConfig)>> {
        let root = base_dir.join(&self.output_root);
        let mut rows: Vec<GridRow> = self
            .ks
            .iter()
            .map(|&k| {
                let mut strategy = toml::map::Map::new();
                strategy.insert("k".into(), toml::Value::Integer(k as i64));
                if k == 1 {
                    strategy.insert("decision".into(), "select".into());
                }
                let mut set = toml::map::Map::new();
                set.insert("strategy".into(), toml::Value::Table(strategy));
                GridRow {
                    name: format!("k{k}"),
                    set: toml::Value::Table(set),
                }
            })
            .collect();
        rows.extend(self.rows.iter().cloned());
        anyhow::ensure!(
            !rows.is_empty(),
            "{}: the grid has no rows",
            origin.display()
        );

        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::with_capacity(rows.len());
        for row in rows {
            anyhow::ensure!(
                seen.insert(row.name.clone()),
                "duplicate row name {:?}",
                row.name
            );
            anyhow::ensure!(
                !row.name.is_empty()
                    && row
                        .name
                        .chars()
                        .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)),
                "row name {:?} must be a plain file name",
                row.name
            );
            let mut value = self.base.clone();
            merge_toml(&mut value, row.set);
            if let toml::Value::Table(t) = &mut value {
                let dir = root.join(&row.name);
                t.insert(
                    "output_dir".into(),
                    dir.to_string_lossy().into_owned().into(),
                );
            }
            let cfg = RunConfig::from_value(value, base_dir, origin)
                .with_context(|| format!("row {}", row.name))?;
            out.push((row.name, cfg));
        }
        Ok(out)
    }
}

pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub output_root: PathBuf,
}

/// Runs every row in order. Rows share the response cache, so repeated
/// prompts across rows are paid for once.
pub async fn sweep(grid_path: &Path) -> anyhow::Result<SweepOutcome> {
    let text = fs::read_to_string(grid_path)
        .with_context(|| format!("reading {}", grid_path.display()))?;
    let grid: GridFile =
        toml::from_str(&text).with_context(|| format!("parsing {}", grid_path.display()))?;
    let base_dir = grid_path.parent().unwrap_or(Path::new("."));
    let configs = grid.expand(base_dir, grid_path)?;
    for (name, cfg) in &configs {
        cfg.validate().with_context(|| format!("row {name}"))?;
    }
    let output_root = base_dir.join(&grid.output_root);
    let mut rows = Vec::new();
    for (name, cfg) in configs {
        tracing::info!(row = %name, "running");
        let outcome = run(&cfg).await.with_context(|| format!("row {name}"))?;
        let m = &outcome.report.metrics;
        let k = outcome.report.metadata.k;
        rows.push(SweepRow {
            name,
            strategy: outcome.report.metadata.strategy.clone(),
            k,
            mean_accuracy: m.mean_accuracy,
            expert_mean_accuracy: outcome
                .expert_report
                .as_ref()
                .map(|e| e.metrics.mean_accuracy),
            expert_topk: k.and_then(|k| m.topk_accuracy.get(&k).copied()),
            routed: outcome.report.metadata.routed,
            hard_errors: outcome.stats.hard_errors,
            output_dir: cfg.output_dir,
        });
    }
    fs::create_dir_all(&output_root)?;
    write_json(&output_root.join("sweep.json"), &rows)?;
    fs::write(output_root.join("sweep.md"), markdown(&rows))?;
    Ok(SweepOutcome { rows, output_root })
}

pub fn markdown(rows: &[SweepRow]) -> String {
    let f = |x: Option<f64>| {
        x.map(|v| format!("{:.2}", 100.0 * v))
            .unwrap_or_else(|| "-".into())
    };
    let mut s = String::from(
        "| row | strategy | k | mean acc. (%) | expert (%) | expert top-k (%) | routed | failed |\n\
         |---|---|---:|---:|---:|---:|---:|---:|\n",
    );
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
            r.name,
            r.strategy,
            r.k.map(|k| k.to_string()).unwrap_or_else(|| "-".into()),
            f(Some(r.mean_accuracy)),
            f(r.expert_mean_accuracy),
            f(r.expert_topk),
            r.routed,
            r.hard_errors
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const GRID: &str = r#"
output_root = "out"
ks = [1, 5]
[base]
[base.data]
vocab = "v.jsonl"
test = "t.jsonl"
predictions = "p.jsonl"
[base.strategy]
family = "poc"
exemplar_images = false
decision = "rerank"
[base.endpoint]
base_url = "http://127.0.0.1:9/v1"
model_name = "m"
[[rows]]
name = "plain"
set = { strategy = { confidences = false } }
"#;

    #[test]
    fn expands_shorthand_and_rows() {
        let grid: GridFile = toml::from_str(GRID).unwrap();
        let rows = grid
            .expand(Path::new("/g"), Path::new("grid.toml"))
            .unwrap();
        let names: Vec<&str> = rows.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["k1", "k5", "plain"]);
        let k1 = rows[0].1.strategy.poc().unwrap();
        assert_eq!(
            (k1.k, k1.decision),
            (1, poc_core::prompt::DecisionMode::Select)
        );
        let k5 = rows[1].1.strategy.poc().unwrap();
        assert_eq!(
            (k5.k, k5.decision),
            (5, poc_core::prompt::DecisionMode::Rerank)
        );
        assert!(!rows[2].1.strategy.poc().unwrap().confidences);
        assert_eq!(rows[2].1.output_dir, Path::new("/g/out/plain"));
        assert_eq!(rows[2].1.data.vocab, Path::new("/g/v.jsonl"));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let grid: GridFile = toml::from_str(&format!("{GRID}\n[[rows]]\nname = \"k5\"\n")).unwrap();
        assert!(grid.expand(Path::new("."), Path::new("g")).is_err());
    }
}
