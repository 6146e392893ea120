//! Human-readable artifacts: `report.md` and optional PNG plots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};

use poc_core::eval::{binned_improvement, decile_bins, BinRow, EvalReport};
use poc_core::prompt::stitch::{draw_text, LINE_HEIGHT};
use poc_core::SpeciesVocabulary;

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn opt_pct(x: Option<f64>) -> String {
    x.map(pct).unwrap_or_else(|| "-".into())
}

pub fn markdown(
    report: &EvalReport,
    expert: Option<&EvalReport>,
    vocab: Option<&SpeciesVocabulary>,
) -> String {
    let m = &report.metrics;
    let meta = &report.metadata;
    let mut s = String::new();
    let _ = writeln!(s, "# {} on {}\n", meta.strategy, meta.dataset);
    let _ = writeln!(
        s,
        "Model `{}`, {} test items, {} routed to the model, seed {}{}.\n",
        meta.model.as_deref().unwrap_or("-"),
        meta.items,
        meta.routed,
        meta.seed.unwrap_or_default(),
        meta.threshold
            .map(|t| format!(", threshold {t}"))
            .unwrap_or_default(),
    );
    let _ = writeln!(
        s,
        "| method | mean acc. (%) | micro acc. (%) |\n|---|---:|---:|"
    );
    if let Some(e) = expert {
        let _ = writeln!(
            s,
            "| expert top-1 | {} | {} |",
            pct(e.metrics.mean_accuracy),
            pct(e.metrics.micro_accuracy)
        );
    }
    let _ = writeln!(
        s,
        "| {} | {} | {} |\n",
        meta.strategy,
        pct(m.mean_accuracy),
        pct(m.micro_accuracy)
    );

    if !m.topk_accuracy.is_empty() {
        let ks: Vec<String> = m.topk_accuracy.keys().map(|k| format!("k={k}")).collect();
        let vals: Vec<String> = m.topk_accuracy.values().map(|v| pct(*v)).collect();
        let _ = writeln!(s, "Expert top-k accuracy (%):\n");
        let _ = writeln!(
            s,
            "| {} |\n|{}\n| {} |\n",
            ks.join(" | "),
            "---:|".repeat(ks.len()),
            vals.join(" | ")
        );
    }

    if let Some(e) = expert {
        if let Ok(rows) = binned_improvement(&e.metrics, m, &decile_bins()) {
            let _ = writeln!(s, "By expert per-class accuracy:\n");
            let _ = writeln!(s, "| bin | classes | expert (%) | after (%) | change (pp) |\n|---|---:|---:|---:|---:|");
            for r in &rows {
                let change = match (r.mean_before, r.mean_after) {
                    (Some(b), Some(a)) => format!("{:+.2}", 100.0 * (a - b)),
                    _ => "-".into(),
                };
                let _ = writeln!(
                    s,
                    "| [{:.1}, {:.1}{} | {} | {} | {} | {} |",
                    r.bin.lo,
                    r.bin.hi,
                    if r.bin.hi >= 1.0 { "]" } else { ")" },
                    r.classes,
                    opt_pct(r.mean_before),
                    opt_pct(r.mean_after),
                    change
                );
            }
            s.push('\n');
        }
    }

    if !meta.parse_status.is_empty() || meta.hard_errors > 0 {
        let _ = writeln!(s, "Model answers:\n\n| outcome | items |\n|---|---:|");
        for (k, v) in &meta.parse_status {
            let _ = writeln!(s, "| {k} | {v} |");
        }
        if meta.hard_errors > 0 {
            let _ = writeln!(s, "| request failed | {} |", meta.hard_errors);
        }
        s.push('\n');
    }

    let _ = writeln!(s, "Per class:\n");
    let _ = writeln!(
        s,
        "| class | n | expert (%) | after (%) |\n|---|---:|---:|---:|"
    );
    for (c, acc) in &m.per_class_accuracy {
        let name = vocab
            .and_then(|v| v.try_get(*c))
            .map(|r| r.display_name())
            .unwrap_or_else(|| c.to_string());
        let before = expert.and_then(|e| e.metrics.per_class_accuracy.get(c).copied());
        let _ = writeln!(
            s,
            "| {name} | {} | {} | {} |",
            m.n_per_class.get(c).copied().unwrap_or_default(),
            opt_pct(before),
            pct(*acc)
        );
    }
    let _ = writeln!(s, "\nFingerprint `{}`", meta.fingerprint);
    s
}

pub fn write_human_artifacts(
    dir: &Path,
    report: &EvalReport,
    expert: Option<&EvalReport>,
    vocab: Option<&SpeciesVocabulary>,
    plots: bool,
) -> anyhow::Result<()> {
    fs::write(dir.join("report.md"), markdown(report, expert, vocab))?;
    if plots {
        if !report.metrics.topk_accuracy.is_empty() {
            accuracy_vs_k(report).save(dir.join("accuracy_vs_k.png"))?;
        }
        if let Some(e) = expert {
            let rows = binned_improvement(&e.metrics, &report.metrics, &decile_bins())?;
            binned_bars(&rows).save(dir.join("binned.png"))?;
        }
    }
    Ok(())
}

const W: u32 = 640;
const H: u32 = 400;
const MARGIN: u32 = 48;
const AXIS: Rgb<u8> = Rgb([0, 0, 0]);
const BLUE: Rgb<u8> = Rgb([31, 119, 180]);
const ORANGE: Rgb<u8> = Rgb([255, 127, 14]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    for i in 0..=10 {
        let y = plot_y(i as f64 / 10.0);
        for x in MARGIN..W - MARGIN / 2 {
            img.put_pixel(x, y, GRID);
        }
        if i % 5 == 0 {
            draw_text(
                &mut img,
                2,
                y.saturating_sub(LINE_HEIGHT / 2),
                &format!("{}", i * 10),
            );
        }
    }
    for y in MARGIN / 2..=H - MARGIN {
        img.put_pixel(MARGIN, y, AXIS);
    }
    for x in MARGIN..W - MARGIN / 2 {
        img.put_pixel(x, H - MARGIN, AXIS);
    }
    img
}

fn plot_y(v: f64) -> u32 {
    let top = MARGIN / 2;
    let bottom = H - MARGIN;
    bottom - ((bottom - top) as f64 * v.clamp(0.0, 1.0)).round() as u32
}

fn line(img: &mut RgbImage, (x0, y0): (u32, u32), (x1, y1): (u32, u32), color: Rgb<u8>) {
    let steps = x0.abs_diff(x1).max(y0.abs_diff(y1)).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = (x0 as f64 + t * (x1 as f64 - x0 as f64)).round() as u32;
        let y = (y0 as f64 + t * (y1 as f64 - y0 as f64)).round() as u32;
        for (dx, dy) in [(0, 0), (1, 0), (0, 1)] {
            if x + dx < W && y + dy < H {
                img.put_pixel(x + dx, y + dy, color);
            }
        }
    }
}

fn rect(img: &mut RgbImage, x0: u32, x1: u32, y0: u32, y1: u32, color: Rgb<u8>) {
    for x in x0..x1.min(W) {
        for y in y0..y1.min(H) {
            img.put_pixel(x, y, color);
        }
    }
}

/// Expert top-k curve in blue, the corrected accuracy as an orange level.
pub fn accuracy_vs_k(report: &EvalReport) -> RgbImage {
    let mut img = canvas();
    let curve = &report.metrics.topk_accuracy;
    let n = curve.len().max(2) as u32;
    let x_of = |i: u32| MARGIN + 16 + i * (W - MARGIN * 2 - 16) / (n - 1);
    let pts: Vec<(u32, u32)> = curve
        .values()
        .enumerate()
        .map(|(i, v)| (x_of(i as u32), plot_y(*v)))
        .collect();
    for w in pts.windows(2) {
        line(&mut img, w[0], w[1], BLUE);
    }
    for ((k, _), &(x, _)) in curve.iter().zip(&pts) {
        draw_text(
            &mut img,
            x.saturating_sub(6),
            H - MARGIN + 8,
            &k.to_string(),
        );
    }
    let y = plot_y(report.metrics.mean_accuracy);
    line(&mut img, (MARGIN + 1, y), (W - MARGIN / 2, y), ORANGE);
    draw_text(&mut img, W / 2 - 20, H - LINE_HEIGHT, "k");
    img
}

/// Per-decile mean class accuracy: expert in blue, corrected in orange.
pub fn binned_bars(rows: &[BinRow]) -> RgbImage {
    let mut img = canvas();
    let slot = (W - MARGIN * 2) / rows.len().max(1) as u32;
    let bar = slot / 3;
    for (i, r) in rows.iter().enumerate() {
        let x = MARGIN + 4 + i as u32 * slot;
        if let Some(b) = r.mean_before {
            rect(&mut img, x, x + bar, plot_y(b), H - MARGIN, BLUE);
        }
        if let Some(a) = r.mean_after {
            rect(
                &mut img,
                x + bar,
                x + 2 * bar,
                plot_y(a),
                H - MARGIN,
                ORANGE,
            );
        }
        draw_text(
            &mut img,
            x,
            H - MARGIN + 8,
            &format!("{}", (r.bin.lo * 10.0).round() as u32),
        );
    }
    img
}

/// Re-renders `report.md` (and plots) from the JSON reports in `dir`.
pub fn rerender(dir: &Path, vocab: Option<&SpeciesVocabulary>, plots: bool) -> anyhow::Result<()> {
    let read = |name: &str| -> anyhow::Result<Option<EvalReport>> {
        let p = dir.join(name);
        if !p.is_file() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&fs::read(&p)?)?))
    };
    let report = read("report.json")?
        .ok_or_else(|| anyhow::anyhow!("no report.json in {}", dir.display()))?;
    let expert = read("expert_report.json")?;
    write_human_artifacts(dir, &report, expert.as_ref(), vocab, plots)
}
