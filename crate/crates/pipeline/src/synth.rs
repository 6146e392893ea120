//! Synthetic datasets with a controllable expert: every file a real run
//! needs, generated from a seed. Used by the acceptance suite and handy for
//! trying the tool without data.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use poc_core::data_model::{write_jsonl, AttributeRecord, PREDICTION_SCHEMA_VERSION};
use poc_core::{ClassId, ExemplarSet, ImageRef, SpeciesRecord, TestItem};

const GENERA: [&str; 5] = [
    "Synthornis",
    "Pseudolarus",
    "Fictavis",
    "Mockila",
    "Placeholdia",
];
const EPITHETS: [&str; 24] = [
    "alba",
    "nigra",
    "rufa",
    "viridis",
    "minor",
    "major",
    "borealis",
    "australis",
    "montana",
    "palustris",
    "maritima",
    "sylvestris",
    "vulgaris",
    "elegans",
    "gracilis",
    "robusta",
    "pallida",
    "fusca",
    "lutea",
    "caerulea",
    "cinerea",
    "varia",
    "ornata",
    "striata",
];
const ADJECTIVES: [&str; 24] = [
    "White", "Black", "Rufous", "Green", "Little", "Great", "Northern", "Southern", "Mountain",
    "Marsh", "Coastal", "Woodland", "Common", "Elegant", "Slender", "Stout", "Pale", "Dusky",
    "Yellow", "Blue", "Ashy", "Variable", "Ornate", "Striped",
];
const NOUNS: [&str; 5] = ["Warbler", "Gull", "Finch", "Plover", "Tern"];

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub classes: usize,
    pub items: usize,
    /// Exemplars per class; `train.jsonl` holds twice as many per class.
    pub shots: usize,
    pub seed: u64,
    /// `rank_weights[r]` is the chance the expert puts the truth at rank `r`;
    /// leftover mass spreads evenly over the remaining ranks.
    pub rank_weights: Vec<f64>,
    pub image_size: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 20,
            items: 500,
            shots: 2,
            seed: 0,
            rank_weights: vec![0.55, 0.12, 0.08, 0.06, 0.05],
            image_size: 16,
        }
    }
}

#[derive(Serialize)]
struct PredictionLine {
    schema_version: u32,
    image_id: String,
    expert_tag: &'static str,
    entries: Vec<(ClassId, f64)>,
}

pub fn species(c: usize) -> SpeciesRecord {
    let (g, e) = (c % GENERA.len(), c / GENERA.len());
    let suffix = if e >= EPITHETS.len() {
        format!("{}", e / EPITHETS.len())
    } else {
        String::new()
    };
    let epithet = format!("{}{}", EPITHETS[e % EPITHETS.len()], suffix);
    let adjective = format!("{}{}", ADJECTIVES[e % ADJECTIVES.len()], suffix);
    SpeciesRecord {
        class_id: ClassId(c as u32),
        scientific_name: format!("{} {epithet}", GENERA[g]),
        common_names: vec![format!("{adjective} {}", NOUNS[g])],
        taxonomy: vec![
            ("order".into(), "Synthetiformes".into()),
            ("family".into(), format!("{}idae", &GENERA[g][..5])),
            ("genus".into(), GENERA[g].into()),
        ],
    }
}

fn class_color(c: usize) -> [u8; 3] {
    let h = (c as u32).wrapping_mul(2_654_435_761);
    [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
}

fn write_image(
    path: &Path,
    size: u32,
    color: [u8; 3],
    rng: &mut ChaCha8Rng,
) -> std::io::Result<()> {
    let img = RgbImage::from_fn(size, size, |_, _| {
        let j: i16 = rng.random_range(-12..=12);
        Rgb(color.map(|v| (v as i16 + j).clamp(0, 255) as u8))
    });
    img.save(path).map_err(std::io::Error::other)
}

fn draw_rank(rng: &mut ChaCha8Rng, weights: &[f64], classes: usize) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (r, w) in weights.iter().enumerate().take(classes) {
        acc += w;
        if u < acc {
            return r;
        }
    }
    let first_rest = weights.len().min(classes - 1);
    rng.random_range(first_rest..classes)
}

/// Writes `vocab.jsonl`, `train.jsonl`, `test.jsonl`, `exemplars.jsonl`,
/// `predictions.jsonl`, `attributes.jsonl` and `images/` under `dir`.
pub fn generate(spec: &SynthSpec, dir: &Path) -> anyhow::Result<()> {
    anyhow::ensure!(spec.classes >= 2, "need at least two classes");
    anyhow::ensure!(
        spec.items >= spec.classes,
        "need at least one test item per class"
    );
    anyhow::ensure!(spec.shots >= 1, "need at least one shot");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    fs::create_dir_all(dir.join("images"))?;
    let c = spec.classes;

    let vocab: Vec<SpeciesRecord> = (0..c).map(species).collect();
    write_jsonl(&dir.join("vocab.jsonl"), &vocab)?;

    let mut train = Vec::new();
    let mut exemplars = Vec::new();
    for class in 0..c {
        let mut shots = Vec::new();
        for i in 0..2 * spec.shots {
            let id = format!("tr_{class:03}_{i:02}");
            let rel = format!("images/{id}.png");
            write_image(
                &dir.join(&rel),
                spec.image_size,
                class_color(class),
                &mut rng,
            )?;
            if i < spec.shots {
                shots.push(ImageRef {
                    image_id: id.clone(),
                    image_path: rel.clone().into(),
                    resolved_path: Default::default(),
                });
            }
            train.push(TestItem {
                image_id: id,
                image_path: rel.into(),
                ground_truth: ClassId(class as u32),
                resolved_path: Default::default(),
            });
        }
        exemplars.push(ExemplarSet {
            class_id: ClassId(class as u32),
            m: spec.shots,
            shots,
        });
    }
    write_jsonl(&dir.join("train.jsonl"), &train)?;
    write_jsonl(&dir.join("exemplars.jsonl"), &exemplars)?;

    let mut truths: Vec<usize> = (0..spec.items).map(|i| i % c).collect();
    truths.shuffle(&mut rng);
    let mut test = Vec::new();
    let mut preds = Vec::new();
    for (i, &truth) in truths.iter().enumerate() {
        let id = format!("te_{i:05}");
        let rel = format!("images/{id}.png");
        write_image(
            &dir.join(&rel),
            spec.image_size,
            class_color(truth),
            &mut rng,
        )?;
        test.push(TestItem {
            image_id: id.clone(),
            image_path: rel.into(),
            ground_truth: ClassId(truth as u32),
            resolved_path: Default::default(),
        });
        let rank = draw_rank(&mut rng, &spec.rank_weights, c);
        let mut others: Vec<usize> = (0..c).filter(|x| *x != truth).collect();
        others.shuffle(&mut rng);
        others.insert(rank, truth);
        // Strictly decreasing, normalized scores.
        let raw: Vec<f64> = (0..c).map(|r| (-0.6 * r as f64).exp()).collect();
        let total: f64 = raw.iter().sum();
        let sharpness: f64 = rng.random_range(0.6..1.0);
        let entries = others
            .iter()
            .zip(&raw)
            .map(|(cls, v)| {
                let p = (v / total).powf(sharpness);
                (ClassId(*cls as u32), p)
            })
            .collect::<Vec<_>>();
        let norm: f64 = entries.iter().map(|(_, p)| p).sum();
        let entries = entries
            .into_iter()
            .map(|(cls, p)| (cls, (p / norm * 1e6).floor() / 1e6))
            .collect();
        preds.push(PredictionLine {
            schema_version: PREDICTION_SCHEMA_VERSION,
            image_id: id,
            expert_tag: "synthetic",
            entries,
        });
    }
    write_jsonl(&dir.join("test.jsonl"), &test)?;
    write_jsonl(&dir.join("predictions.jsonl"), &preds)?;

    let attributes: Vec<AttributeRecord> = (0..c)
        .map(|class| AttributeRecord {
            class_id: ClassId(class as u32),
            attributes: vec![
                format!("plumage tone {:?}", class_color(class)),
                format!("pattern {}", class % 7),
            ],
        })
        .collect();
    write_jsonl(&dir.join("attributes.jsonl"), &attributes)?;
    Ok(())
}
