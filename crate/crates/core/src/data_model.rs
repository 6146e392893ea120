//! Species vocabularies, test/exemplar manifests and expert prediction files.
//!
//! Every manifest is line-delimited JSON, one record per line. Image paths
//! inside a manifest are resolved relative to the manifest's directory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::names::normalize_name;

/// Slack allowed on softmax sums exported in floating point.
pub const CONFIDENCE_TOLERANCE: f64 = 1e-6;

/// Largest supported shot count per class.
pub const MAX_SHOTS: usize = 64;

/// Prediction file schema understood by this crate.
pub const PREDICTION_SCHEMA_VERSION: u32 = 1;

/// Index of a species in `[0, C)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl ClassId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// `path:line` for error messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Location {
    pub path: PathBuf,
    pub line: usize,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.path.display(), self.line)
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{at}: malformed record: {message}")]
    MalformedManifest { at: Location, message: String },
    #[error("{at}: duplicate class: {detail}")]
    DuplicateClass { at: Location, detail: String },
    #[error("{path}: vocabulary is empty")]
    EmptyVocabulary { path: PathBuf },
    #[error("{path}: vocabulary needs at least 2 classes, found {found}")]
    TooFewClasses { path: PathBuf, found: usize },
    #[error("{path}: class ids must be exactly 0..{count}; missing {missing}")]
    ClassIdGap {
        path: PathBuf,
        count: usize,
        missing: ClassId,
    },
    #[error("{at}: invalid taxonomy: {detail}")]
    InvalidTaxonomy { at: Location, detail: String },
    #[error("{at}: unknown class {class_id}")]
    UnknownClass { at: Location, class_id: ClassId },
    #[error("{at}: confidences of {image_id} are not non-increasing")]
    NonMonotoneConfidence { at: Location, image_id: String },
    #[error("{at}: confidence out of range for {image_id}: {detail}")]
    ConfidenceOutOfRange {
        at: Location,
        image_id: String,
        detail: String,
    },
    #[error("{at}: duplicate image id {image_id}")]
    DuplicateImage { at: Location, image_id: String },
    #[error("{at}: class {class_id} listed twice for {image_id}")]
    DuplicateEntry {
        at: Location,
        image_id: String,
        class_id: ClassId,
    },
    #[error("{at}: unsupported prediction schema version {found} (expected {PREDICTION_SCHEMA_VERSION})")]
    UnsupportedSchema { at: Location, found: u32 },
    #[error("{at}: class {class_id} has {found} shots, expected m={m} in 1..={MAX_SHOTS}")]
    BadShotCount {
        at: Location,
        class_id: ClassId,
        m: usize,
        found: usize,
    },
    #[error("{at}: image {image_id} at {path} is missing")]
    MissingImage {
        at: Location,
        image_id: String,
        path: PathBuf,
    },
    #[error("{at}: image {image_id} at {path} does not decode: {detail}")]
    UndecodableImage {
        at: Location,
        image_id: String,
        path: PathBuf,
        detail: String,
    },
    #[error("not a probability distribution: {0}")]
    BadDistribution(String),
    #[error("k={k} outside 1..={classes}")]
    KOutOfRange { k: usize, classes: usize },
}

/// One species of the label space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesRecord {
    pub class_id: ClassId,
    pub scientific_name: String,
    #[serde(default)]
    pub common_names: Vec<String>,
    /// `(rank, value)` pairs from the coarsest rank down to genus.
    #[serde(default)]
    pub taxonomy: Vec<(String, String)>,
}

impl SpeciesRecord {
    /// `Scientific name (first common name)`, or the bare scientific name.
    pub fn display_name(&self) -> String {
        match self.common_names.first() {
            Some(common) => format!("{} ({})", self.scientific_name, common),
            None => self.scientific_name.clone(),
        }
    }

    /// Taxonomy values joined coarse to fine, e.g. `Animalia > Chordata > Aves`.
    pub fn taxonomy_path(&self) -> Option<String> {
        if self.taxonomy.is_empty() {
            return None;
        }
        Some(
            self.taxonomy
                .iter()
                .map(|(_, value)| value.as_str())
                .collect::<Vec<_>>()
                .join(" > "),
        )
    }
}

/// Taxonomic ranks in coarse-to-fine order. Ranks sharing a level are
/// synonyms (zoological phylum vs. botanical division).
const RANK_LEVELS: &[(&str, u8)] = &[
    ("domain", 0),
    ("kingdom", 1),
    ("subkingdom", 2),
    ("phylum", 3),
    ("division", 3),
    ("subphylum", 4),
    ("superclass", 5),
    ("class", 6),
    ("subclass", 7),
    ("superorder", 8),
    ("order", 9),
    ("suborder", 10),
    ("superfamily", 11),
    ("family", 12),
    ("subfamily", 13),
    ("tribe", 14),
    ("genus", 15),
];

fn rank_level(rank: &str) -> Option<u8> {
    let rank = rank.trim().to_lowercase();
    RANK_LEVELS
        .iter()
        .find(|(name, _)| *name == rank)
        .map(|(_, level)| *level)
}

fn check_taxonomy(record: &SpeciesRecord, at: &Location) -> Result<(), DataError> {
    let mut previous: Option<u8> = None;
    for (rank, value) in &record.taxonomy {
        let level = rank_level(rank).ok_or_else(|| DataError::InvalidTaxonomy {
            at: at.clone(),
            detail: format!("unknown rank {rank:?}"),
        })?;
        if value.trim().is_empty() {
            return Err(DataError::InvalidTaxonomy {
                at: at.clone(),
                detail: format!("empty value for rank {rank:?}"),
            });
        }
        if previous.is_some_and(|p| level <= p) {
            return Err(DataError::InvalidTaxonomy {
                at: at.clone(),
                detail: format!("rank {rank:?} is out of order or repeated"),
            });
        }
        previous = Some(level);
    }
    Ok(())
}

/// The `C` species of a dataset, indexed by class id.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesVocabulary {
    pub dataset_name: String,
    records: Vec<SpeciesRecord>,
}

impl SpeciesVocabulary {
    /// Validates and builds a vocabulary. Records may be given in any order;
    /// they are stored by class id.
    pub fn new(
        dataset_name: impl Into<String>,
        records: Vec<SpeciesRecord>,
    ) -> Result<Self, DataError> {
        Self::validate(dataset_name.into(), records, Path::new("<memory>"), None)
    }

    fn validate(
        dataset_name: String,
        records: Vec<SpeciesRecord>,
        path: &Path,
        lines: Option<&[usize]>,
    ) -> Result<Self, DataError> {
        if records.is_empty() {
            return Err(DataError::EmptyVocabulary {
                path: path.to_path_buf(),
            });
        }
        let at = |i: usize| Location {
            path: path.to_path_buf(),
            line: lines.map_or(i + 1, |l| l[i]),
        };
        let mut ids = HashSet::new();
        let mut names: HashMap<String, ClassId> = HashMap::new();
        for (i, record) in records.iter().enumerate() {
            if record.scientific_name.trim().is_empty() {
                return Err(DataError::MalformedManifest {
                    at: at(i),
                    message: "empty scientific_name".into(),
                });
            }
            if !ids.insert(record.class_id) {
                return Err(DataError::DuplicateClass {
                    at: at(i),
                    detail: format!("class_id {} appears twice", record.class_id),
                });
            }
            let key = normalize_name(&record.scientific_name);
            if key.is_empty() {
                return Err(DataError::MalformedManifest {
                    at: at(i),
                    message: format!(
                        "scientific_name {:?} normalizes to nothing",
                        record.scientific_name
                    ),
                });
            }
            if let Some(other) = names.insert(key, record.class_id) {
                return Err(DataError::DuplicateClass {
                    at: at(i),
                    detail: format!(
                        "scientific name {:?} collides with class {}",
                        record.scientific_name, other
                    ),
                });
            }
            check_taxonomy(record, &at(i))?;
        }
        let count = records.len();
        if count < 2 {
            return Err(DataError::TooFewClasses {
                path: path.to_path_buf(),
                found: count,
            });
        }
        if let Some(missing) = (0..count as u32).map(ClassId).find(|id| !ids.contains(id)) {
            return Err(DataError::ClassIdGap {
                path: path.to_path_buf(),
                count,
                missing,
            });
        }
        let mut records = records;
        records.sort_by_key(|r| r.class_id);
        Ok(Self {
            dataset_name,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, id: ClassId) -> bool {
        id.index() < self.records.len()
    }

    /// Panics on an id outside the vocabulary; validated inputs never hit that.
    pub fn get(&self, id: ClassId) -> &SpeciesRecord {
        &self.records[id.index()]
    }

    pub fn try_get(&self, id: ClassId) -> Option<&SpeciesRecord> {
        self.records.get(id.index())
    }

    pub fn records(&self) -> &[SpeciesRecord] {
        &self.records
    }

    pub fn class_ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.records.iter().map(|r| r.class_id)
    }
}

/// A test or training image with its label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestItem {
    pub image_id: String,
    pub image_path: PathBuf,
    pub ground_truth: ClassId,
    /// `image_path` joined onto the manifest directory.
    #[serde(skip)]
    pub resolved_path: PathBuf,
}

/// Reference to one exemplar image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_id: String,
    pub image_path: PathBuf,
    #[serde(skip)]
    pub resolved_path: PathBuf,
}

/// The `m` labeled shots of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSet {
    pub class_id: ClassId,
    pub m: usize,
    pub shots: Vec<ImageRef>,
}

/// Descending top-k `(class, softmax confidence)` list for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertPrediction {
    pub image_id: String,
    pub expert_tag: String,
    pub entries: Vec<(ClassId, f64)>,
}

impl ExpertPrediction {
    pub fn top1(&self) -> ClassId {
        self.entries[0].0
    }

    pub fn max_confidence(&self) -> f64 {
        self.entries[0].1
    }

    /// The first `min(k, len)` classes.
    pub fn top_classes(&self, k: usize) -> impl Iterator<Item = ClassId> + '_ {
        self.entries.iter().take(k).map(|(c, _)| *c)
    }
}

/// Checks one prediction record against the vocabulary.
pub fn validate_prediction(
    pred: &ExpertPrediction,
    vocab: &SpeciesVocabulary,
    at: &Location,
) -> Result<(), DataError> {
    if pred.entries.is_empty() {
        return Err(DataError::MalformedManifest {
            at: at.clone(),
            message: format!("no entries for {}", pred.image_id),
        });
    }
    let mut seen = HashSet::new();
    let mut sum = 0.0;
    let mut previous = f64::INFINITY;
    for &(class_id, conf) in &pred.entries {
        if !vocab.contains(class_id) {
            return Err(DataError::UnknownClass {
                at: at.clone(),
                class_id,
            });
        }
        if !seen.insert(class_id) {
            return Err(DataError::DuplicateEntry {
                at: at.clone(),
                image_id: pred.image_id.clone(),
                class_id,
            });
        }
        if !(0.0..=1.0).contains(&conf) {
            return Err(DataError::ConfidenceOutOfRange {
                at: at.clone(),
                image_id: pred.image_id.clone(),
                detail: format!("{conf} for class {class_id}"),
            });
        }
        if conf > previous {
            return Err(DataError::NonMonotoneConfidence {
                at: at.clone(),
                image_id: pred.image_id.clone(),
            });
        }
        previous = conf;
        sum += conf;
    }
    if sum > 1.0 + CONFIDENCE_TOLERANCE {
        return Err(DataError::ConfidenceOutOfRange {
            at: at.clone(),
            image_id: pred.image_id.clone(),
            detail: format!("confidences sum to {sum}"),
        });
    }
    Ok(())
}

/// The `k` largest components of a full softmax vector in descending order,
/// ties broken by lower class id.
pub fn topk(softmax: &[f64], k: usize) -> Result<Vec<(ClassId, f64)>, DataError> {
    if softmax.is_empty() {
        return Err(DataError::BadDistribution("empty vector".into()));
    }
    if let Some((i, p)) = softmax
        .iter()
        .enumerate()
        .find(|(_, p)| !p.is_finite() || **p < 0.0 || **p > 1.0)
    {
        return Err(DataError::BadDistribution(format!("component {i} is {p}")));
    }
    let sum: f64 = softmax.iter().sum();
    if (sum - 1.0).abs() > CONFIDENCE_TOLERANCE {
        return Err(DataError::BadDistribution(format!("sums to {sum}")));
    }
    if k == 0 || k > softmax.len() {
        return Err(DataError::KOutOfRange {
            k,
            classes: softmax.len(),
        });
    }
    let mut order: Vec<usize> = (0..softmax.len()).collect();
    // Stable sort keeps lower ids first among equal confidences.
    order.sort_by(|&a, &b| softmax[b].total_cmp(&softmax[a]));
    Ok(order
        .into_iter()
        .take(k)
        .map(|i| (ClassId(i as u32), softmax[i]))
        .collect())
}

// ---------------------------------------------------------------------------
// Line-delimited IO

fn read_text(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Parses non-blank lines of a JSONL file, yielding `(line_number, record)`.
pub fn parse_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, DataError> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| DataError::MalformedManifest {
            at: Location {
                path: path.to_path_buf(),
                line: i + 1,
            },
            message: e.to_string(),
        })?;
        out.push((i + 1, record));
    }
    Ok(out)
}

/// Serializes records one per line with a trailing newline.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for record in records {
        // Plain data structs with string keys always serialize.
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err)?;
    }
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(to_jsonl(records).as_bytes()).map_err(io_err)
}

/// Loads `vocab.jsonl`. The dataset name is the manifest directory's name.
pub fn load_vocabulary(path: &Path) -> Result<SpeciesVocabulary, DataError> {
    let parsed: Vec<(usize, SpeciesRecord)> = parse_jsonl(path)?;
    let dataset_name = path
        .canonicalize()
        .ok()
        .and_then(|p| {
            p.parent()
                .and_then(|d| d.file_name())
                .map(|n| n.to_string_lossy().into_owned())
        })
        .unwrap_or_else(|| "dataset".into());
    let (lines, records): (Vec<usize>, Vec<SpeciesRecord>) = parsed.into_iter().unzip();
    let vocab = SpeciesVocabulary::validate(dataset_name, records.clone(), path, Some(&lines))?;
    // File order is the canonical order; it must already be sorted by id for
    // the round-trip to hold, but loading accepts any order.
    Ok(vocab)
}

/// Canonical `vocab.jsonl` text.
pub fn vocabulary_to_jsonl(vocab: &SpeciesVocabulary) -> String {
    to_jsonl(vocab.records())
}

fn check_image(path: &Path, image_id: &str, at: &Location) -> Result<(), DataError> {
    if !path.is_file() {
        return Err(DataError::MissingImage {
            at: at.clone(),
            image_id: image_id.to_string(),
            path: path.to_path_buf(),
        });
    }
    let undecodable = |detail: String| DataError::UndecodableImage {
        at: at.clone(),
        image_id: image_id.to_string(),
        path: path.to_path_buf(),
        detail,
    };
    let reader = image::ImageReader::open(path)
        .map_err(|e| undecodable(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| undecodable(e.to_string()))?;
    let (w, h) = reader
        .into_dimensions()
        .map_err(|e| undecodable(e.to_string()))?;
    if w == 0 || h == 0 {
        return Err(undecodable("zero-sized image".into()));
    }
    Ok(())
}

/// Loads `test.jsonl` (or a `train.jsonl` of the same shape). Images are
/// checked for existence and a decodable header.
pub fn load_test_items(path: &Path, vocab: &SpeciesVocabulary) -> Result<Vec<TestItem>, DataError> {
    let dir = manifest_dir(path);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, mut item) in parse_jsonl::<TestItem>(path)? {
        let at = Location {
            path: path.to_path_buf(),
            line,
        };
        if !vocab.contains(item.ground_truth) {
            return Err(DataError::UnknownClass {
                at,
                class_id: item.ground_truth,
            });
        }
        if !seen.insert(item.image_id.clone()) {
            return Err(DataError::DuplicateImage {
                at,
                image_id: item.image_id,
            });
        }
        item.resolved_path = dir.join(&item.image_path);
        check_image(&item.resolved_path, &item.image_id, &at)?;
        out.push(item);
    }
    Ok(out)
}

/// Loads `exemplars.jsonl`, keyed by class id.
pub fn load_exemplars(
    path: &Path,
    vocab: &SpeciesVocabulary,
) -> Result<BTreeMap<ClassId, ExemplarSet>, DataError> {
    let dir = manifest_dir(path);
    let mut out = BTreeMap::new();
    for (line, mut set) in parse_jsonl::<ExemplarSet>(path)? {
        let at = Location {
            path: path.to_path_buf(),
            line,
        };
        if !vocab.contains(set.class_id) {
            return Err(DataError::UnknownClass {
                at,
                class_id: set.class_id,
            });
        }
        if set.m == 0 || set.m > MAX_SHOTS || set.shots.len() != set.m {
            return Err(DataError::BadShotCount {
                at,
                class_id: set.class_id,
                m: set.m,
                found: set.shots.len(),
            });
        }
        for shot in &mut set.shots {
            shot.resolved_path = dir.join(&shot.image_path);
            check_image(&shot.resolved_path, &shot.image_id, &at)?;
        }
        if out.contains_key(&set.class_id) {
            return Err(DataError::DuplicateClass {
                at,
                detail: format!("exemplars for class {} listed twice", set.class_id),
            });
        }
        out.insert(set.class_id, set);
    }
    Ok(out)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionLine {
    #[serde(default)]
    schema_version: Option<u32>,
    image_id: String,
    expert_tag: String,
    entries: Vec<(ClassId, f64)>,
}

/// Loads `predictions.jsonl`. Lines may carry `schema_version`; any version
/// other than [`PREDICTION_SCHEMA_VERSION`] is rejected.
pub fn load_predictions(
    path: &Path,
    vocab: &SpeciesVocabulary,
) -> Result<Vec<ExpertPrediction>, DataError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, raw) in parse_jsonl::<PredictionLine>(path)? {
        let at = Location {
            path: path.to_path_buf(),
            line,
        };
        if let Some(found) = raw
            .schema_version
            .filter(|v| *v != PREDICTION_SCHEMA_VERSION)
        {
            return Err(DataError::UnsupportedSchema { at, found });
        }
        let pred = ExpertPrediction {
            image_id: raw.image_id,
            expert_tag: raw.expert_tag,
            entries: raw.entries,
        };
        validate_prediction(&pred, vocab, &at)?;
        if !seen.insert(pred.image_id.clone()) {
            return Err(DataError::DuplicateImage {
                at,
                image_id: pred.image_id,
            });
        }
        out.push(pred);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeRecord {
    pub class_id: ClassId,
    pub attributes: Vec<String>,
}

/// Loads `attributes.jsonl` into `class_id -> attribute strings`.
pub fn load_attributes(
    path: &Path,
    vocab: &SpeciesVocabulary,
) -> Result<BTreeMap<ClassId, Vec<String>>, DataError> {
    let mut out = BTreeMap::new();
    for (line, rec) in parse_jsonl::<AttributeRecord>(path)? {
        let at = Location {
            path: path.to_path_buf(),
            line,
        };
        if !vocab.contains(rec.class_id) {
            return Err(DataError::UnknownClass {
                at,
                class_id: rec.class_id,
            });
        }
        if out.insert(rec.class_id, rec.attributes).is_some() {
            return Err(DataError::DuplicateClass {
                at,
                detail: format!("attributes for class {} listed twice", rec.class_id),
            });
        }
    }
    Ok(out)
}
