//! Prompt construction for every prompting strategy.
//!
//! A [`PromptBundle`] is a fully materialized request: system text plus an
//! ordered list of user parts (text or image). The test image is always the
//! last part. Bundles are pure functions of their inputs, and
//! [`PromptBundle::content_hash`] is a SHA-256 over a length-prefixed
//! serialization of every part, so identical inputs hash identically on every
//! platform.

pub mod stitch;
pub mod template;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::Cursor;
use std::sync::{Arc, Mutex};

use image::codecs::jpeg::JpegEncoder;
use image::imageops::FilterType;
use image::{DynamicImage, ImageFormat};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data_model::{ClassId, ExemplarSet, ExpertPrediction, SpeciesVocabulary, TestItem};
pub use stitch::{stitch_exemplars, GridLayout, StitchedGrid, DEFAULT_CELL_SIZE, DEFAULT_MAX_COLS};
pub use template::{render, TemplateSet};

/// Upper bound on one encoded image attachment.
pub const MAX_ATTACHMENT_BYTES: usize = 1_500_000;
pub const JPEG_QUALITY: u8 = 95;
/// Default number of expert predictions shown to the model.
pub const DEFAULT_K: usize = 5;

const HASH_DOMAIN: &[u8] = b"poc-bundle/1";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("no exemplars for candidate class {0}")]
    MissingExemplars(ClassId),
    #[error("expert gives {have} predictions, strategy needs k={need}")]
    TooFewPredictions { have: usize, need: usize },
    #[error("strategy needs expert predictions")]
    MissingExpert,
    #[error("strategy needs an attributes map")]
    MissingAttributes,
    #[error("exemplar set for class {0} is empty")]
    ZeroExemplars(ClassId),
    #[error("cannot decode image {image_id}: {detail}")]
    DecodeFailure { image_id: String, detail: String },
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error("template error: {0}")]
    Template(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionMode {
    /// Name exactly one candidate.
    Select,
    /// Order all `k` candidates.
    Rerank,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PocOptions {
    #[serde(default)]
    pub exemplar_images: bool,
    #[serde(default)]
    pub confidences: bool,
    #[serde(default)]
    pub taxonomy: bool,
    #[serde(default)]
    pub text_attributes: bool,
    pub decision: DecisionMode,
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    DEFAULT_K
}

impl PocOptions {
    /// Exemplar images, confidences and re-ranking over the top five.
    pub fn full() -> Self {
        Self {
            exemplar_images: true,
            confidences: true,
            taxonomy: false,
            text_attributes: false,
            decision: DecisionMode::Rerank,
            k: DEFAULT_K,
        }
    }

    /// Candidate names only, single selection.
    pub fn names_only(k: usize) -> Self {
        Self {
            exemplar_images: false,
            confidences: false,
            taxonomy: false,
            text_attributes: false,
            decision: DecisionMode::Select,
            k,
        }
    }
}

/// How the model is asked. `Poc` carries its options, so options exist
/// exactly when the family is `Poc`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PromptStrategy {
    OpenVocab,
    OpenVocabCot,
    OpenVocabVerify,
    ZsIclAllNames,
    Poc(PocOptions),
}

impl PromptStrategy {
    pub fn validate(&self) -> Result<(), PromptError> {
        if let PromptStrategy::Poc(opts) = self {
            if opts.k == 0 {
                return Err(PromptError::InvalidStrategy("k must be at least 1".into()));
            }
            if opts.decision == DecisionMode::Rerank && opts.k < 2 {
                return Err(PromptError::InvalidStrategy(
                    "re-ranking needs k >= 2".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn poc(&self) -> Option<&PocOptions> {
        match self {
            PromptStrategy::Poc(opts) => Some(opts),
            _ => None,
        }
    }

    pub fn is_open_vocab(&self) -> bool {
        matches!(
            self,
            PromptStrategy::OpenVocab
                | PromptStrategy::OpenVocabCot
                | PromptStrategy::OpenVocabVerify
        )
    }

    /// Short stable label, e.g. `poc[k=5,images,conf,rerank]`.
    pub fn label(&self) -> String {
        match self {
            PromptStrategy::OpenVocab => "open_vocab".into(),
            PromptStrategy::OpenVocabCot => "open_vocab_cot".into(),
            PromptStrategy::OpenVocabVerify => "open_vocab_verify".into(),
            PromptStrategy::ZsIclAllNames => "zs_icl_all_names".into(),
            PromptStrategy::Poc(o) => {
                let mut flags = vec![format!("k={}", o.k)];
                for (on, name) in [
                    (o.exemplar_images, "images"),
                    (o.confidences, "conf"),
                    (o.taxonomy, "taxonomy"),
                    (o.text_attributes, "attributes"),
                ] {
                    if on {
                        flags.push(name.into());
                    }
                }
                flags.push(
                    match o.decision {
                        DecisionMode::Select => "select",
                        DecisionMode::Rerank => "rerank",
                    }
                    .into(),
                );
                format!("poc[{}]", flags.join(","))
            }
        }
    }
}

/// An encoded image ready to attach.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageAttachment {
    pub media_type: String,
    pub bytes: Arc<Vec<u8>>,
}

impl ImageAttachment {
    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.bytes.as_slice()))
    }

    /// `data:<media>;base64,<payload>`
    pub fn data_uri(&self) -> String {
        use base64::Engine as _;
        format!(
            "data:{};base64,{}",
            self.media_type,
            base64::engine::general_purpose::STANDARD.encode(self.bytes.as_slice())
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Part {
    Text(String),
    Image(ImageAttachment),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub image_id: String,
    pub expert_tag: Option<String>,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_parts: Vec<Part>,
    pub strategy: PromptStrategy,
    /// Candidate classes shown to the model, in prompt order (empty for
    /// open-vocabulary families).
    pub candidates: Vec<ClassId>,
    pub provenance: Provenance,
}

impl PromptBundle {
    pub fn content_hash(&self) -> &str {
        &self.provenance.content_hash
    }

    pub fn image_count(&self) -> usize {
        self.user_parts
            .iter()
            .filter(|p| matches!(p, Part::Image(_)))
            .count()
    }

    /// All user text parts joined with newlines.
    pub fn user_text(&self) -> String {
        self.user_parts
            .iter()
            .filter_map(|p| match p {
                Part::Text(t) => Some(t.as_str()),
                Part::Image(_) => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Human-readable, byte-stable dump used for golden files and prompt dumps.
    /// Images appear as media type, size and digest.
    pub fn render_canonical(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "strategy: {}", self.strategy.label());
        let _ = writeln!(out, "image_id: {}", self.provenance.image_id);
        let _ = writeln!(
            out,
            "expert_tag: {}",
            self.provenance.expert_tag.as_deref().unwrap_or("-")
        );
        let _ = writeln!(out, "content_hash: {}", self.provenance.content_hash);
        let _ = writeln!(out, "=== system ===");
        let _ = writeln!(out, "{}", self.system_text);
        for (i, part) in self.user_parts.iter().enumerate() {
            match part {
                Part::Text(t) => {
                    let _ = writeln!(out, "=== user[{i}] text ===");
                    let _ = writeln!(out, "{t}");
                }
                Part::Image(img) => {
                    let _ = writeln!(out, "=== user[{i}] image ===");
                    let _ = writeln!(
                        out,
                        "{} {} bytes sha256={}",
                        img.media_type,
                        img.bytes.len(),
                        img.sha256()
                    );
                }
            }
        }
        out
    }
}

fn hash_field(hasher: &mut Sha256, tag: u8, bytes: &[u8]) {
    hasher.update([tag]);
    hasher.update((bytes.len() as u64).to_le_bytes());
    hasher.update(bytes);
}

/// Digest over the system text and every user part.
pub fn content_hash(system_text: &str, parts: &[Part]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(HASH_DOMAIN);
    hash_field(&mut hasher, b'S', system_text.as_bytes());
    for part in parts {
        match part {
            Part::Text(t) => hash_field(&mut hasher, b'T', t.as_bytes()),
            Part::Image(img) => {
                hash_field(&mut hasher, b'M', img.media_type.as_bytes());
                hash_field(&mut hasher, b'I', &img.bytes);
            }
        }
    }
    hex::encode(hasher.finalize())
}

fn encode_png(img: &DynamicImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    // Encoding into memory only fails on unsupported color types; rgb8 is supported.
    img.write_to(&mut buf, ImageFormat::Png)
        .expect("png encoding");
    buf.into_inner()
}

fn encode_jpeg(img: &DynamicImage) -> Vec<u8> {
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, JPEG_QUALITY)
        .encode_image(&img.to_rgb8())
        .expect("jpeg encoding");
    buf
}

/// PNG if it fits the size budget, else JPEG at quality 95, else repeated
/// 3/4 downscaling until the JPEG fits.
pub fn encode_for_attachment(img: &DynamicImage) -> ImageAttachment {
    let png = encode_png(img);
    if png.len() <= MAX_ATTACHMENT_BYTES {
        return ImageAttachment {
            media_type: "image/png".into(),
            bytes: Arc::new(png),
        };
    }
    let mut current = img.clone();
    loop {
        let jpeg = encode_jpeg(&current);
        if jpeg.len() <= MAX_ATTACHMENT_BYTES || current.width() <= 16 || current.height() <= 16 {
            return ImageAttachment {
                media_type: "image/jpeg".into(),
                bytes: Arc::new(jpeg),
            };
        }
        let (w, h) = (current.width() * 3 / 4, current.height() * 3 / 4);
        current = current.resize_exact(w, h, FilterType::Triangle);
    }
}

/// Attaches a test image. PNG and JPEG files within the size budget are sent
/// byte-for-byte; anything else is decoded and re-encoded.
pub fn attach_image_file(
    image_id: &str,
    path: &std::path::Path,
) -> Result<ImageAttachment, PromptError> {
    let fail = |detail: String| PromptError::DecodeFailure {
        image_id: image_id.to_string(),
        detail,
    };
    let bytes = fs::read(path).map_err(|e| fail(format!("{}: {e}", path.display())))?;
    let format = image::guess_format(&bytes).map_err(|e| fail(e.to_string()))?;
    let passthrough = match format {
        ImageFormat::Png => Some("image/png"),
        ImageFormat::Jpeg => Some("image/jpeg"),
        _ => None,
    };
    if let Some(media_type) = passthrough {
        if bytes.len() <= MAX_ATTACHMENT_BYTES {
            return Ok(ImageAttachment {
                media_type: media_type.into(),
                bytes: Arc::new(bytes),
            });
        }
    }
    let img =
        image::load_from_memory_with_format(&bytes, format).map_err(|e| fail(e.to_string()))?;
    Ok(encode_for_attachment(&img))
}

/// Builds bundles. Holds templates, grid geometry and a per-class cache of
/// encoded exemplar grids, so a class's grid is stitched once per run.
pub struct PromptBuilder {
    templates: TemplateSet,
    cell_size: u32,
    max_cols: u32,
    grids: Mutex<HashMap<ClassId, ImageAttachment>>,
}

impl Default for PromptBuilder {
    fn default() -> Self {
        Self::new(TemplateSet::default())
    }
}

/// Appends text to the part list, merging with a preceding text part.
fn push_text(parts: &mut Vec<Part>, text: &str) {
    if let Some(Part::Text(prev)) = parts.last_mut() {
        prev.push('\n');
        prev.push_str(text);
    } else {
        parts.push(Part::Text(text.to_string()));
    }
}

/// Inputs to [`PromptBuilder::build`] besides the strategy and test item.
#[derive(Default, Clone, Copy)]
pub struct PromptContext<'a> {
    pub expert: Option<&'a ExpertPrediction>,
    pub exemplars: Option<&'a BTreeMap<ClassId, ExemplarSet>>,
    pub attributes: Option<&'a BTreeMap<ClassId, Vec<String>>>,
}

impl PromptBuilder {
    pub fn new(templates: TemplateSet) -> Self {
        Self::with_geometry(templates, DEFAULT_CELL_SIZE, DEFAULT_MAX_COLS)
    }

    pub fn with_geometry(templates: TemplateSet, cell_size: u32, max_cols: u32) -> Self {
        Self {
            templates,
            cell_size,
            max_cols,
            grids: Mutex::new(HashMap::new()),
        }
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    fn grid_for(
        &self,
        set: &ExemplarSet,
        vocab: &SpeciesVocabulary,
    ) -> Result<ImageAttachment, PromptError> {
        if let Some(hit) = self
            .grids
            .lock()
            .expect("grid cache lock")
            .get(&set.class_id)
        {
            return Ok(hit.clone());
        }
        let label = vocab.get(set.class_id).display_name();
        let grid = stitch_exemplars(set, &label, self.cell_size, self.max_cols)?;
        let attachment = encode_for_attachment(&DynamicImage::ImageRgb8(grid.image));
        self.grids
            .lock()
            .expect("grid cache lock")
            .insert(set.class_id, attachment.clone());
        Ok(attachment)
    }

    pub fn build(
        &self,
        strategy: &PromptStrategy,
        test: &TestItem,
        vocab: &SpeciesVocabulary,
        ctx: PromptContext<'_>,
    ) -> Result<PromptBundle, PromptError> {
        strategy.validate()?;
        let t = &self.templates;
        let mut parts = Vec::new();
        let mut candidates = Vec::new();
        let trim = |s: &str| s.trim_end_matches('\n').to_string();
        let answer_select = trim(&t.answer_select);

        match strategy {
            PromptStrategy::OpenVocab => push_text(&mut parts, &trim(&t.open_vocab)),
            PromptStrategy::OpenVocabCot => push_text(&mut parts, &trim(&t.open_vocab_cot)),
            PromptStrategy::OpenVocabVerify => push_text(&mut parts, &trim(&t.open_vocab_verify)),
            PromptStrategy::ZsIclAllNames => {
                let list = vocab
                    .records()
                    .iter()
                    .enumerate()
                    .map(|(i, r)| format!("{}. {}", i + 1, r.display_name()))
                    .collect::<Vec<_>>()
                    .join("\n");
                let text = render(
                    &trim(&t.zs_icl),
                    &[
                        ("num_classes", &vocab.len().to_string()),
                        ("candidate_list", &list),
                        ("answer_format", &answer_select),
                    ],
                )?;
                push_text(&mut parts, &text);
                candidates = vocab.class_ids().collect();
            }
            PromptStrategy::Poc(opts) => {
                let expert = ctx.expert.ok_or(PromptError::MissingExpert)?;
                if expert.entries.len() < opts.k {
                    return Err(PromptError::TooFewPredictions {
                        have: expert.entries.len(),
                        need: opts.k,
                    });
                }
                let exemplars = if opts.exemplar_images {
                    let map = ctx
                        .exemplars
                        .ok_or(PromptError::MissingExemplars(expert.top1()))?;
                    Some(map)
                } else {
                    None
                };
                let attributes = if opts.text_attributes {
                    Some(ctx.attributes.ok_or(PromptError::MissingAttributes)?)
                } else {
                    None
                };
                let k = opts.k.to_string();
                let note = if opts.exemplar_images {
                    t.poc_exemplar_note.as_str()
                } else {
                    ""
                };
                push_text(
                    &mut parts,
                    &render(&trim(&t.poc_intro), &[("k", &k), ("exemplar_note", note)])?,
                );
                for (rank, &(class_id, confidence)) in
                    expert.entries.iter().take(opts.k).enumerate()
                {
                    let record = vocab.get(class_id);
                    let mut block = render(
                        &t.poc_candidate,
                        &[
                            ("rank", &(rank + 1).to_string()),
                            ("display_name", &record.display_name()),
                        ],
                    )?;
                    if opts.confidences {
                        block.push_str(&render(
                            &t.poc_confidence,
                            &[("confidence", &format!("{confidence:.4}"))],
                        )?);
                    }
                    if opts.taxonomy {
                        if let Some(path) = record.taxonomy_path() {
                            block.push('\n');
                            block.push_str(&render(&t.poc_taxonomy, &[("taxonomy", &path)])?);
                        }
                    }
                    if let Some(attrs) = attributes
                        .and_then(|a| a.get(&class_id))
                        .filter(|a| !a.is_empty())
                    {
                        block.push('\n');
                        block.push_str(&render(
                            &t.poc_attributes,
                            &[("attributes", &attrs.join("; "))],
                        )?);
                    }
                    if let Some(map) = exemplars {
                        let set = map
                            .get(&class_id)
                            .ok_or(PromptError::MissingExemplars(class_id))?;
                        block.push('\n');
                        block.push_str(&render(
                            &t.poc_exemplars,
                            &[("scientific_name", &record.scientific_name)],
                        )?);
                        push_text(&mut parts, &block);
                        parts.push(Part::Image(self.grid_for(set, vocab)?));
                    } else {
                        push_text(&mut parts, &block);
                    }
                    candidates.push(class_id);
                }
                let evidence = if opts.exemplar_images {
                    t.poc_evidence.as_str()
                } else {
                    ""
                };
                let (instruction, answer) = match opts.decision {
                    DecisionMode::Select => (&t.poc_select, answer_select.clone()),
                    DecisionMode::Rerank => (
                        &t.poc_rerank,
                        render(&trim(&t.answer_rerank), &[("k", &k)])?,
                    ),
                };
                push_text(
                    &mut parts,
                    &render(
                        &trim(instruction),
                        &[
                            ("k", &k),
                            ("evidence", evidence),
                            ("answer_format", &answer),
                        ],
                    )?,
                );
            }
        }

        push_text(&mut parts, &trim(&t.test_image));
        parts.push(Part::Image(attach_image_file(
            &test.image_id,
            &test.resolved_path,
        )?));

        let system_text = trim(&t.system);
        let hash = content_hash(&system_text, &parts);
        Ok(PromptBundle {
            system_text,
            user_parts: parts,
            strategy: strategy.clone(),
            candidates,
            provenance: Provenance {
                image_id: test.image_id.clone(),
                expert_tag: ctx.expert.map(|e| e.expert_tag.clone()),
                content_hash: hash,
            },
        })
    }
}

/// Every family plus a spread of option combinations, named for file
/// output. This is the matrix the golden prompt files are rendered from.
pub fn reference_strategies() -> Vec<(&'static str, PromptStrategy)> {
    use DecisionMode::{Rerank, Select};
    let poc = |k, exemplar_images, confidences, taxonomy, text_attributes, decision| {
        PromptStrategy::Poc(PocOptions {
            exemplar_images,
            confidences,
            taxonomy,
            text_attributes,
            decision,
            k,
        })
    };
    vec![
        ("01_open_vocab", PromptStrategy::OpenVocab),
        ("02_open_vocab_cot", PromptStrategy::OpenVocabCot),
        ("03_open_vocab_verify", PromptStrategy::OpenVocabVerify),
        ("04_zs_icl_all_names", PromptStrategy::ZsIclAllNames),
        (
            "05_poc_k1_names_select",
            poc(1, false, false, false, false, Select),
        ),
        (
            "06_poc_k5_names_select",
            poc(5, false, false, false, false, Select),
        ),
        (
            "07_poc_k5_names_rerank",
            poc(5, false, false, false, false, Rerank),
        ),
        (
            "08_poc_k5_conf_select",
            poc(5, false, true, false, false, Select),
        ),
        (
            "09_poc_k5_conf_rerank",
            poc(5, false, true, false, false, Rerank),
        ),
        (
            "10_poc_k5_images_select",
            poc(5, true, false, false, false, Select),
        ),
        (
            "11_poc_k5_images_conf_rerank",
            poc(5, true, true, false, false, Rerank),
        ),
        (
            "12_poc_k2_images_conf_rerank",
            poc(2, true, true, false, false, Rerank),
        ),
        (
            "13_poc_k5_taxonomy_rerank",
            poc(5, false, true, true, false, Rerank),
        ),
        (
            "14_poc_k5_attributes_select",
            poc(5, false, false, false, true, Select),
        ),
        (
            "15_poc_k3_everything_rerank",
            poc(3, true, true, true, true, Rerank),
        ),
    ]
}

/// One-off build with default templates and grid geometry.
pub fn build_prompt(
    strategy: &PromptStrategy,
    test: &TestItem,
    vocab: &SpeciesVocabulary,
    ctx: PromptContext<'_>,
) -> Result<PromptBundle, PromptError> {
    PromptBuilder::default().build(strategy, test, vocab, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_validation() {
        assert!(PromptStrategy::OpenVocab.validate().is_ok());
        let mut o = PocOptions::full();
        assert!(PromptStrategy::Poc(o.clone()).validate().is_ok());
        o.k = 1;
        assert!(PromptStrategy::Poc(o.clone()).validate().is_err());
        o.decision = DecisionMode::Select;
        assert!(PromptStrategy::Poc(o.clone()).validate().is_ok());
        o.k = 0;
        assert!(PromptStrategy::Poc(o).validate().is_err());
    }

    #[test]
    fn strategy_serde_shape() {
        let s: PromptStrategy = serde_json::from_str(
            r#"{"family":"poc","exemplar_images":true,"confidences":true,"decision":"rerank","k":5}"#,
        )
        .unwrap();
        assert_eq!(s, PromptStrategy::Poc(PocOptions::full()));
        assert_eq!(s.label(), "poc[k=5,images,conf,rerank]");
        let o: PromptStrategy = serde_json::from_str(r#"{"family":"open_vocab_cot"}"#).unwrap();
        assert_eq!(o, PromptStrategy::OpenVocabCot);
    }

    #[test]
    fn hash_separates_fields() {
        let a = content_hash("ab", &[Part::Text("c".into())]);
        let b = content_hash("a", &[Part::Text("bc".into())]);
        assert_ne!(a, b);
        assert_eq!(a, content_hash("ab", &[Part::Text("c".into())]));
    }

    #[test]
    fn oversize_images_are_downscaled() {
        // Noise defeats compression, forcing the jpeg path.
        let mut state = 1u32;
        let img = image::RgbImage::from_fn(1400, 1400, |_, _| {
            state = state.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
            let b = state.to_le_bytes();
            image::Rgb([b[1], b[2], b[3]])
        });
        let att = encode_for_attachment(&DynamicImage::ImageRgb8(img));
        assert!(att.bytes.len() <= MAX_ATTACHMENT_BYTES);
        assert_eq!(att.media_type, "image/jpeg");
    }
}
