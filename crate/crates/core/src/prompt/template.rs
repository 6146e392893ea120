//! Plain-text templates with `{placeholder}` slots.
//!
//! `{{` and `}}` render literal braces. Rendering fails on a placeholder that
//! has no value, so a typo in a template file cannot silently leak into a
//! prompt.

use std::fs;
use std::path::Path;

use super::PromptError;

/// Every template the prompt builder uses, keyed by file stem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub system: String,
    pub open_vocab: String,
    pub open_vocab_cot: String,
    pub open_vocab_verify: String,
    pub zs_icl: String,
    pub answer_select: String,
    pub answer_rerank: String,
    pub poc_intro: String,
    pub poc_exemplar_note: String,
    pub poc_candidate: String,
    pub poc_confidence: String,
    pub poc_taxonomy: String,
    pub poc_attributes: String,
    pub poc_exemplars: String,
    pub poc_evidence: String,
    pub poc_select: String,
    pub poc_rerank: String,
    pub test_image: String,
}

macro_rules! builtin {
    ($name:literal) => {
        include_str!(concat!("../../templates/", $name, ".txt")).to_string()
    };
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            system: builtin!("system"),
            open_vocab: builtin!("open_vocab"),
            open_vocab_cot: builtin!("open_vocab_cot"),
            open_vocab_verify: builtin!("open_vocab_verify"),
            zs_icl: builtin!("zs_icl"),
            answer_select: builtin!("answer_select"),
            answer_rerank: builtin!("answer_rerank"),
            poc_intro: builtin!("poc_intro"),
            poc_exemplar_note: builtin!("poc_exemplar_note"),
            poc_candidate: builtin!("poc_candidate"),
            poc_confidence: builtin!("poc_confidence"),
            poc_taxonomy: builtin!("poc_taxonomy"),
            poc_attributes: builtin!("poc_attributes"),
            poc_exemplars: builtin!("poc_exemplars"),
            poc_evidence: builtin!("poc_evidence"),
            poc_select: builtin!("poc_select"),
            poc_rerank: builtin!("poc_rerank"),
            test_image: builtin!("test_image"),
        }
    }
}

impl TemplateSet {
    /// Built-in templates, with any `<stem>.txt` found in `dir` taking precedence.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::default();
        for (stem, slot) in set.slots_mut() {
            let path = dir.join(format!("{stem}.txt"));
            if path.is_file() {
                *slot = fs::read_to_string(&path)
                    .map_err(|e| PromptError::Template(format!("{}: {e}", path.display())))?;
            }
        }
        Ok(set)
    }

    fn slots_mut(&mut self) -> [(&'static str, &mut String); 18] {
        [
            ("system", &mut self.system),
            ("open_vocab", &mut self.open_vocab),
            ("open_vocab_cot", &mut self.open_vocab_cot),
            ("open_vocab_verify", &mut self.open_vocab_verify),
            ("zs_icl", &mut self.zs_icl),
            ("answer_select", &mut self.answer_select),
            ("answer_rerank", &mut self.answer_rerank),
            ("poc_intro", &mut self.poc_intro),
            ("poc_exemplar_note", &mut self.poc_exemplar_note),
            ("poc_candidate", &mut self.poc_candidate),
            ("poc_confidence", &mut self.poc_confidence),
            ("poc_taxonomy", &mut self.poc_taxonomy),
            ("poc_attributes", &mut self.poc_attributes),
            ("poc_exemplars", &mut self.poc_exemplars),
            ("poc_evidence", &mut self.poc_evidence),
            ("poc_select", &mut self.poc_select),
            ("poc_rerank", &mut self.poc_rerank),
            ("test_image", &mut self.test_image),
        ]
    }
}

/// Fills `{name}` slots from `values`.
pub fn render(template: &str, values: &[(&str, &str)]) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix("{{") {
            out.push('{');
            rest = after;
        } else if let Some(after) = tail.strip_prefix("}}") {
            out.push('}');
            rest = after;
        } else if tail.starts_with('}') {
            return Err(PromptError::Template(format!(
                "unmatched '}}' in {template:?}"
            )));
        } else {
            let end = tail
                .find('}')
                .ok_or_else(|| PromptError::Template(format!("unclosed '{{' in {template:?}")))?;
            let name = &tail[1..end];
            let value = values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| PromptError::Template(format!("no value for {{{name}}}")))?;
            out.push_str(value);
            rest = &tail[end + 1..];
        }
    }
    out.push_str(rest);
    Ok(out)
}
