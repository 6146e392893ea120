//! Request and response bodies for the chat-completions exchange. Field names
//! are fixed; see `docs/wire.md`.

use serde::{Deserialize, Serialize};

use poc_core::prompt::{Part, PromptBundle};

/// Header carrying the bundle's test image id. Real endpoints ignore it; the
/// mock server uses it to look up the answer key.
pub const ITEM_ID_HEADER: &str = "x-poc-item-id";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "lowercase")]
pub enum Message {
    System { content: String },
    User { content: Vec<ContentPart> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub choices: Vec<Choice>,
    #[serde(default)]
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub message: AssistantMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistantMessage {
    #[serde(default)]
    pub role: Option<String>,
    #[serde(default)]
    pub content: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
}

impl ChatRequest {
    pub fn from_bundle(
        bundle: &PromptBundle,
        model: &str,
        temperature: f64,
        max_tokens: u32,
    ) -> Self {
        let content = bundle
            .user_parts
            .iter()
            .map(|p| match p {
                Part::Text(text) => ContentPart::Text { text: text.clone() },
                Part::Image(img) => ContentPart::ImageUrl {
                    image_url: ImageUrl {
                        url: img.data_uri(),
                    },
                },
            })
            .collect();
        Self {
            model: model.to_string(),
            messages: vec![
                Message::System {
                    content: bundle.system_text.clone(),
                },
                Message::User { content },
            ],
            temperature,
            max_tokens,
        }
    }

    /// User text parts joined with newlines.
    pub fn user_text(&self) -> String {
        let mut parts = Vec::new();
        for m in &self.messages {
            if let Message::User { content } = m {
                for c in content {
                    if let ContentPart::Text { text } = c {
                        parts.push(text.as_str());
                    }
                }
            }
        }
        parts.join("\n")
    }

    pub fn image_count(&self) -> usize {
        self.messages
            .iter()
            .map(|m| match m {
                Message::User { content } => content
                    .iter()
                    .filter(|c| matches!(c, ContentPart::ImageUrl { .. }))
                    .count(),
                Message::System { .. } => 0,
            })
            .sum()
    }
}
