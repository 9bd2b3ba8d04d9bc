//! Chat-completion and embedding request/response shapes.
//!
//! Requests follow the widely implemented chat-completions JSON schema:
//! a system message, a user message with interleaved text and image parts
//! (images inlined as PNG data URLs), and per-token log-probabilities with
//! top-K alternatives in the response.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use editdiff_core::parser::{TokenAlternative, TokenLogprob};
use editdiff_core::Image;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{GatewayError, Result};

pub const PNG_DATA_URL_PREFIX: &str = "data:image/png;base64,";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum UserPart {
    Text {
        text: String,
    },
    /// PNG bytes, base64-encoded.
    Image {
        png_base64: String,
    },
}

impl UserPart {
    pub fn text(t: impl Into<String>) -> Self {
        UserPart::Text { text: t.into() }
    }

    pub fn image(img: &Image) -> Result<Self> {
        Ok(UserPart::Image {
            png_base64: STANDARD.encode(img.encode_png()?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_parts: Vec<UserPart>,
    pub want_logprobs: bool,
    pub top_k_alternatives: u8,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(system_prompt: impl Into<String>, user_parts: Vec<UserPart>) -> Self {
        Self {
            system_prompt: system_prompt.into(),
            user_parts,
            want_logprobs: false,
            top_k_alternatives: 0,
            temperature: 0.0,
            max_tokens: 512,
        }
    }

    pub fn with_logprobs(mut self, top_k: u8) -> Self {
        self.want_logprobs = true;
        self.top_k_alternatives = top_k;
        self
    }

    pub fn image_count(&self) -> usize {
        self.user_parts
            .iter()
            .filter(|p| matches!(p, UserPart::Image { .. }))
            .count()
    }

    pub fn validate(&self, max_images: usize) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} must be ≥ 0",
                self.temperature
            )));
        }
        let n = self.image_count();
        if n > max_images {
            return Err(GatewayError::TooManyImages {
                got: n,
                max: max_images,
            });
        }
        Ok(())
    }

    /// Request body for `model`. Object keys serialize in sorted order, so the
    /// JSON text is canonical.
    pub fn to_wire(&self, model: &str) -> Value {
        let content: Vec<Value> = self
            .user_parts
            .iter()
            .map(|p| match p {
                UserPart::Text { text } => json!({"type": "text", "text": text}),
                UserPart::Image { png_base64 } => json!({
                    "type": "image_url",
                    "image_url": {"url": format!("{PNG_DATA_URL_PREFIX}{png_base64}")}
                }),
            })
            .collect();
        let mut body = json!({
            "model": model,
            "messages": [
                {"role": "system", "content": self.system_prompt},
                {"role": "user", "content": content},
            ],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        });
        if self.want_logprobs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(self.top_k_alternatives);
        }
        body
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    /// Empty unless log-probabilities were requested.
    pub tokens: Vec<TokenLogprob>,
    pub usage: Option<Usage>,
}

impl ChatResponse {
    /// Whether the tokens concatenate back to the text.
    pub fn tokens_consistent(&self) -> bool {
        self.tokens.is_empty() || self.tokens.iter().map(|t| t.token.as_str()).collect::<String>() == self.text
    }

    pub fn from_wire(body: &Value) -> Result<Self> {
        let parsed: WireChatResponse =
            serde_json::from_value(body.clone()).map_err(|e| GatewayError::Decode(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| GatewayError::Decode("no choices".into()))?;
        let tokens = choice
            .logprobs
            .and_then(|l| l.content)
            .unwrap_or_default()
            .into_iter()
            .map(|t| {
                let alts = t
                    .top_logprobs
                    .into_iter()
                    .map(|a| TokenAlternative {
                        token: a.token,
                        logprob: a.logprob,
                    })
                    .collect();
                TokenLogprob::new(t.token, t.logprob, alts)
            })
            .collect();
        Ok(Self {
            text: choice.message.content.unwrap_or_default(),
            tokens,
            usage: parsed.usage,
        })
    }
}

#[derive(Deserialize)]
struct WireChatResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    content: Option<Vec<WireToken>>,
}

#[derive(Deserialize)]
struct WireToken {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<WireAlternative>,
}

#[derive(Deserialize)]
struct WireAlternative {
    token: String,
    logprob: f64,
}

/// One embedding input: text, or an image sent as a PNG data URL.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbeddingInput {
    Text(String),
    Image(String),
}

impl EmbeddingInput {
    pub fn image(img: &Image) -> Result<Self> {
        Ok(EmbeddingInput::Image(format!(
            "{PNG_DATA_URL_PREFIX}{}",
            STANDARD.encode(img.encode_png()?)
        )))
    }

    pub fn to_wire(&self, model: &str) -> Value {
        let input = match self {
            EmbeddingInput::Text(t) | EmbeddingInput::Image(t) => t,
        };
        json!({"model": model, "input": [input]})
    }
}

pub fn embedding_from_wire(body: &Value) -> Result<Vec<f64>> {
    #[derive(Deserialize)]
    struct Item {
        embedding: Vec<f64>,
    }
    #[derive(Deserialize)]
    struct Resp {
        data: Vec<Item>,
    }
    let r: Resp = serde_json::from_value(body.clone()).map_err(|e| GatewayError::Decode(e.to_string()))?;
    r.data
        .into_iter()
        .next()
        .map(|i| i.embedding)
        .ok_or_else(|| GatewayError::Decode("no embedding in response".into()))
}

/// Decodes a PNG data URL back into an image.
pub fn decode_data_url(url: &str) -> Result<Image> {
    let b64 = url
        .strip_prefix(PNG_DATA_URL_PREFIX)
        .ok_or_else(|| GatewayError::Decode("not a PNG data URL".into()))?;
    let bytes = STANDARD.decode(b64).map_err(|e| GatewayError::Decode(e.to_string()))?;
    Ok(Image::decode(&bytes)?)
}
