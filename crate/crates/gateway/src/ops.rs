//! Detection, coherence, captioning and embedding calls.

use editdiff_core::evalcomp::{l2_normalize, Embedder};
use editdiff_core::parser::{attach_confidence, parse_differences, ParseReport};
use editdiff_core::raster::draw_box_outline;
use editdiff_core::{CoherenceVerdict, Difference, EditCase, EditCommand, Image};

use crate::client::{Gateway, OverlayStyle, Route};
use crate::error::{GatewayError, Result};
use crate::prompts::{
    coherence_user_prompt, compose_user_prompt, CAPTION_SYSTEM_PROMPT, CAPTION_USER_PROMPT, COHERENCE_SYSTEM_PROMPT,
    COMPOSE_SYSTEM_PROMPT, DIFFERENCE_SYSTEM_PROMPT,
};
use crate::wire::{embedding_from_wire, ChatRequest, ChatResponse, EmbeddingInput, UserPart};

/// Draws the difference box on the image that shows it: additions on the
/// edited image, edits and removals on the original. The other image is
/// returned unchanged.
pub fn prepare_coherence_images(
    original: &Image,
    edited: &Image,
    d: &Difference,
    style: &OverlayStyle,
) -> editdiff_core::Result<(Image, Image)> {
    Ok(match d.command {
        EditCommand::Add => (
            original.clone(),
            draw_box_outline(edited, &d.bbox, style.add, style.thickness)?,
        ),
        EditCommand::Edit => (
            draw_box_outline(original, &d.bbox, style.edit, style.thickness)?,
            edited.clone(),
        ),
        EditCommand::Remove => (
            draw_box_outline(original, &d.bbox, style.remove, style.thickness)?,
            edited.clone(),
        ),
    })
}

fn strip_line_wrappers(line: &str) -> &str {
    line.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '-' | '*' | '#' | '•'))
}

/// Strips a case-insensitive `label:` prefix, tolerating markdown emphasis
/// around the label.
fn after_label<'a>(line: &'a str, label: &str) -> Option<&'a str> {
    let l = strip_line_wrappers(line);
    let head = l.get(..label.len())?;
    if !head.eq_ignore_ascii_case(label) {
        return None;
    }
    let rest = l[label.len()..].trim_start_matches('*').trim_start();
    let rest = rest.strip_prefix(':')?;
    Some(rest.trim_start_matches('*').trim())
}

/// Reads the verdict from a coherence completion.
///
/// The first `Decision:` line whose value is YES or NO (any case, optionally
/// quoted) decides. The rationale is the `Reasoning:` text up to the decision
/// line. Without a decision the verdict is NO and flagged.
pub fn parse_verdict(text: &str) -> CoherenceVerdict {
    let mut decision = None;
    let mut rationale: Option<Vec<&str>> = None;
    for line in text.lines() {
        if let Some(v) = after_label(line, "decision") {
            let v = v.trim_matches(|c: char| c.is_whitespace() || matches!(c, '"' | '\'' | '*' | '.' | '`'));
            if v.eq_ignore_ascii_case("yes") {
                decision = Some(true);
                break;
            }
            if v.eq_ignore_ascii_case("no") {
                decision = Some(false);
                break;
            }
            continue;
        }
        if let Some(r) = after_label(line, "reasoning") {
            rationale = Some(vec![r]);
        } else if let Some(parts) = rationale.as_mut() {
            parts.push(line.trim());
        }
    }
    let rationale = rationale
        .map(|p| p.join(" ").split_whitespace().collect::<Vec<_>>().join(" "))
        .unwrap_or_default();
    CoherenceVerdict {
        decision: decision.unwrap_or(false),
        rationale,
        flagged_unparseable: decision.is_none(),
    }
}

impl Gateway {
    fn chat(&self, op: &str, case_id: &str, role: Role, req: &ChatRequest) -> Result<ChatResponse> {
        req.validate(self.config.max_images)?;
        let endpoints = &self.config.endpoints;
        let endpoint = match role {
            Role::Detector => &endpoints.detector,
            Role::Coherence => &endpoints.coherence,
            Role::Captioner => &endpoints.captioner,
            Role::Composer => &endpoints.composer,
        };
        let body = self.call(op, case_id, endpoint, Route::Chat, &req.to_wire(&endpoint.model))?;
        let resp = ChatResponse::from_wire(&body)?;
        if !resp.tokens_consistent() {
            tracing::warn!(
                case_id,
                op,
                "token log-probabilities do not concatenate to the completion text"
            );
        }
        Ok(resp)
    }

    /// Asks the detector for the differences from `original` to `edited`.
    /// Only the two images are sent; the edit prompt never is.
    pub fn detect(&self, case: &EditCase, original: &Image, edited: &Image) -> Result<ParseReport> {
        let req = ChatRequest::new(
            DIFFERENCE_SYSTEM_PROMPT,
            vec![UserPart::image(original)?, UserPart::image(edited)?],
        )
        .with_logprobs(self.config.top_k_alternatives);
        let req = ChatRequest {
            max_tokens: self.config.max_tokens,
            ..req
        };
        let resp = self.chat("detect", &case.case_id, Role::Detector, &req)?;
        Ok(attach_confidence(parse_differences(&resp.text), &resp.tokens))
    }

    /// Asks whether difference `d` is what the case's edit prompt asked for.
    pub fn assess_coherence(
        &self,
        case: &EditCase,
        original: &Image,
        edited: &Image,
        d: &Difference,
    ) -> Result<CoherenceVerdict> {
        let (o, e) = prepare_coherence_images(original, edited, d, &self.config.overlay)?;
        let mut req = ChatRequest::new(
            COHERENCE_SYSTEM_PROMPT,
            vec![
                UserPart::text(coherence_user_prompt(&case.prompt, d)),
                UserPart::image(&o)?,
                UserPart::image(&e)?,
            ],
        );
        req.max_tokens = self.config.max_tokens;
        let resp = self.chat("coherence", &case.case_id, Role::Coherence, &req)?;
        Ok(parse_verdict(&resp.text))
    }

    pub fn caption(&self, case_id: &str, image: &Image) -> Result<String> {
        let req = ChatRequest::new(
            CAPTION_SYSTEM_PROMPT,
            vec![UserPart::text(CAPTION_USER_PROMPT), UserPart::image(image)?],
        );
        Ok(self
            .chat("caption", case_id, Role::Captioner, &req)?
            .text
            .trim()
            .to_string())
    }

    pub fn compose_target_caption(&self, case_id: &str, original_caption: &str, prompt: &str) -> Result<String> {
        if prompt.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let req = ChatRequest::new(
            COMPOSE_SYSTEM_PROMPT,
            vec![UserPart::text(compose_user_prompt(original_caption, prompt))],
        );
        Ok(self
            .chat("compose", case_id, Role::Composer, &req)?
            .text
            .trim()
            .to_string())
    }

    /// Captions the original image, then rewrites the caption for the edit.
    pub fn target_caption(&self, case: &EditCase, original: &Image) -> Result<String> {
        if case.prompt.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let c = self.caption(&case.case_id, original)?;
        self.compose_target_caption(&case.case_id, &c, &case.prompt)
    }

    fn embed(&self, op: &str, case_id: &str, input: &EmbeddingInput) -> Result<Vec<f64>> {
        let ep = &self.config.endpoints.embeddings;
        let body = self.call(op, case_id, ep, Route::Embeddings, &input.to_wire(&ep.model))?;
        let v = l2_normalize(embedding_from_wire(&body)?)?;
        let mut dim = self.embedding_dim.lock().expect("dimension lock");
        match *dim {
            None => *dim = Some(v.len()),
            Some(d) if d != v.len() => {
                return Err(GatewayError::DimensionMismatch {
                    expected: d,
                    got: v.len(),
                })
            }
            _ => {}
        }
        Ok(v)
    }

    pub fn embed_image(&self, case_id: &str, image: &Image) -> Result<Vec<f64>> {
        self.embed("embed_image", case_id, &EmbeddingInput::image(image)?)
    }

    pub fn embed_text(&self, case_id: &str, text: &str) -> Result<Vec<f64>> {
        self.embed("embed_text", case_id, &EmbeddingInput::Text(text.to_string()))
    }

    /// An [`Embedder`] whose calls are logged under `case_id`.
    pub fn embedder<'a>(&'a self, case_id: &'a str) -> CaseEmbedder<'a> {
        CaseEmbedder { gateway: self, case_id }
    }
}

#[derive(Debug, Clone, Copy)]
enum Role {
    Detector,
    Coherence,
    Captioner,
    Composer,
}

pub struct CaseEmbedder<'a> {
    gateway: &'a Gateway,
    case_id: &'a str,
}

fn to_core(e: GatewayError) -> editdiff_core::Error {
    match e {
        GatewayError::Core(c) => c,
        GatewayError::DimensionMismatch { expected, got } => editdiff_core::Error::DimensionMismatch { expected, got },
        other => editdiff_core::Error::Embedding(other.to_string()),
    }
}

impl Embedder for CaseEmbedder<'_> {
    fn embed_image(&self, image: &Image) -> editdiff_core::Result<Vec<f64>> {
        self.gateway.embed_image(self.case_id, image).map_err(to_core)
    }

    fn embed_text(&self, text: &str) -> editdiff_core::Result<Vec<f64>> {
        self.gateway.embed_text(self.case_id, text).map_err(to_core)
    }
}
