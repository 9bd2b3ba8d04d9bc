//! Parsing of detector completions and command confidence estimation.
//!
//! A completion carries one change per line:
//!
//! ```text
//! ADD: watermelon, [0.10, 0.20, 0.55, 0.60]
//! REMOVE: giraffe, (0.3, 0.1, 0.9, 0.95)
//! ```
//!
//! Parsing is total. Lines that do not fit the grammar are kept in
//! [`ParseReport::malformed_lines`] with a machine-readable reason.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::types::{Difference, EditCommand, NormalizedBBox};

/// Coordinates this far outside [0,1] are clamped instead of rejected.
pub const COORD_CLAMP_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MalformedReason {
    UnknownCommand,
    BadCoordinates,
    OutOfRange,
    DegenerateBox,
    EmptySubject,
}

impl MalformedReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            MalformedReason::UnknownCommand => "unknown-command",
            MalformedReason::BadCoordinates => "bad-coordinates",
            MalformedReason::OutOfRange => "out-of-range",
            MalformedReason::DegenerateBox => "degenerate-box",
            MalformedReason::EmptySubject => "empty-subject",
        }
    }
}

impl fmt::Display for MalformedReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MalformedLine {
    pub line: usize,
    pub text: String,
    pub reason: MalformedReason,
}

/// Where a difference's confidence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceSource {
    /// Not yet scored; confidence is the 1.0 placeholder.
    Unscored,
    /// Renormalized command probability from token log-probabilities.
    Logprobs,
    /// Command token could not be located; confidence fell back to 1.0.
    Fallback,
}

/// Per-difference parse bookkeeping, aligned with [`ParseReport::differences`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryMeta {
    /// 1-based line number in the raw text.
    pub line: usize,
    /// Byte offset of the command word in the raw text.
    pub command_offset: usize,
    pub confidence_source: ConfidenceSource,
}

impl EntryMeta {
    pub fn flagged(&self) -> bool {
        self.confidence_source == ConfidenceSource::Fallback
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseReport {
    pub differences: Vec<Difference>,
    pub entries: Vec<EntryMeta>,
    pub malformed_lines: Vec<MalformedLine>,
    pub raw_text: String,
}

impl ParseReport {
    pub fn flagged_count(&self) -> usize {
        self.entries.iter().filter(|e| e.flagged()).count()
    }
}

/// One alternative token at a completion position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAlternative {
    pub token: String,
    pub logprob: f64,
}

/// A sampled token with its natural-log probability and top-K alternatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
    #[serde(default)]
    pub top_alternatives: Vec<TokenAlternative>,
}

impl TokenLogprob {
    /// Builds a token, clamping tiny positive log-probabilities to 0 and
    /// sorting alternatives by descending log-probability.
    pub fn new(token: impl Into<String>, logprob: f64, mut alternatives: Vec<TokenAlternative>) -> Self {
        for a in &mut alternatives {
            a.logprob = a.logprob.min(0.0);
        }
        alternatives.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
        Self {
            token: token.into(),
            logprob: logprob.min(0.0),
            top_alternatives: alternatives,
        }
    }
}

fn is_wrapper(c: char) -> bool {
    c.is_whitespace() || matches!(c, '"' | '\'' | '`' | '-' | '*' | '•')
}

fn closing_for(open: char) -> char {
    if open == '[' {
        ']'
    } else {
        ')'
    }
}

/// Splits `body` into (subject part, coordinate list) at the final bracket group.
fn split_coordinates(body: &str) -> Option<(&str, &str)> {
    let trimmed = body.trim_end_matches(|c: char| c.is_whitespace() || matches!(c, '.' | '"' | '\'' | '`' | ';'));
    let close = trimmed.chars().last()?;
    if close != ']' && close != ')' {
        return None;
    }
    let open = if close == ']' { '[' } else { '(' };
    let start = trimmed.rfind(open)?;
    let mut inner = &trimmed[start + 1..trimmed.len() - 1];
    let subject = &trimmed[..start];
    // "([a, b, c, d])" nests one list inside another
    loop {
        let t = inner.trim();
        let Some(first) = t.chars().next() else { break };
        if (first == '[' || first == '(') && t.ends_with(closing_for(first)) {
            inner = &t[1..t.len() - 1];
        } else {
            break;
        }
    }
    Some((subject, inner))
}

fn parse_coordinates(list: &str) -> Result<NormalizedBBox, MalformedReason> {
    let parts: Vec<&str> = list.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(MalformedReason::BadCoordinates);
    }
    let mut c = [0.0f64; 4];
    for (slot, p) in c.iter_mut().zip(&parts) {
        let v: f64 = p.parse().map_err(|_| MalformedReason::BadCoordinates)?;
        if !v.is_finite() {
            return Err(MalformedReason::BadCoordinates);
        }
        if !(-COORD_CLAMP_TOLERANCE..=1.0 + COORD_CLAMP_TOLERANCE).contains(&v) {
            return Err(MalformedReason::OutOfRange);
        }
        *slot = v.clamp(0.0, 1.0);
    }
    NormalizedBBox::from_array(c).map_err(|_| MalformedReason::DegenerateBox)
}

fn parse_line(line: &str) -> Result<(EditCommand, String, NormalizedBBox, usize), MalformedReason> {
    let start = line
        .char_indices()
        .find(|&(_, c)| !is_wrapper(c))
        .map(|(i, _)| i)
        .unwrap_or(line.len());
    let rest = &line[start..];
    let colon = rest.find(':').ok_or(MalformedReason::UnknownCommand)?;
    let command: EditCommand = rest[..colon].parse().map_err(|_| MalformedReason::UnknownCommand)?;
    let (subject, coords) = split_coordinates(&rest[colon + 1..]).ok_or(MalformedReason::BadCoordinates)?;
    let bbox = parse_coordinates(coords)?;
    let subject = subject.trim_matches(|c: char| c.is_whitespace() || c == ',');
    if subject.is_empty() {
        return Err(MalformedReason::EmptySubject);
    }
    Ok((command, subject.to_string(), bbox, start))
}

/// Parses a full detector completion.
pub fn parse_differences(raw_text: &str) -> ParseReport {
    let mut differences = Vec::new();
    let mut entries = Vec::new();
    let mut malformed_lines = Vec::new();

    let mut offset = 0usize;
    for (idx, line) in raw_text.split('\n').enumerate() {
        let line_start = offset;
        offset += line.len() + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line) {
            Ok((command, subject, bbox, cmd_at)) => {
                differences.push(Difference {
                    command,
                    subject,
                    bbox,
                    confidence: 1.0,
                });
                entries.push(EntryMeta {
                    line: idx + 1,
                    command_offset: line_start + cmd_at,
                    confidence_source: ConfidenceSource::Unscored,
                });
            }
            Err(reason) => malformed_lines.push(MalformedLine {
                line: idx + 1,
                text: line.to_string(),
                reason,
            }),
        }
    }

    ParseReport {
        differences,
        entries,
        malformed_lines,
        raw_text: raw_text.to_string(),
    }
}

/// Leading alphabetic run of a token, uppercased, after leading whitespace.
fn token_key(token: &str) -> String {
    token
        .trim_start()
        .chars()
        .take_while(|c| c.is_ascii_alphabetic())
        .map(|c| c.to_ascii_uppercase())
        .collect()
}

/// Command whose word starts with this token, if any. The three commands
/// start with distinct letters, so at most one matches.
fn command_for_token(token: &str) -> Option<EditCommand> {
    let key = token_key(token);
    if key.is_empty() {
        return None;
    }
    EditCommand::ALL
        .into_iter()
        .find(|c| c.as_str().starts_with(key.as_str()))
}

fn command_index(c: EditCommand) -> usize {
    EditCommand::ALL.iter().position(|x| *x == c).expect("closed set")
}

/// Unnormalized first-sub-token probability of each command at a position,
/// in [`EditCommand::ALL`] order. The sampled token itself counts as an
/// alternative for its own command.
pub fn command_probabilities(position: &TokenLogprob) -> [f64; 3] {
    let mut p = [0.0f64; 3];
    let candidates = position
        .top_alternatives
        .iter()
        .map(|a| (a.token.as_str(), a.logprob))
        .chain(std::iter::once((position.token.as_str(), position.logprob)));
    for (tok, lp) in candidates {
        if let Some(c) = command_for_token(tok) {
            let i = command_index(c);
            p[i] = p[i].max(lp.exp());
        }
    }
    p
}

/// [`command_probabilities`] renormalized to sum to 1, or `None` when no
/// command token appears at this position.
pub fn command_distribution(position: &TokenLogprob) -> Option<[f64; 3]> {
    let p = command_probabilities(position);
    let total: f64 = p.iter().sum();
    if total > 0.0 && total.is_finite() {
        Some(p.map(|v| v / total))
    } else {
        None
    }
}

/// Byte start offsets of each token, valid up to the first byte at which the
/// concatenated tokens diverge from `text`.
fn token_spans(text: &str, tokens: &[TokenLogprob]) -> (Vec<(usize, usize)>, usize) {
    let mut spans = Vec::with_capacity(tokens.len());
    let mut at = 0usize;
    for t in tokens {
        let end = at + t.token.len();
        if end > text.len() || text.as_bytes()[at..end] != *t.token.as_bytes() {
            // common prefix length marks where alignment is lost
            let common = text.as_bytes()[at.min(text.len())..]
                .iter()
                .zip(t.token.as_bytes())
                .take_while(|(a, b)| a == b)
                .count();
            return (spans, at + common);
        }
        spans.push((at, end));
        at = end;
    }
    (spans, at)
}

/// Scores each parsed difference by the probability of its command relative
/// to all three commands at the command's first token.
pub fn attach_confidence(mut report: ParseReport, tokens: &[TokenLogprob]) -> ParseReport {
    let (spans, aligned_until) = token_spans(&report.raw_text, tokens);
    for (diff, meta) in report.differences.iter_mut().zip(report.entries.iter_mut()) {
        let off = meta.command_offset;
        let scored = (off < aligned_until)
            .then(|| spans.iter().position(|&(s, e)| s <= off && off < e))
            .flatten()
            .and_then(|i| {
                let position = &tokens[i];
                if position.top_alternatives.is_empty() {
                    return None;
                }
                // the located token must begin the chosen command word
                let (s, _) = spans[i];
                let tail = &position.token[off - s..];
                if command_for_token(tail) != Some(diff.command) {
                    return None;
                }
                let p = command_probabilities(position);
                let total: f64 = p.iter().sum();
                let chosen = p[command_index(diff.command)];
                (total > 0.0 && total.is_finite()).then(|| (chosen / total).clamp(0.0, 1.0))
            });
        match scored {
            Some(conf) => {
                diff.confidence = conf;
                meta.confidence_source = ConfidenceSource::Logprobs;
            }
            None => {
                diff.confidence = 1.0;
                meta.confidence_source = ConfidenceSource::Fallback;
            }
        }
    }
    report
}

/// Renders one difference in canonical bracket form with 2-decimal coordinates.
pub fn serialize_difference(d: &Difference) -> String {
    let subject: String = d
        .subject
        .chars()
        .map(|c| if c == '\n' || c == '\r' { ' ' } else { c })
        .collect();
    let [a, b, c, e] = d.bbox.to_array();
    format!("{}: {}, [{a:.2}, {b:.2}, {c:.2}, {e:.2}]", d.command, subject.trim())
}

/// Canonical one-line-per-difference text; empty input gives an empty string.
pub fn serialize_differences(diffs: &[Difference]) -> String {
    diffs.iter().map(serialize_difference).collect::<Vec<_>>().join("\n")
}
