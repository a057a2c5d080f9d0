//! Completion marker handling and fenced code block extraction.

use std::sync::LazyLock;

use regex::Regex;

pub const COMPLETION_MARKER: &str = "Now the answer is complete";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed answer after completion marker: `{0}`")]
pub struct MalformedAnswer(pub String);

/// The answer line for object `id`.
pub fn format_answer(id: impl std::fmt::Display) -> String {
    format!("{COMPLETION_MARKER} -- {{'ID':{id}}}")
}

static MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)answer\s+is\s+complete").expect("valid regex"));
static PAYLOAD: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"^\{\s*(?:'id'|"id"|id)\s*:\s*(\d{1,10})\s*,?\s*\}$"#).expect("valid regex")
});

/// Object id announced after the last completion marker in `text`.
/// `Ok(None)` when there is no marker.
pub fn extract_answer(text: &str) -> Result<Option<u32>, MalformedAnswer> {
    let Some(marker) = MARKER.find_iter(text).last() else {
        return Ok(None);
    };
    let rest = text[marker.end()..]
        .trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '-' | '–' | '—' | ':'));
    let malformed = || MalformedAnswer(rest.lines().next().unwrap_or("").trim().to_string());
    if !rest.starts_with('{') {
        return Err(malformed());
    }
    let end = rest.find('}').ok_or_else(malformed)?;
    let payload = rest[..=end].to_lowercase();
    let caps = PAYLOAD.captures(&payload).ok_or_else(malformed)?;
    caps[1].parse::<u32>().map(Some).map_err(|_| malformed())
}

/// Bodies of fenced code blocks that are Python or untagged, in order. An
/// unterminated block runs to the end of the text.
pub fn extract_code_blocks(text: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut current: Option<(bool, Vec<&str>)> = None;
    for line in text.lines() {
        let trimmed = line.trim_start();
        match current.take() {
            None => {
                if let Some(tag) = trimmed.strip_prefix("```") {
                    let tag = tag.trim().to_lowercase();
                    let runnable = matches!(tag.as_str(), "" | "python" | "py" | "python3");
                    current = Some((runnable, Vec::new()));
                }
            }
            Some((runnable, mut body)) => {
                if trimmed.starts_with("```") {
                    if runnable && !body.iter().all(|l| l.trim().is_empty()) {
                        blocks.push(body.join("\n"));
                    }
                } else {
                    body.push(line);
                    current = Some((runnable, body));
                }
            }
        }
    }
    if let Some((true, body)) = current {
        if !body.iter().all(|l| l.trim().is_empty()) {
            blocks.push(body.join("\n"));
        }
    }
    blocks
}
