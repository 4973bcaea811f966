//! BIO tag parsing, span extraction, and repair.

use crate::error::{Error, Result};
use std::fmt;

/// A labeled token span, half-open over token indices.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SlotSpan {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

impl fmt::Display for SlotSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}..{})", self.label, self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tag {
    Outside,
    Begin(String),
    Inside(String),
}

pub fn parse_tag(s: &str) -> Result<Tag> {
    if s == "O" {
        return Ok(Tag::Outside);
    }
    if let Some(label) = s.strip_prefix("B-") {
        if !label.is_empty() {
            return Ok(Tag::Begin(label.to_string()));
        }
    }
    if let Some(label) = s.strip_prefix("I-") {
        if !label.is_empty() {
            return Ok(Tag::Inside(label.to_string()));
        }
    }
    Err(Error::Data(format!("malformed BIO tag: {s:?}")))
}

/// Rewrite any I-X that does not continue a B-X/I-X of the same type as B-X.
pub fn repair_tags(tags: &[String]) -> Result<Vec<String>> {
    let parsed: Vec<Tag> = tags.iter().map(|t| parse_tag(t)).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(tags.len());
    let mut open: Option<String> = None;
    for tag in parsed {
        match tag {
            Tag::Outside => {
                open = None;
                out.push("O".to_string());
            }
            Tag::Begin(x) => {
                out.push(format!("B-{x}"));
                open = Some(x);
            }
            Tag::Inside(x) => {
                if open.as_deref() == Some(x.as_str()) {
                    out.push(format!("I-{x}"));
                } else {
                    out.push(format!("B-{x}"));
                    open = Some(x);
                }
            }
        }
    }
    Ok(out)
}

pub fn is_well_formed(tags: &[String]) -> bool {
    match repair_tags(tags) {
        Ok(repaired) => repaired == tags,
        Err(_) => false,
    }
}

/// Extract spans, applying the repair rule to orphan I-X tags.
pub fn extract_spans(tags: &[String]) -> Result<Vec<SlotSpan>> {
    let repaired = repair_tags(tags)?;
    let mut spans = Vec::new();
    let mut current: Option<SlotSpan> = None;
    for (i, tag) in repaired.iter().enumerate() {
        match parse_tag(tag)? {
            Tag::Outside => {
                if let Some(s) = current.take() {
                    spans.push(s);
                }
            }
            Tag::Begin(label) => {
                if let Some(s) = current.take() {
                    spans.push(s);
                }
                current = Some(SlotSpan {
                    label,
                    start: i,
                    end: i + 1,
                });
            }
            Tag::Inside(_) => {
                // repair guarantees this continues the open span
                if let Some(s) = &mut current {
                    s.end = i + 1;
                }
            }
        }
    }
    if let Some(s) = current.take() {
        spans.push(s);
    }
    Ok(spans)
}

/// Inverse of [`extract_spans`] for non-overlapping spans.
pub fn tags_from_spans(len: usize, spans: &[SlotSpan]) -> Vec<String> {
    let mut tags = vec!["O".to_string(); len];
    for span in spans {
        for i in span.start..span.end.min(len) {
            tags[i] = if i == span.start {
                format!("B-{}", span.label)
            } else {
                format!("I-{}", span.label)
            };
        }
    }
    tags
}

#[cfg(test)]
pub(crate) fn to_strings(tags: &[&str]) -> Vec<String> {
    tags.iter().map(|s| s.to_string()).collect()
}
