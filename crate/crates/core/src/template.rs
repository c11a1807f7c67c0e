//! Prompt templates with `{slot}` markers.
//!
//! Syntax follows Python's `str.format`: `{name}` is a slot, `{{` and `}}` are
//! literal braces. Prompt texts can therefore be pasted from existing tooling
//! unchanged.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("unbalanced brace at byte {0}")]
    Unbalanced(usize),
    #[error("slot `{0}` must appear exactly once (found {1})")]
    SlotCount(String, usize),
    #[error("template is missing required slot `{0}`")]
    MissingSlot(String),
    #[error("no value supplied for slot `{0}`")]
    Unfilled(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    source: String,
    pieces: Vec<Piece>,
}

impl PromptTemplate {
    pub fn parse(source: &str) -> Result<Self, TemplateError> {
        let mut pieces = Vec::new();
        let mut text = String::new();
        let bytes = source.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            match bytes[i] {
                b'{' if bytes.get(i + 1) == Some(&b'{') => {
                    text.push('{');
                    i += 2;
                }
                b'}' if bytes.get(i + 1) == Some(&b'}') => {
                    text.push('}');
                    i += 2;
                }
                b'{' => {
                    let end = source[i + 1..]
                        .find('}')
                        .map(|e| i + 1 + e)
                        .ok_or(TemplateError::Unbalanced(i))?;
                    let name = &source[i + 1..end];
                    if name.is_empty()
                        || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
                    {
                        return Err(TemplateError::Unbalanced(i));
                    }
                    if !text.is_empty() {
                        pieces.push(Piece::Text(std::mem::take(&mut text)));
                    }
                    pieces.push(Piece::Slot(name.to_owned()));
                    i = end + 1;
                }
                b'}' => return Err(TemplateError::Unbalanced(i)),
                _ => {
                    // Advance by a whole UTF-8 character.
                    let ch = source[i..].chars().next().unwrap();
                    text.push(ch);
                    i += ch.len_utf8();
                }
            }
        }
        if !text.is_empty() {
            pieces.push(Piece::Text(text));
        }
        let template = Self {
            source: source.to_owned(),
            pieces,
        };
        for (name, count) in template.slot_counts() {
            if count != 1 {
                return Err(TemplateError::SlotCount(name, count));
            }
        }
        Ok(template)
    }

    fn slot_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for p in &self.pieces {
            if let Piece::Slot(s) = p {
                *counts.entry(s.clone()).or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn slots(&self) -> Vec<String> {
        self.slot_counts().into_keys().collect()
    }

    pub fn has_slot(&self, name: &str) -> bool {
        self.pieces
            .iter()
            .any(|p| matches!(p, Piece::Slot(s) if s == name))
    }

    pub fn require_slots(&self, names: &[&str]) -> Result<(), TemplateError> {
        for n in names {
            if !self.has_slot(n) {
                return Err(TemplateError::MissingSlot((*n).to_owned()));
            }
        }
        Ok(())
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Substitutes every slot. Values are inserted verbatim.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.source.len());
        for p in &self.pieces {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(s) => {
                    let v = values
                        .iter()
                        .find(|(k, _)| k == s)
                        .ok_or_else(|| TemplateError::Unfilled(s.clone()))?;
                    out.push_str(v.1);
                }
            }
        }
        Ok(out)
    }
}
