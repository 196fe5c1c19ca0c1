//! `{name}` placeholder substitution for prompt files.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("template placeholder {{{name}}} appears {count} times, expected exactly once")]
    Placeholder { name: String, count: usize },
    #[error("template {path}: {message}")]
    Io { path: String, message: String },
}

/// Text with named `{placeholder}` slots, each present exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    text: String,
}

impl Template {
    pub fn new(text: impl Into<String>, required: &[&str]) -> Result<Self, TemplateError> {
        let text = text.into();
        for name in required {
            let count = text.matches(&format!("{{{name}}}")).count();
            if count != 1 {
                return Err(TemplateError::Placeholder {
                    name: name.to_string(),
                    count,
                });
            }
        }
        Ok(Template { text })
    }

    pub fn from_file(path: &Path, required: &[&str]) -> Result<Self, TemplateError> {
        let text = std::fs::read_to_string(path).map_err(|e| TemplateError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::new(text, required)
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Single left-to-right pass: braces inside substituted values are
    /// never re-expanded. Unknown `{...}` sequences are kept verbatim.
    pub fn render(&self, values: &[(&str, &str)]) -> String {
        let lookup: HashMap<&str, &str> = values.iter().copied().collect();
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            match after.find('}').map(|close| (&after[..close], close)) {
                Some((name, close)) if lookup.contains_key(name) => {
                    out.push_str(lookup[name]);
                    rest = &after[close + 1..];
                }
                _ => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        out
    }
}
