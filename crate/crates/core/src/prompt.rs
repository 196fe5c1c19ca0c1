//! Answer prompt assembly and generation.

use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::corpus::PassageStore;
use crate::llm::{LlmClient, LlmConfig, LlmError};
use crate::retrieval::RankedList;
use crate::template::{Template, TemplateError};

const SEPARATOR: &str = "\n\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    FString,
    LongContextReorder,
}

/// Instruction text with `{context}` and `{query}` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate(Template);

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self, TemplateError> {
        Template::new(text, &["context", "query"]).map(PromptTemplate)
    }

    pub fn from_file(path: &Path) -> Result<Self, TemplateError> {
        Template::from_file(path, &["context", "query"]).map(PromptTemplate)
    }

    pub fn text(&self) -> &str {
        self.0.text()
    }

    pub fn render(&self, passages: &[&str], query: &str) -> String {
        self.0.render(&[("context", &passages.join(SEPARATOR)), ("query", query)])
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        static T: OnceLock<PromptTemplate> = OnceLock::new();
        T.get_or_init(|| PromptTemplate::new(include_str!("../prompts/answer.txt")).unwrap())
            .clone()
    }
}

/// Passage texts in rank order. Ids missing from the store are skipped.
pub fn passage_texts<'a>(list: &RankedList, store: &'a PassageStore) -> Vec<&'a str> {
    list.entries
        .iter()
        .filter_map(|e| match store.get(&e.passage_id) {
            Some(p) => Some(p.text.as_str()),
            None => {
                log::warn!("passage `{}` not in store; left out of the prompt", e.passage_id);
                None
            }
        })
        .collect()
}

pub fn make_prompt_fstring(template: &PromptTemplate, passages: &[&str], query: &str) -> String {
    template.render(passages, query)
}

/// Rank order with the top passage repeated at the end.
pub fn make_prompt_long_context_reorder(template: &PromptTemplate, passages: &[&str], query: &str) -> String {
    let mut ordered = passages.to_vec();
    if let Some(first) = passages.first() {
        ordered.push(first);
    }
    template.render(&ordered, query)
}

pub fn make_prompt(style: PromptStyle, template: &PromptTemplate, passages: &[&str], query: &str) -> String {
    match style {
        PromptStyle::FString => make_prompt_fstring(template, passages, query),
        PromptStyle::LongContextReorder => make_prompt_long_context_reorder(template, passages, query),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub answer: String,
    pub model_name: String,
    pub temperature: f64,
    pub elapsed_seconds: f64,
}

pub fn generate(prompt: &str, client: &LlmClient, cfg: &LlmConfig) -> Result<Generation, LlmError> {
    let c = client.chat(prompt, cfg)?;
    Ok(Generation {
        answer: c.text,
        model_name: cfg.model_name.clone(),
        temperature: cfg.temperature,
        elapsed_seconds: c.elapsed.as_secs_f64(),
    })
}
