//! Prompt templates shipped as text assets.
//!
//! Placeholders are written `{{name}}`; rendering fails if a placeholder has
//! no value, so a template edit cannot silently drop context.

use crate::error::{Error, Result};

/// A system/user prompt pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: &'static str,
    pub system: &'static str,
    pub user: &'static str,
}

pub const REASONING_ANNOTATION: PromptTemplate = PromptTemplate {
    name: "reasoning_annotation",
    system: include_str!("../assets/prompts/reasoning_annotation.system.txt"),
    user: include_str!("../assets/prompts/reasoning_annotation.user.txt"),
};

pub const TASK_VARIATION: PromptTemplate = PromptTemplate {
    name: "task_variation",
    system: include_str!("../assets/prompts/task_variation.system.txt"),
    user: include_str!("../assets/prompts/task_variation.user.txt"),
};

pub const TASK_SELECTION: PromptTemplate = PromptTemplate {
    name: "task_selection",
    system: include_str!("../assets/prompts/task_selection.system.txt"),
    user: include_str!("../assets/prompts/task_selection.user.txt"),
};

/// Transition-quality judge; a single user message.
pub const JUDGE: &str = include_str!("../assets/prompts/judge.txt");

/// Placeholder names in order of first appearance.
pub fn placeholders(template: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) if is_ident(&after[..end]) => {
                if !out.contains(&&after[..end]) {
                    out.push(&after[..end]);
                }
                rest = &after[end + 2..];
            }
            _ => rest = after,
        }
    }
    out
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Substitutes every `{{name}}` with its value. Values are inserted
/// verbatim and never re-scanned.
pub fn render(template: &str, vars: &[(&str, &str)]) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) if is_ident(&after[..end]) => {
                let name = &after[..end];
                let value = vars
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| Error::InvalidArgument(format!("no value for prompt placeholder `{name}`")))?;
                out.push_str(value);
                rest = &after[end + 2..];
            }
            _ => {
                out.push_str("{{");
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}
