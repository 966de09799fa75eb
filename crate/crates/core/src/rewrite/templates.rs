use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::RewriteKind;
use crate::error::{Error, Result};

const SAT_SYSTEM: &str = include_str!("../../templates/sat_system.txt");
const SAT: [&str; 6] = [
    include_str!("../../templates/sat_1.txt"),
    include_str!("../../templates/sat_2.txt"),
    include_str!("../../templates/sat_3.txt"),
    include_str!("../../templates/sat_4.txt"),
    include_str!("../../templates/sat_5.txt"),
    include_str!("../../templates/sat_6.txt"),
];
const NEUTRAL: &str = include_str!("../../templates/neutral.txt");
const CORRECTIVE: &str = include_str!("../../templates/corrective.txt");
const VERIFY: &str = include_str!("../../templates/verify.txt");

pub const ESSAY_TEXT: &str = "[ESSAY_TEXT]";
pub const TEXT: &str = "[TEXT]";
pub const PROMPT_AND_ESSAY: &str = "[PROMPT + Essay]";
pub const OUTPUT: &str = "[OUTPUT]";
pub const ORIGINAL_TEXT: &str = "[ORIGINAL_TEXT]";
pub const REWRITTEN_TEXTS: &str = "[REWRITTEN_TEXTS]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemplateKind {
    Sat(u8),
    Neutral,
    Corrective,
    Verify,
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TemplateKind::Sat(k) => write!(f, "SAT_{k}"),
            TemplateKind::Neutral => f.write_str("NEUTRAL"),
            TemplateKind::Corrective => f.write_str("CORRECTIVE"),
            TemplateKind::Verify => f.write_str("VERIFY"),
        }
    }
}

impl TryFrom<RewriteKind> for TemplateKind {
    type Error = Error;

    fn try_from(k: RewriteKind) -> Result<Self> {
        match k {
            RewriteKind::Sat(l) => Ok(TemplateKind::Sat(l)),
            RewriteKind::Neutral => Ok(TemplateKind::Neutral),
            RewriteKind::Original => Err(Error::Config("originals have no rewrite template".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pub system_text: Option<&'static str>,
    pub user_text_template: &'static str,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub system: Option<String>,
    pub user: String,
}

impl PromptTemplate {
    pub fn get(kind: TemplateKind) -> Result<PromptTemplate> {
        let (system_text, user_text_template) = match kind {
            TemplateKind::Sat(k @ 1..=6) => (Some(SAT_SYSTEM), SAT[k as usize - 1]),
            TemplateKind::Sat(k) => return Err(Error::Config(format!("SAT level {k} outside 1..=6"))),
            TemplateKind::Neutral => (None, NEUTRAL),
            TemplateKind::Corrective => (None, CORRECTIVE),
            TemplateKind::Verify => (None, VERIFY),
        };
        Ok(PromptTemplate {
            kind,
            system_text,
            user_text_template,
        })
    }

    /// Placeholders the user template expects.
    pub fn placeholders(&self) -> &'static [&'static str] {
        match self.kind {
            TemplateKind::Sat(_) => &[ESSAY_TEXT],
            TemplateKind::Neutral => &[TEXT],
            TemplateKind::Corrective => &[PROMPT_AND_ESSAY, OUTPUT],
            TemplateKind::Verify => &[ORIGINAL_TEXT, REWRITTEN_TEXTS],
        }
    }

    /// Substitute placeholders in one left-to-right pass, so payload text
    /// that happens to contain a placeholder is left alone.
    pub fn render(&self, payload: &BTreeMap<&str, &str>) -> Result<RenderedPrompt> {
        let names = self.placeholders();
        for n in names {
            if !payload.contains_key(n) {
                return Err(Error::MissingPlaceholder(n.to_string()));
            }
        }
        let mut out = String::with_capacity(self.user_text_template.len());
        let mut rest = self.user_text_template;
        while let Some((at, name)) = names.iter().filter_map(|n| rest.find(n).map(|i| (i, *n))).min() {
            out.push_str(&rest[..at]);
            out.push_str(payload[name]);
            rest = &rest[at + name.len()..];
        }
        out.push_str(rest);
        Ok(RenderedPrompt {
            system: self.system_text.map(str::to_string),
            user: out,
        })
    }
}

/// Prompt asking for one rewrite of `text`.
pub fn render_rewrite(kind: RewriteKind, text: &str) -> Result<RenderedPrompt> {
    let t = PromptTemplate::get(kind.try_into()?)?;
    let key = if matches!(kind, RewriteKind::Neutral) { TEXT } else { ESSAY_TEXT };
    t.render(&BTreeMap::from([(key, text)]))
}

/// Retry prompt after a failed verification. `instruction` is the user text
/// of the original rewrite request, essay included. The system prompt of
/// that request is carried over.
pub fn render_corrective(instruction: &RenderedPrompt, failed_output: &str) -> Result<RenderedPrompt> {
    let t = PromptTemplate::get(TemplateKind::Corrective)?;
    let mut r = t.render(&BTreeMap::from([
        (PROMPT_AND_ESSAY, instruction.user.as_str()),
        (OUTPUT, failed_output),
    ]))?;
    r.system = instruction.system.clone();
    Ok(r)
}

/// Numbered block listing the rewrites for the verification prompt.
pub fn format_rewritten_texts(rewrites: &[&str]) -> String {
    rewrites
        .iter()
        .enumerate()
        .map(|(i, t)| format!("Text {}:\n{t}", i + 1))
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn render_verify(original: &str, rewrites: &[&str]) -> Result<RenderedPrompt> {
    let block = format_rewritten_texts(rewrites);
    PromptTemplate::get(TemplateKind::Verify)?.render(&BTreeMap::from([
        (ORIGINAL_TEXT, original),
        (REWRITTEN_TEXTS, block.as_str()),
    ]))
}
