//! Prompt templates and reply parsing.
//!
//! Template bodies live in `templates/*.txt` and use `{name}` placeholders;
//! `{{` and `}}` produce literal braces. The wording of every template,
//! grammar included, is reproduced exactly because results depend on it.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{Policy, PolicyCatalog};
use crate::store::PvLabel;

/// Characters of a reply inspected for the YES/NO token.
pub const VERDICT_WINDOW: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("missing binding for placeholder `{0}`")]
    MissingBinding(String),
    #[error("malformed template: {0}")]
    MalformedTemplate(String),
    #[error("reply has no YES/NO verdict: {0:?}")]
    UnparseableVerdict(String),
    #[error("rationale reply is empty")]
    EmptyRationale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Template {
    CaptionRequest,
    FirstPassJudge,
    RationaleRequest,
    CritiqueRequest,
    ReviseRequest,
    RevisedJudge,
    PrecedentJudge,
    IclJudge,
}

impl Template {
    pub const ALL: [Template; 8] = [
        Template::CaptionRequest,
        Template::FirstPassJudge,
        Template::RationaleRequest,
        Template::CritiqueRequest,
        Template::ReviseRequest,
        Template::RevisedJudge,
        Template::PrecedentJudge,
        Template::IclJudge,
    ];

    /// File stem under `templates/`.
    pub fn file_stem(self) -> &'static str {
        match self {
            Template::CaptionRequest => "caption_request",
            Template::FirstPassJudge => "first_pass_judge",
            Template::RationaleRequest => "rationale_request",
            Template::CritiqueRequest => "critique_request",
            Template::ReviseRequest => "revise_request",
            Template::RevisedJudge => "revised_judge",
            Template::PrecedentJudge => "precedent_judge",
            Template::IclJudge => "icl_judge",
        }
    }

    pub fn body(self) -> &'static str {
        match self {
            Template::CaptionRequest => include_str!("../templates/caption_request.txt"),
            Template::FirstPassJudge => include_str!("../templates/first_pass_judge.txt"),
            Template::RationaleRequest => include_str!("../templates/rationale_request.txt"),
            Template::CritiqueRequest => include_str!("../templates/critique_request.txt"),
            Template::ReviseRequest => include_str!("../templates/revise_request.txt"),
            Template::RevisedJudge => include_str!("../templates/revised_judge.txt"),
            Template::PrecedentJudge => include_str!("../templates/precedent_judge.txt"),
            Template::IclJudge => include_str!("../templates/icl_judge.txt"),
        }
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(self) -> Vec<String> {
        let mut names = Vec::new();
        for seg in parse_segments(self.body()).expect("bundled templates are well formed") {
            if let Segment::Placeholder(name) = seg {
                if !names.iter().any(|n| n == name) {
                    names.push(name.to_string());
                }
            }
        }
        names
    }

    pub fn from_stem(stem: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.file_stem() == stem)
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_stem())
    }
}

/// Placeholder values for [`render`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Bindings(BTreeMap<String, String>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.0.insert(name.into(), value.into());
        self
    }

    pub fn policy(self, policy: &Policy) -> Self {
        self.with("policy", policy.name.clone())
            .with("definition", policy.definition.clone())
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }
}

impl<K: Into<String>, V: Into<String>> FromIterator<(K, V)> for Bindings {
    fn from_iter<I: IntoIterator<Item = (K, V)>>(iter: I) -> Self {
        Self(iter.into_iter().map(|(k, v)| (k.into(), v.into())).collect())
    }
}

enum Segment<'a> {
    Literal(&'a str),
    Placeholder(&'a str),
}

fn parse_segments(body: &str) -> Result<Vec<Segment<'_>>, PromptError> {
    let mut out = Vec::new();
    let bytes = body.as_bytes();
    let mut i = 0;
    let mut lit_start = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                out.push(Segment::Literal(&body[lit_start..i + 1]));
                i += 2;
                lit_start = i;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                out.push(Segment::Literal(&body[lit_start..i + 1]));
                i += 2;
                lit_start = i;
            }
            b'{' => {
                let end = body[i + 1..]
                    .find('}')
                    .map(|e| i + 1 + e)
                    .ok_or_else(|| PromptError::MalformedTemplate(format!("unclosed brace at {i}")))?;
                let name = &body[i + 1..end];
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    return Err(PromptError::MalformedTemplate(format!("bad placeholder `{name}`")));
                }
                out.push(Segment::Literal(&body[lit_start..i]));
                out.push(Segment::Placeholder(name));
                i = end + 1;
                lit_start = i;
            }
            b'}' => {
                return Err(PromptError::MalformedTemplate(format!("stray `}}` at {i}")));
            }
            _ => i += 1,
        }
    }
    out.push(Segment::Literal(&body[lit_start..]));
    Ok(out)
}

/// Substitutes placeholders in an arbitrary template body.
pub fn render_body(body: &str, bindings: &Bindings) -> Result<String, PromptError> {
    let mut out = String::with_capacity(body.len() + 64);
    for seg in parse_segments(body)? {
        match seg {
            Segment::Literal(s) => out.push_str(s),
            Segment::Placeholder(name) => out.push_str(
                bindings
                    .get(name)
                    .ok_or_else(|| PromptError::MissingBinding(name.to_string()))?,
            ),
        }
    }
    Ok(out)
}

pub fn render(template: Template, bindings: &Bindings) -> Result<String, PromptError> {
    render_body(template.body(), bindings)
}

/// `"{name}: {definition}"` lines for every policy, in catalog order.
pub fn policy_list(catalog: &PolicyCatalog) -> String {
    catalog
        .iter()
        .map(|p| format!("{}: {}", p.name, p.definition))
        .collect::<Vec<_>>()
        .join("\n")
}

const POLICY_CLAUSE: &str = "{policy}: {definition}? ";
const RATIONALE_CLAUSE: &str = " For additional context, consider the rationale from a similar case: {rationale}.";

/// Renders the precedent-conditioned judgment prompt, dropping the policy
/// clause and/or the similar-case clause when they are excluded.
pub fn precedent_judge_prompt(policy: Option<&Policy>, rationale: Option<&str>) -> Result<String, PromptError> {
    let mut body = Template::PrecedentJudge.body().to_string();
    let mut bindings = Bindings::new();
    match policy {
        Some(p) => bindings = bindings.policy(p),
        None => body = body.replacen(POLICY_CLAUSE, "", 1),
    }
    match rationale {
        Some(r) => bindings = bindings.with("rationale", r),
        None => body = body.replacen(RATIONALE_CLAUSE, "", 1),
    }
    render_body(&body, &bindings)
}

pub fn icl_judge_prompt(catalog: &PolicyCatalog) -> Result<String, PromptError> {
    render(
        Template::IclJudge,
        &Bindings::new().with("policy_list", policy_list(catalog)),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedVerdict {
    pub label: PvLabel,
    pub raw: String,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Finds `word` as a whole word starting within the first
/// [`VERDICT_WINDOW`] characters of `lower`.
fn word_in_window(lower: &[char], word: &str) -> bool {
    let w: Vec<char> = word.chars().collect();
    let limit = lower.len().min(VERDICT_WINDOW);
    (0..limit).any(|start| {
        let end = start + w.len();
        end <= limit
            && lower[start..end] == w[..]
            && (start == 0 || !is_word_char(lower[start - 1]))
            && lower.get(end).is_none_or(|c| !is_word_char(*c))
    })
}

/// Case-insensitive whole-word scan of the reply's first 16 characters:
/// `yes` means violating, otherwise `no` means non-violating.
pub fn parse_verdict(reply: &str) -> Result<ParsedVerdict, PromptError> {
    let lower: Vec<char> = reply.trim_start().to_lowercase().chars().collect();
    let label = if word_in_window(&lower, "yes") {
        PvLabel::Violating
    } else if word_in_window(&lower, "no") {
        PvLabel::NonViolating
    } else {
        return Err(PromptError::UnparseableVerdict(reply.to_string()));
    };
    Ok(ParsedVerdict {
        label,
        raw: reply.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedRationale {
    pub rationale: String,
    pub was_json: bool,
}

/// Extracts `"rationale"` from the first JSON object in the reply that has
/// it, falling back to the whole trimmed reply. An object whose rationale is
/// blank or not a string is an error.
pub fn parse_rationale(reply: &str) -> Result<ParsedRationale, PromptError> {
    let trimmed = reply.trim();
    if trimmed.is_empty() {
        return Err(PromptError::EmptyRationale);
    }
    for (idx, _) in trimmed.match_indices('{') {
        let mut stream =
            serde_json::Deserializer::from_str(&trimmed[idx..]).into_iter::<serde_json::Value>();
        if let Some(Ok(serde_json::Value::Object(map))) = stream.next() {
            match map.get("rationale") {
                Some(serde_json::Value::String(r)) if !r.trim().is_empty() => {
                    return Ok(ParsedRationale {
                        rationale: r.trim().to_string(),
                        was_json: true,
                    });
                }
                Some(_) => return Err(PromptError::EmptyRationale),
                None => {}
            }
        }
    }
    Ok(ParsedRationale {
        rationale: trimmed.to_string(),
        was_json: false,
    })
}
