//! Agent prompts and the parsing of agent replies.
//!
//! Each stage has one template file made of a `[system]` section and a
//! `[user]` section. The user skeleton references fields through
//! `{placeholder}` names (`{{` and `}}` are literal braces). Field values
//! are inserted between `<<<NAME>>>` and `<<<END>>>` marker lines so the
//! model, and [`section`], can tell input parts apart.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::BugInstance;
use crate::retrieval::Demonstration;

pub const SECTION_END: &str = "<<<END>>>";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {stage}: {reason}")]
    Template { stage: Stage, reason: String },
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("pattern prompt needs 1 to 3 demonstrations, got {0}")]
    DemonstrationCount(usize),
    #[error("{0} must not be empty")]
    EmptyField(&'static str),
    #[error("empty patch")]
    EmptyPatch,
    #[error("conversation: {0}")]
    Conversation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Report,
    Pattern,
    Explain,
    Generate,
    Review,
    Regenerate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Report,
        Stage::Pattern,
        Stage::Explain,
        Stage::Generate,
        Stage::Review,
        Stage::Regenerate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Report => "report",
            Stage::Pattern => "pattern",
            Stage::Explain => "explain",
            Stage::Generate => "generate",
            Stage::Review => "review",
            Stage::Regenerate => "regenerate",
        }
    }

    fn placeholders(self) -> (&'static [&'static str], &'static [&'static str]) {
        // (required, optional)
        match self {
            Stage::Report => (&["buggy_method", "buggy_line"], &["context"]),
            Stage::Pattern => (&["demonstrations"], &[]),
            Stage::Explain => (&["buggy_method"], &["context"]),
            Stage::Generate => (
                &["buggy_method", "buggy_line", "bug_report", "bug_patterns", "code_explanation"],
                &["context"],
            ),
            Stage::Review => (
                &[
                    "buggy_method",
                    "buggy_line",
                    "bug_report",
                    "bug_patterns",
                    "code_explanation",
                    "candidate_patch",
                ],
                &["context"],
            ),
            Stage::Regenerate => (&["feedback"], &[]),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Conversation {
    pub messages: Vec<ChatMessage>,
}

impl Conversation {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Conversation { messages }
    }

    pub fn push(&mut self, message: ChatMessage) {
        self.messages.push(message);
    }

    pub fn last(&self) -> Option<&ChatMessage> {
        self.messages.last()
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    /// System message first, then alternating user/assistant turns.
    pub fn validate(&self) -> Result<(), PromptError> {
        let bad = |m: String| Err(PromptError::Conversation(m));
        let Some(first) = self.messages.first() else {
            return bad("empty".into());
        };
        if first.role != Role::System {
            return bad("first message must be a system message".into());
        }
        for (i, msg) in self.messages.iter().enumerate().skip(1) {
            let expected = if i % 2 == 1 { Role::User } else { Role::Assistant };
            if msg.role != expected {
                return bad(format!("message {i} has role {:?}, expected {expected:?}", msg.role));
            }
        }
        for msg in &self.messages {
            if msg.role != Role::Assistant && msg.content.trim().is_empty() {
                return bad(format!("empty {:?} message", msg.role));
            }
        }
        Ok(())
    }

    /// Valid and ending with a user message, i.e. ready to be completed.
    pub fn validate_request(&self) -> Result<(), PromptError> {
        self.validate()?;
        match self.last() {
            Some(m) if m.role == Role::User => Ok(()),
            _ => Err(PromptError::Conversation(
                "request must end with a user message".into(),
            )),
        }
    }

    /// One `{"role":..,"content":..}` object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            out.push_str(&serde_json::to_string(m).expect("messages serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let messages = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Conversation { messages })
    }
}

/// Wraps `value` in section markers.
pub fn delimit(name: &str, value: &str) -> String {
    format!("<<<{name}>>>\n{value}\n{SECTION_END}")
}

/// Content of the first `<<<name>>>` section in `text`.
pub fn section<'a>(text: &'a str, name: &str) -> Option<&'a str> {
    let open = format!("<<<{name}>>>\n");
    let start = text.find(&open)? + open.len();
    let close = format!("\n{SECTION_END}");
    let len = text[start..].find(&close)?;
    Some(&text[start..start + len])
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub stage: Stage,
    pub system_text: Option<String>,
    pub user_skeleton: String,
    pieces: Vec<Piece>,
}

impl PromptTemplate {
    /// Parses a template file body.
    pub fn parse(stage: Stage, source: &str) -> Result<Self, PromptError> {
        let err = |reason: String| PromptError::Template { stage, reason };
        let mut system: Option<Vec<&str>> = None;
        let mut user: Option<Vec<&str>> = None;
        let mut current: Option<&mut Vec<&str>> = None;
        for line in source.lines() {
            match line.trim_end() {
                "[system]" => {
                    if system.is_some() {
                        return Err(err("duplicate [system] section".into()));
                    }
                    current = Some(system.insert(Vec::new()));
                }
                "[user]" => {
                    if user.is_some() {
                        return Err(err("duplicate [user] section".into()));
                    }
                    current = Some(user.insert(Vec::new()));
                }
                _ => match current.as_mut() {
                    Some(lines) => lines.push(line),
                    None if line.trim().is_empty() => {}
                    None => return Err(err("text before the first section header".into())),
                },
            }
        }
        let join = |lines: Vec<&str>| lines.join("\n").trim().to_string();
        let system_text = system.map(join);
        let Some(user_skeleton) = user.map(join) else {
            return Err(err("missing [user] section".into()));
        };
        match (&system_text, stage) {
            (None, Stage::Regenerate) => {}
            (Some(s), Stage::Regenerate) if !s.is_empty() => {
                return Err(err("regenerate extends a conversation and takes no [system]".into()))
            }
            (Some(s), _) if !s.is_empty() => {}
            _ => return Err(err("missing or empty [system] section".into())),
        }
        if user_skeleton.contains("<<<") || user_skeleton.contains(">>>") {
            return Err(err("section markers are inserted automatically".into()));
        }

        let pieces = parse_skeleton(&user_skeleton).map_err(err)?;
        let (required, optional) = stage.placeholders();
        for piece in &pieces {
            if let Piece::Slot(name) = piece {
                if !required.contains(&name.as_str()) && !optional.contains(&name.as_str()) {
                    return Err(err(format!("unknown placeholder {{{name}}}")));
                }
            }
        }
        for name in required {
            if !pieces.iter().any(|p| matches!(p, Piece::Slot(n) if n == name)) {
                return Err(err(format!("missing placeholder {{{name}}}")));
            }
        }
        Ok(PromptTemplate {
            stage,
            system_text,
            user_skeleton,
            pieces,
        })
    }

    fn fill(&self, bind: impl Fn(&str) -> String) -> String {
        self.pieces
            .iter()
            .map(|p| match p {
                Piece::Text(t) => t.clone(),
                Piece::Slot(name) => bind(name),
            })
            .collect()
    }
}

fn parse_skeleton(s: &str) -> Result<Vec<Piece>, String> {
    let mut pieces = Vec::new();
    let mut text = String::new();
    let mut chars = s.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' if chars.peek() == Some(&'{') => {
                chars.next();
                text.push('{');
            }
            '}' if chars.peek() == Some(&'}') => {
                chars.next();
                text.push('}');
            }
            '{' => {
                let mut name = String::new();
                loop {
                    match chars.next() {
                        Some('}') => break,
                        Some(c) if c.is_ascii_alphanumeric() || c == '_' => name.push(c),
                        _ => return Err("unbalanced or malformed placeholder".into()),
                    }
                }
                if name.is_empty() {
                    return Err("empty placeholder".into());
                }
                pieces.push(Piece::Text(std::mem::take(&mut text)));
                pieces.push(Piece::Slot(name));
            }
            '}' => return Err("unbalanced '}'".into()),
            c => text.push(c),
        }
    }
    pieces.push(Piece::Text(text));
    pieces.retain(|p| !matches!(p, Piece::Text(t) if t.is_empty()));
    Ok(pieces)
}

/// Section names used in rendered prompts.
pub mod sections {
    pub const BUGGY_METHOD: &str = "BUGGY_METHOD";
    pub const BUGGY_LINE: &str = "BUGGY_LINE";
    pub const FIXED_LINE: &str = "FIXED_LINE";
    pub const CONTEXT: &str = "CONTEXT";
    pub const BUG_REPORT: &str = "BUG_REPORT";
    pub const BUG_PATTERNS: &str = "BUG_FIXING_PATTERNS";
    pub const CODE_EXPLANATION: &str = "CODE_EXPLANATION";
    pub const CANDIDATE_PATCH: &str = "CANDIDATE_PATCH";
    pub const FEEDBACK: &str = "REVIEW_FEEDBACK";

    /// Per-demonstration section, numbered from 1.
    pub fn numbered(base: &str, n: usize) -> String {
        format!("{base}_{n}")
    }
}

/// What the reviewer sees of the developer's work.
#[derive(Debug, Clone, Copy)]
pub struct ReviewDigest<'a> {
    pub report: &'a str,
    pub patterns: &'a str,
    pub explanation: &'a str,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewVerdict {
    pub passed: bool,
    pub feedback: String,
}

/// The six stage templates.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: Vec<PromptTemplate>,
    sources: Vec<String>,
}

const BUILTIN: [(Stage, &str); 6] = [
    (Stage::Report, include_str!("../templates/report.txt")),
    (Stage::Pattern, include_str!("../templates/pattern.txt")),
    (Stage::Explain, include_str!("../templates/explain.txt")),
    (Stage::Generate, include_str!("../templates/generate.txt")),
    (Stage::Review, include_str!("../templates/review.txt")),
    (Stage::Regenerate, include_str!("../templates/regenerate.txt")),
];

impl Default for TemplateSet {
    fn default() -> Self {
        Self::from_sources(BUILTIN.map(|(_, s)| s.to_string()))
            .expect("built-in templates are valid")
    }
}

impl TemplateSet {
    /// Sources in [`Stage::ALL`] order.
    pub fn from_sources(sources: [String; 6]) -> Result<Self, PromptError> {
        let templates = Stage::ALL
            .iter()
            .zip(&sources)
            .map(|(&stage, src)| PromptTemplate::parse(stage, src))
            .collect::<Result<_, _>>()?;
        Ok(TemplateSet {
            templates,
            sources: sources.to_vec(),
        })
    }

    /// Loads `<stage>.txt` for every stage from `dir`. Stages without a
    /// file fall back to the built-in template.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        let mut sources: [String; 6] = BUILTIN.map(|(_, s)| s.to_string());
        for (i, stage) in Stage::ALL.iter().enumerate() {
            let path = dir.join(format!("{stage}.txt"));
            match fs::read_to_string(&path) {
                Ok(text) => sources[i] = text,
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(source) => {
                    return Err(PromptError::Io {
                        path: path.display().to_string(),
                        source,
                    })
                }
            }
        }
        Self::from_sources(sources)
    }

    /// Writes the templates to `dir`, one file per stage.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> io::Result<()> {
        fs::create_dir_all(dir.as_ref())?;
        for (stage, src) in Stage::ALL.iter().zip(&self.sources) {
            fs::write(dir.as_ref().join(format!("{stage}.txt")), src)?;
        }
        Ok(())
    }

    pub fn get(&self, stage: Stage) -> &PromptTemplate {
        &self.templates[Stage::ALL.iter().position(|&s| s == stage).unwrap()]
    }

    /// SHA-256 over all template sources.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (stage, src) in Stage::ALL.iter().zip(&self.sources) {
            h.update(stage.as_str());
            h.update([0]);
            h.update(src);
            h.update([0]);
        }
        hex::encode(h.finalize())
    }

    fn conversation(&self, stage: Stage, user: String) -> Conversation {
        let tpl = self.get(stage);
        Conversation::new(vec![
            ChatMessage::system(tpl.system_text.clone().unwrap_or_default()),
            ChatMessage::user(user),
        ])
    }

    fn bind_instance(x: &BugInstance, name: &str) -> Option<String> {
        use sections::*;
        Some(match name {
            "buggy_method" => delimit(BUGGY_METHOD, &x.buggy_method),
            "buggy_line" => delimit(BUGGY_LINE, &x.buggy_line),
            "context" => match &x.context {
                Some(c) if !c.trim().is_empty() => {
                    format!("\nContext:\n{}\n", delimit(CONTEXT, c))
                }
                _ => String::new(),
            },
            _ => return None,
        })
    }

    pub fn render_tester_prompt(&self, x: &BugInstance) -> Conversation {
        let tpl = self.get(Stage::Report);
        let user = tpl.fill(|n| Self::bind_instance(x, n).unwrap_or_default());
        self.conversation(Stage::Report, user)
    }

    pub fn render_pattern_prompt(
        &self,
        demos: &[Demonstration],
    ) -> Result<Conversation, PromptError> {
        use sections::*;
        if demos.is_empty() || demos.len() > 3 {
            return Err(PromptError::DemonstrationCount(demos.len()));
        }
        let blocks: Vec<String> = demos
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let n = i + 1;
                format!(
                    "Example {n}:\n{}\n{}\n{}\n",
                    delimit(&numbered(BUGGY_METHOD, n), &d.buggy_method),
                    delimit(&numbered(BUGGY_LINE, n), &d.buggy_line),
                    delimit(&numbered(FIXED_LINE, n), &d.fixed_line),
                )
            })
            .collect();
        let body = blocks.join("\n");
        let user = self
            .get(Stage::Pattern)
            .fill(|n| if n == "demonstrations" { body.clone() } else { String::new() });
        Ok(self.conversation(Stage::Pattern, user))
    }

    pub fn render_explanation_prompt(&self, x: &BugInstance) -> Conversation {
        let user = self.get(Stage::Explain).fill(|n| match n {
            // the fault location stays hidden from the explanation
            "buggy_line" => String::new(),
            _ => Self::bind_instance(x, n).unwrap_or_default(),
        });
        self.conversation(Stage::Explain, user)
    }

    pub fn render_patch_prompt(
        &self,
        x: &BugInstance,
        report: &str,
        patterns: &str,
        explanation: &str,
    ) -> Result<Conversation, PromptError> {
        use sections::*;
        for (name, value) in [
            ("bug report", report),
            ("bug-fixing patterns", patterns),
            ("code explanation", explanation),
        ] {
            if value.trim().is_empty() {
                return Err(PromptError::EmptyField(name));
            }
        }
        let user = self.get(Stage::Generate).fill(|n| match n {
            "bug_report" => delimit(BUG_REPORT, report),
            "bug_patterns" => delimit(BUG_PATTERNS, patterns),
            "code_explanation" => delimit(CODE_EXPLANATION, explanation),
            _ => Self::bind_instance(x, n).unwrap_or_default(),
        });
        Ok(self.conversation(Stage::Generate, user))
    }

    pub fn render_review_prompt(
        &self,
        x: &BugInstance,
        digest: ReviewDigest<'_>,
        candidate: &str,
    ) -> Result<Conversation, PromptError> {
        use sections::*;
        if candidate.trim().is_empty() {
            return Err(PromptError::EmptyField("candidate patch"));
        }
        let user = self.get(Stage::Review).fill(|n| match n {
            "bug_report" => delimit(BUG_REPORT, digest.report),
            "bug_patterns" => delimit(BUG_PATTERNS, digest.patterns),
            "code_explanation" => delimit(CODE_EXPLANATION, digest.explanation),
            "candidate_patch" => delimit(CANDIDATE_PATCH, candidate),
            _ => Self::bind_instance(x, n).unwrap_or_default(),
        });
        Ok(self.conversation(Stage::Review, user))
    }

    /// Extends the developer's conversation (which must end with the
    /// developer's reply) with the reviewer's feedback.
    pub fn render_regenerate_prompt(
        &self,
        prior: &Conversation,
        feedback: &str,
    ) -> Result<Conversation, PromptError> {
        if feedback.trim().is_empty() {
            return Err(PromptError::EmptyField("review feedback"));
        }
        prior.validate()?;
        if prior.last().map(|m| m.role) != Some(Role::Assistant) {
            return Err(PromptError::Conversation(
                "prior conversation must end with the developer's reply".into(),
            ));
        }
        let user = self.get(Stage::Regenerate).fill(|n| match n {
            "feedback" => delimit(sections::FEEDBACK, feedback),
            _ => String::new(),
        });
        let mut conv = prior.clone();
        conv.push(ChatMessage::user(user));
        Ok(conv)
    }
}

/// Pulls the patch line out of a developer reply.
///
/// Prefers the first non-empty line inside the first fenced code block,
/// falling back to the first non-empty line of the whole reply.
pub fn extract_patch(text: &str) -> Result<String, PromptError> {
    let mut in_fence = false;
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.starts_with("```") {
            if in_fence {
                break;
            }
            in_fence = true;
            // a one-line block like ```return x;```
            let inner = trimmed.trim_start_matches('`').trim_end_matches('`').trim();
            if trimmed.len() > 6 && trimmed.ends_with("```") && !inner.is_empty() {
                return Ok(inner.to_string());
            }
            continue;
        }
        if in_fence && !trimmed.is_empty() {
            return Ok(trimmed.to_string());
        }
    }
    let non_empty = || text.lines().map(str::trim).filter(|l| !l.is_empty());
    non_empty()
        .find(|l| !l.starts_with("```"))
        .or_else(|| non_empty().next())
        .map(str::to_string)
        .ok_or(PromptError::EmptyPatch)
}

pub const VERDICT_CORRECT: &str = "VERDICT: CORRECT";
pub const VERDICT_INCORRECT: &str = "VERDICT: INCORRECT";

/// Reads the reviewer's verdict from the first non-empty line. Anything
/// other than an exact (case-insensitive) `VERDICT: CORRECT` is a rejection.
pub fn parse_verdict(text: &str) -> ReviewVerdict {
    let first = text.lines().map(str::trim).find(|l| !l.is_empty());
    let passed = first.is_some_and(|l| l.eq_ignore_ascii_case(VERDICT_CORRECT));
    let feedback = if text.trim().is_empty() {
        "(the reviewer gave no feedback)".to_string()
    } else {
        text.trim().to_string()
    };
    ReviewVerdict { passed, feedback }
}
