//! Per-instance transcript files.
//!
//! A transcript is JSONL: one line per chat message, tagged with the stage
//! and turn it belongs to. The messages of one stage record are consecutive
//! lines sharing `(stage, turn)`; the final assistant line is the reply.
//! The same format feeds the replay backend.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::{ChatMessage, Conversation, Role, Stage};

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("transcript {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("transcript {path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub instance_id: String,
    pub stage: Stage,
    pub turn: u32,
    pub started: u64,
    pub finished: u64,
    pub role: Role,
    pub content: String,
}

/// One agent call: the request conversation plus the reply, if any.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub turn: u32,
    pub started: u64,
    pub finished: u64,
    pub conversation: Conversation,
}

impl StageRecord {
    /// The assistant reply closing this record.
    pub fn reply(&self) -> Option<&str> {
        self.conversation
            .last()
            .filter(|m| m.role == Role::Assistant)
            .map(|m| m.content.as_str())
    }
}

pub fn to_lines(instance_id: &str, records: &[StageRecord]) -> Vec<TranscriptLine> {
    records
        .iter()
        .flat_map(|r| {
            r.conversation.messages.iter().map(move |m| TranscriptLine {
                instance_id: instance_id.to_string(),
                stage: r.stage,
                turn: r.turn,
                started: r.started,
                finished: r.finished,
                role: m.role,
                content: m.content.clone(),
            })
        })
        .collect()
}

pub fn render(instance_id: &str, records: &[StageRecord]) -> String {
    let mut out = String::new();
    for line in to_lines(instance_id, records) {
        out.push_str(&serde_json::to_string(&line).expect("transcript lines serialize"));
        out.push('\n');
    }
    out
}

/// Regroups transcript lines into stage records.
pub fn from_lines(lines: &[TranscriptLine]) -> Vec<StageRecord> {
    let mut records: Vec<StageRecord> = Vec::new();
    for line in lines {
        let continues = records.last().is_some_and(|r| {
            r.stage == line.stage
                && r.turn == line.turn
                && r.started == line.started
                && line.role != Role::System
        });
        if !continues {
            records.push(StageRecord {
                stage: line.stage,
                turn: line.turn,
                started: line.started,
                finished: line.finished,
                conversation: Conversation::default(),
            });
        }
        records.last_mut().unwrap().conversation.push(ChatMessage {
            role: line.role,
            content: line.content.clone(),
        });
    }
    records
}

pub fn read_lines(path: &Path) -> Result<Vec<TranscriptLine>, TranscriptError> {
    let text = fs::read_to_string(path).map_err(|source| TranscriptError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|source| TranscriptError::Parse {
                path: path.display().to_string(),
                line: n + 1,
                source,
            })
        })
        .collect()
}

/// Maps an instance id to a file-name-safe stem. Bytes outside
/// `[A-Za-z0-9._-]` are percent-encoded, so distinct ids never collide.
pub fn file_stem(instance_id: &str) -> String {
    let mut out = String::with_capacity(instance_id.len());
    for b in instance_id.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    if out.starts_with('.') {
        out.replace_range(0..1, "%2E");
    }
    out
}

pub fn transcript_path(dir: &Path, instance_id: &str) -> PathBuf {
    dir.join(format!("{}.jsonl", file_stem(instance_id)))
}

pub fn partial_path(dir: &Path, instance_id: &str) -> PathBuf {
    dir.join(format!("{}.partial.jsonl", file_stem(instance_id)))
}

/// Replies indexed by `(instance id, stage, turn)`.
pub type ReplyTable = HashMap<(String, Stage, u32), String>;

/// Collects the replies of a transcript file, or of every completed
/// transcript in a directory.
pub fn load_replies(path: &Path) -> Result<ReplyTable, TranscriptError> {
    let mut files = Vec::new();
    if path.is_dir() {
        let entries = fs::read_dir(path).map_err(|source| TranscriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        for entry in entries {
            let p = entry
                .map_err(|source| TranscriptError::Io {
                    path: path.display().to_string(),
                    source,
                })?
                .path();
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name.ends_with(".jsonl") && !name.ends_with(".partial.jsonl") {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    let mut table = ReplyTable::new();
    for file in files {
        let lines = read_lines(&file)?;
        let Some(id) = lines.first().map(|l| l.instance_id.clone()) else {
            continue;
        };
        for rec in from_lines(&lines) {
            if let Some(reply) = rec.reply() {
                table.insert((id.clone(), rec.stage, rec.turn), reply.to_string());
            }
        }
    }
    Ok(table)
}
