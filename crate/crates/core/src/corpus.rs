//! Single-line bug-fix datasets: loading, validation, length filtering and
//! repository-grouped splitting.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::token::token_count;

pub const DEFAULT_MAX_TOKENS: usize = 150;
pub const DEFAULT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("insufficient repository diversity: need at least 3 repositories, found {0}")]
    InsufficientRepos(usize),
    #[error("invalid split ratios {0:?}: must be positive and sum to 1")]
    InvalidRatios([f64; 3]),
    #[error("max_tokens must be at least 1")]
    InvalidMaxTokens,
    #[error("{path}:{line}: {reason}")]
    InvalidRecord {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("duplicate instance id {0:?}")]
    DuplicateId(String),
    #[error("failed to serialize: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// One single-line bug.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BugInstance {
    pub id: String,
    pub repo: String,
    pub buggy_method: String,
    pub buggy_line_index: usize,
    pub buggy_line: String,
    pub fixed_line: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
}

impl BugInstance {
    /// Checks the record invariants, returning a short rejection reason.
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.repo.trim().is_empty() {
            return Err("empty repo".into());
        }
        match self.buggy_method.split('\n').nth(self.buggy_line_index) {
            None => return Err("line index out of range".into()),
            Some(line) if line.trim() != self.buggy_line.trim() => {
                return Err("line mismatch".into())
            }
            Some(_) => {}
        }
        if token_count(&self.fixed_line) == 0 {
            return Err("empty fixed line".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    /// 1-based line number in the source file.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Default, Clone)]
pub struct ParsedDataset {
    pub instances: Vec<BugInstance>,
    pub rejections: Vec<Rejection>,
}

/// Loads a JSONL dataset. Malformed or invalid records are rejected
/// individually; only an unreadable file is an error.
pub fn parse_dataset(path: impl AsRef<Path>) -> Result<ParsedDataset, CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let mut out = ParsedDataset::default();
    let mut seen = HashSet::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let reject = |reason: String| Rejection { line: n + 1, reason };
        match serde_json::from_str::<BugInstance>(&line) {
            Err(e) => out.rejections.push(reject(format!("malformed record: {e}"))),
            Ok(inst) => match inst.validate() {
                Err(reason) => out.rejections.push(reject(reason)),
                Ok(()) if !seen.insert(inst.id.clone()) => {
                    out.rejections.push(reject(format!("duplicate id {}", inst.id)))
                }
                Ok(()) => out.instances.push(inst),
            },
        }
    }
    Ok(out)
}

/// Loads a dataset, failing on the first rejected record. Used for split
/// files this tool wrote itself.
pub fn load_instances(path: impl AsRef<Path>) -> Result<Vec<BugInstance>, CorpusError> {
    let parsed = parse_dataset(path.as_ref())?;
    match parsed.rejections.first() {
        Some(r) => Err(CorpusError::InvalidRecord {
            path: path.as_ref().display().to_string(),
            line: r.line,
            reason: r.reason.clone(),
        }),
        None => Ok(parsed.instances),
    }
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(&buf).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Content hash of a list of instances, independent of file formatting.
pub fn corpus_hash(instances: &[BugInstance]) -> String {
    let mut h = Sha256::new();
    for inst in instances {
        h.update(serde_json::to_vec(inst).expect("instances serialize"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Partitions `instances` by the token length of their buggy method.
/// Methods of exactly `max_tokens` tokens are kept.
pub fn filter_instances(
    instances: Vec<BugInstance>,
    max_tokens: usize,
) -> Result<(Vec<BugInstance>, Vec<BugInstance>), CorpusError> {
    if max_tokens == 0 {
        return Err(CorpusError::InvalidMaxTokens);
    }
    Ok(instances
        .into_iter()
        .partition(|inst| token_count(&inst.buggy_method) <= max_tokens))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: Vec<BugInstance>,
    pub valid: Vec<BugInstance>,
    pub test: Vec<BugInstance>,
    pub seed: u64,
}

impl SplitDataset {
    pub fn parts(&self) -> [&[BugInstance]; 3] {
        [&self.train, &self.valid, &self.test]
    }

    pub fn repos(part: &[BugInstance]) -> BTreeSet<String> {
        part.iter().map(|i| i.repo.clone()).collect()
    }
}

/// Seeded Fisher-Yates shuffle over ChaCha8.
///
/// The index draw is written out here rather than delegated to a generic
/// `shuffle` so that splits stay identical across dependency upgrades.
pub fn stable_shuffle<T>(items: &mut [T], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..items.len()).rev() {
        let bound = (i + 1) as u64;
        // rejection sampling keeps the draw unbiased
        let zone = u64::MAX - (u64::MAX % bound);
        let j = loop {
            let v = rng.next_u64();
            if v < zone {
                break (v % bound) as usize;
            }
        };
        items.swap(i, j);
    }
}

/// Splits `instances` into train/valid/test with no repository shared
/// between parts.
///
/// Repository groups (in first-appearance order) are shuffled with
/// [`stable_shuffle`] and each is assigned to the part whose deficit
/// (target count minus current count) is largest; ties go to the earlier
/// part. Instances keep their input order inside each part.
pub fn split_dataset(
    instances: &[BugInstance],
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitDataset, CorpusError> {
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0))
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(CorpusError::InvalidRatios(ratios));
    }
    let mut ids = HashSet::new();
    for inst in instances {
        if !ids.insert(inst.id.as_str()) {
            return Err(CorpusError::DuplicateId(inst.id.clone()));
        }
    }

    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        let g = groups.entry(inst.repo.as_str()).or_default();
        if g.is_empty() {
            order.push(inst.repo.as_str());
        }
        g.push(i);
    }
    if order.len() < 3 {
        return Err(CorpusError::InsufficientRepos(order.len()));
    }
    stable_shuffle(&mut order, seed);

    let total = instances.len() as f64;
    let targets = ratios.map(|r| r * total);
    let mut counts = [0usize; 3];
    let mut assignment = vec![0u8; instances.len()];
    for repo in order {
        let members = &groups[repo];
        let mut best = 0;
        for part in 1..3 {
            let deficit = |p: usize| targets[p] - counts[p] as f64;
            if deficit(part) > deficit(best) {
                best = part;
            }
        }
        counts[best] += members.len();
        for &m in members {
            assignment[m] = best as u8;
        }
    }

    let mut parts: [Vec<BugInstance>; 3] = Default::default();
    for (inst, &part) in instances.iter().zip(&assignment) {
        parts[part as usize].push(inst.clone());
    }
    let [train, valid, test] = parts;
    Ok(SplitDataset {
        train,
        valid,
        test,
        seed,
    })
}

/// Audit record written next to the split files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub max_tokens: usize,
    pub shuffle: String,
    pub input_hash: String,
    pub kept: usize,
    pub dropped: usize,
    pub rejected: usize,
    pub sizes: [usize; 3],
    pub train_repos: Vec<String>,
    pub valid_repos: Vec<String>,
    pub test_repos: Vec<String>,
}

pub const SHUFFLE_ALGORITHM: &str = "chacha8-fisher-yates-v1";

impl SplitManifest {
    pub fn new(
        split: &SplitDataset,
        ratios: [f64; 3],
        max_tokens: usize,
        input_hash: String,
        dropped: usize,
        rejected: usize,
    ) -> Self {
        let repos = |p: &[BugInstance]| SplitDataset::repos(p).into_iter().collect();
        SplitManifest {
            seed: split.seed,
            ratios,
            max_tokens,
            shuffle: SHUFFLE_ALGORITHM.to_string(),
            input_hash,
            kept: split.train.len() + split.valid.len() + split.test.len(),
            dropped,
            rejected,
            sizes: [split.train.len(), split.valid.len(), split.test.len()],
            train_repos: repos(&split.train),
            valid_repos: repos(&split.valid),
            test_repos: repos(&split.test),
        }
    }
}
