//! Okapi BM25 index over training demonstrations.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{corpus_hash, BugInstance};
use crate::token::tokenize_code;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;
pub const DEFAULT_TOP_K: usize = 3;
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot build an index from an empty corpus")]
    EmptyCorpus,
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("unknown document {0}")]
    UnknownDoc(usize),
    #[error("index cache I/O: {0}")]
    Io(#[from] io::Error),
    #[error("index cache format: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params {
            k1: DEFAULT_K1,
            b: DEFAULT_B,
        }
    }
}

/// A retrieved training example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub instance_id: String,
    pub buggy_method: String,
    pub buggy_line: String,
    pub fixed_line: String,
    pub score: f64,
}

/// Lowercased lexer tokens of `buggy_method` followed by `buggy_line`.
pub fn retrieval_terms(buggy_method: &str, buggy_line: &str) -> Vec<String> {
    let text = format!("{buggy_method}\n{buggy_line}");
    tokenize_code(&text)
        .into_iter()
        .map(|t| t.text.to_lowercase())
        .collect()
}

/// Distinct terms in first-occurrence order. Scores are summed in this
/// order so every scoring path performs the same float operations.
pub fn distinct_terms(terms: &[String]) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    terms
        .iter()
        .filter(|t| seen.insert(t.as_str()))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Doc {
    id: String,
    repo: String,
    buggy_method: String,
    buggy_line: String,
    fixed_line: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index {
    params: Bm25Params,
    docs: Vec<Doc>,
    doc_len: Vec<usize>,
    avgdl: f64,
    df: HashMap<String, usize>,
    /// term -> (doc, term frequency), doc ascending
    postings: HashMap<String, Vec<(usize, usize)>>,
    by_id: HashMap<String, usize>,
    repos: BTreeSet<String>,
    corpus_hash: String,
}

impl Bm25Index {
    pub fn build(corpus: &[BugInstance], params: Bm25Params) -> Result<Self, RetrievalError> {
        if corpus.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let mut index = Bm25Index {
            params,
            docs: Vec::with_capacity(corpus.len()),
            doc_len: Vec::with_capacity(corpus.len()),
            avgdl: 0.0,
            df: HashMap::new(),
            postings: HashMap::new(),
            by_id: HashMap::new(),
            repos: BTreeSet::new(),
            corpus_hash: corpus_hash(corpus),
        };
        for (doc, inst) in corpus.iter().enumerate() {
            if index.by_id.insert(inst.id.clone(), doc).is_some() {
                return Err(RetrievalError::DuplicateId(inst.id.clone()));
            }
            let terms = retrieval_terms(&inst.buggy_method, &inst.buggy_line);
            index.doc_len.push(terms.len());
            let mut tf: Vec<(String, usize)> = Vec::new();
            let mut slot: HashMap<&str, usize> = HashMap::new();
            for t in &terms {
                match slot.get(t.as_str()) {
                    Some(&k) => tf[k].1 += 1,
                    None => {
                        slot.insert(t, tf.len());
                        tf.push((t.clone(), 1));
                    }
                }
            }
            for (term, f) in tf {
                *index.df.entry(term.clone()).or_default() += 1;
                index.postings.entry(term).or_default().push((doc, f));
            }
            index.repos.insert(inst.repo.clone());
            index.docs.push(Doc {
                id: inst.id.clone(),
                repo: inst.repo.clone(),
                buggy_method: inst.buggy_method.clone(),
                buggy_line: inst.buggy_line.clone(),
                fixed_line: inst.fixed_line.clone(),
            });
        }
        index.avgdl = index.doc_len.iter().sum::<usize>() as f64 / index.docs.len() as f64;
        Ok(index)
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn df(&self, term: &str) -> usize {
        self.df.get(term).copied().unwrap_or(0)
    }

    pub fn doc_len(&self, doc: usize) -> Option<usize> {
        self.doc_len.get(doc).copied()
    }

    pub fn term_frequency(&self, term: &str, doc: usize) -> usize {
        self.postings
            .get(term)
            .and_then(|p| p.binary_search_by_key(&doc, |&(d, _)| d).ok().map(|k| p[k].1))
            .unwrap_or(0)
    }

    pub fn postings(&self, term: &str) -> &[(usize, usize)] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.df.keys().map(String::as_str)
    }

    pub fn doc_id(&self, doc: usize) -> Option<&str> {
        self.docs.get(doc).map(|d| d.id.as_str())
    }

    pub fn doc_index(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn contains_repo(&self, repo: &str) -> bool {
        self.repos.contains(repo)
    }

    pub fn corpus_hash(&self) -> &str {
        &self.corpus_hash
    }

    /// Inverse document frequency, `ln((N - n + 0.5) / (n + 0.5) + 1)`.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let nt = self.df(term) as f64;
        ((n - nt + 0.5) / (nt + 0.5) + 1.0).ln()
    }

    fn term_weight(&self, idf: f64, tf: usize, doc: usize) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let norm = 1.0 - b + b * self.doc_len[doc] as f64 / self.avgdl;
        idf * (tf * (k1 + 1.0)) / (tf + k1 * norm)
    }

    /// BM25 score of `doc` for the distinct terms of `query_terms`.
    pub fn score(&self, query_terms: &[String], doc: usize) -> Result<f64, RetrievalError> {
        if doc >= self.docs.len() {
            return Err(RetrievalError::UnknownDoc(doc));
        }
        let mut total = 0.0;
        for term in distinct_terms(query_terms) {
            let tf = self.term_frequency(&term, doc);
            if tf > 0 {
                total += self.term_weight(self.idf(&term), tf, doc);
            }
        }
        Ok(total)
    }

    /// Scores every document via the postings lists.
    pub fn score_all(&self, query_terms: &[String]) -> Vec<f64> {
        let mut scores = vec![0.0; self.docs.len()];
        for term in distinct_terms(query_terms) {
            let Some(postings) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf(&term);
            for &(doc, tf) in postings {
                scores[doc] += self.term_weight(idf, tf, doc);
            }
        }
        scores
    }

    /// The `k` best demonstrations for `query`, ordered by score descending
    /// then instance id ascending. The query itself is never returned.
    pub fn top_k(&self, query: &BugInstance, k: usize) -> Vec<Demonstration> {
        let terms = retrieval_terms(&query.buggy_method, &query.buggy_line);
        let scores = self.score_all(&terms);
        let mut ranked: Vec<usize> = (0..self.docs.len())
            .filter(|&d| self.docs[d].id != query.id)
            .collect();
        let cmp = |&a: &usize, &b: &usize| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.docs[a].id.cmp(&self.docs[b].id))
        };
        if ranked.len() > k && k > 0 {
            ranked.select_nth_unstable_by(k - 1, cmp);
            ranked.truncate(k);
        }
        ranked.sort_by(cmp);
        ranked.truncate(k);
        ranked
            .into_iter()
            .map(|d| {
                let doc = &self.docs[d];
                Demonstration {
                    instance_id: doc.id.clone(),
                    buggy_method: doc.buggy_method.clone(),
                    buggy_line: doc.buggy_line.clone(),
                    fixed_line: doc.fixed_line.clone(),
                    score: scores[d],
                }
            })
            .collect()
    }

    /// Writes a JSONL cache: one header line, then one line per term with
    /// its postings.
    pub fn save_cache(&self, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
        let mut out = io::BufWriter::new(fs::File::create(path)?);
        let header = CacheHeader {
            version: CACHE_VERSION,
            n: self.docs.len(),
            avgdl: self.avgdl,
            k1: self.params.k1,
            b: self.params.b,
            corpus_hash: self.corpus_hash.clone(),
            doc_len: self.doc_len.clone(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        let mut terms: Vec<&String> = self.postings.keys().collect();
        terms.sort();
        for term in terms {
            serde_json::to_writer(
                &mut out,
                &CacheTerm {
                    term: term.clone(),
                    postings: self.postings[term].clone(),
                },
            )?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Loads a cache written by [`save_cache`](Self::save_cache). Returns
    /// `Ok(None)` when the cache is stale: different version, parameters or
    /// corpus content.
    pub fn load_cache(
        path: impl AsRef<Path>,
        corpus: &[BugInstance],
        params: Bm25Params,
    ) -> Result<Option<Self>, RetrievalError> {
        let mut lines = BufReader::new(fs::File::open(path)?).lines();
        let Some(first) = lines.next() else {
            return Ok(None);
        };
        let header: CacheHeader = serde_json::from_str(&first?)?;
        if header.version != CACHE_VERSION
            || header.k1 != params.k1
            || header.b != params.b
            || header.n != corpus.len()
            || header.doc_len.len() != corpus.len()
            || header.corpus_hash != corpus_hash(corpus)
        {
            return Ok(None);
        }
        let mut index = Bm25Index {
            params,
            docs: Vec::with_capacity(corpus.len()),
            doc_len: header.doc_len,
            avgdl: header.avgdl,
            df: HashMap::new(),
            postings: HashMap::new(),
            by_id: HashMap::new(),
            repos: BTreeSet::new(),
            corpus_hash: header.corpus_hash,
        };
        for (doc, inst) in corpus.iter().enumerate() {
            if index.by_id.insert(inst.id.clone(), doc).is_some() {
                return Err(RetrievalError::DuplicateId(inst.id.clone()));
            }
            index.repos.insert(inst.repo.clone());
            index.docs.push(Doc {
                id: inst.id.clone(),
                repo: inst.repo.clone(),
                buggy_method: inst.buggy_method.clone(),
                buggy_line: inst.buggy_line.clone(),
                fixed_line: inst.fixed_line.clone(),
            });
        }
        for line in lines {
            let entry: CacheTerm = serde_json::from_str(&line?)?;
            index.df.insert(entry.term.clone(), entry.postings.len());
            index.postings.insert(entry.term, entry.postings);
        }
        Ok(Some(index))
    }

    /// Loads the cache at `path` if fresh, otherwise rebuilds and rewrites it.
    pub fn load_or_build(
        path: impl AsRef<Path>,
        corpus: &[BugInstance],
        params: Bm25Params,
    ) -> Result<Self, RetrievalError> {
        let path = path.as_ref();
        if path.exists() {
            match Self::load_cache(path, corpus, params) {
                Ok(Some(index)) => return Ok(index),
                Ok(None) => log::info!("index cache {} is stale, rebuilding", path.display()),
                Err(e) => log::warn!("ignoring unreadable index cache {}: {e}", path.display()),
            }
        }
        let index = Self::build(corpus, params)?;
        index.save_cache(path)?;
        Ok(index)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    version: u32,
    n: usize,
    avgdl: f64,
    k1: f64,
    b: f64,
    corpus_hash: String,
    doc_len: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CacheTerm {
    term: String,
    postings: Vec<(usize, usize)>,
}
