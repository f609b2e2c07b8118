//! Patch scoring: exact match, Fix@k, sentence BLEU-4, token Levenshtein
//! distance, and cross-model overlap of fixed bugs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::BugInstance;
use crate::orchestrator::{PipelineStatus, ResultSummary};
use crate::token::token_texts;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no results to score")]
    Empty,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("overlap needs at least two models, got {0}")]
    TooFewModels(usize),
}

/// Token-sequence equality: whitespace-insensitive, case-sensitive.
pub fn exact_match(candidate: &str, reference: &str) -> bool {
    token_texts(candidate) == token_texts(reference)
}

/// `value` rounded half-up to two decimals.
pub fn round2(value: f64) -> f64 {
    (value * 100.0 + 0.5).floor() / 100.0
}

/// `100 * num / den` rounded half-up to two decimals, computed in integers.
pub fn percent2(num: usize, den: usize) -> f64 {
    let (num, den) = (num as u128, den as u128);
    let hundredths = (2 * 10_000 * num + den) / (2 * den);
    hundredths as f64 / 100.0
}

/// Percentage of instances with an exact match among their first `k`
/// candidates, rounded half-up to two decimals.
pub fn fix_at_k<S: AsRef<str>>(results: &[(Vec<S>, S)], k: usize) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    if results.is_empty() {
        return Err(MetricsError::Empty);
    }
    let fixed = results
        .iter()
        .filter(|(cands, reference)| {
            cands
                .iter()
                .take(k)
                .any(|c| exact_match(c.as_ref(), reference.as_ref()))
        })
        .count();
    Ok(percent2(fixed, results.len()))
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_default() += 1;
        }
    }
    counts
}

/// Sentence-level BLEU-4 over code tokens, in `[0, 1]`.
///
/// Uniform weights over 1- to 4-gram precisions with the standard brevity
/// penalty. A zero unigram precision gives 0; a zero higher-order
/// precision is smoothed to `1 / (total + 1)`.
pub fn bleu4(candidate: &str, reference: &str) -> f64 {
    bleu4_tokens(&token_texts(candidate), &token_texts(reference))
}

pub fn bleu4_tokens(cand: &[String], refr: &[String]) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let ref_counts = ngram_counts(refr, n);
        let matched: usize = ngram_counts(cand, n)
            .into_iter()
            .map(|(g, c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
            .sum();
        let total = (cand.len() + 1).saturating_sub(n);
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += 0.25 * p.ln();
    }
    let (c, r) = (cand.len() as f64, refr.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    (bp * log_sum.exp()).clamp(0.0, 1.0)
}

/// Minimum token insertions, deletions and substitutions turning
/// `candidate` into `reference`.
pub fn levenshtein(candidate: &str, reference: &str) -> usize {
    levenshtein_tokens(&token_texts(candidate), &token_texts(reference))
}

pub fn levenshtein_tokens<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub instance_id: String,
    pub exact: bool,
    pub bleu4: f64,
    pub lev: usize,
}

impl InstanceScore {
    pub fn score(instance_id: &str, candidate: Option<&str>, reference: &str) -> Self {
        let refr = token_texts(reference);
        let cand = candidate.map(token_texts).unwrap_or_default();
        InstanceScore {
            instance_id: instance_id.to_string(),
            exact: candidate.is_some() && cand == refr,
            bleu4: bleu4_tokens(&cand, &refr),
            lev: levenshtein_tokens(&cand, &refr),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    /// Percentage, rounded half-up to two decimals.
    pub fix_at_k: f64,
    /// Mean BLEU-4 scaled by 100, full precision.
    pub mean_bleu4: f64,
    pub mean_lev: f64,
    pub n: usize,
    pub per_instance: Vec<InstanceScore>,
}

impl EvalReport {
    /// Aggregates per-instance scores (in order) into a report.
    pub fn from_scores(per_instance: Vec<InstanceScore>, k: usize) -> Result<Self, MetricsError> {
        if per_instance.is_empty() {
            return Err(MetricsError::Empty);
        }
        let n = per_instance.len();
        let exact = per_instance.iter().filter(|s| s.exact).count();
        let bleu: f64 = per_instance.iter().map(|s| s.bleu4).sum();
        let lev: usize = per_instance.iter().map(|s| s.lev).sum();
        Ok(EvalReport {
            k,
            fix_at_k: percent2(exact, n),
            mean_bleu4: 100.0 * bleu / n as f64,
            mean_lev: lev as f64 / n as f64,
            n,
            per_instance,
        })
    }

    /// True when the aggregates equal a fresh recomputation from
    /// `per_instance`.
    pub fn is_consistent(&self) -> bool {
        Self::from_scores(self.per_instance.clone(), self.k).is_ok_and(|r| r == *self)
    }

    pub fn table_header(&self) -> String {
        format!("Fix@{} (%)\tBLEU-4\tLevenshtein Distance", self.k)
    }

    /// The three headline numbers, two decimals each.
    pub fn table_row(&self) -> String {
        format!(
            "{:.2}\t{:.2}\t{:.2}",
            self.fix_at_k,
            round2(self.mean_bleu4),
            round2(self.mean_lev)
        )
    }

    pub fn fixed_ids(&self) -> BTreeSet<String> {
        self.per_instance
            .iter()
            .filter(|s| s.exact)
            .map(|s| s.instance_id.clone())
            .collect()
    }
}

/// Scores run results against the reference split. Every reference
/// instance counts; a missing or failed result scores as an empty patch.
pub fn evaluate(
    results: &[ResultSummary],
    references: &[BugInstance],
    k: usize,
) -> Result<EvalReport, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    let by_id: HashMap<&str, &ResultSummary> =
        results.iter().map(|r| (r.instance_id.as_str(), r)).collect();
    let scores = references
        .iter()
        .map(|inst| {
            let candidates: Vec<&str> = match by_id.get(inst.id.as_str()) {
                Some(r) if r.status == PipelineStatus::Completed => {
                    if r.candidates.is_empty() {
                        vec![r.final_patch.as_str()]
                    } else {
                        r.candidates.iter().map(String::as_str).collect()
                    }
                }
                _ => Vec::new(),
            };
            let top = candidates.first().copied();
            let mut score = InstanceScore::score(&inst.id, top, &inst.fixed_line);
            score.exact = candidates
                .iter()
                .take(k)
                .any(|c| exact_match(c, &inst.fixed_line));
            score
        })
        .collect();
    EvalReport::from_scores(scores, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapMatrix {
    pub models: Vec<String>,
    /// `rates[i][j] = |C_i ∩ C_j| / |C_j|` for `i != j`; `None` on the
    /// diagonal and when `C_j` is empty.
    pub rates: Vec<Vec<Option<f64>>>,
    /// Instances fixed by model `i` and by no other model.
    pub unique: Vec<usize>,
}

pub fn overlap_matrix(
    fixed: &BTreeMap<String, BTreeSet<String>>,
) -> Result<OverlapMatrix, MetricsError> {
    overlap_matrix_ordered(&fixed.iter().map(|(k, v)| (k.clone(), v.clone())).collect::<Vec<_>>())
}

/// Like [`overlap_matrix`] but keeps the given model order.
pub fn overlap_matrix_ordered(
    fixed: &[(String, BTreeSet<String>)],
) -> Result<OverlapMatrix, MetricsError> {
    if fixed.len() < 2 {
        return Err(MetricsError::TooFewModels(fixed.len()));
    }
    let m = fixed.len();
    let mut rates = vec![vec![None; m]; m];
    let mut unique = vec![0; m];
    for i in 0..m {
        for j in 0..m {
            if i != j && !fixed[j].1.is_empty() {
                let shared = fixed[i].1.intersection(&fixed[j].1).count();
                rates[i][j] = Some(shared as f64 / fixed[j].1.len() as f64);
            }
        }
        unique[i] = fixed[i]
            .1
            .iter()
            .filter(|id| (0..m).all(|j| j == i || !fixed[j].1.contains(*id)))
            .count();
    }
    Ok(OverlapMatrix {
        models: fixed.iter().map(|(name, _)| name.clone()).collect(),
        rates,
        unique,
    })
}

impl OverlapMatrix {
    /// CSV with model headers: integer unique counts on the diagonal,
    /// rates with two decimals elsewhere, `null` where undefined.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for name in &self.models {
            out.push(',');
            out.push_str(&csv_field(name));
        }
        out.push('\n');
        for (i, name) in self.models.iter().enumerate() {
            out.push_str(&csv_field(name));
            for j in 0..self.models.len() {
                out.push(',');
                if i == j {
                    let _ = write!(out, "{}", self.unique[i]);
                } else {
                    match self.rates[i][j] {
                        Some(r) => {
                            let _ = write!(out, "{:.2}", round2(r));
                        }
                        None => out.push_str("null"),
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
