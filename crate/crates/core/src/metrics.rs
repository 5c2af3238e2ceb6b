//! Retrieval and answer-quality metrics.
//!
//! Retrieval is scored by R-Precision and Recall@k over ranked title
//! lists. Answers are scored by exact match, bag-of-tokens F1, and
//! ROUGE-L, each taking the max over the gold answers. The combined score
//! gates the answer metric on perfect retrieval: a query contributes its
//! downstream score only when its R-Precision is exactly 1.
//!
//! Text normalization (lowercase, strip ASCII punctuation, drop the
//! articles a/an/the, collapse whitespace) applies to exact match and F1.
//! ROUGE-L keeps articles: they are ordinary tokens for the LCS.

use std::collections::HashMap;
use std::hash::Hash;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("metric undefined for an empty gold set")]
    EmptyGold,
    #[error("recall cutoff k must be at least 1")]
    ZeroK,
}

/// |top-R retrieved ∩ gold| / R, with R the number of distinct gold items.
pub fn r_precision<T: Eq + Hash>(retrieved: &[T], gold: &[T]) -> Result<f64, MetricsError> {
    let gold_set: std::collections::HashSet<&T> = gold.iter().collect();
    if gold_set.is_empty() {
        return Err(MetricsError::EmptyGold);
    }
    let r = gold_set.len();
    let hits: std::collections::HashSet<&T> = retrieved
        .iter()
        .take(r)
        .filter(|t| gold_set.contains(t))
        .collect();
    Ok(hits.len() as f64 / r as f64)
}

/// |top-k retrieved ∩ gold| / |gold|.
pub fn recall_at_k<T: Eq + Hash>(retrieved: &[T], gold: &[T], k: usize) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    let gold_set: std::collections::HashSet<&T> = gold.iter().collect();
    if gold_set.is_empty() {
        return Err(MetricsError::EmptyGold);
    }
    let hits: std::collections::HashSet<&T> = retrieved
        .iter()
        .take(k)
        .filter(|t| gold_set.contains(t))
        .collect();
    Ok(hits.len() as f64 / gold_set.len() as f64)
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercases, strips ASCII punctuation, removes whole-word articles, and
/// collapses whitespace. Punctuation goes before article removal so the
/// result is a fixed point: normalizing twice never changes anything.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let stripped: String = lowered
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    stripped
        .split_whitespace()
        .filter(|w| !ARTICLES.contains(w))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Tokens for ROUGE-L: lowercase, punctuation stripped, articles kept.
fn rouge_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// 1.0 when the normalized prediction equals any normalized gold.
pub fn exact_match(pred: &str, golds: &[String]) -> f64 {
    let p = normalize_answer(pred);
    if golds.iter().any(|g| normalize_answer(g) == p) {
        1.0
    } else {
        0.0
    }
}

fn token_bag(text: &str) -> HashMap<String, usize> {
    let mut bag = HashMap::new();
    for tok in normalize_answer(text).split_whitespace() {
        *bag.entry(tok.to_string()).or_insert(0) += 1;
    }
    bag
}

fn f1_from_overlap(overlap: usize, pred_len: usize, gold_len: usize) -> f64 {
    if pred_len == 0 || gold_len == 0 {
        // Both sides empty counts as agreement; one side empty cannot.
        return if pred_len == gold_len { 1.0 } else { 0.0 };
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred_len as f64;
    let recall = overlap as f64 / gold_len as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Bag-of-tokens F1 against the best-matching gold.
pub fn token_f1(pred: &str, golds: &[String]) -> f64 {
    let pred_bag = token_bag(pred);
    let pred_len: usize = pred_bag.values().sum();
    golds
        .iter()
        .map(|gold| {
            let gold_bag = token_bag(gold);
            let gold_len: usize = gold_bag.values().sum();
            let overlap: usize = pred_bag
                .iter()
                .map(|(tok, &n)| n.min(gold_bag.get(tok).copied().unwrap_or(0)))
                .sum();
            f1_from_overlap(overlap, pred_len, gold_len)
        })
        .fold(0.0, f64::max)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence F1 against the best-matching gold.
pub fn rouge_l(pred: &str, golds: &[String]) -> f64 {
    let pred_toks = rouge_tokens(pred);
    golds
        .iter()
        .map(|gold| {
            let gold_toks = rouge_tokens(gold);
            let lcs = lcs_len(&pred_toks, &gold_toks);
            f1_from_overlap(lcs, pred_toks.len(), gold_toks.len())
        })
        .fold(0.0, f64::max)
}

/// Normalized string equality, for fact-check labels.
pub fn accuracy_label(pred: &str, gold: &str) -> f64 {
    if normalize_answer(pred) == normalize_answer(gold) {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn observe(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.true_pos += 1,
            (true, false) => self.false_pos += 1,
            (false, true) => self.false_neg += 1,
            (false, false) => self.true_neg += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }
}

/// A rate whose denominator may be empty; degenerate rates report 0 but
/// carry the flag so aggregation can tell 0-of-many from 0-of-none.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlaggedRate {
    pub value: f64,
    pub degenerate: bool,
}

impl FlaggedRate {
    fn ratio(num: u64, den: u64) -> FlaggedRate {
        if den == 0 {
            FlaggedRate {
                value: 0.0,
                degenerate: true,
            }
        } else {
            FlaggedRate {
                value: num as f64 / den as f64,
                degenerate: false,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassifierMetrics {
    pub precision: FlaggedRate,
    pub recall: FlaggedRate,
    pub f1: FlaggedRate,
    pub accuracy: FlaggedRate,
}

pub fn classifier_metrics(c: &ConfusionCounts) -> ClassifierMetrics {
    let precision = FlaggedRate::ratio(c.true_pos, c.true_pos + c.false_pos);
    let recall = FlaggedRate::ratio(c.true_pos, c.true_pos + c.false_neg);
    let f1 = if precision.degenerate || recall.degenerate || precision.value + recall.value == 0.0 {
        FlaggedRate {
            value: 0.0,
            degenerate: true,
        }
    } else {
        FlaggedRate {
            value: 2.0 * precision.value * recall.value / (precision.value + recall.value),
            degenerate: false,
        }
    };
    let accuracy = FlaggedRate::ratio(c.true_pos + c.true_neg, c.total());
    ClassifierMetrics {
        precision,
        recall,
        f1,
        accuracy,
    }
}

/// Downstream score gated on perfect retrieval: anything short of
/// R-Precision 1 zeroes the contribution.
pub fn kilt_score(r_precision: f64, downstream: f64) -> f64 {
    if r_precision == 1.0 {
        downstream
    } else {
        0.0
    }
}
