//! Okapi BM25 inverted index.
//!
//! One index serves three jobs: searching page titles, imputing a missing
//! title from its lexical overlap with known titles, and mining hard
//! negative chunks for reranker training. Scoring walks every document,
//! zero scores included, so rankings are total orders and runs are exactly
//! reproducible; corpora here are small enough that candidate pruning
//! would buy nothing.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::snapshot::{SnapshotError, SnapshotReader, SnapshotWriter};
use crate::vocab::words;

#[derive(Debug, Error)]
pub enum Bm25Error {
    #[error("cannot build an index over zero documents")]
    EmptyCorpus,
    #[error("no indexed title shares a term with {title:?}")]
    NoMatch { title: String },
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
}

/// Free parameters of the scoring formula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

/// What a document stands for: a whole title, or one chunk of a page.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DocKey {
    pub title: String,
    pub chunk_index: Option<u32>,
}

impl DocKey {
    pub fn title(title: &str) -> DocKey {
        DocKey {
            title: title.to_string(),
            chunk_index: None,
        }
    }

    pub fn chunk(title: &str, chunk_index: u32) -> DocKey {
        DocKey {
            title: title.to_string(),
            chunk_index: Some(chunk_index),
        }
    }
}

pub type DocId = u32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredDoc {
    pub doc_id: DocId,
    pub score: f64,
}

/// Term postings plus per-document statistics. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    params: Bm25Params,
    keys: Vec<DocKey>,
    doc_lens: Vec<u32>,
    /// term -> (doc id ascending, term frequency). BTreeMap keeps snapshot
    /// bytes and iteration order stable.
    postings: BTreeMap<String, Vec<(DocId, u32)>>,
    total_len: u64,
}

impl InvertedIndex {
    /// Indexes `docs` in order; doc ids are positions in the input.
    /// Text is normalized exactly like vocabulary words, so queries and
    /// documents agree on what a term is.
    pub fn build(docs: &[(DocKey, String)], params: Bm25Params) -> Result<InvertedIndex, Bm25Error> {
        if docs.is_empty() {
            return Err(Bm25Error::EmptyCorpus);
        }
        let mut index = InvertedIndex {
            params,
            keys: Vec::with_capacity(docs.len()),
            doc_lens: Vec::with_capacity(docs.len()),
            postings: BTreeMap::new(),
            total_len: 0,
        };
        for (doc_id, (key, text)) in docs.iter().enumerate() {
            let terms = words(text);
            index.keys.push(key.clone());
            index.doc_lens.push(terms.len() as u32);
            index.total_len += terms.len() as u64;
            let mut counts: BTreeMap<String, u32> = BTreeMap::new();
            for term in terms {
                *counts.entry(term).or_insert(0) += 1;
            }
            for (term, tf) in counts {
                index
                    .postings
                    .entry(term)
                    .or_default()
                    .push((doc_id as DocId, tf));
            }
        }
        Ok(index)
    }

    /// Index over bare titles: each title is both key and text.
    pub fn over_titles<T: AsRef<str>>(titles: &[T], params: Bm25Params) -> Result<InvertedIndex, Bm25Error> {
        let docs: Vec<(DocKey, String)> = titles
            .iter()
            .map(|t| (DocKey::title(t.as_ref()), t.as_ref().to_string()))
            .collect();
        InvertedIndex::build(&docs, params)
    }

    pub fn doc_count(&self) -> usize {
        self.keys.len()
    }

    pub fn key(&self, doc_id: DocId) -> &DocKey {
        &self.keys[doc_id as usize]
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.total_len as f64 / self.keys.len() as f64
    }

    fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    fn term_freq(&self, term: &str, doc_id: DocId) -> u32 {
        self.postings
            .get(term)
            .and_then(|list| {
                list.binary_search_by_key(&doc_id, |&(d, _)| d)
                    .ok()
                    .map(|i| list[i].1)
            })
            .unwrap_or(0)
    }

    /// Smoothed inverse document frequency, ln(1 + (N − n + 0.5)/(n + 0.5)).
    /// Non-negative for every term.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_freq(term) as f64;
        let total = self.keys.len() as f64;
        (1.0 + (total - n + 0.5) / (n + 0.5)).ln()
    }

    /// Sum of per-term contributions over `query_terms`. Terms are taken
    /// as a multiset: a repeated query term contributes once per repeat.
    pub fn score(&self, query_terms: &[String], doc_id: DocId) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let dl = self.doc_lens[doc_id as usize] as f64;
        let norm = k1 * (1.0 - b + b * dl / self.avg_doc_len());
        let mut total = 0.0;
        for term in query_terms {
            let tf = self.term_freq(term, doc_id) as f64;
            if tf > 0.0 {
                total += self.idf(term) * tf * (k1 + 1.0) / (tf + norm);
            }
        }
        total
    }

    /// Scores every document against `query` and returns the best `k`,
    /// zero scores included; ties fall back to doc-id order.
    pub fn search_top_k(&self, query: &str, k: usize) -> Vec<ScoredDoc> {
        let terms = words(query);
        let mut scored: Vec<ScoredDoc> = (0..self.keys.len() as DocId)
            .map(|doc_id| ScoredDoc {
                doc_id,
                score: self.score(&terms, doc_id),
            })
            .collect();
        scored.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .expect("BM25 scores are finite")
                .then(a.doc_id.cmp(&b.doc_id))
        });
        scored.truncate(k);
        scored
    }

    const MAGIC: &'static [u8; 8] = b"TRVBM25\0";
    const VERSION: u32 = 1;

    pub fn save(&self, path: &Path, seed: u64) -> Result<(), Bm25Error> {
        let mut w = SnapshotWriter::new(Self::MAGIC, Self::VERSION, seed);
        w.put_f64(self.params.k1);
        w.put_f64(self.params.b);
        w.put_u64(self.keys.len() as u64);
        for (key, &len) in self.keys.iter().zip(&self.doc_lens) {
            w.put_str(&key.title);
            match key.chunk_index {
                Some(i) => {
                    w.put_u8(1);
                    w.put_u32(i);
                }
                None => w.put_u8(0),
            }
            w.put_u32(len);
        }
        w.put_u64(self.postings.len() as u64);
        for (term, list) in &self.postings {
            w.put_str(term);
            w.put_u64(list.len() as u64);
            for &(doc, tf) in list {
                w.put_u32(doc);
                w.put_u32(tf);
            }
        }
        w.write_to(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<InvertedIndex, Bm25Error> {
        let mut r = SnapshotReader::open(path, Self::MAGIC, Self::VERSION)?;
        let params = Bm25Params {
            k1: r.get_f64("k1")?,
            b: r.get_f64("b")?,
        };
        let doc_count = r.get_u64("doc count")? as usize;
        let mut keys = Vec::with_capacity(doc_count);
        let mut doc_lens = Vec::with_capacity(doc_count);
        let mut total_len = 0u64;
        for _ in 0..doc_count {
            let title = r.get_str("doc title")?;
            let chunk_index = match r.get_u8("chunk flag")? {
                0 => None,
                _ => Some(r.get_u32("chunk index")?),
            };
            let len = r.get_u32("doc length")?;
            keys.push(DocKey { title, chunk_index });
            doc_lens.push(len);
            total_len += len as u64;
        }
        let term_count = r.get_u64("term count")? as usize;
        let mut postings = BTreeMap::new();
        for _ in 0..term_count {
            let term = r.get_str("term")?;
            let list_len = r.get_u64("postings length")? as usize;
            let mut list = Vec::with_capacity(list_len);
            for _ in 0..list_len {
                let doc = r.get_u32("posting doc")?;
                let tf = r.get_u32("posting tf")?;
                if doc as usize >= doc_count {
                    return Err(SnapshotError::Corrupt {
                        path: path.display().to_string(),
                        context: "posting doc id out of range".into(),
                    }
                    .into());
                }
                list.push((doc, tf));
            }
            postings.insert(term, list);
        }
        r.finish()?;
        Ok(InvertedIndex {
            params,
            keys,
            doc_lens,
            postings,
            total_len,
        })
    }
}

/// Replaces a possibly-missing title with its best lexical match among the
/// indexed titles. An exact match is returned untouched; otherwise the
/// BM25 argmax wins, and zero overlap with every title is an error so the
/// caller can drop the slot.
pub fn impute_title(missing_title: &str, title_index: &InvertedIndex) -> Result<String, Bm25Error> {
    for key in &title_index.keys {
        if key.title == missing_title {
            return Ok(missing_title.to_string());
        }
    }
    let top = title_index.search_top_k(missing_title, 1);
    match top.first() {
        Some(best) if best.score > 0.0 => Ok(title_index.key(best.doc_id).title.clone()),
        _ => Err(Bm25Error::NoMatch {
            title: missing_title.to_string(),
        }),
    }
}

/// Hard-negative pools for reranker training, both ranked by BM25 against
/// the query and capped at `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct MinedNegatives {
    /// Chunks from gold (labeled) pages that are not themselves gold.
    pub labeled_pool: Vec<DocKey>,
    /// Chunks from predicted pages that are not gold pages at all.
    pub unlabeled_pool: Vec<DocKey>,
}

/// Ranks non-gold chunks as training negatives. The first pool draws from
/// the gold pages (minus the gold chunks themselves), the second from
/// predicted pages that are not gold; gold chunks never appear in either.
pub fn mine_hard_negatives(
    chunk_index: &InvertedIndex,
    query: &str,
    gold_titles: &[String],
    predicted_titles: &[String],
    gold_chunks: &BTreeSet<DocKey>,
    k: usize,
) -> MinedNegatives {
    let gold: BTreeSet<&str> = gold_titles.iter().map(String::as_str).collect();
    let predicted_only: BTreeSet<&str> = predicted_titles
        .iter()
        .map(String::as_str)
        .filter(|t| !gold.contains(t))
        .collect();
    let terms = words(query);

    let rank = |eligible: &dyn Fn(&DocKey) -> bool| -> Vec<DocKey> {
        let mut scored: Vec<ScoredDoc> = (0..chunk_index.doc_count() as DocId)
            .filter(|&doc_id| {
                let key = chunk_index.key(doc_id);
                eligible(key) && !gold_chunks.contains(key)
            })
            .map(|doc_id| ScoredDoc {
                doc_id,
                score: chunk_index.score(&terms, doc_id),
            })
            .collect();
        scored.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .expect("BM25 scores are finite")
                .then(a.doc_id.cmp(&b.doc_id))
        });
        scored.truncate(k);
        scored
            .into_iter()
            .map(|s| chunk_index.key(s.doc_id).clone())
            .collect()
    };

    MinedNegatives {
        labeled_pool: rank(&|key: &DocKey| gold.contains(key.title.as_str())),
        unlabeled_pool: rank(&|key: &DocKey| predicted_only.contains(key.title.as_str())),
    }
}
