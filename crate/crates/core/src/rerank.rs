//! Reranking-input construction and the title/context diagnostics.
//!
//! Three surface formats are produced here, byte for byte:
//! the title-reranker input (prompt, query window, titles and contexts
//! joined by `[SEP]`), the context-reranker pair
//! (`[CLS] query [SEP] context [SEP]`), and the reader input
//! (`question: .., title: .., context: ..`). Every builder windows the
//! query by whitespace words; question-answering and fact-checking keep
//! the head of the query, dialogue keeps the tail, since the last turns
//! carry the actual question.
//!
//! Context relevance is scored through a pluggable [`RelevanceScorer`];
//! the shipped default ranks by saturated BM25 term overlap so the
//! pipeline runs without any neural dependency.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bm25::{impute_title, Bm25Params, InvertedIndex};
use crate::corpus::{Chunk, ChunkStore, TaskKind};
use crate::seeding::derive_seed;
use crate::vocab::words;

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("title perturbation needs a non-empty {0} source list")]
    EmptySource(&'static str),
    #[error("joint distribution must be a non-empty rectangular matrix")]
    MalformedJoint,
    #[error("joint distribution entries must be non-negative and finite")]
    NegativeMass,
    #[error("joint distribution sums to {sum}, not 1")]
    NotNormalized { sum: f64 },
}

/// Prompt prepended to every retriever training/decoding query.
pub const RANK_PROMPT: &str = "rank document titles given a query: ";
/// Prompt prepended to every title-reranker input.
pub const RERANK_PROMPT: &str = "rerank document titles given a query and contexts: ";

pub const SEP_MARKER: &str = "[SEP]";
pub const CLS_MARKER: &str = "[CLS]";

/// Query words kept in a title-reranker input.
pub const RERANK_QUERY_WORDS: usize = 250;
/// Hard cap on a title-reranker input, in whitespace tokens.
pub const RERANK_MAX_TOKENS: usize = 512;
/// Context-pair query window: head for QA and fact checking.
pub const PAIR_HEAD_WORDS: usize = 150;
/// Context-pair query window: tail for dialogue.
pub const PAIR_TAIL_WORDS: usize = 300;
/// Reader-input query window: head for QA and fact checking.
pub const READER_HEAD_WORDS: usize = 125;
/// Reader-input query window: tail for dialogue.
pub const READER_TAIL_WORDS: usize = 385;

/// First `n` whitespace words, single-space joined.
pub fn first_words(text: &str, n: usize) -> String {
    text.split_whitespace().take(n).collect::<Vec<_>>().join(" ")
}

/// Last `n` whitespace words, single-space joined, original order.
pub fn last_words(text: &str, n: usize) -> String {
    let all: Vec<&str> = text.split_whitespace().collect();
    let start = all.len().saturating_sub(n);
    all[start..].join(" ")
}

/// Task-dependent query window: head for QA and fact checking, tail for
/// dialogue.
fn query_window(query: &str, task: TaskKind, head: usize, tail: usize) -> String {
    match task {
        TaskKind::Qa | TaskKind::FactCheck => first_words(query, head),
        TaskKind::Dialogue => last_words(query, tail),
    }
}

/// Title-reranker input: prompt and query, then each title, then each
/// context, all joined by `[SEP]` and hard-truncated to
/// [`RERANK_MAX_TOKENS`] whitespace tokens.
pub fn build_title_rerank_input<T: AsRef<str>, C: AsRef<str>>(
    query: &str,
    titles: &[T],
    contexts: &[C],
) -> String {
    let mut parts: Vec<String> = Vec::with_capacity(1 + titles.len() + contexts.len());
    parts.push(format!(
        "{RERANK_PROMPT}{}",
        first_words(query, RERANK_QUERY_WORDS)
    ));
    for t in titles {
        parts.push(t.as_ref().to_string());
    }
    for c in contexts {
        parts.push(c.as_ref().to_string());
    }
    first_words(&parts.join(&format!(" {SEP_MARKER} ")), RERANK_MAX_TOKENS)
}

/// Which retrieval checkpoint a training example's titles came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixSource {
    #[serde(rename = "zero")]
    ZeroShot,
    #[serde(rename = "few")]
    FewShot,
}

/// One title-reranker training example, as serialized to JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankTitleExample {
    pub input: String,
    pub target: Vec<String>,
    pub mix: MixSource,
}

/// Picks the zero- or few-shot title list (alternating by example index)
/// and uniformly shuffles its top half; the bottom half keeps its order.
/// The noise teaches the reranker to reorder, not to copy.
pub fn perturb_training_titles(
    zero_shot_titles: &[String],
    few_shot_titles: &[String],
    example_index: usize,
    seed: u64,
) -> Result<(Vec<String>, MixSource), RerankError> {
    if zero_shot_titles.is_empty() {
        return Err(RerankError::EmptySource("zero-shot"));
    }
    if few_shot_titles.is_empty() {
        return Err(RerankError::EmptySource("few-shot"));
    }
    let (source, mix) = if example_index % 2 == 0 {
        (zero_shot_titles, MixSource::ZeroShot)
    } else {
        (few_shot_titles, MixSource::FewShot)
    };
    let mut titles = source.to_vec();
    let top_half = titles.len().div_ceil(2);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, example_index as u64, 0));
    titles[..top_half].shuffle(&mut rng);
    Ok((titles, mix))
}

/// Supervision order for a reranker example: gold titles first, in gold
/// order, then the remaining input titles in input order.
pub fn rerank_target(input_titles: &[String], gold_titles: &[String]) -> Vec<String> {
    let mut target: Vec<String> = Vec::with_capacity(input_titles.len());
    for gold in gold_titles {
        if !target.contains(gold) {
            target.push(gold.clone());
        }
    }
    for title in input_titles {
        if !target.contains(title) {
            target.push(title.clone());
        }
    }
    target
}

/// Why a requested title contributed no contexts, or contributed another
/// page's contexts instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContextWarning {
    /// The title was missing from the store; a lexical neighbor stood in.
    Imputed { from: String, to: String },
    /// No indexed title shares a single term; the slot was skipped.
    Dropped { title: String },
}

/// Fetches the chunks of each title in rank order. Titles absent from the
/// store go through BM25 imputation first; titles that cannot be imputed
/// are dropped. Both substitutions and drops are reported as warnings.
pub fn retrieve_contexts_for_titles(
    titles: &[String],
    store: &ChunkStore,
    title_index: &InvertedIndex,
) -> (Vec<(String, Chunk)>, Vec<ContextWarning>) {
    let mut out: Vec<(String, Chunk)> = Vec::new();
    let mut warnings: Vec<ContextWarning> = Vec::new();
    for title in titles {
        let resolved = if store.contains_title(title) {
            title.clone()
        } else {
            match impute_title(title, title_index) {
                Ok(imputed) if store.contains_title(&imputed) => {
                    warnings.push(ContextWarning::Imputed {
                        from: title.clone(),
                        to: imputed.clone(),
                    });
                    imputed
                }
                _ => {
                    warnings.push(ContextWarning::Dropped {
                        title: title.clone(),
                    });
                    continue;
                }
            }
        };
        if let Some(chunks) = store.get(&resolved) {
            for chunk in chunks {
                out.push((resolved.clone(), chunk.clone()));
            }
        }
    }
    (out, warnings)
}

/// One context-reranker training pair, as serialized to JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextPair {
    pub text: String,
    /// 1 when the context is a gold chunk for the query, else 0.
    pub label: u8,
}

/// `[CLS] {query window} [SEP] {context} [SEP]`, with the window rule of
/// the task.
pub fn build_context_pair_input(query: &str, context: &str, task: TaskKind) -> String {
    let window = query_window(query, task, PAIR_HEAD_WORDS, PAIR_TAIL_WORDS);
    format!("{CLS_MARKER} {window} {SEP_MARKER} {context} {SEP_MARKER}")
}

/// Scores how well a context answers a query. Implementations must be
/// deterministic; a returned error drops the context from the ranking
/// rather than aborting it.
pub trait RelevanceScorer {
    fn score(&self, query: &str, context: &str) -> Result<f64, String>;
}

/// Default scorer: BM25 term overlap of the task-windowed query against
/// the context alone. With a single document the IDF is the constant
/// ln(1 + 0.5/1.5) and length normalization cancels, leaving a saturated
/// per-term overlap count.
#[derive(Debug, Clone)]
pub struct Bm25RelevanceScorer {
    pub task: TaskKind,
    pub params: Bm25Params,
}

impl Bm25RelevanceScorer {
    pub fn new(task: TaskKind) -> Bm25RelevanceScorer {
        Bm25RelevanceScorer {
            task,
            params: Bm25Params::default(),
        }
    }
}

impl RelevanceScorer for Bm25RelevanceScorer {
    fn score(&self, query: &str, context: &str) -> Result<f64, String> {
        let window = query_window(query, self.task, PAIR_HEAD_WORDS, PAIR_TAIL_WORDS);
        let mut context_tf: std::collections::HashMap<String, f64> =
            std::collections::HashMap::new();
        for term in words(context) {
            *context_tf.entry(term).or_insert(0.0) += 1.0;
        }
        let idf = (1.0f64 + 0.5 / 1.5).ln();
        let k1 = self.params.k1;
        let mut total = 0.0;
        for term in words(&window) {
            if let Some(&tf) = context_tf.get(&term) {
                total += idf * tf * (k1 + 1.0) / (tf + k1);
            }
        }
        Ok(total)
    }
}

/// Oracle scorer for tests and diagnostics: 1 for members of the gold
/// context set, 0 otherwise.
#[derive(Debug, Clone)]
pub struct GoldIndicatorScorer {
    pub gold_texts: BTreeSet<String>,
}

impl RelevanceScorer for GoldIndicatorScorer {
    fn score(&self, _query: &str, context: &str) -> Result<f64, String> {
        Ok(if self.gold_texts.contains(context) { 1.0 } else { 0.0 })
    }
}

/// A context the scorer refused; the ranking proceeds without it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScorerWarning {
    pub index: usize,
    pub message: String,
}

/// Ranks `contexts` by scorer score (descending, ties keep input order)
/// and returns the top-`k` input indices plus warnings for dropped items.
pub fn rerank_contexts<C: AsRef<str>>(
    scorer: &dyn RelevanceScorer,
    query: &str,
    contexts: &[C],
    k: usize,
) -> (Vec<usize>, Vec<ScorerWarning>) {
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(contexts.len());
    let mut warnings: Vec<ScorerWarning> = Vec::new();
    for (index, context) in contexts.iter().enumerate() {
        match scorer.score(query, context.as_ref()) {
            Ok(score) if score.is_finite() => scored.push((index, score)),
            Ok(score) => warnings.push(ScorerWarning {
                index,
                message: format!("non-finite score {score}"),
            }),
            Err(message) => warnings.push(ScorerWarning { index, message }),
        }
    }
    // Stable sort: equal scores keep original order.
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("scores checked finite"));
    scored.truncate(k);
    (scored.into_iter().map(|(i, _)| i).collect(), warnings)
}

/// Reader input line: `question: {query window}, title: {t}, context: {c}`.
pub fn build_reader_input(query: &str, title: &str, context: &str, task: TaskKind) -> String {
    let window = query_window(query, task, READER_HEAD_WORDS, READER_TAIL_WORDS);
    format!("question: {window}, title: {title}, context: {context}")
}

/// Joint probability table over titles x contexts, validated on entry.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    rows: Vec<Vec<f64>>,
}

impl JointDistribution {
    /// Accepts a rectangular non-negative matrix summing to 1 +/- 1e-12.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<JointDistribution, RerankError> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(RerankError::MalformedJoint);
        }
        let width = rows[0].len();
        if rows.iter().any(|r| r.len() != width) {
            return Err(RerankError::MalformedJoint);
        }
        let mut sum = 0.0;
        for row in &rows {
            for &p in row {
                if !p.is_finite() || p < 0.0 {
                    return Err(RerankError::NegativeMass);
                }
                sum += p;
            }
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(RerankError::NotNormalized { sum });
        }
        Ok(JointDistribution { rows })
    }

    pub fn row_marginals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_marginals(&self) -> Vec<f64> {
        let mut cols = vec![0.0; self.rows[0].len()];
        for row in &self.rows {
            for (c, &p) in row.iter().enumerate() {
                cols[c] += p;
            }
        }
        cols
    }
}

/// I(X;Y) in nats: sum of P(x,y) ln(P(x,y) / (P(x) P(y))), skipping
/// zero-mass cells. Floating error can push the sum a hair below zero,
/// so the result is clamped at 0.
pub fn mutual_information(joint: &JointDistribution) -> f64 {
    let px = joint.row_marginals();
    let py = joint.col_marginals();
    let mut total = 0.0;
    for (x, row) in joint.rows.iter().enumerate() {
        for (y, &p) in row.iter().enumerate() {
            if p > 0.0 {
                total += p * (p / (px[x] * py[y])).ln();
            }
        }
    }
    total.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::KnowledgeRecord;
    use proptest::prelude::*;

    fn strings(items: &[&str]) -> Vec<String> {
        items.iter().map(|i| i.to_string()).collect()
    }

    #[test]
    fn prompts_are_exact() {
        assert_eq!(RANK_PROMPT, "rank document titles given a query: ");
        assert_eq!(
            RERANK_PROMPT,
            "rerank document titles given a query and contexts: "
        );
    }

    #[test]
    fn word_windows() {
        assert_eq!(first_words("a b c d", 2), "a b");
        assert_eq!(first_words("a b", 9), "a b");
        assert_eq!(last_words("a b c d", 2), "c d");
        assert_eq!(last_words("a b", 9), "a b");
        assert_eq!(first_words("  spaced   out  ", 5), "spaced out");
    }

    #[test]
    fn rerank_input_fixture() {
        let input = build_title_rerank_input(
            "who discovered the nile",
            &["Nile", "Congo River"],
            &["the nile flows north"],
        );
        assert_eq!(
            input,
            "rerank document titles given a query and contexts: \
             who discovered the nile [SEP] Nile [SEP] Congo River \
             [SEP] the nile flows north"
        );
        assert!(input.starts_with(RERANK_PROMPT));
    }

    #[test]
    fn short_query_survives_whole() {
        let query = "ten short words in a row right here now ok";
        let input = build_title_rerank_input(query, &["T"], &["C"]);
        assert!(input.contains(query));
    }

    #[test]
    fn long_query_is_cut_to_250_words() {
        let query = (0..300).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let input = build_title_rerank_input(&query, &["T"], &["C"]);
        assert!(input.contains("w249"));
        assert!(!input.contains("w250"));
    }

    #[test]
    fn oversize_contexts_force_exactly_512_tokens() {
        let context = (0..600).map(|i| format!("c{i}")).collect::<Vec<_>>().join(" ");
        let input = build_title_rerank_input("q", &["T"], &[context]);
        assert_eq!(input.split_whitespace().count(), RERANK_MAX_TOKENS);
    }

    #[test]
    fn perturbation_alternates_sources() {
        let zero = strings(&["z1", "z2"]);
        let few = strings(&["f1", "f2"]);
        let (_, mix0) = perturb_training_titles(&zero, &few, 0, 42).unwrap();
        let (_, mix1) = perturb_training_titles(&zero, &few, 1, 42).unwrap();
        assert_eq!(mix0, MixSource::ZeroShot);
        assert_eq!(mix1, MixSource::FewShot);
    }

    #[test]
    fn perturbation_requires_both_sources() {
        let some = strings(&["t"]);
        assert!(perturb_training_titles(&[], &some, 0, 42).is_err());
        assert!(perturb_training_titles(&some, &[], 0, 42).is_err());
    }

    #[test]
    fn bottom_half_is_fixed_for_any_seed() {
        let titles = strings(&["t1", "t2", "t3", "t4", "t5", "t6", "t7", "t8", "t9", "t10"]);
        for seed in 0..100 {
            let (got, _) = perturb_training_titles(&titles, &titles, 0, seed).unwrap();
            assert_eq!(&got[5..], &titles[5..], "seed {seed}");
            let mut sorted = got.clone();
            sorted.sort();
            let mut expected = titles.clone();
            expected.sort();
            assert_eq!(sorted, expected, "seed {seed}");
        }
    }

    #[test]
    fn odd_length_top_half_rounds_up() {
        let titles = strings(&["t1", "t2", "t3", "t4", "t5"]);
        // ceil(5/2) = 3 shuffled positions, 2 fixed.
        for seed in 0..50 {
            let (got, _) = perturb_training_titles(&titles, &titles, 0, seed).unwrap();
            assert_eq!(&got[3..], &titles[3..], "seed {seed}");
        }
    }

    #[test]
    fn seed_42_permutation_is_frozen() {
        let titles = strings(&["t1", "t2", "t3", "t4", "t5", "t6", "t7", "t8", "t9", "t10"]);
        let (got, mix) = perturb_training_titles(&titles, &titles, 0, 42).unwrap();
        assert_eq!(mix, MixSource::ZeroShot);
        // Frozen output of the seeded shuffle; a change here means the
        // derivation chain (derive_seed, ChaCha stream, shuffle) changed.
        assert_eq!(
            got,
            strings(&["t1", "t4", "t2", "t3", "t5", "t6", "t7", "t8", "t9", "t10"])
        );
    }

    #[test]
    fn rerank_target_puts_gold_first() {
        let input = strings(&["b", "c", "a", "d"]);
        let gold = strings(&["a", "x"]);
        assert_eq!(rerank_target(&input, &gold), strings(&["a", "x", "b", "c", "d"]));
    }

    fn store_and_index() -> (ChunkStore, InvertedIndex) {
        let records = [
            ("Nile", "nile flows north through egypt"),
            ("Congo River", "congo river crosses the equator"),
            ("Amazon", "amazon drains south america"),
        ];
        let chunks: Vec<Chunk> = records
            .iter()
            .flat_map(|(title, text)| {
                chunk_passage_of(title, text)
            })
            .collect();
        let store = ChunkStore::from_chunks(chunks);
        let titles: Vec<String> = records.iter().map(|(t, _)| t.to_string()).collect();
        let index = InvertedIndex::over_titles(&titles, Bm25Params::default()).unwrap();
        (store, index)
    }

    fn chunk_passage_of(title: &str, text: &str) -> Vec<Chunk> {
        let record = KnowledgeRecord {
            wikipedia_id: title.to_string(),
            wikipedia_title: title.to_string(),
            text: vec![text.to_string()],
        };
        crate::corpus::chunk_passage(&record)
    }

    #[test]
    fn present_titles_contribute_their_chunks_in_order() {
        let (store, index) = store_and_index();
        let titles = strings(&["Congo River", "Nile"]);
        let (got, warnings) = retrieve_contexts_for_titles(&titles, &store, &index);
        assert!(warnings.is_empty());
        let got_titles: Vec<&str> = got.iter().map(|(t, _)| t.as_str()).collect();
        assert_eq!(got_titles, ["Congo River", "Nile"]);
        assert!(got[1].1.text.contains("nile"));
    }

    #[test]
    fn missing_titles_are_imputed() {
        let (store, index) = store_and_index();
        let titles = strings(&["Nile river"]);
        let (got, warnings) = retrieve_contexts_for_titles(&titles, &store, &index);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].0, "Nile");
        assert_eq!(
            warnings,
            vec![ContextWarning::Imputed {
                from: "Nile river".to_string(),
                to: "Nile".to_string()
            }]
        );
    }

    #[test]
    fn unmatchable_titles_are_dropped_with_warnings() {
        let (store, index) = store_and_index();
        let titles = strings(&["qqq", "zzz"]);
        let (got, warnings) = retrieve_contexts_for_titles(&titles, &store, &index);
        assert!(got.is_empty());
        assert_eq!(warnings.len(), 2);
        assert!(matches!(warnings[0], ContextWarning::Dropped { .. }));
    }

    #[test]
    fn context_pair_fixture() {
        let pair = build_context_pair_input("who won", "the contest text", TaskKind::Qa);
        assert_eq!(pair, "[CLS] who won [SEP] the contest text [SEP]");
        assert_eq!(pair.matches(SEP_MARKER).count(), 2);
    }

    #[test]
    fn dialogue_pairs_keep_the_query_tail() {
        let query = (0..400).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let pair = build_context_pair_input(&query, "ctx", TaskKind::Dialogue);
        assert!(pair.contains("w399"));
        assert!(pair.contains("w100"));
        assert!(!pair.contains("w99 "));
        let qa = build_context_pair_input(&query, "ctx", TaskKind::Qa);
        assert!(qa.contains("w149"));
        assert!(!qa.contains("w150"));
    }

    #[test]
    fn reranking_is_a_stable_sort() {
        struct Fixed(Vec<f64>);
        impl RelevanceScorer for Fixed {
            fn score(&self, _q: &str, c: &str) -> Result<f64, String> {
                Ok(self.0[c.parse::<usize>().unwrap()])
            }
        }
        let contexts = ["0", "1", "2", "3"];
        let scorer = Fixed(vec![0.5, 0.9, 0.5, 0.1]);
        let (order, warnings) = rerank_contexts(&scorer, "q", &contexts, 10);
        assert!(warnings.is_empty());
        assert_eq!(order, [1, 0, 2, 3]);
        let (top2, _) = rerank_contexts(&scorer, "q", &contexts, 2);
        assert_eq!(top2, [1, 0]);
    }

    #[test]
    fn gold_indicator_puts_gold_contexts_first() {
        let contexts = ["noise one", "gold a", "noise two", "gold b"];
        let scorer = GoldIndicatorScorer {
            gold_texts: ["gold a", "gold b"].iter().map(|s| s.to_string()).collect(),
        };
        let (order, _) = rerank_contexts(&scorer, "q", &contexts, 4);
        assert_eq!(order, [1, 3, 0, 2]);
    }

    #[test]
    fn bm25_scorer_matches_per_pair_recomputation() {
        let contexts = [
            "nile flows north",
            "congo river basin",
            "nile nile nile delta",
            "unrelated text entirely",
        ];
        let scorer = Bm25RelevanceScorer::new(TaskKind::Qa);
        let query = "nile river";
        let (order, _) = rerank_contexts(&scorer, query, &contexts, 4);

        let mut expected: Vec<(usize, f64)> = contexts
            .iter()
            .enumerate()
            .map(|(i, c)| (i, scorer.score(query, c).unwrap()))
            .collect();
        expected.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let expected_order: Vec<usize> = expected.into_iter().map(|(i, _)| i).collect();
        assert_eq!(order, expected_order);
    }

    #[test]
    fn bm25_scorer_saturates_term_frequency() {
        let scorer = Bm25RelevanceScorer::new(TaskKind::Qa);
        let once = scorer.score("nile", "nile").unwrap();
        let thrice = scorer.score("nile", "nile nile nile").unwrap();
        assert!(thrice > once);
        assert!(thrice < 3.0 * once);
    }

    #[test]
    fn failing_scorer_items_are_dropped_with_warnings() {
        struct Flaky;
        impl RelevanceScorer for Flaky {
            fn score(&self, _q: &str, c: &str) -> Result<f64, String> {
                if c == "bad" {
                    Err("cannot score".to_string())
                } else {
                    Ok(c.len() as f64)
                }
            }
        }
        let contexts = ["aaaa", "bad", "bb"];
        let (order, warnings) = rerank_contexts(&Flaky, "q", &contexts, 5);
        assert_eq!(order, [0, 2]);
        assert_eq!(warnings.len(), 1);
        assert_eq!(warnings[0].index, 1);
    }

    #[test]
    fn reader_input_fixtures() {
        assert_eq!(
            build_reader_input("who?", "Nile", "text", TaskKind::Qa),
            "question: who?, title: Nile, context: text"
        );
        assert_eq!(
            build_reader_input("who?", "Nile", "", TaskKind::Qa),
            "question: who?, title: Nile, context: "
        );
        let query = (0..500).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let reader = build_reader_input(&query, "T", "c", TaskKind::Dialogue);
        assert!(reader.contains("w499"));
        assert!(reader.contains("w115"));
        assert!(!reader.contains("w114 "));
        let qa = build_reader_input(&query, "T", "c", TaskKind::Qa);
        assert!(qa.contains("w124"));
        assert!(!qa.contains("w125"));
    }

    #[test]
    fn independent_joint_has_zero_information() {
        let joint = JointDistribution::new(vec![vec![0.25, 0.25], vec![0.25, 0.25]]).unwrap();
        assert_eq!(mutual_information(&joint), 0.0);
    }

    #[test]
    fn diagonal_joint_has_ln_two_information() {
        let joint = JointDistribution::new(vec![vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap();
        assert!((mutual_information(&joint) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn skewed_joint_matches_term_by_term_summation() {
        let rows = vec![vec![0.4, 0.1], vec![0.1, 0.4]];
        let joint = JointDistribution::new(rows.clone()).unwrap();
        // Direct evaluation with explicit marginals.
        let px = [0.5, 0.5];
        let py = [0.5, 0.5];
        let mut expected = 0.0;
        for x in 0..2 {
            for y in 0..2 {
                let p: f64 = rows[x][y];
                expected += p * (p / (px[x] * py[y])).ln();
            }
        }
        assert!((mutual_information(&joint) - expected).abs() < 1e-12);
        assert!(expected > 0.0);
    }

    #[test]
    fn malformed_joints_are_rejected() {
        assert!(matches!(
            JointDistribution::new(vec![]),
            Err(RerankError::MalformedJoint)
        ));
        assert!(matches!(
            JointDistribution::new(vec![vec![0.5], vec![0.2, 0.3]]),
            Err(RerankError::MalformedJoint)
        ));
        assert!(matches!(
            JointDistribution::new(vec![vec![1.5, -0.5]]),
            Err(RerankError::NegativeMass)
        ));
        assert!(matches!(
            JointDistribution::new(vec![vec![0.3, 0.3]]),
            Err(RerankError::NotNormalized { .. })
        ));
    }

    proptest! {
        // Factorized joints carry no information; arbitrary joints never
        // carry negative information.
        #[test]
        fn information_is_nonnegative_and_zero_under_independence(
            raw_px in proptest::collection::vec(0.05f64..1.0, 2..4),
            raw_py in proptest::collection::vec(0.05f64..1.0, 2..4),
        ) {
            let sx: f64 = raw_px.iter().sum();
            let sy: f64 = raw_py.iter().sum();
            let px: Vec<f64> = raw_px.iter().map(|v| v / sx).collect();
            let py: Vec<f64> = raw_py.iter().map(|v| v / sy).collect();
            let mut rows: Vec<Vec<f64>> =
                px.iter().map(|&a| py.iter().map(|&b| a * b).collect()).collect();
            // Renormalize exactly: floating products can drift past 1e-12.
            let sum: f64 = rows.iter().flatten().sum();
            for row in &mut rows {
                for p in row {
                    *p /= sum;
                }
            }
            let joint = JointDistribution::new(rows).unwrap();
            let mi = mutual_information(&joint);
            prop_assert!(mi >= 0.0);
            prop_assert!(mi < 1e-9);
        }
    }
}
