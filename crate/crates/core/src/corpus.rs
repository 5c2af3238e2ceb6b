//! Knowledge-source records, passage chunking, and query loading.
//!
//! Input files are JSON lines. A knowledge record carries a page title and
//! the page text as a list of lines; a query record carries the query text
//! plus gold annotations (answers and provenance page titles). Both loaders
//! report the 1-based line number of the first malformed line.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path} line {line}: {source}")]
    Parse {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{path} line {line}: duplicate title {title:?}")]
    DuplicateTitle {
        path: String,
        line: usize,
        title: String,
    },
}

/// One page of the knowledge source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    pub wikipedia_id: String,
    pub wikipedia_title: String,
    /// Page text as a list of lines, in page order.
    pub text: Vec<String>,
}

/// Reads a knowledge-source JSONL file, preserving file order.
/// Titles must be unique across the file.
pub fn load_knowledge_source(path: &Path) -> Result<Vec<KnowledgeRecord>, CorpusError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: display.clone(),
        source,
    })?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: KnowledgeRecord =
            serde_json::from_str(&line).map_err(|source| CorpusError::Parse {
                path: display.clone(),
                line: idx + 1,
                source,
            })?;
        if !seen.insert(record.wikipedia_title.clone()) {
            return Err(CorpusError::DuplicateTitle {
                path: display,
                line: idx + 1,
                title: record.wikipedia_title,
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Number of words per chunk. Every chunk except possibly the last per page
/// has exactly this many words.
pub const CHUNK_WORDS: usize = 100;

/// Lines containing either pattern are dropped before chunking.
pub const SECTION_PATTERN: &str = "Section::::";
pub const BULLET_PATTERN: &str = "BULLET::::";

/// A fixed-size window of page text. `chunk_index` counts windows within one
/// page, starting at zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub title: String,
    pub chunk_index: u32,
    pub text: String,
}

/// Splits one page into 100-word chunks.
///
/// Lines equal to the bare title (after trimming) and lines containing
/// [`SECTION_PATTERN`] or [`BULLET_PATTERN`] are dropped. The remaining
/// lines are read as one word stream; words are whitespace-delimited and
/// re-joined with single spaces. The final partial chunk is kept.
pub fn chunk_passage(record: &KnowledgeRecord) -> Vec<Chunk> {
    let words: Vec<&str> = record
        .text
        .iter()
        .filter(|line| {
            let line = line.trim();
            line != record.wikipedia_title
                && !line.contains(SECTION_PATTERN)
                && !line.contains(BULLET_PATTERN)
        })
        .flat_map(|line| line.split_whitespace())
        .collect();
    words
        .chunks(CHUNK_WORDS)
        .enumerate()
        .map(|(i, w)| Chunk {
            title: record.wikipedia_title.clone(),
            chunk_index: i as u32,
            text: w.join(" "),
        })
        .collect()
}

/// Task family a query belongs to. Decides which text window feeds the
/// context reranker and the reader.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Qa,
    FactCheck,
    Dialogue,
}

impl TaskKind {
    pub fn parse(s: &str) -> Option<TaskKind> {
        match s {
            "qa" => Some(TaskKind::Qa),
            "factcheck" => Some(TaskKind::FactCheck),
            "dialogue" => Some(TaskKind::Dialogue),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Qa => "qa",
            TaskKind::FactCheck => "factcheck",
            TaskKind::Dialogue => "dialogue",
        }
    }
}

/// One query with its gold annotations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub input: String,
    /// Distinct provenance titles, in first-seen order across outputs.
    pub gold_titles: Vec<String>,
    /// Distinct answers, in first-seen order across outputs.
    pub gold_answers: Vec<String>,
    pub task_kind: TaskKind,
}

#[derive(Deserialize)]
struct RawQuery {
    id: String,
    input: String,
    #[serde(default)]
    output: Vec<RawOutput>,
}

#[derive(Deserialize)]
struct RawOutput {
    #[serde(default)]
    answer: Option<String>,
    #[serde(default)]
    provenance: Vec<RawProvenance>,
}

#[derive(Deserialize)]
struct RawProvenance {
    wikipedia_title: String,
}

/// Reads a query JSONL file. The file format does not carry the task family,
/// so the caller supplies it for the whole file.
pub fn load_queries(path: &Path, task_kind: TaskKind) -> Result<Vec<QueryRecord>, CorpusError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: display.clone(),
        source,
    })?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawQuery = serde_json::from_str(&line).map_err(|source| CorpusError::Parse {
            path: display.clone(),
            line: idx + 1,
            source,
        })?;
        let mut gold_titles = Vec::new();
        let mut gold_answers = Vec::new();
        for output in &raw.output {
            if let Some(answer) = &output.answer {
                if !gold_answers.contains(answer) {
                    gold_answers.push(answer.clone());
                }
            }
            for prov in &output.provenance {
                if !gold_titles.contains(&prov.wikipedia_title) {
                    gold_titles.push(prov.wikipedia_title.clone());
                }
            }
        }
        records.push(QueryRecord {
            id: raw.id,
            input: raw.input,
            gold_titles,
            gold_answers,
            task_kind,
        });
    }
    Ok(records)
}

/// Entity labels that do not count as substantive content on their own.
pub const NON_SUBSTANTIVE_ENTITY_TAGS: [&str; 7] = [
    "DATE", "MONEY", "CARDINAL", "TIME", "QUANTITY", "ORDINAL", "PERCENT",
];

/// Decides whether a generated question is worth keeping for training.
///
/// Returns `false` exactly when every tag is one of
/// [`NON_SUBSTANTIVE_ENTITY_TAGS`], including the no-tags case; a question
/// with at least one other tag (known or not) is kept. The question text
/// itself does not participate in the rule; it is accepted here so callers
/// can filter `(question, tags)` pairs directly.
pub fn filter_generated_question<T: AsRef<str>>(_question: &str, entity_tags: &[T]) -> bool {
    entity_tags
        .iter()
        .any(|tag| !NON_SUBSTANTIVE_ENTITY_TAGS.contains(&tag.as_ref()))
}

/// Chunk lookup by page title. Chunks for one title stay in chunk order.
#[derive(Debug, Clone, Default)]
pub struct ChunkStore {
    by_title: BTreeMap<String, Vec<Chunk>>,
}

impl ChunkStore {
    pub fn from_chunks(chunks: impl IntoIterator<Item = Chunk>) -> ChunkStore {
        let mut by_title: BTreeMap<String, Vec<Chunk>> = BTreeMap::new();
        for chunk in chunks {
            by_title.entry(chunk.title.clone()).or_default().push(chunk);
        }
        for chunks in by_title.values_mut() {
            chunks.sort_by_key(|c| c.chunk_index);
        }
        ChunkStore { by_title }
    }

    pub fn get(&self, title: &str) -> Option<&[Chunk]> {
        self.by_title.get(title).map(Vec::as_slice)
    }

    pub fn contains_title(&self, title: &str) -> bool {
        self.by_title.contains_key(title)
    }

    pub fn title_count(&self) -> usize {
        self.by_title.len()
    }

    /// Titles in sorted order.
    pub fn titles(&self) -> impl Iterator<Item = &str> {
        self.by_title.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        f
    }

    fn record(title: &str, lines: &[&str]) -> KnowledgeRecord {
        KnowledgeRecord {
            wikipedia_id: "0".into(),
            wikipedia_title: title.into(),
            text: lines.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn loads_records_in_file_order() {
        let f = write_lines(&[
            r#"{"wikipedia_id": "1", "wikipedia_title": "Nile", "text": ["The Nile is a river."]}"#,
            r#"{"wikipedia_id": "2", "wikipedia_title": "Congo River", "text": ["The Congo."]}"#,
        ]);
        let records = load_knowledge_source(f.path()).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].wikipedia_title, "Nile");
        assert_eq!(records[1].wikipedia_title, "Congo River");
    }

    #[test]
    fn empty_file_loads_empty() {
        let f = write_lines(&[]);
        assert!(load_knowledge_source(f.path()).unwrap().is_empty());
    }

    #[test]
    fn duplicate_title_is_rejected_by_name() {
        let f = write_lines(&[
            r#"{"wikipedia_id": "1", "wikipedia_title": "Nile", "text": []}"#,
            r#"{"wikipedia_id": "2", "wikipedia_title": "Nile", "text": []}"#,
        ]);
        let err = load_knowledge_source(f.path()).unwrap_err();
        match err {
            CorpusError::DuplicateTitle { line, title, .. } => {
                assert_eq!(line, 2);
                assert_eq!(title, "Nile");
            }
            other => panic!("expected duplicate-title error, got {other}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_lines(&[
            r#"{"wikipedia_id": "1", "wikipedia_title": "Nile", "text": []}"#,
            "not json",
        ]);
        let err = load_knowledge_source(f.path()).unwrap_err();
        match err {
            CorpusError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    fn numbered_words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn chunks_come_out_at_100_words() {
        let rec = record("Page", &[&numbered_words(250)]);
        let chunks = chunk_passage(&rec);
        let lens: Vec<usize> = chunks
            .iter()
            .map(|c| c.text.split_whitespace().count())
            .collect();
        assert_eq!(lens, vec![100, 100, 50]);
        assert_eq!(chunks[0].chunk_index, 0);
        assert_eq!(chunks[2].chunk_index, 2);
    }

    #[test]
    fn section_only_pages_chunk_to_nothing() {
        let rec = record("Page", &["Section::::History.", "Section::::Geography."]);
        assert!(chunk_passage(&rec).is_empty());
    }

    #[test]
    fn title_line_is_dropped() {
        let body = numbered_words(100);
        let rec = record("Page", &["Page", &body]);
        let chunks = chunk_passage(&rec);
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].text, body);
    }

    #[test]
    fn bullet_lines_are_dropped() {
        let rec = record("Page", &["alpha beta", "BULLET::::- item one", "gamma"]);
        let chunks = chunk_passage(&rec);
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].text, "alpha beta gamma");
    }

    proptest! {
        // Concatenating the chunks reproduces the kept-word stream, and all
        // chunks except the last are exactly 100 words.
        #[test]
        fn chunking_preserves_kept_words(
            lines in proptest::collection::vec(
                proptest::collection::vec("[a-z]{1,4}", 0..60).prop_map(|ws| ws.join(" ")),
                0..8,
            )
        ) {
            let rec = KnowledgeRecord {
                wikipedia_id: "0".into(),
                wikipedia_title: "Page Title".into(),
                text: lines,
            };
            let expected: Vec<&str> = rec
                .text
                .iter()
                .filter(|l| l.trim() != rec.wikipedia_title)
                .flat_map(|l| l.split_whitespace())
                .collect();
            let chunks = chunk_passage(&rec);
            let rejoined: Vec<&str> = chunks
                .iter()
                .flat_map(|c| c.text.split_whitespace())
                .collect();
            prop_assert_eq!(rejoined, expected);
            for chunk in chunks.iter().rev().skip(1) {
                prop_assert_eq!(chunk.text.split_whitespace().count(), CHUNK_WORDS);
            }
        }
    }

    #[test]
    fn query_gold_fields_merge_across_outputs() {
        let f = write_lines(&[concat!(
            r#"{"id": "q1", "input": "who?", "output": ["#,
            r#"{"answer": "Ra", "provenance": [{"wikipedia_title": "Nile"}, {"wikipedia_title": "Ra"}]},"#,
            r#"{"answer": "Ra", "provenance": [{"wikipedia_title": "Nile"}]},"#,
            r#"{"answer": "Amun"}"#,
            r#"]}"#
        )]);
        let queries = load_queries(f.path(), TaskKind::Qa).unwrap();
        assert_eq!(queries.len(), 1);
        assert_eq!(queries[0].gold_titles, vec!["Nile", "Ra"]);
        assert_eq!(queries[0].gold_answers, vec!["Ra", "Amun"]);
    }

    #[test]
    fn query_without_output_has_empty_gold() {
        let f = write_lines(&[r#"{"id": "q1", "input": "who?"}"#]);
        let queries = load_queries(f.path(), TaskKind::Dialogue).unwrap();
        assert!(queries[0].gold_titles.is_empty());
        assert!(queries[0].gold_answers.is_empty());
        assert_eq!(queries[0].task_kind, TaskKind::Dialogue);
    }

    #[test]
    fn malformed_query_line_reports_line_number() {
        let f = write_lines(&[r#"{"id": "q1", "input": "who?"}"#, "{broken"]);
        let err = load_queries(f.path(), TaskKind::Qa).unwrap_err();
        match err {
            CorpusError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn question_filter_drops_numeric_only_tags() {
        assert!(!filter_generated_question("when?", &["DATE"]));
        assert!(!filter_generated_question("how much?", &["MONEY", "CARDINAL"]));
        assert!(!filter_generated_question("what?", &[] as &[&str]));
    }

    #[test]
    fn question_filter_keeps_substantive_tags() {
        assert!(filter_generated_question("who?", &["PERSON", "DATE"]));
        assert!(filter_generated_question("where?", &["GPE"]));
        // Labels outside the known tag sets count as substantive.
        assert!(filter_generated_question("what?", &["WIDGET"]));
    }

    proptest! {
        // Adding a substantive tag never flips keep into drop.
        #[test]
        fn question_filter_is_monotone(
            base in proptest::collection::vec(
                proptest::sample::select(NON_SUBSTANTIVE_ENTITY_TAGS.to_vec()),
                0..4,
            ),
            extra in "[A-Z]{3,8}",
        ) {
            prop_assume!(!NON_SUBSTANTIVE_ENTITY_TAGS.contains(&extra.as_str()));
            let before = filter_generated_question("q", &base);
            let mut tags: Vec<&str> = base.clone();
            tags.push(&extra);
            prop_assert!(filter_generated_question("q", &tags));
            let _ = before;
        }
    }

    #[test]
    fn chunk_store_groups_and_orders_by_index() {
        let store = ChunkStore::from_chunks(vec![
            Chunk { title: "B".into(), chunk_index: 1, text: "b1".into() },
            Chunk { title: "A".into(), chunk_index: 0, text: "a0".into() },
            Chunk { title: "B".into(), chunk_index: 0, text: "b0".into() },
        ]);
        assert_eq!(store.title_count(), 2);
        let b = store.get("B").unwrap();
        assert_eq!(b[0].text, "b0");
        assert_eq!(b[1].text, "b1");
        assert!(store.get("C").is_none());
    }
}
