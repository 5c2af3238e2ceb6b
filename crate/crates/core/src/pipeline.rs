//! File-based stage graph: each stage reads input files and the artifacts
//! of earlier stages, then atomically writes its own artifacts into the
//! output directory. Stages are individually runnable and resumable;
//! re-running a stage with unchanged inputs and seed reproduces its
//! artifacts byte for byte.
//!
//! Artifact conventions: JSONL files open with a header object
//! `{"artifact", "version", "seed", ...}` (extra keys carry per-artifact
//! diagnostics); CSV traces open with a `# seed=N` comment; binary
//! snapshots carry the seed in their fixed header. No artifact embeds a
//! timestamp.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bm25::{mine_hard_negatives, DocKey, InvertedIndex};
use crate::config::PipelineConfig;
use crate::corpus::{
    chunk_passage, load_knowledge_source, load_queries, Chunk, ChunkStore, QueryRecord,
};
use crate::decoder::{constrained_beam_search, encode_query, select_top_titles, teacher_actions};
use crate::metrics::{
    classifier_metrics, exact_match, normalize_answer, r_precision, recall_at_k, rouge_l,
    token_f1, ConfusionCounts,
};
use crate::policy::{supervised_step, PolicyParams, PolicyShape, TeacherExample};
use crate::reinforce::{train_reinforce, RlSchedule};
use crate::report::{EvalReport, QueryEval};
use crate::rerank::{
    build_context_pair_input, build_reader_input, build_title_rerank_input, mutual_information,
    perturb_training_titles, rerank_contexts, rerank_target, retrieve_contexts_for_titles,
    Bm25RelevanceScorer, ContextPair, ContextWarning, JointDistribution, RerankTitleExample,
};
use crate::scalar::scalar;
use crate::seeding::derive_seed;
use crate::snapshot::write_atomic;
use crate::trie::{build_title_trie, TitleTrie};
use crate::vocab::Vocabulary;
use crate::DefaultScalar;

pub const ARTIFACT_VERSION: u32 = 1;

pub const CHUNKS: &str = "chunks.jsonl";
pub const VOCAB: &str = "vocab.txt";
pub const TRIE: &str = "trie.bin";
pub const TITLE_INDEX: &str = "title_index.bin";
pub const CHUNK_INDEX: &str = "chunk_index.bin";
pub const PARAMS_PRETRAIN: &str = "params_pretrain.bin";
pub const TRACE_PRETRAIN: &str = "trace_pretrain.csv";
pub const PARAMS_RLZERO: &str = "params_rlzero.bin";
pub const TRACE_RLZERO: &str = "trace_rlzero.csv";
pub const PARAMS_FEWSHOT: &str = "params_fewshot.bin";
pub const TRACE_FEWSHOT: &str = "trace_fewshot.csv";
pub const PARAMS_RLFEW: &str = "params_rlfew.bin";
pub const TRACE_RLFEW: &str = "trace_rlfew.csv";
pub const RERANK_DATA: &str = "rerank_data.jsonl";
pub const CONTEXT_PAIRS: &str = "context_pairs.jsonl";
pub const RERANKED_TITLES: &str = "reranked_titles.jsonl";
pub const CONTEXTS: &str = "contexts.jsonl";
pub const CONTEXT_WARNINGS: &str = "context_warnings.jsonl";
pub const RERANKED_CONTEXTS: &str = "reranked_contexts.jsonl";
pub const READER_INPUTS: &str = "reader_inputs.jsonl";
pub const DECODED: &str = "decoded.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

/// Seed streams for stages that draw their own randomness, kept distinct
/// so their ChaCha streams never coincide by construction.
const STREAM_RL_ZERO: u64 = 101;
const STREAM_RL_FEW: u64 = 102;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline setup: {0}")]
    Validation(String),
    #[error("stage {stage} needs {missing} produced by stage {producer}; run {producer} first")]
    Dependency {
        stage: &'static str,
        missing: String,
        producer: &'static str,
    },
    #[error("stage {stage} failed: {message}")]
    Runtime {
        stage: &'static str,
        message: String,
    },
}

impl PipelineError {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) => 2,
            PipelineError::Dependency { .. } => 3,
            PipelineError::Runtime { .. } => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Chunk,
    BuildTrie,
    BuildIndex,
    Pretrain,
    ReinforceZero,
    FewShot,
    ReinforceFew,
    MakeRerankData,
    RerankTitles,
    RetrieveContexts,
    RerankContexts,
    BuildReaderInputs,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 13] = [
        Stage::Chunk,
        Stage::BuildTrie,
        Stage::BuildIndex,
        Stage::Pretrain,
        Stage::ReinforceZero,
        Stage::FewShot,
        Stage::ReinforceFew,
        Stage::MakeRerankData,
        Stage::RerankTitles,
        Stage::RetrieveContexts,
        Stage::RerankContexts,
        Stage::BuildReaderInputs,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Chunk => "chunk",
            Stage::BuildTrie => "build-trie",
            Stage::BuildIndex => "build-index",
            Stage::Pretrain => "pretrain",
            Stage::ReinforceZero => "reinforce-zero",
            Stage::FewShot => "few-shot",
            Stage::ReinforceFew => "reinforce-few",
            Stage::MakeRerankData => "make-rerank-data",
            Stage::RerankTitles => "rerank-titles",
            Stage::RetrieveContexts => "retrieve-contexts",
            Stage::RerankContexts => "rerank-contexts",
            Stage::BuildReaderInputs => "reader-inputs",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn parse(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Chunk | Stage::BuildTrie => &[],
            Stage::BuildIndex => &[Stage::Chunk],
            Stage::Pretrain => &[Stage::BuildTrie],
            Stage::ReinforceZero => &[Stage::Pretrain, Stage::BuildTrie],
            Stage::FewShot => &[Stage::ReinforceZero, Stage::BuildTrie],
            Stage::ReinforceFew => &[Stage::FewShot, Stage::BuildTrie],
            Stage::MakeRerankData => &[
                Stage::Pretrain,
                Stage::ReinforceFew,
                Stage::BuildIndex,
                Stage::Chunk,
                Stage::BuildTrie,
            ],
            Stage::RerankTitles => &[
                Stage::ReinforceFew,
                Stage::BuildIndex,
                Stage::Chunk,
                Stage::BuildTrie,
            ],
            Stage::RetrieveContexts => &[Stage::RerankTitles, Stage::Chunk, Stage::BuildIndex],
            Stage::RerankContexts => &[Stage::RetrieveContexts, Stage::Chunk],
            Stage::BuildReaderInputs => &[Stage::RerankContexts],
            Stage::Evaluate => &[Stage::RerankTitles, Stage::RerankContexts],
        }
    }

    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Chunk => &[CHUNKS],
            Stage::BuildTrie => &[VOCAB, TRIE],
            Stage::BuildIndex => &[TITLE_INDEX, CHUNK_INDEX],
            Stage::Pretrain => &[PARAMS_PRETRAIN, TRACE_PRETRAIN],
            Stage::ReinforceZero => &[PARAMS_RLZERO, TRACE_RLZERO],
            Stage::FewShot => &[PARAMS_FEWSHOT, TRACE_FEWSHOT],
            Stage::ReinforceFew => &[PARAMS_RLFEW, TRACE_RLFEW],
            Stage::MakeRerankData => &[RERANK_DATA, CONTEXT_PAIRS],
            Stage::RerankTitles => &[RERANKED_TITLES],
            Stage::RetrieveContexts => &[CONTEXTS, CONTEXT_WARNINGS],
            Stage::RerankContexts => &[RERANKED_CONTEXTS],
            Stage::BuildReaderInputs => &[READER_INPUTS],
            Stage::Evaluate => &[REPORT_JSON, REPORT_TXT],
        }
    }

    /// Trained-parameter artifact a stage produces, for decode sourcing.
    pub fn params_artifact(self) -> Option<&'static str> {
        match self {
            Stage::Pretrain => Some(PARAMS_PRETRAIN),
            Stage::ReinforceZero => Some(PARAMS_RLZERO),
            Stage::FewShot => Some(PARAMS_FEWSHOT),
            Stage::ReinforceFew => Some(PARAMS_RLFEW),
            _ => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Kahn's algorithm over the declared dependency edges. Returns a
/// deterministic topological order; a cycle is a validation error.
pub fn validate_dag() -> Result<Vec<Stage>, PipelineError> {
    let mut remaining: Vec<Stage> = Stage::ALL.to_vec();
    let mut order = Vec::with_capacity(remaining.len());
    let mut placed: BTreeSet<Stage> = BTreeSet::new();
    while !remaining.is_empty() {
        let ready = remaining
            .iter()
            .position(|s| s.deps().iter().all(|d| placed.contains(d)));
        match ready {
            Some(i) => {
                let stage = remaining.remove(i);
                placed.insert(stage);
                order.push(stage);
            }
            None => {
                let names: Vec<&str> = remaining.iter().map(|s| s.name()).collect();
                return Err(PipelineError::Validation(format!(
                    "stage dependency cycle among: {}",
                    names.join(", ")
                )));
            }
        }
    }
    Ok(order)
}

/// Per-stage result for the summary line: counters in insertion order,
/// produced file names, and wall time.
#[derive(Debug, Clone)]
pub struct StageSummary {
    pub stage: Stage,
    pub counts: Vec<(&'static str, u64)>,
    pub outputs: Vec<&'static str>,
    pub seconds: f64,
}

impl fmt::Display for StageSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.stage)?;
        for (name, value) in &self.counts {
            write!(f, " {name}={value}")?;
        }
        write!(f, " -> {} ({:.2}s)", self.outputs.join(", "), self.seconds)
    }
}

fn fail<E: fmt::Display>(stage: Stage) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Runtime {
        stage: stage.name(),
        message: e.to_string(),
    }
}

/// First line of every JSONL artifact.
#[derive(Debug, Deserialize)]
struct ArtifactHeader {
    artifact: String,
    version: u32,
    #[allow(dead_code)]
    seed: u64,
}

fn write_jsonl<T: Serialize>(
    path: &Path,
    artifact: &str,
    seed: u64,
    extras: &[(&str, serde_json::Value)],
    rows: &[T],
) -> Result<(), String> {
    let mut header = serde_json::Map::new();
    header.insert("artifact".into(), artifact.into());
    header.insert("version".into(), ARTIFACT_VERSION.into());
    header.insert("seed".into(), seed.into());
    for (key, value) in extras {
        header.insert((*key).into(), value.clone());
    }
    let mut out = serde_json::Value::Object(header).to_string();
    out.push('\n');
    for row in rows {
        out.push_str(&serde_json::to_string(row).map_err(|e| e.to_string())?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes()).map_err(|e| e.to_string())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, artifact: &str) -> Result<Vec<T>, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let mut lines = text.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| format!("{}: empty artifact", path.display()))?;
    let header: ArtifactHeader = serde_json::from_str(header_line)
        .map_err(|e| format!("{}: bad header: {e}", path.display()))?;
    if header.artifact != artifact {
        return Err(format!(
            "{}: artifact is {:?}, expected {:?}",
            path.display(),
            header.artifact,
            artifact
        ));
    }
    if header.version != ARTIFACT_VERSION {
        return Err(format!(
            "{}: version {} unsupported (expected {})",
            path.display(),
            header.version,
            ARTIFACT_VERSION
        ));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        rows.push(
            serde_json::from_str(line)
                .map_err(|e| format!("{} line {}: {e}", path.display(), i + 2))?,
        );
    }
    Ok(rows)
}

fn write_csv(path: &Path, seed: u64, columns: &str, rows: &[String]) -> Result<(), String> {
    let mut out = format!("# seed={seed}\n{columns}\n");
    for row in rows {
        out.push_str(row);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes()).map_err(|e| e.to_string())
}

/// One decoded query: deduplicated top titles plus each finished beam.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeRow {
    pub id: String,
    pub titles: Vec<String>,
    pub beams: Vec<DecodeBeam>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeBeam {
    pub titles: Vec<String>,
    pub logprob: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TitlesRow {
    pub id: String,
    /// Deduplicated decode order, before reranking.
    pub decoded: Vec<String>,
    /// Reranked order, truncated to the configured title count.
    pub titles: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextRow {
    pub id: String,
    pub title: String,
    pub chunk_index: u32,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WarningRow {
    pub id: String,
    pub warning: ContextWarning,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextRef {
    pub title: String,
    pub chunk_index: u32,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedContextsRow {
    pub id: String,
    pub contexts: Vec<ContextRef>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReaderInputsRow {
    pub id: String,
    pub inputs: Vec<String>,
}

type Params = PolicyParams<DefaultScalar>;

struct LoadedModel {
    vocab: Vocabulary,
    trie: TitleTrie,
}

fn load_model(out: &Path, stage: Stage) -> Result<LoadedModel, PipelineError> {
    let vocab_text = std::fs::read_to_string(out.join(VOCAB))
        .map_err(|e| fail(stage)(format!("{VOCAB}: {e}")))?;
    let surfaces: Vec<String> = vocab_text
        .lines()
        .skip(1)
        .map(str::to_string)
        .collect();
    let vocab = Vocabulary::from_word_surfaces(surfaces);
    let trie = TitleTrie::load(&out.join(TRIE)).map_err(fail(stage))?;
    Ok(LoadedModel { vocab, trie })
}

fn load_store(out: &Path, stage: Stage) -> Result<ChunkStore, PipelineError> {
    let rows: Vec<Chunk> = read_jsonl(&out.join(CHUNKS), "chunks").map_err(fail(stage))?;
    Ok(ChunkStore::from_chunks(rows))
}

fn load_params(out: &Path, name: &str, stage: Stage) -> Result<Params, PipelineError> {
    PolicyParams::load(&out.join(name)).map_err(fail(stage))
}

fn load_query_file(
    path: &Path,
    config: &PipelineConfig,
    stage: Stage,
) -> Result<Vec<QueryRecord>, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::Validation(format!(
            "input file {} does not exist",
            path.display()
        )));
    }
    load_queries(path, config.task_kind).map_err(fail(stage))
}

fn fewshot_path(config: &PipelineConfig) -> &Path {
    config
        .fewshot_queries
        .as_deref()
        .unwrap_or(&config.train_queries)
}

/// Text of the chunk a BM25 hit points at, if the store still holds it.
fn chunk_for_key<'a>(store: &'a ChunkStore, key: &DocKey) -> Option<&'a Chunk> {
    let chunks = store.get(&key.title)?;
    chunks.iter().find(|c| Some(c.chunk_index) == key.chunk_index)
}

/// Top-k BM25 chunk hits for a query, resolved to their chunks.
fn retrieve_query_chunks<'a>(
    store: &'a ChunkStore,
    chunk_index: &InvertedIndex,
    query: &str,
    k: usize,
) -> Vec<&'a Chunk> {
    chunk_index
        .search_top_k(query, k)
        .iter()
        .filter_map(|hit| chunk_for_key(store, chunk_index.key(hit.doc_id)))
        .collect()
}

/// Gold chunks of a query: chunks of gold-title pages whose normalized
/// text contains a normalized gold answer as a substring.
fn gold_chunk_keys(query: &QueryRecord, store: &ChunkStore) -> BTreeSet<DocKey> {
    let answers: Vec<String> = query
        .gold_answers
        .iter()
        .map(|a| normalize_answer(a))
        .filter(|a| !a.is_empty())
        .collect();
    let mut keys = BTreeSet::new();
    if answers.is_empty() {
        return keys;
    }
    for title in &query.gold_titles {
        for chunk in store.get(title).unwrap_or(&[]) {
            let text = normalize_answer(&chunk.text);
            if answers.iter().any(|a| text.contains(a.as_str())) {
                keys.insert(DocKey::chunk(&chunk.title, chunk.chunk_index));
            }
        }
    }
    keys
}

/// Decodes one query and returns its deduplicated top-k titles.
fn decode_top_titles(
    params: &Params,
    model: &LoadedModel,
    config: &PipelineConfig,
    query: &QueryRecord,
    k: usize,
) -> Result<Vec<String>, String> {
    let ids = encode_query(&model.vocab, &query.input);
    let hyps = constrained_beam_search(params, &ids, &model.trie, &config.decode)
        .map_err(|e| format!("query {}: {e}", query.id))?;
    Ok(select_top_titles(&hyps, k))
}

/// Supervised teacher-forcing epochs over every trainable query. Queries
/// whose gold titles all fall outside the trie are skipped, not errors.
fn run_supervised(
    start: &Params,
    model: &LoadedModel,
    queries: &[QueryRecord],
    epochs: usize,
    learning_rate: f64,
    config: &PipelineConfig,
) -> Result<(Params, Vec<String>, u64, u64), String> {
    let mut batch = Vec::new();
    let mut skipped = 0u64;
    for query in queries {
        let reachable: Vec<String> = query
            .gold_titles
            .iter()
            .filter(|t| model.trie.contains_title(&model.vocab.tokenize(t)))
            .cloned()
            .collect();
        if reachable.is_empty() {
            skipped += 1;
            continue;
        }
        let (actions, masks) = teacher_actions(
            &model.trie,
            &model.vocab,
            &reachable,
            config.decode.max_titles_per_beam,
        )
        .map_err(|e| format!("query {}: {e}", query.id))?;
        batch.push(TeacherExample {
            query_ids: encode_query(&model.vocab, &query.input),
            actions,
            masks,
        });
    }
    if batch.is_empty() && epochs > 0 {
        return Err("no trainable queries: every query lacks in-corpus gold titles".to_string());
    }
    let mut params = start.clone();
    let mut trace = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let (next, loss) = supervised_step(&params, &batch, scalar::<DefaultScalar>(learning_rate))
            .map_err(|e| e.to_string())?;
        params = next;
        trace.push(format!("{epoch},{loss}"));
    }
    Ok((params, trace, batch.len() as u64, skipped))
}

fn reinforce_stage(
    config: &PipelineConfig,
    stage: Stage,
    start_params: &'static str,
    queries_path: &Path,
    epochs: usize,
    learning_rate: f64,
    stream: u64,
    out_params: &'static str,
    out_trace: &'static str,
) -> Result<Vec<(&'static str, u64)>, PipelineError> {
    let out = &config.out;
    let model = load_model(out, stage)?;
    let params = load_params(out, start_params, stage)?;
    let queries = load_query_file(queries_path, config, stage)?;
    let schedule = RlSchedule {
        epochs,
        learning_rate,
        mode: config.rl_mode,
        seed: derive_seed(config.seed, stream, 0),
    };
    let (trained, trace) = train_reinforce(
        &params,
        &model.vocab,
        &queries,
        &model.trie,
        &config.decode,
        &schedule,
    )
    .map_err(fail(stage))?;
    trained.save(&out.join(out_params), config.seed).map_err(fail(stage))?;
    let rows: Vec<String> = trace
        .iter()
        .map(|s| format!("{},{},{}", s.epoch, s.mean_reward, s.loss))
        .collect();
    write_csv(&out.join(out_trace), config.seed, "epoch,mean_reward,loss", &rows)
        .map_err(fail(stage))?;
    let final_reward_ppm = trace
        .last()
        .map(|s| (s.mean_reward * 1_000_000.0).round() as u64)
        .unwrap_or(0);
    Ok(vec![
        ("queries", queries.len() as u64),
        ("epochs", epochs as u64),
        ("final_reward_ppm", final_reward_ppm),
    ])
}

/// Runs one stage end to end: dependency check, work, atomic writes.
pub fn run_stage(config: &PipelineConfig, stage: Stage) -> Result<StageSummary, PipelineError> {
    config
        .validate()
        .map_err(|e| PipelineError::Validation(e.to_string()))?;
    std::fs::create_dir_all(&config.out).map_err(fail(stage))?;
    for dep in stage.deps() {
        for name in dep.outputs() {
            let path = config.out.join(name);
            if !path.exists() {
                return Err(PipelineError::Dependency {
                    stage: stage.name(),
                    missing: name.to_string(),
                    producer: dep.name(),
                });
            }
        }
    }
    let started = Instant::now();
    let counts = dispatch(config, stage)?;
    Ok(StageSummary {
        stage,
        counts,
        outputs: stage.outputs().to_vec(),
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Runs every stage in dependency order.
pub fn run_pipeline(config: &PipelineConfig) -> Result<Vec<StageSummary>, PipelineError> {
    let order = validate_dag()?;
    let mut summaries = Vec::with_capacity(order.len());
    for stage in order {
        summaries.push(run_stage(config, stage)?);
    }
    Ok(summaries)
}

fn dispatch(
    config: &PipelineConfig,
    stage: Stage,
) -> Result<Vec<(&'static str, u64)>, PipelineError> {
    match stage {
        Stage::Chunk => stage_chunk(config),
        Stage::BuildTrie => stage_build_trie(config),
        Stage::BuildIndex => stage_build_index(config),
        Stage::Pretrain => stage_pretrain(config),
        Stage::ReinforceZero => reinforce_stage(
            config,
            stage,
            PARAMS_PRETRAIN,
            &config.train_queries,
            config.rl_zero_epochs,
            config.rl_zero_learning_rate,
            STREAM_RL_ZERO,
            PARAMS_RLZERO,
            TRACE_RLZERO,
        ),
        Stage::FewShot => stage_fewshot(config),
        Stage::ReinforceFew => reinforce_stage(
            config,
            stage,
            PARAMS_FEWSHOT,
            fewshot_path(config),
            config.rl_few_epochs,
            config.rl_few_learning_rate,
            STREAM_RL_FEW,
            PARAMS_RLFEW,
            TRACE_RLFEW,
        ),
        Stage::MakeRerankData => stage_make_rerank_data(config),
        Stage::RerankTitles => stage_rerank_titles(config),
        Stage::RetrieveContexts => stage_retrieve_contexts(config),
        Stage::RerankContexts => stage_rerank_contexts(config),
        Stage::BuildReaderInputs => stage_reader_inputs(config),
        Stage::Evaluate => stage_evaluate(config),
    }
}

fn stage_chunk(config: &PipelineConfig) -> Result<Vec<(&'static str, u64)>, PipelineError> {
    let stage = Stage::Chunk;
    if !config.corpus.exists() {
        return Err(PipelineError::Validation(format!(
            "input file {} does not exist",
            config.corpus.display()
        )));
    }
    let records = load_knowledge_source(&config.corpus).map_err(fail(stage))?;
    let mut rows: Vec<Chunk> = Vec::new();
    for record in &records {
        rows.extend(chunk_passage(record));
    }
    write_jsonl(&config.out.join(CHUNKS), "chunks", config.seed, &[], &rows)
        .map_err(fail(stage))?;
    Ok(vec![
        ("pages", records.len() as u64),
        ("chunks", rows.len() as u64),
    ])
}

fn stage_build_trie(config: &PipelineConfig) -> Result<Vec<(&'static str, u64)>, PipelineError> {
    let stage = Stage::BuildTrie;
    if !config.corpus.exists() {
        return Err(PipelineError::Validation(format!(
            "input file {} does not exist",
            config.corpus.display()
        )));
    }
    let records = load_knowledge_source(&config.corpus).map_err(fail(stage))?;
    let mut seen = BTreeSet::new();
    let mut titles: Vec<String> = Vec::new();
    for record in &records {
        if seen.insert(record.wikipedia_title.clone()) {
            titles.push(record.wikipedia_title.clone());
        }
    }
    let mut builder = Vocabulary::builder();
    for title in &titles {
        builder.add_text(title);
    }
    let vocab = builder.finish();
    let trie = build_title_trie(&titles, &vocab).map_err(fail(stage))?;

    let mut vocab_text = format!(
        "# artifact=vocab version={} seed={}\n",
        ARTIFACT_VERSION, config.seed
    );
    for surface in vocab.word_surfaces() {
        vocab_text.push_str(surface);
        vocab_text.push('\n');
    }
    write_atomic(&config.out.join(VOCAB), vocab_text.as_bytes()).map_err(fail(stage))?;
    trie.save(&config.out.join(TRIE), config.seed).map_err(fail(stage))?;
    Ok(vec![
        ("titles", titles.len() as u64),
        ("vocab", vocab.size() as u64),
        ("nodes", trie.node_count() as u64),
    ])
}

fn stage_build_index(config: &PipelineConfig) -> Result<Vec<(&'static str, u64)>, PipelineError> {
    let stage = Stage::BuildIndex;
    let store = load_store(&config.out, stage)?;
    let titles: Vec<&str> = store.titles().collect();
    if titles.is_empty() {
        return Err(fail(stage)("chunk store is empty; nothing to index"));
    }
    let title_index = InvertedIndex::over_titles(&titles, config.bm25).map_err(fail(stage))?;
    let mut docs: Vec<(DocKey, String)> = Vec::new();
    for title in &titles {
        for chunk in store.get(title).unwrap_or(&[]) {
            docs.push((
                DocKey::chunk(&chunk.title, chunk.chunk_index),
                chunk.text.clone(),
            ));
        }
    }
    let chunk_index = InvertedIndex::build(&docs, config.bm25).map_err(fail(stage))?;
    title_index
        .save(&config.out.join(TITLE_INDEX), config.seed)
        .map_err(fail(stage))?;
    chunk_index
        .save(&config.out.join(CHUNK_INDEX), config.seed)
        .map_err(fail(stage))?;
    Ok(vec![
        ("titles", titles.len() as u64),
        ("chunks", docs.len() as u64),
    ])
}

fn stage_pretrain(config: &PipelineConfig) -> Result<Vec<(&'static str, u64)>, PipelineError> {
    let stage = Stage::Pretrain;
    let model = load_model(&config.out, stage)?;
    let queries = load_query_file(&config.train_queries, config, stage)?;
    let shape = PolicyShape {
        vocab_size: model.vocab.size(),
        embed_dim: config.embed_dim,
        hidden_dim: config.hidden_dim,
        prefix_window: config.prefix_window,
    };
    let init: Params = PolicyParams::seeded(shape, config.seed);
    let (params, trace, examples, skipped) = run_supervised(
        &init,
        &model,
        &queries,
        config.pretrain_epochs,
        config.pretrain_learning_rate,
        config,
    )
    .map_err(fail(stage))?;
    params
        .save(&config.out.join(PARAMS_PRETRAIN), config.seed)
        .map_err(fail(stage))?;
    write_csv(&config.out.join(TRACE_PRETRAIN), config.seed, "epoch,loss", &trace)
        .map_err(fail(stage))?;
    Ok(vec![
        ("examples", examples),
        ("skipped", skipped),
        ("epochs", config.pretrain_epochs as u64),
    ])
}

fn stage_fewshot(config: &PipelineConfig) -> Result<Vec<(&'static str, u64)>, PipelineError> {
    let stage = Stage::FewShot;
    let model = load_model(&config.out, stage)?;
    let start = load_params(&config.out, PARAMS_RLZERO, stage)?;
    let queries = load_query_file(fewshot_path(config), config, stage)?;
    let (params, trace, examples, skipped) = run_supervised(
        &start,
        &model,
        &queries,
        config.fewshot_epochs,
        config.fewshot_learning_rate,
        config,
    )
    .map_err(fail(stage))?;
    params
        .save(&config.out.join(PARAMS_FEWSHOT), config.seed)
        .map_err(fail(stage))?;
    write_csv(&config.out.join(TRACE_FEWSHOT), config.seed, "epoch,loss", &trace)
        .map_err(fail(stage))?;
    Ok(vec![
        ("examples", examples),
        ("skipped", skipped),
        ("epochs", config.fewshot_epochs as u64),
    ])
}

fn stage_make_rerank_data(
    config: &PipelineConfig,
) -> Result<Vec<(&'static str, u64)>, PipelineError> {
    let stage = Stage::MakeRerankData;
    let out = &config.out;
    let model = load_model(out, stage)?;
    let store = load_store(out, stage)?;
    let chunk_index = InvertedIndex::load(&out.join(CHUNK_INDEX)).map_err(fail(stage))?;
    let params_zero = load_params(out, PARAMS_PRETRAIN, stage)?;
    let params_few = load_params(out, PARAMS_RLFEW, stage)?;
    let queries = load_query_file(&config.train_queries, config, stage)?;

    let mut examples: Vec<RerankTitleExample> = Vec::new();
    let mut pairs: Vec<ContextPair> = Vec::new();
    // Joint indicator counts: x = top input title is gold, y = any
    // retrieved context comes from a gold page.
    let mut joint = [[0u64; 2]; 2];
    let mut positives = 0u64;
    let mut negatives = 0u64;
    let mut skipped_pair_queries = 0u64;

    for (i, query) in queries.iter().enumerate() {
        let zero = decode_top_titles(&params_zero, &model, config, query, config.rerank_titles_in)
            .map_err(fail(stage))?;
        let few = decode_top_titles(&params_few, &model, config, query, config.rerank_titles_in)
            .map_err(fail(stage))?;
        let (titles, mix) =
            perturb_training_titles(&zero, &few, i, config.seed).map_err(fail(stage))?;
        let chunks =
            retrieve_query_chunks(&store, &chunk_index, &query.input, config.rerank_contexts_in);
        let context_texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
        examples.push(RerankTitleExample {
            input: build_title_rerank_input(&query.input, &titles, &context_texts),
            target: rerank_target(&titles, &query.gold_titles),
            mix,
        });

        let gold: BTreeSet<&str> = query.gold_titles.iter().map(String::as_str).collect();
        let x = usize::from(titles.first().is_some_and(|t| gold.contains(t.as_str())));
        let y = usize::from(chunks.iter().any(|c| gold.contains(c.title.as_str())));
        joint[x][y] += 1;

        let gold_keys = gold_chunk_keys(query, &store);
        if gold_keys.is_empty() {
            skipped_pair_queries += 1;
            continue;
        }
        for title in &query.gold_titles {
            for chunk in store.get(title).unwrap_or(&[]) {
                if gold_keys.contains(&DocKey::chunk(&chunk.title, chunk.chunk_index)) {
                    pairs.push(ContextPair {
                        text: build_context_pair_input(&query.input, &chunk.text, config.task_kind),
                        label: 1,
                    });
                    positives += 1;
                }
            }
        }
        let mined = mine_hard_negatives(
            &chunk_index,
            &query.input,
            &query.gold_titles,
            &few,
            &gold_keys,
            config.hard_negative_k,
        );
        for key in mined.labeled_pool.iter().chain(&mined.unlabeled_pool) {
            let Some(chunk) = chunk_for_key(&store, key) else {
                continue;
            };
            pairs.push(ContextPair {
                text: build_context_pair_input(&query.input, &chunk.text, config.task_kind),
                label: 0,
            });
            negatives += 1;
        }
    }

    let total: u64 = joint.iter().flatten().sum();
    let mi_nats = if total == 0 {
        0.0
    } else {
        let n = total as f64;
        let rows: Vec<Vec<f64>> = joint
            .iter()
            .map(|row| row.iter().map(|&c| c as f64 / n).collect())
            .collect();
        mutual_information(&JointDistribution::new(rows).map_err(fail(stage))?)
    };

    write_jsonl(
        &out.join(RERANK_DATA),
        "rerank_data",
        config.seed,
        &[("mi_nats", mi_nats.into())],
        &examples,
    )
    .map_err(fail(stage))?;
    write_jsonl(
        &out.join(CONTEXT_PAIRS),
        "context_pairs",
        config.seed,
        &[
            ("positives", positives.into()),
            ("negatives", negatives.into()),
        ],
        &pairs,
    )
    .map_err(fail(stage))?;
    Ok(vec![
        ("examples", examples.len() as u64),
        ("pairs", pairs.len() as u64),
        ("skipped_pair_queries", skipped_pair_queries),
        ("mi_micronats", (mi_nats * 1_000_000.0).round() as u64),
    ])
}

fn stage_rerank_titles(config: &PipelineConfig) -> Result<Vec<(&'static str, u64)>, PipelineError> {
    let stage = Stage::RerankTitles;
    let out = &config.out;
    let model = load_model(out, stage)?;
    let store = load_store(out, stage)?;
    let chunk_index = InvertedIndex::load(&out.join(CHUNK_INDEX)).map_err(fail(stage))?;
    let params = load_params(out, PARAMS_RLFEW, stage)?;
    let queries = load_query_file(&config.eval_queries, config, stage)?;
    let scorer = Bm25RelevanceScorer {
        task: config.task_kind,
        params: config.bm25,
    };

    let mut rows: Vec<TitlesRow> = Vec::new();
    for query in &queries {
        let decoded = decode_top_titles(&params, &model, config, query, config.rerank_titles_in)
            .map_err(fail(stage))?;
        let chunks =
            retrieve_query_chunks(&store, &chunk_index, &query.input, config.rerank_contexts_in);
        // The rerank signal is the query enriched with retrieved context
        // text; each candidate is its title plus that page's first chunk.
        let mut signal = query.input.clone();
        for chunk in &chunks {
            signal.push(' ');
            signal.push_str(&chunk.text);
        }
        let docs: Vec<String> = decoded
            .iter()
            .map(|t| match store.get(t).and_then(|c| c.first()) {
                Some(chunk) => format!("{t} {}", chunk.text),
                None => t.clone(),
            })
            .collect();
        let (order, _) = rerank_contexts(&scorer, &signal, &docs, config.k_titles);
        let titles: Vec<String> = order.iter().map(|&i| decoded[i].clone()).collect();
        rows.push(TitlesRow {
            id: query.id.clone(),
            decoded,
            titles,
        });
    }
    write_jsonl(
        &out.join(RERANKED_TITLES),
        "reranked_titles",
        config.seed,
        &[],
        &rows,
    )
    .map_err(fail(stage))?;
    Ok(vec![("queries", rows.len() as u64)])
}

fn stage_retrieve_contexts(
    config: &PipelineConfig,
) -> Result<Vec<(&'static str, u64)>, PipelineError> {
    let stage = Stage::RetrieveContexts;
    let out = &config.out;
    let store = load_store(out, stage)?;
    let title_index = InvertedIndex::load(&out.join(TITLE_INDEX)).map_err(fail(stage))?;
    let titles_rows: Vec<TitlesRow> =
        read_jsonl(&out.join(RERANKED_TITLES), "reranked_titles").map_err(fail(stage))?;

    let mut context_rows: Vec<ContextRow> = Vec::new();
    let mut warning_rows: Vec<WarningRow> = Vec::new();
    for row in &titles_rows {
        let (found, warnings) = retrieve_contexts_for_titles(&row.titles, &store, &title_index);
        for (title, chunk) in found {
            context_rows.push(ContextRow {
                id: row.id.clone(),
                title,
                chunk_index: chunk.chunk_index,
                text: chunk.text,
            });
        }
        for warning in warnings {
            warning_rows.push(WarningRow {
                id: row.id.clone(),
                warning,
            });
        }
    }
    write_jsonl(&out.join(CONTEXTS), "contexts", config.seed, &[], &context_rows)
        .map_err(fail(stage))?;
    write_jsonl(
        &out.join(CONTEXT_WARNINGS),
        "context_warnings",
        config.seed,
        &[],
        &warning_rows,
    )
    .map_err(fail(stage))?;
    Ok(vec![
        ("contexts", context_rows.len() as u64),
        ("warnings", warning_rows.len() as u64),
    ])
}

fn stage_rerank_contexts(
    config: &PipelineConfig,
) -> Result<Vec<(&'static str, u64)>, PipelineError> {
    let stage = Stage::RerankContexts;
    let out = &config.out;
    let store = load_store(out, stage)?;
    let queries = load_query_file(&config.eval_queries, config, stage)?;
    let context_rows: Vec<ContextRow> =
        read_jsonl(&out.join(CONTEXTS), "contexts").map_err(fail(stage))?;
    let mut by_id: BTreeMap<&str, Vec<&ContextRow>> = BTreeMap::new();
    for row in &context_rows {
        by_id.entry(&row.id).or_default().push(row);
    }
    let scorer = Bm25RelevanceScorer {
        task: config.task_kind,
        params: config.bm25,
    };

    let mut rows: Vec<RankedContextsRow> = Vec::new();
    let mut confusion = ConfusionCounts::default();
    let mut dropped = 0u64;
    for query in &queries {
        let candidates = by_id.get(query.id.as_str()).cloned().unwrap_or_default();
        let texts: Vec<&str> = candidates.iter().map(|c| c.text.as_str()).collect();
        let (order, warnings) = rerank_contexts(&scorer, &query.input, &texts, config.k_contexts);
        dropped += warnings.len() as u64;
        let selected: BTreeSet<usize> = order.iter().copied().collect();
        let gold_keys = gold_chunk_keys(query, &store);
        for (i, candidate) in candidates.iter().enumerate() {
            let is_gold =
                gold_keys.contains(&DocKey::chunk(&candidate.title, candidate.chunk_index));
            confusion.observe(selected.contains(&i), is_gold);
        }
        rows.push(RankedContextsRow {
            id: query.id.clone(),
            contexts: order
                .iter()
                .map(|&i| ContextRef {
                    title: candidates[i].title.clone(),
                    chunk_index: candidates[i].chunk_index,
                    text: candidates[i].text.clone(),
                })
                .collect(),
        });
    }
    let quality = classifier_metrics(&confusion);
    write_jsonl(
        &out.join(RERANKED_CONTEXTS),
        "reranked_contexts",
        config.seed,
        &[
            ("confusion", serde_json::to_value(confusion).map_err(fail(stage))?),
            ("classifier", serde_json::to_value(quality).map_err(fail(stage))?),
        ],
        &rows,
    )
    .map_err(fail(stage))?;
    Ok(vec![
        ("queries", rows.len() as u64),
        ("selected", rows.iter().map(|r| r.contexts.len() as u64).sum()),
        ("dropped", dropped),
    ])
}

fn stage_reader_inputs(config: &PipelineConfig) -> Result<Vec<(&'static str, u64)>, PipelineError> {
    let stage = Stage::BuildReaderInputs;
    let out = &config.out;
    let queries = load_query_file(&config.eval_queries, config, stage)?;
    let ranked: Vec<RankedContextsRow> =
        read_jsonl(&out.join(RERANKED_CONTEXTS), "reranked_contexts").map_err(fail(stage))?;
    let by_id: BTreeMap<&str, &RankedContextsRow> =
        ranked.iter().map(|r| (r.id.as_str(), r)).collect();

    let mut rows: Vec<ReaderInputsRow> = Vec::new();
    let mut inputs_total = 0u64;
    for query in &queries {
        let contexts = by_id
            .get(query.id.as_str())
            .map(|r| r.contexts.as_slice())
            .unwrap_or(&[]);
        let inputs: Vec<String> = contexts
            .iter()
            .map(|c| build_reader_input(&query.input, &c.title, &c.text, config.task_kind))
            .collect();
        inputs_total += inputs.len() as u64;
        rows.push(ReaderInputsRow {
            id: query.id.clone(),
            inputs,
        });
    }
    write_jsonl(&out.join(READER_INPUTS), "reader_inputs", config.seed, &[], &rows)
        .map_err(fail(stage))?;
    Ok(vec![
        ("queries", rows.len() as u64),
        ("inputs", inputs_total),
    ])
}

fn stage_evaluate(config: &PipelineConfig) -> Result<Vec<(&'static str, u64)>, PipelineError> {
    let stage = Stage::Evaluate;
    let out = &config.out;
    let queries = load_query_file(&config.eval_queries, config, stage)?;
    let titles_rows: Vec<TitlesRow> =
        read_jsonl(&out.join(RERANKED_TITLES), "reranked_titles").map_err(fail(stage))?;
    let ranked: Vec<RankedContextsRow> =
        read_jsonl(&out.join(RERANKED_CONTEXTS), "reranked_contexts").map_err(fail(stage))?;
    let titles_by_id: BTreeMap<&str, &TitlesRow> =
        titles_rows.iter().map(|r| (r.id.as_str(), r)).collect();
    let contexts_by_id: BTreeMap<&str, &RankedContextsRow> =
        ranked.iter().map(|r| (r.id.as_str(), r)).collect();

    let mut evals: Vec<QueryEval> = Vec::new();
    let mut skipped = 0u64;
    for query in &queries {
        if query.gold_titles.is_empty() {
            skipped += 1;
            continue;
        }
        let row = titles_by_id.get(query.id.as_str()).ok_or_else(|| {
            fail(stage)(format!("query {} missing from {RERANKED_TITLES}", query.id))
        })?;
        let rp = r_precision(&row.titles, &query.gold_titles).map_err(fail(stage))?;
        let recall =
            recall_at_k(&row.titles, &query.gold_titles, config.k_titles).map_err(fail(stage))?;
        // Extractive stand-in for the pluggable reader: the top reranked
        // context is scored as the answer draft.
        let draft = contexts_by_id
            .get(query.id.as_str())
            .and_then(|r| r.contexts.first())
            .map(|c| c.text.as_str())
            .unwrap_or("");
        evals.push(QueryEval::new(
            query.id.clone(),
            rp,
            recall,
            exact_match(draft, &query.gold_answers),
            token_f1(draft, &query.gold_answers),
            rouge_l(draft, &query.gold_answers),
        ));
    }
    let evaluated = evals.len() as u64;
    let report = EvalReport::new(config.seed, config.k_titles, evals);
    write_atomic(&out.join(REPORT_JSON), report.to_json().as_bytes()).map_err(fail(stage))?;
    let table = format!("# seed={}\n{}", config.seed, report.to_table());
    write_atomic(&out.join(REPORT_TXT), table.as_bytes()).map_err(fail(stage))?;
    let mean_rp_ppm = report
        .aggregates
        .as_ref()
        .map(|a| (a.r_precision * 1_000_000.0).round() as u64)
        .unwrap_or(0);
    Ok(vec![
        ("evaluated", evaluated),
        ("skipped", skipped),
        ("mean_rp_ppm", mean_rp_ppm),
    ])
}

/// Standalone decode: runs the constrained search over the evaluation
/// queries with the parameters trained by `source` and writes the full
/// beam dump. Not part of the stage graph; the graph's rerank stage does
/// its own decoding.
pub fn run_decode(config: &PipelineConfig, source: Stage) -> Result<StageSummary, PipelineError> {
    let stage = source;
    let Some(params_name) = source.params_artifact() else {
        return Err(PipelineError::Validation(format!(
            "stage {source} trains no parameters; decode from one of: pretrain, reinforce-zero, few-shot, reinforce-few"
        )));
    };
    config
        .validate()
        .map_err(|e| PipelineError::Validation(e.to_string()))?;
    std::fs::create_dir_all(&config.out).map_err(fail(stage))?;
    for (name, producer) in [(VOCAB, Stage::BuildTrie), (TRIE, Stage::BuildTrie)] {
        if !config.out.join(name).exists() {
            return Err(PipelineError::Dependency {
                stage: "decode",
                missing: name.to_string(),
                producer: producer.name(),
            });
        }
    }
    if !config.out.join(params_name).exists() {
        return Err(PipelineError::Dependency {
            stage: "decode",
            missing: params_name.to_string(),
            producer: source.name(),
        });
    }
    let started = Instant::now();
    let model = load_model(&config.out, stage)?;
    let params = load_params(&config.out, params_name, stage)?;
    let queries = load_query_file(&config.eval_queries, config, stage)?;
    let mut rows: Vec<DecodeRow> = Vec::new();
    for query in &queries {
        let ids = encode_query(&model.vocab, &query.input);
        let hyps = constrained_beam_search(&params, &ids, &model.trie, &config.decode)
            .map_err(|e| fail(stage)(format!("query {}: {e}", query.id)))?;
        rows.push(DecodeRow {
            id: query.id.clone(),
            titles: select_top_titles(&hyps, config.k_titles),
            beams: hyps
                .iter()
                .map(|h| DecodeBeam {
                    titles: h.titles.clone(),
                    logprob: h.log_prob,
                })
                .collect(),
        });
    }
    write_jsonl(&config.out.join(DECODED), "decoded", config.seed, &[], &rows)
        .map_err(fail(stage))?;
    Ok(StageSummary {
        stage: source,
        counts: vec![("queries", rows.len() as u64)],
        outputs: vec![DECODED],
        seconds: started.elapsed().as_secs_f64(),
    })
}
