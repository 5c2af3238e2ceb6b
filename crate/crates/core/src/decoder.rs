//! Constrained beam search that decodes a list of page titles per beam.
//!
//! Decoding is a walk over a state machine: inside a title the legal next
//! actions are the trie children of the current node; once a node completes
//! a full title the walk may also emit [`SEP`] to start another title (if
//! the per-beam title budget allows) or [`EOS`] to finish. Illegal tokens
//! are never scored, so no hypothesis can ever contain a non-existent
//! title.
//!
//! Beams shrink as hypotheses finish: finished hypotheses leave the live
//! set and are not replaced. Ties are broken by token id, then by parent
//! beam index, which makes every run bit-reproducible.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{masked_log_softmax, PolicyError, PolicyParams};
use crate::rerank::RANK_PROMPT;
use crate::scalar::Scalar;
use crate::trie::{NodeId, TitleTrie};
use crate::vocab::{TokenId, Vocabulary, EOS, SEP};

const ROOT: NodeId = TitleTrie::ROOT;

/// Token ids the policy conditions on for a query: the ranking prompt is
/// prepended to the raw query text before tokenization.
pub fn encode_query(vocab: &Vocabulary, input: &str) -> Vec<TokenId> {
    vocab.tokenize(&format!("{RANK_PROMPT}{input}"))
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("cannot decode against an empty trie")]
    EmptyTrie,
    #[error("decode config must have positive {0}")]
    InvalidConfig(&'static str),
    #[error("no hypothesis finished within the token budget; live beams: {}", .live.join("; "))]
    Truncated { live: Vec<String> },
    #[error("non-finite hypothesis score")]
    NonFinite,
    #[error("teacher sequence needs at least one title")]
    NoTeacherTitles,
    #[error("title {title:?} cannot be decoded: {reason}")]
    UnreachableTitle { title: String, reason: String },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Beam-search limits. `max_total_tokens` bounds the whole action sequence
/// (title tokens plus separators plus the final end marker).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_titles_per_beam: usize,
    pub max_total_tokens: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 10,
            max_titles_per_beam: 5,
            max_total_tokens: 64,
        }
    }
}

impl DecodeConfig {
    fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_size == 0 {
            return Err(DecodeError::InvalidConfig("beam_size"));
        }
        if self.max_titles_per_beam == 0 {
            return Err(DecodeError::InvalidConfig("max_titles_per_beam"));
        }
        if self.max_total_tokens == 0 {
            return Err(DecodeError::InvalidConfig("max_total_tokens"));
        }
        Ok(())
    }
}

/// Where a hypothesis stands in the title state machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HypothesisState {
    /// Mid-title: the current prefix does not yet spell a complete title.
    InTitle,
    /// The prefix spells a complete title; SEP or EOS is available.
    AtBoundary,
    /// EOS taken; the hypothesis is done.
    Finished,
}

/// One decoded candidate: its title list plus the full action record needed
/// to recompute (and differentiate) its probability.
#[derive(Debug, Clone)]
pub struct Hypothesis<S> {
    pub titles: Vec<String>,
    /// Token ids of the in-progress title; empty once finished.
    pub prefix: Vec<TokenId>,
    pub log_prob: S,
    pub state: HypothesisState,
    /// Every action taken, including SEP and EOS.
    pub actions: Vec<TokenId>,
    /// The allowed set the policy was normalized over at each step.
    pub masks: Vec<Vec<TokenId>>,
    pub step_log_probs: Vec<S>,
}

/// Legal next actions at `node`: trie children, plus EOS (and SEP while
/// more titles fit) whenever the node completes a title. Ascending by
/// token id.
pub fn step_mask(
    trie: &TitleTrie,
    node: NodeId,
    emitted_titles: usize,
    max_titles_per_beam: usize,
) -> Vec<TokenId> {
    let children = trie.children(node);
    let mut mask = Vec::with_capacity(children.len() + 2);
    if trie.is_terminal(node) {
        mask.push(EOS);
        if emitted_titles + 1 < max_titles_per_beam {
            mask.push(SEP);
        }
    }
    mask.extend(children.iter().map(|&(token, _)| token));
    mask
}

struct Live<S> {
    hyp: Hypothesis<S>,
    node: NodeId,
}

impl<S: Scalar> Live<S> {
    fn describe(&self) -> String {
        format!(
            "titles=[{}], prefix={:?}, logprob={}",
            self.hyp.titles.join(" | "),
            self.hyp.prefix,
            self.hyp.log_prob
        )
    }
}

struct Candidate<S> {
    parent: usize,
    token: TokenId,
    step_log_prob: S,
    total: S,
}

/// Beam search over the constrained action space.
///
/// Returns up to `beam_size` finished hypotheses, best score first; equal
/// scores are ordered by action sequence. Deterministic given
/// `(params, query_ids, trie, config)`.
pub fn constrained_beam_search<S: Scalar>(
    params: &PolicyParams<S>,
    query_ids: &[TokenId],
    trie: &TitleTrie,
    config: &DecodeConfig,
) -> Result<Vec<Hypothesis<S>>, DecodeError> {
    config.validate()?;
    if trie.title_count() == 0 {
        return Err(DecodeError::EmptyTrie);
    }

    let mut live = vec![Live {
        hyp: Hypothesis {
            titles: Vec::new(),
            prefix: Vec::new(),
            log_prob: S::zero(),
            state: HypothesisState::InTitle,
            actions: Vec::new(),
            masks: Vec::new(),
            step_log_probs: Vec::new(),
        },
        node: ROOT,
    }];
    let mut finished: Vec<Hypothesis<S>> = Vec::new();

    while !live.is_empty() {
        let mut candidates: Vec<Candidate<S>> = Vec::new();
        let mut exhausted: Vec<String> = Vec::new();
        for (parent, entry) in live.iter().enumerate() {
            if entry.hyp.actions.len() >= config.max_total_tokens {
                exhausted.push(entry.describe());
                continue;
            }
            let mask = step_mask(
                trie,
                entry.node,
                entry.hyp.titles.len(),
                config.max_titles_per_beam,
            );
            let logits = params.score_next(query_ids, &entry.hyp.actions)?;
            let dist = masked_log_softmax(&logits, &mask)?;
            for (&token, &step_log_prob) in dist.allowed().iter().zip(dist.log_probs()) {
                let total = entry.hyp.log_prob + step_log_prob;
                if !total.is_finite() {
                    return Err(DecodeError::NonFinite);
                }
                candidates.push(Candidate {
                    parent,
                    token,
                    step_log_prob,
                    total,
                });
            }
        }

        if candidates.is_empty() {
            if finished.is_empty() {
                return Err(DecodeError::Truncated { live: exhausted });
            }
            break;
        }

        candidates.sort_by(|a, b| {
            b.total
                .partial_cmp(&a.total)
                .expect("scores checked finite")
                .then(a.token.cmp(&b.token))
                .then(a.parent.cmp(&b.parent))
        });
        candidates.truncate(config.beam_size);

        let mut next_live = Vec::with_capacity(candidates.len());
        for cand in candidates {
            let parent = &live[cand.parent];
            let mut hyp = parent.hyp.clone();
            let mask = step_mask(
                trie,
                parent.node,
                hyp.titles.len(),
                config.max_titles_per_beam,
            );
            hyp.actions.push(cand.token);
            hyp.masks.push(mask);
            hyp.step_log_probs.push(cand.step_log_prob);
            hyp.log_prob = cand.total;
            match cand.token {
                EOS | SEP => {
                    let title = trie
                        .title_at(parent.node)
                        .expect("completion offered only at terminal nodes");
                    hyp.titles.push(title.to_string());
                    hyp.prefix.clear();
                    if cand.token == EOS {
                        hyp.state = HypothesisState::Finished;
                        finished.push(hyp);
                    } else {
                        hyp.state = HypothesisState::InTitle;
                        next_live.push(Live { hyp, node: ROOT });
                    }
                }
                token => {
                    let node = trie
                        .step(parent.node, token)
                        .expect("mask tokens are trie children");
                    hyp.prefix.push(token);
                    hyp.state = if trie.is_terminal(node) {
                        HypothesisState::AtBoundary
                    } else {
                        HypothesisState::InTitle
                    };
                    next_live.push(Live { hyp, node });
                }
            }
        }
        live = next_live;
    }

    finished.sort_by(|a, b| {
        b.log_prob
            .partial_cmp(&a.log_prob)
            .expect("scores checked finite")
            .then(a.actions.cmp(&b.actions))
    });
    finished.truncate(config.beam_size);
    Ok(finished)
}

/// Flattens beam titles in (beam rank, position) order, keeps the first
/// occurrence of each title, and truncates to `k`.
pub fn select_top_titles<S>(hypotheses: &[Hypothesis<S>], k: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for hyp in hypotheses {
        for title in &hyp.titles {
            if out.len() == k {
                return out;
            }
            if !out.contains(title) {
                out.push(title.clone());
            }
        }
    }
    out
}

/// Forced action sequence (and per-step masks) that decodes exactly the
/// given titles, for supervised teacher forcing. Titles beyond
/// `max_titles_per_beam` are dropped.
pub fn teacher_actions(
    trie: &TitleTrie,
    vocab: &Vocabulary,
    titles: &[String],
    max_titles_per_beam: usize,
) -> Result<(Vec<TokenId>, Vec<Vec<TokenId>>), DecodeError> {
    let kept: Vec<&String> = titles.iter().take(max_titles_per_beam).collect();
    if kept.is_empty() {
        return Err(DecodeError::NoTeacherTitles);
    }
    let mut actions = Vec::new();
    let mut masks = Vec::new();
    let mut emitted = 0usize;
    for (pos, title) in kept.iter().enumerate() {
        let unreachable = |reason: String| DecodeError::UnreachableTitle {
            title: (*title).clone(),
            reason,
        };
        let tokens = vocab.tokenize(title);
        if tokens.is_empty() {
            return Err(unreachable("no tokens after normalization".into()));
        }
        let mut node = ROOT;
        for &token in &tokens {
            let mask = step_mask(trie, node, emitted, max_titles_per_beam);
            if !mask.contains(&token) {
                return Err(unreachable(format!("token {token} not reachable in trie")));
            }
            actions.push(token);
            masks.push(mask);
            node = trie.step(node, token).expect("mask token is a trie child");
        }
        if !trie.is_terminal(node) {
            return Err(unreachable("tokens stop short of a complete title".into()));
        }
        let mask = step_mask(trie, node, emitted, max_titles_per_beam);
        let closer = if pos + 1 < kept.len() { SEP } else { EOS };
        if !mask.contains(&closer) {
            return Err(unreachable("no boundary action available".into()));
        }
        actions.push(closer);
        masks.push(mask);
        emitted += 1;
    }
    Ok((actions, masks))
}
