//! Prefix trie over tokenized page titles.
//!
//! The trie is the guardrail of constrained decoding: a token is a legal
//! continuation only when some corpus title continues that way, so the
//! decoder can never assemble a title that does not exist. Terminal nodes
//! remember the original surface string of the first title that tokenized
//! to that path, which is what decoded output reports.

use std::path::Path;

use thiserror::Error;

use crate::snapshot::{SnapshotError, SnapshotReader, SnapshotWriter};
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Error)]
pub enum TrieError {
    #[error("cannot build a trie from zero titles")]
    Empty,
    #[error("title {0:?} tokenizes to nothing")]
    Untokenizable(String),
    #[error("prefix leaves the trie at position {position} (token {token})")]
    InvalidPrefix { position: usize, token: TokenId },
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Node {
    /// Children sorted by token id.
    children: Vec<(TokenId, u32)>,
    /// Surface-table index when a title ends here.
    title: Option<u32>,
}

impl Node {
    fn empty() -> Node {
        Node {
            children: Vec::new(),
            title: None,
        }
    }

    fn child(&self, token: TokenId) -> Option<u32> {
        self.children
            .binary_search_by_key(&token, |(t, _)| *t)
            .ok()
            .map(|i| self.children[i].1)
    }
}

/// Legal continuations at some prefix: the next tokens, plus whether the
/// prefix is itself a complete title. Completion is a virtual marker, not a
/// vocabulary token; the decoder maps it onto its separator/end actions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllowedNext {
    /// Next tokens in ascending id order.
    pub tokens: Vec<TokenId>,
    pub can_complete: bool,
}

/// Token-level prefix trie with surface strings at terminal nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TitleTrie {
    nodes: Vec<Node>,
    titles: Vec<String>,
}

/// Node handle. The root is [`TitleTrie::ROOT`].
pub type NodeId = u32;

/// Builds a trie over `titles`, tokenizing each with `vocab`.
///
/// Titles whose token sequences collide are collapsed into one terminal;
/// the first surface string wins. A title that tokenizes to zero tokens is
/// rejected, as is an empty title list.
pub fn build_title_trie(titles: &[String], vocab: &Vocabulary) -> Result<TitleTrie, TrieError> {
    if titles.is_empty() {
        return Err(TrieError::Empty);
    }
    let mut trie = TitleTrie {
        nodes: vec![Node::empty()],
        titles: Vec::new(),
    };
    for title in titles {
        let tokens = vocab.tokenize(title);
        if tokens.is_empty() {
            return Err(TrieError::Untokenizable(title.clone()));
        }
        let mut node = TitleTrie::ROOT;
        for &token in &tokens {
            node = match trie.nodes[node as usize].child(token) {
                Some(next) => next,
                None => {
                    let next = trie.nodes.len() as u32;
                    trie.nodes.push(Node::empty());
                    let children = &mut trie.nodes[node as usize].children;
                    let at = children
                        .binary_search_by_key(&token, |(t, _)| *t)
                        .unwrap_err();
                    children.insert(at, (token, next));
                    next
                }
            };
        }
        if trie.nodes[node as usize].title.is_none() {
            trie.nodes[node as usize].title = Some(trie.titles.len() as u32);
            trie.titles.push(title.clone());
        }
    }
    Ok(trie)
}

impl TitleTrie {
    pub const ROOT: NodeId = 0;

    /// Follows one token edge.
    pub fn step(&self, node: NodeId, token: TokenId) -> Option<NodeId> {
        self.nodes[node as usize].child(token)
    }

    /// Whether a title ends at this node.
    pub fn is_terminal(&self, node: NodeId) -> bool {
        self.nodes[node as usize].title.is_some()
    }

    /// Surface string of the title ending at this node, if any.
    pub fn title_at(&self, node: NodeId) -> Option<&str> {
        self.nodes[node as usize]
            .title
            .map(|i| self.titles[i as usize].as_str())
    }

    /// Child edges of a node, sorted by token id.
    pub fn children(&self, node: NodeId) -> &[(TokenId, NodeId)] {
        &self.nodes[node as usize].children
    }

    /// Walks `prefix` from the root, reporting where it falls off the trie.
    pub fn node_for_prefix(&self, prefix: &[TokenId]) -> Result<NodeId, TrieError> {
        let mut node = Self::ROOT;
        for (position, &token) in prefix.iter().enumerate() {
            node = self
                .step(node, token)
                .ok_or(TrieError::InvalidPrefix { position, token })?;
        }
        Ok(node)
    }

    /// Legal continuations after `prefix` (which may be empty).
    pub fn allowed_next(&self, prefix: &[TokenId]) -> Result<AllowedNext, TrieError> {
        let node = self.node_for_prefix(prefix)?;
        Ok(AllowedNext {
            tokens: self.children(node).iter().map(|(t, _)| *t).collect(),
            can_complete: self.is_terminal(node),
        })
    }

    /// Whether `tokens` is exactly an inserted title (not a strict prefix).
    pub fn contains_title(&self, tokens: &[TokenId]) -> bool {
        match self.node_for_prefix(tokens) {
            Ok(node) => !tokens.is_empty() && self.is_terminal(node),
            Err(_) => false,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of distinct terminals, i.e. titles after tokenization collapse.
    pub fn title_count(&self) -> usize {
        self.titles.len()
    }

    /// Stored surface strings, in insertion order.
    pub fn titles(&self) -> impl Iterator<Item = &str> {
        self.titles.iter().map(String::as_str)
    }

    const MAGIC: &'static [u8; 8] = b"TRVTRIE\0";
    const VERSION: u32 = 1;

    /// Writes the trie snapshot. `seed` is the run seed being recorded, not
    /// anything the trie itself depends on.
    pub fn save(&self, path: &Path, seed: u64) -> Result<(), TrieError> {
        let mut w = SnapshotWriter::new(Self::MAGIC, Self::VERSION, seed);
        w.put_u32(self.titles.len() as u32);
        for title in &self.titles {
            w.put_str(title);
        }
        w.put_u32(self.nodes.len() as u32);
        for node in &self.nodes {
            match node.title {
                Some(idx) => {
                    w.put_u8(1);
                    w.put_u32(idx);
                }
                None => w.put_u8(0),
            }
            w.put_u32(node.children.len() as u32);
            for &(token, child) in &node.children {
                w.put_u32(token);
                w.put_u32(child);
            }
        }
        w.write_to(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TitleTrie, TrieError> {
        let mut r = SnapshotReader::open(path, Self::MAGIC, Self::VERSION)?;
        let title_count = r.get_u32("title count")?;
        let mut titles = Vec::with_capacity(title_count as usize);
        for _ in 0..title_count {
            titles.push(r.get_str("title")?);
        }
        let node_count = r.get_u32("node count")?;
        let mut nodes = Vec::with_capacity(node_count as usize);
        for _ in 0..node_count {
            let title = match r.get_u8("terminal flag")? {
                0 => None,
                _ => {
                    let idx = r.get_u32("title index")?;
                    if idx >= title_count {
                        return Err(SnapshotError::Corrupt {
                            path: path.display().to_string(),
                            context: format!("title index {idx} out of range"),
                        }
                        .into());
                    }
                    Some(idx)
                }
            };
            let child_count = r.get_u32("child count")?;
            let mut children = Vec::with_capacity(child_count as usize);
            for _ in 0..child_count {
                let token = r.get_u32("child token")?;
                let child = r.get_u32("child node")?;
                if child >= node_count {
                    return Err(SnapshotError::Corrupt {
                        path: path.display().to_string(),
                        context: format!("child node {child} out of range"),
                    }
                    .into());
                }
                children.push((token, child));
            }
            nodes.push(Node { children, title });
        }
        r.finish()?;
        Ok(TitleTrie { nodes, titles })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn vocab_and_trie(titles: &[&str]) -> (Vocabulary, TitleTrie) {
        let mut b = Vocabulary::builder();
        for t in titles {
            b.add_text(t);
        }
        let vocab = b.finish();
        let owned: Vec<String> = titles.iter().map(|s| s.to_string()).collect();
        let trie = build_title_trie(&owned, &vocab).unwrap();
        (vocab, trie)
    }

    #[test]
    fn shared_prefixes_share_nodes() {
        let (vocab, trie) = vocab_and_trie(&["nile river", "nile delta", "congo"]);
        let root = trie.children(TitleTrie::ROOT);
        assert_eq!(root.len(), 2);
        let after_nile = trie
            .allowed_next(&[vocab.id_of("nile").unwrap()])
            .unwrap();
        assert_eq!(
            after_nile.tokens,
            vec![vocab.id_of("river").unwrap(), vocab.id_of("delta").unwrap()]
        );
        assert!(!after_nile.can_complete);
        // root + nile + river + delta + congo.
        assert_eq!(trie.node_count(), 5);
    }

    #[test]
    fn single_title_is_a_chain_to_a_terminal() {
        let (vocab, trie) = vocab_and_trie(&["nile"]);
        assert_eq!(trie.children(TitleTrie::ROOT).len(), 1);
        let node = trie.node_for_prefix(&[vocab.id_of("nile").unwrap()]).unwrap();
        assert!(trie.is_terminal(node));
        assert_eq!(trie.title_at(node), Some("nile"));
    }

    #[test]
    fn empty_title_list_is_an_error() {
        let vocab = Vocabulary::builder().finish();
        assert!(matches!(build_title_trie(&[], &vocab), Err(TrieError::Empty)));
    }

    #[test]
    fn untokenizable_title_is_an_error() {
        let mut b = Vocabulary::builder();
        b.add_text("x");
        let vocab = b.finish();
        let err = build_title_trie(&["--".to_string()], &vocab).unwrap_err();
        assert!(matches!(err, TrieError::Untokenizable(t) if t == "--"));
    }

    #[test]
    fn tokenization_collisions_keep_first_surface() {
        let (vocab, trie) = vocab_and_trie(&["Nile River", "nile, river"]);
        assert_eq!(trie.title_count(), 1);
        let tokens = vocab.tokenize("nile river");
        let node = trie.node_for_prefix(&tokens).unwrap();
        assert_eq!(trie.title_at(node), Some("Nile River"));
    }

    #[test]
    fn prefix_of_a_longer_title_can_complete_and_continue() {
        let (vocab, trie) = vocab_and_trie(&["nile", "nile river"]);
        let at_nile = trie.allowed_next(&[vocab.id_of("nile").unwrap()]).unwrap();
        assert!(at_nile.can_complete);
        assert_eq!(at_nile.tokens, vec![vocab.id_of("river").unwrap()]);
    }

    #[test]
    fn invalid_prefix_reports_position() {
        let (vocab, trie) = vocab_and_trie(&["nile river"]);
        let bogus = vec![vocab.id_of("river").unwrap()];
        match trie.allowed_next(&bogus) {
            Err(TrieError::InvalidPrefix { position, .. }) => assert_eq!(position, 0),
            other => panic!("expected invalid-prefix error, got {other:?}"),
        }
        let half_good = vec![vocab.id_of("nile").unwrap(), vocab.id_of("nile").unwrap()];
        match trie.allowed_next(&half_good) {
            Err(TrieError::InvalidPrefix { position, .. }) => assert_eq!(position, 1),
            other => panic!("expected invalid-prefix error, got {other:?}"),
        }
    }

    #[test]
    fn contains_title_rejects_strict_prefixes() {
        let (vocab, trie) = vocab_and_trie(&["nile river"]);
        assert!(trie.contains_title(&vocab.tokenize("nile river")));
        assert!(!trie.contains_title(&vocab.tokenize("nile")));
        assert!(!trie.contains_title(&[]));
    }

    #[test]
    fn terminal_walk_matches_title_count() {
        // Count terminals by exhaustive traversal and compare with the
        // number of distinct token sequences inserted.
        let words = ["a", "b", "c", "d", "e"];
        let mut titles = Vec::new();
        for i in 0..words.len() {
            for j in 0..words.len() {
                for k in 0..words.len() {
                    titles.push(format!("{} {} {}", words[i], words[j], words[k]));
                }
            }
        }
        // Duplicate a handful to force collisions.
        titles.push("a a a".to_string());
        titles.push("b c d".to_string());
        let mut b = Vocabulary::builder();
        for t in &titles {
            b.add_text(t);
        }
        let vocab = b.finish();
        let trie = build_title_trie(&titles, &vocab).unwrap();

        let distinct: HashSet<Vec<TokenId>> = titles.iter().map(|t| vocab.tokenize(t)).collect();
        let mut terminals = 0;
        let mut stack = vec![TitleTrie::ROOT];
        while let Some(node) = stack.pop() {
            if trie.is_terminal(node) {
                terminals += 1;
            }
            for &(_, child) in trie.children(node) {
                stack.push(child);
            }
        }
        assert_eq!(terminals, distinct.len());
        assert_eq!(trie.title_count(), distinct.len());
    }

    proptest! {
        // contains_title agrees with a hash-set oracle over the inserted
        // token sequences, for both inserted titles and random probes.
        #[test]
        fn contains_title_matches_set_oracle(
            titles in proptest::collection::vec(
                proptest::collection::vec(0usize..6, 1..4),
                1..20,
            ),
            probes in proptest::collection::vec(
                proptest::collection::vec(0usize..6, 0..5),
                0..30,
            ),
        ) {
            let pool = ["ax", "bx", "cx", "dx", "ex", "fx"];
            let as_title = |idxs: &Vec<usize>| {
                idxs.iter().map(|&i| pool[i]).collect::<Vec<_>>().join(" ")
            };
            let title_strings: Vec<String> = titles.iter().map(as_title).collect();
            let mut b = Vocabulary::builder();
            for w in pool {
                b.add_text(w);
            }
            let vocab = b.finish();
            let trie = build_title_trie(&title_strings, &vocab).unwrap();
            let oracle: HashSet<Vec<TokenId>> =
                title_strings.iter().map(|t| vocab.tokenize(t)).collect();

            for t in &title_strings {
                prop_assert!(trie.contains_title(&vocab.tokenize(t)));
            }
            for probe in &probes {
                let tokens = vocab.tokenize(&as_title(probe));
                prop_assert_eq!(trie.contains_title(&tokens), oracle.contains(&tokens));
            }
        }

        // Node count never exceeds one (root) plus total inserted tokens.
        #[test]
        fn node_count_is_bounded_by_total_tokens(
            titles in proptest::collection::vec(
                proptest::collection::vec(0usize..4, 1..5),
                1..15,
            ),
        ) {
            let pool = ["p", "q", "r", "s"];
            let title_strings: Vec<String> = titles
                .iter()
                .map(|idxs| idxs.iter().map(|&i| pool[i]).collect::<Vec<_>>().join(" "))
                .collect();
            let mut b = Vocabulary::builder();
            for w in pool {
                b.add_text(w);
            }
            let vocab = b.finish();
            let trie = build_title_trie(&title_strings, &vocab).unwrap();
            let total: usize = title_strings.iter().map(|t| vocab.tokenize(t).len()).sum();
            prop_assert!(trie.node_count() <= 1 + total);
        }
    }

    #[test]
    fn snapshot_round_trips_and_is_stable() {
        let (_, trie) = vocab_and_trie(&["nile river", "nile delta", "congo", "nile"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trie.bin");
        trie.save(&path, 42).unwrap();
        let loaded = TitleTrie::load(&path).unwrap();
        assert_eq!(loaded, trie);

        let again = dir.path().join("trie2.bin");
        loaded.save(&again, 42).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn corrupt_snapshot_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trie.bin");
        std::fs::write(&path, b"garbage").unwrap();
        assert!(TitleTrie::load(&path).is_err());
    }
}
