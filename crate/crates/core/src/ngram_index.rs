//! Dictionary of atomic units: every n-gram seen strictly more than
//! `min_count` times in a training corpus, stored in a prefix tree.
//!
//! Counting is level-wise with Apriori pruning. An n-gram is only counted
//! when both its (n-1)-prefix and its (n-1)-suffix are already frequent,
//! so the tree never holds a node whose ancestors fell below threshold.

use std::collections::HashMap;
use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAGIC: &[u8; 5] = b"NGIX1";
pub const DEFAULT_MIN_COUNT: u64 = 3;
pub const DEFAULT_MAX_N: usize = 8;

const NONE: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("not an n-gram index (bad magic bytes)")]
    BadMagic,
    #[error("corrupt index: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Node {
    count: u64,
    /// (token id, node index), sorted by token id.
    children: Vec<(u32, u32)>,
}

impl Node {
    fn child(&self, token: u32) -> Option<u32> {
        self.children
            .binary_search_by_key(&token, |&(t, _)| t)
            .ok()
            .map(|i| self.children[i].1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NGramDictionary {
    /// Frequent unigrams in lexicographic order; the index is the token id.
    tokens: Vec<String>,
    token_ids: HashMap<String, u32>,
    nodes: Vec<Node>,
    min_count: u64,
    max_n: Option<usize>,
    entries: usize,
}

impl NGramDictionary {
    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    pub fn max_n(&self) -> Option<usize> {
        self.max_n
    }

    /// Number of distinct unigram entries.
    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    /// Total number of stored n-grams of every length.
    pub fn len(&self) -> usize {
        self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries == 0
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.token_ids.get(token).copied()
    }

    /// Map a sentence onto dictionary ids; tokens that are not frequent
    /// unigrams become `None` and can never start or continue a match.
    pub fn encode<S: AsRef<str>>(&self, sentence: &[S]) -> Vec<Option<u32>> {
        sentence.iter().map(|t| self.token_id(t.as_ref())).collect()
    }

    fn lookup<S: AsRef<str>>(&self, span: &[S]) -> Option<&Node> {
        if span.is_empty() || self.max_n.is_some_and(|m| span.len() > m) {
            return None;
        }
        let mut node = &self.nodes[0];
        for tok in span {
            let id = self.token_id(tok.as_ref())?;
            node = &self.nodes[node.child(id)? as usize];
        }
        Some(node)
    }

    pub fn contains<S: AsRef<str>>(&self, span: &[S]) -> bool {
        self.lookup(span).is_some()
    }

    /// Corpus count of a stored n-gram; `None` when not stored.
    pub fn count<S: AsRef<str>>(&self, span: &[S]) -> Option<u64> {
        self.lookup(span).map(|n| n.count)
    }

    /// Ascending lengths `L` such that `sentence[start..start + L]` is stored.
    pub fn match_lengths_from<S: AsRef<str>>(&self, sentence: &[S], start: usize) -> Vec<usize> {
        let ids = self.encode(&sentence[start..]);
        self.match_lengths_encoded(&ids, 0)
    }

    /// Same as [`match_lengths_from`](Self::match_lengths_from) over an
    /// already encoded sentence; one walk down the tree.
    pub fn match_lengths_encoded(&self, sentence: &[Option<u32>], start: usize) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_match(sentence, start, |len| out.push(len));
        out
    }

    pub(crate) fn for_each_match(
        &self,
        sentence: &[Option<u32>],
        start: usize,
        mut f: impl FnMut(usize),
    ) {
        let mut node = &self.nodes[0];
        for (offset, tok) in sentence[start..].iter().enumerate() {
            let Some(id) = tok else { break };
            let Some(next) = node.child(*id) else { break };
            node = &self.nodes[next as usize];
            f(offset + 1);
        }
    }

    /// All stored n-grams with counts, in preorder (lexicographic).
    pub fn entries(&self) -> Vec<(Vec<&str>, u64)> {
        let mut out = Vec::with_capacity(self.entries);
        let mut path = Vec::new();
        self.collect(0, &mut path, &mut out);
        out
    }

    fn collect<'a>(&'a self, node: u32, path: &mut Vec<&'a str>, out: &mut Vec<(Vec<&'a str>, u64)>) {
        for &(tok, child) in &self.nodes[node as usize].children {
            path.push(&self.tokens[tok as usize]);
            out.push((path.clone(), self.nodes[child as usize].count));
            self.collect(child, path, out);
            path.pop();
        }
    }

    /// Serialized layout (little-endian):
    /// `NGIX1 | min_count u64 | max_n u64 (u64::MAX = unbounded) | n_tokens u32 |
    /// (len u32, utf8 bytes)* | preorder nodes: (count u64, n_children u32, (token u32, node)*)`.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.min_count.to_le_bytes())?;
        w.write_all(&self.max_n.map_or(u64::MAX, |m| m as u64).to_le_bytes())?;
        w.write_all(&(self.tokens.len() as u32).to_le_bytes())?;
        for tok in &self.tokens {
            w.write_all(&(tok.len() as u32).to_le_bytes())?;
            w.write_all(tok.as_bytes())?;
        }
        self.write_node(0, &mut w)
    }

    fn write_node<W: Write>(&self, idx: u32, w: &mut W) -> io::Result<()> {
        let node = &self.nodes[idx as usize];
        w.write_all(&node.count.to_le_bytes())?;
        w.write_all(&(node.children.len() as u32).to_le_bytes())?;
        for &(tok, child) in &node.children {
            w.write_all(&tok.to_le_bytes())?;
            self.write_node(child, w)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, IndexError> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(IndexError::BadMagic);
        }
        let min_count = read_u64(&mut r)?;
        let max_n = match read_u64(&mut r)? {
            u64::MAX => None,
            n => Some(n as usize),
        };
        let n_tokens = read_u32(&mut r)? as usize;
        let mut tokens = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            let len = read_u32(&mut r)? as usize;
            let mut bytes = vec![0u8; len];
            r.read_exact(&mut bytes)?;
            let tok = String::from_utf8(bytes).map_err(|_| IndexError::Corrupt("token is not utf-8".into()))?;
            tokens.push(tok);
        }
        let mut nodes = Vec::new();
        read_node(&mut r, &mut nodes, n_tokens, 0)?;
        let token_ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect::<HashMap<_, _>>();
        if token_ids.len() != tokens.len() {
            return Err(IndexError::Corrupt("duplicate token".into()));
        }
        let entries = nodes.len() - 1;
        Ok(NGramDictionary {
            tokens,
            token_ids,
            nodes,
            min_count,
            max_n,
            entries,
        })
    }
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_node<R: Read>(r: &mut R, nodes: &mut Vec<Node>, n_tokens: usize, depth: usize) -> Result<u32, IndexError> {
    // depth is bounded by max_n in practice; guard against hostile input
    if depth > 1 << 16 {
        return Err(IndexError::Corrupt("tree too deep".into()));
    }
    let idx = nodes.len() as u32;
    let count = read_u64(r)?;
    let n_children = read_u32(r)? as usize;
    nodes.push(Node {
        count,
        children: Vec::with_capacity(n_children.min(1 << 16)),
    });
    let mut prev: Option<u32> = None;
    for _ in 0..n_children {
        let tok = read_u32(r)?;
        if tok as usize >= n_tokens || prev.is_some_and(|p| p >= tok) {
            return Err(IndexError::Corrupt("child tokens out of range or unsorted".into()));
        }
        prev = Some(tok);
        let child = read_node(r, nodes, n_tokens, depth + 1)?;
        nodes[idx as usize].children.push((tok, child));
    }
    Ok(idx)
}

/// Build the dictionary from one side of a training corpus.
///
/// `contains(g)` holds iff `g` occurs more than `min_count` times (all
/// overlapping occurrences, never across sentence boundaries) and
/// `len(g) <= max_n` when capped.
pub fn build_ngram_dictionary<S: AsRef<str>, T: AsRef<[S]>>(
    corpus_side: &[T],
    min_count: u64,
    max_n: Option<usize>,
) -> NGramDictionary {
    // Intern every token by first appearance, count unigrams.
    let mut interner: HashMap<&str, u32> = HashMap::new();
    let mut raw_tokens: Vec<&str> = Vec::new();
    let mut raw_counts: Vec<u64> = Vec::new();
    let raw: Vec<Vec<u32>> = corpus_side
        .iter()
        .map(|sent| {
            sent.as_ref()
                .iter()
                .map(|t| {
                    let t = t.as_ref();
                    let id = *interner.entry(t).or_insert_with(|| {
                        raw_tokens.push(t);
                        raw_counts.push(0);
                        (raw_tokens.len() - 1) as u32
                    });
                    raw_counts[id as usize] += 1;
                    id
                })
                .collect()
        })
        .collect();

    let level_allowed = |n: usize| max_n.is_none_or(|m| n <= m);
    if !level_allowed(1) {
        return NGramDictionary {
            tokens: Vec::new(),
            token_ids: HashMap::new(),
            nodes: vec![Node::default()],
            min_count,
            max_n,
            entries: 0,
        };
    }

    // Frequent unigrams get final ids in lexicographic order.
    let mut frequent: Vec<(&str, u32)> = raw_tokens
        .iter()
        .enumerate()
        .filter(|&(i, _)| raw_counts[i] > min_count)
        .map(|(i, t)| (*t, i as u32))
        .collect();
    frequent.sort_unstable();
    let tokens: Vec<String> = frequent.iter().map(|(t, _)| t.to_string()).collect();
    let mut remap = vec![NONE; raw_tokens.len()];
    for (final_id, &(_, raw_id)) in frequent.iter().enumerate() {
        remap[raw_id as usize] = final_id as u32;
    }
    let mut nodes = vec![Node::default()];
    for (final_id, &(_, raw_id)) in frequent.iter().enumerate() {
        nodes.push(Node {
            count: raw_counts[raw_id as usize],
            children: Vec::new(),
        });
        nodes[0].children.push((final_id as u32, (final_id + 1) as u32));
    }
    let sentences: Vec<Vec<u32>> = raw
        .iter()
        .map(|s| s.iter().map(|&t| remap[t as usize]).collect())
        .collect();
    // frontier[s][i]: node of the frequent (n-1)-gram starting at i.
    let mut frontier: Vec<Vec<u32>> = sentences
        .iter()
        .map(|s| s.iter().map(|&t| if t == NONE { NONE } else { t + 1 }).collect())
        .collect();

    let mut n = 2;
    while level_allowed(n) {
        let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (sent, front) in sentences.iter().zip(&frontier) {
            if sent.len() < n {
                continue;
            }
            for i in 0..=sent.len() - n {
                let (prefix, suffix) = (front[i], front[i + 1]);
                if prefix != NONE && suffix != NONE {
                    *counts.entry((prefix, sent[i + n - 1])).or_insert(0) += 1;
                }
            }
        }
        let mut grown: Vec<((u32, u32), u64)> =
            counts.into_iter().filter(|&(_, c)| c > min_count).collect();
        if grown.is_empty() {
            break;
        }
        grown.sort_unstable();
        let mut new_nodes: HashMap<(u32, u32), u32> = HashMap::with_capacity(grown.len());
        for ((parent, tok), count) in grown {
            let idx = nodes.len() as u32;
            nodes.push(Node {
                count,
                children: Vec::new(),
            });
            nodes[parent as usize].children.push((tok, idx));
            new_nodes.insert((parent, tok), idx);
        }
        for (sent, front) in sentences.iter().zip(frontier.iter_mut()) {
            if sent.len() < n {
                front.clear();
                continue;
            }
            let next: Vec<u32> = (0..=sent.len() - n)
                .map(|i| {
                    if front[i] == NONE || front[i + 1] == NONE {
                        NONE
                    } else {
                        new_nodes.get(&(front[i], sent[i + n - 1])).copied().unwrap_or(NONE)
                    }
                })
                .collect();
            *front = next;
        }
        n += 1;
    }
    for node in &mut nodes {
        node.children.sort_unstable();
    }
    let nodes = preorder(nodes);
    let token_ids = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();
    let entries = nodes.len() - 1;
    NGramDictionary {
        tokens,
        token_ids,
        nodes,
        min_count,
        max_n,
        entries,
    }
}

/// Renumbers nodes in preorder, the order they are serialized in.
fn preorder(nodes: Vec<Node>) -> Vec<Node> {
    let mut order = Vec::with_capacity(nodes.len());
    let mut stack = vec![0u32];
    while let Some(i) = stack.pop() {
        order.push(i);
        stack.extend(nodes[i as usize].children.iter().rev().map(|&(_, c)| c));
    }
    let mut new_id = vec![0u32; nodes.len()];
    for (new, &old) in order.iter().enumerate() {
        new_id[old as usize] = new as u32;
    }
    let mut slots: Vec<Option<Node>> = nodes.into_iter().map(Some).collect();
    order
        .iter()
        .map(|&old| {
            let mut node = slots[old as usize].take().expect("trie node visited twice");
            for (_, c) in &mut node.children {
                *c = new_id[*c as usize];
            }
            node
        })
        .collect()
}
