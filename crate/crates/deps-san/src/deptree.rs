//! Dependency trees ingested from a CoNLL-U subset, plus all-pairs tree
//! distances.
//!
//! Only the ID, FORM and HEAD columns of CoNLL-U are consumed. Distances are
//! counted on the undirected tree: the number of edges on the unique path
//! between two tokens, so directly linked tokens are at distance 1 and every
//! token is at distance 0 from itself.

use std::collections::VecDeque;
use std::fmt::Write as _;

use thiserror::Error;

/// One token of a parsed sentence.
///
/// `index` is the 1-based position in the sentence; `head` is 0 for the
/// syntactic root, otherwise the 1-based index of the head token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub index: usize,
    pub form: String,
    pub head: usize,
}

/// Validation failures for the head links of a sentence.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TreeError {
    #[error("empty sentence")]
    Empty,
    #[error("token ids must be contiguous from 1 (expected {expected}, found {found})")]
    NonContiguousIds { expected: usize, found: usize },
    #[error("no root token (head = 0)")]
    NoRoot,
    #[error("multiple root tokens (positions {first} and {second})")]
    MultipleRoots { first: usize, second: usize },
    #[error("token {index} has head {head}, outside 1..={len}")]
    HeadOutOfRange { index: usize, head: usize, len: usize },
    #[error("token {index} is its own head")]
    SelfHead { index: usize },
    #[error("cycle in head links through token {index}")]
    Cycle { index: usize },
}

/// Errors raised while ingesting CoNLL-U text.
///
/// Line numbers are 1-based over the whole input; sentence numbers are
/// 1-based over the sentence blocks.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConlluError {
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: multiword token range {id:?} is not supported")]
    MultiwordToken { line: usize, id: String },
    #[error("line {line}: empty node id {id:?} is not supported")]
    EmptyNode { line: usize, id: String },
    #[error("sentence {sentence}: invalid dependency tree: {source}")]
    InvalidTree {
        sentence: usize,
        #[source]
        source: TreeError,
    },
}

/// A dependency-parsed sentence with validated head links.
///
/// Invariants established at construction: token indices are 1..=I
/// contiguous, exactly one token has head 0, and the head links form a
/// single acyclic tree over all tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepTree {
    tokens: Vec<Token>,
}

impl DepTree {
    pub fn new(tokens: Vec<Token>) -> Result<Self, TreeError> {
        if tokens.is_empty() {
            return Err(TreeError::Empty);
        }
        let len = tokens.len();
        let mut root = None;
        for (pos, tok) in tokens.iter().enumerate() {
            if tok.index != pos + 1 {
                return Err(TreeError::NonContiguousIds {
                    expected: pos + 1,
                    found: tok.index,
                });
            }
            if tok.head == 0 {
                match root {
                    None => root = Some(tok.index),
                    Some(first) => {
                        return Err(TreeError::MultipleRoots {
                            first,
                            second: tok.index,
                        })
                    }
                }
            } else {
                if tok.head > len {
                    return Err(TreeError::HeadOutOfRange {
                        index: tok.index,
                        head: tok.head,
                        len,
                    });
                }
                if tok.head == tok.index {
                    return Err(TreeError::SelfHead { index: tok.index });
                }
            }
        }
        // Each non-root token has exactly one head, so the links form a
        // functional graph; with a single root, acyclicity alone makes it a
        // connected tree. Checked before root presence: a sentence with no
        // root always contains a head cycle, and the cycle is the better
        // report. Walk head chains with colour marks.
        const WHITE: u8 = 0;
        const GRAY: u8 = 1;
        const BLACK: u8 = 2;
        let mut colour = vec![WHITE; len + 1];
        for start in 1..=len {
            if colour[start] != WHITE {
                continue;
            }
            let mut path = Vec::new();
            let mut cur = start;
            loop {
                if colour[cur] == GRAY {
                    return Err(TreeError::Cycle { index: cur });
                }
                if colour[cur] == BLACK {
                    break;
                }
                colour[cur] = GRAY;
                path.push(cur);
                let head = tokens[cur - 1].head;
                if head == 0 {
                    break;
                }
                cur = head;
            }
            for node in path {
                colour[node] = BLACK;
            }
        }
        if root.is_none() {
            return Err(TreeError::NoRoot);
        }

        Ok(DepTree { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// 1-based index of the root token.
    pub fn root(&self) -> usize {
        self.tokens
            .iter()
            .find(|t| t.head == 0)
            .map(|t| t.index)
            .expect("validated tree has a root")
    }

    /// Undirected adjacency lists over 0-based positions.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.tokens.len()];
        for tok in &self.tokens {
            if tok.head != 0 {
                adj[tok.index - 1].push(tok.head - 1);
                adj[tok.head - 1].push(tok.index - 1);
            }
        }
        adj
    }

    /// Render back to the CoNLL-U subset this crate reads; unused columns
    /// are filled with "_".
    pub fn to_conllu(&self) -> String {
        let mut out = String::new();
        for tok in &self.tokens {
            let _ = writeln!(
                out,
                "{}\t{}\t_\t_\t_\t_\t{}\t_\t_\t_",
                tok.index, tok.form, tok.head
            );
        }
        out
    }
}

/// Symmetric matrix of tree distances between all token pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<u32>,
}

impl DistanceMatrix {
    /// Build from row-major entries; callers must uphold the distance
    /// invariants themselves (used by the sparsing routines, which
    /// deliberately break symmetry).
    pub fn from_raw(n: usize, d: Vec<u32>) -> Self {
        assert_eq!(d.len(), n * n, "distance buffer must be n*n");
        DistanceMatrix { n, d }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.d[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.d[i * self.n..(i + 1) * self.n]
    }

    pub fn entries(&self) -> &[u32] {
        &self.d
    }

    /// CSV form: first line `n=<I>`, then I comma-separated integer rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "n={}", self.n);
        for i in 0..self.n {
            let row: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    /// JSON form: `{"n": I, "d": [[...]]}`.
    pub fn to_json(&self) -> String {
        let rows: Vec<Vec<u32>> = (0..self.n).map(|i| self.row(i).to_vec()).collect();
        serde_json::json!({ "n": self.n, "d": rows }).to_string()
    }
}

/// All-pairs tree distances by breadth-first search from every token.
///
/// O(I^2) over the undirected adjacency; head-link direction is ignored.
pub fn tree_distance_matrix(tree: &DepTree) -> DistanceMatrix {
    let n = tree.len();
    let adj = tree.adjacency();
    let mut d = vec![0u32; n * n];
    let mut dist = vec![u32::MAX; n];
    let mut queue = VecDeque::new();
    for src in 0..n {
        dist.fill(u32::MAX);
        dist[src] = 0;
        queue.clear();
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if dist[v] == u32::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        d[src * n..(src + 1) * n].copy_from_slice(&dist);
    }
    DistanceMatrix { n, d }
}

/// Parse a CoNLL-U subset: sentences separated by blank lines, token lines
/// with 10 tab-separated columns of which ID, FORM and HEAD are consumed,
/// comment lines starting with '#' skipped.
///
/// Multiword ranges ("3-4") and empty nodes ("3.1") are rejected rather than
/// skipped: silently dropping them would desynchronise token indices.
pub fn parse_conllu(text: &str) -> Result<Vec<DepTree>, ConlluError> {
    let mut trees = Vec::new();
    let mut pending: Vec<Token> = Vec::new();
    let mut sentence = 0usize;

    let finish =
        |pending: &mut Vec<Token>, sentence: &mut usize| -> Result<Option<DepTree>, ConlluError> {
            if pending.is_empty() {
                return Ok(None);
            }
            *sentence += 1;
            let tokens = std::mem::take(pending);
            match DepTree::new(tokens) {
                Ok(tree) => Ok(Some(tree)),
                Err(source) => Err(ConlluError::InvalidTree {
                    sentence: *sentence,
                    source,
                }),
            }
        };

    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            if let Some(tree) = finish(&mut pending, &mut sentence)? {
                trees.push(tree);
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        pending.push(parse_token_line(line, lineno)?);
    }
    if let Some(tree) = finish(&mut pending, &mut sentence)? {
        trees.push(tree);
    }
    Ok(trees)
}

fn parse_token_line(line: &str, lineno: usize) -> Result<Token, ConlluError> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 10 {
        return Err(ConlluError::MalformedLine {
            line: lineno,
            reason: format!("expected 10 tab-separated columns, found {}", cols.len()),
        });
    }
    let id_field = cols[0];
    if let Some((a, b)) = id_field.split_once('-') {
        if a.parse::<usize>().is_ok() && b.parse::<usize>().is_ok() {
            return Err(ConlluError::MultiwordToken {
                line: lineno,
                id: id_field.to_string(),
            });
        }
    }
    if let Some((a, b)) = id_field.split_once('.') {
        if a.parse::<usize>().is_ok() && b.parse::<usize>().is_ok() {
            return Err(ConlluError::EmptyNode {
                line: lineno,
                id: id_field.to_string(),
            });
        }
    }
    let index: usize = id_field.parse().map_err(|_| ConlluError::MalformedLine {
        line: lineno,
        reason: format!("ID {:?} is not an integer", id_field),
    })?;
    let head: usize = cols[6].parse().map_err(|_| ConlluError::MalformedLine {
        line: lineno,
        reason: format!("HEAD {:?} is not an integer", cols[6]),
    })?;
    Ok(Token {
        index,
        form: cols[1].to_string(),
        head,
    })
}
