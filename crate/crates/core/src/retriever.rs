//! Deterministic nearest-neighbor retrieval over training-set embeddings.
//!
//! Three retrieval front-ends share the same index machinery: the
//! task-aware encoder, the input-only encoder, and a lexical bag-of-words
//! baseline. The exact index is a brute-force scan (and the oracle for the
//! approximate one); the approximate index is a random-projection forest
//! queried with a single cross-tree priority queue and exact re-ranking,
//! so results differ from exact search only by candidate coverage.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::corpus::{Example, Vocabulary, UNK};
use crate::embednet::{EmbedNet, EmbednetError};
use crate::pipeline::stream_rng;

#[derive(Debug, Error)]
pub enum RetrieverError {
    #[error("index is empty")]
    EmptyIndex,
    #[error("dimension mismatch: index has {expected}, query has {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("k must be >= 1")]
    BadK,
    #[error("embedding of `{id}` is not unit norm (norm {norm})")]
    NotUnit { id: String, norm: f64 },
    #[error("id `{0}` not present in the indexed dataset")]
    UnknownId(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed embedding store: {0}")]
    Format(String),
    #[error(transparent)]
    Embednet(#[from] EmbednetError),
}

/// An id paired with its unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    pub embedding: Vec<f64>,
}

fn check_unit(entry: &IndexEntry) -> Result<(), RetrieverError> {
    let norm = entry.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(RetrieverError::NotUnit {
            id: entry.id.clone(),
            norm,
        });
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Ranks candidate row indices by squared distance to `q`, ties broken by
/// id, excluding at most one id; truncates to `k`.
fn rank_candidates(
    ids: &[String],
    embs: &[Vec<f64>],
    candidates: impl Iterator<Item = usize>,
    q: &[f64],
    k: usize,
    exclude_id: Option<&str>,
) -> Vec<(String, f64)> {
    let mut scored: Vec<(f64, usize)> = candidates
        .filter(|&i| exclude_id != Some(ids[i].as_str()))
        .map(|i| (sq_dist(&embs[i], q), i))
        .collect();
    scored.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then_with(|| ids[a.1].cmp(&ids[b.1]))
    });
    scored
        .into_iter()
        .take(k)
        .map(|(d, i)| (ids[i].clone(), d))
        .collect()
}

/// Brute-force index: exact top-k by squared Euclidean distance.
#[derive(Debug, Clone)]
pub struct ExactIndex {
    dim: usize,
    ids: Vec<String>,
    embs: Vec<Vec<f64>>,
}

pub fn build_exact_index(entries: &[IndexEntry]) -> Result<ExactIndex, RetrieverError> {
    if entries.is_empty() {
        return Err(RetrieverError::EmptyIndex);
    }
    let dim = entries[0].embedding.len();
    for e in entries {
        if e.embedding.len() != dim {
            return Err(RetrieverError::DimMismatch {
                expected: dim,
                got: e.embedding.len(),
            });
        }
        check_unit(e)?;
    }
    Ok(ExactIndex {
        dim,
        ids: entries.iter().map(|e| e.id.clone()).collect(),
        embs: entries.iter().map(|e| e.embedding.clone()).collect(),
    })
}

impl ExactIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn query(
        &self,
        q: &[f64],
        k: usize,
        exclude_id: Option<&str>,
    ) -> Result<Vec<(String, f64)>, RetrieverError> {
        if k < 1 {
            return Err(RetrieverError::BadK);
        }
        if q.len() != self.dim {
            return Err(RetrieverError::DimMismatch {
                expected: self.dim,
                got: q.len(),
            });
        }
        Ok(rank_candidates(
            &self.ids,
            &self.embs,
            0..self.ids.len(),
            q,
            k,
            exclude_id,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum LshNode {
    Split {
        normal: Vec<f64>,
        /// Child for margin < 0, then margin >= 0.
        neg: u32,
        pos: u32,
    },
    Leaf(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
struct LshTree {
    nodes: Vec<LshNode>,
}

/// Random-projection forest over unit vectors.
///
/// Each tree recursively splits by the sign of the projection onto a
/// hyperplane through the origin whose normal joins two sampled points.
/// After five failed attempts to find a separating hyperplane (e.g. for
/// duplicate embeddings, which always share a side) the items stay
/// together in one oversized leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct LshIndex {
    dim: usize,
    num_trees: usize,
    max_leaf_size: usize,
    build_seed: u64,
    ids: Vec<String>,
    embs: Vec<Vec<f64>>,
    trees: Vec<LshTree>,
}

const SPLIT_ATTEMPTS: usize = 5;

fn sample_hyperplane<R: Rng + ?Sized>(
    embs: &[Vec<f64>],
    items: &[u32],
    attempt: usize,
    rng: &mut R,
) -> Vec<f64> {
    let dim = embs[0].len();
    if attempt + 1 < SPLIT_ATTEMPTS && items.len() >= 2 {
        let a = items[rng.random_range(0..items.len())] as usize;
        let b = items[rng.random_range(0..items.len())] as usize;
        let mut normal: Vec<f64> = embs[a].iter().zip(&embs[b]).map(|(x, y)| x - y).collect();
        let norm = normal.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            normal.iter_mut().for_each(|x| *x /= norm);
            return normal;
        }
    }
    // Fallback: a Gaussian direction, for degenerate point pairs.
    loop {
        let mut normal: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = normal.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            normal.iter_mut().for_each(|x| *x /= norm);
            return normal;
        }
    }
}

fn build_tree<R: Rng + ?Sized>(
    embs: &[Vec<f64>],
    items: Vec<u32>,
    max_leaf_size: usize,
    nodes: &mut Vec<LshNode>,
    rng: &mut R,
) -> u32 {
    if items.len() <= max_leaf_size {
        nodes.push(LshNode::Leaf(items));
        return (nodes.len() - 1) as u32;
    }
    for attempt in 0..SPLIT_ATTEMPTS {
        let normal = sample_hyperplane(embs, &items, attempt, rng);
        let mut neg_items = Vec::new();
        let mut pos_items = Vec::new();
        for &i in &items {
            let margin: f64 = embs[i as usize].iter().zip(&normal).map(|(x, y)| x * y).sum();
            if margin < 0.0 {
                neg_items.push(i);
            } else {
                pos_items.push(i);
            }
        }
        if neg_items.is_empty() || pos_items.is_empty() {
            continue;
        }
        let slot = nodes.len();
        nodes.push(LshNode::Leaf(Vec::new()));
        let neg = build_tree(embs, neg_items, max_leaf_size, nodes, rng);
        let pos = build_tree(embs, pos_items, max_leaf_size, nodes, rng);
        nodes[slot] = LshNode::Split { normal, neg, pos };
        return slot as u32;
    }
    nodes.push(LshNode::Leaf(items));
    (nodes.len() - 1) as u32
}

pub fn build_lsh_index(
    entries: &[IndexEntry],
    num_trees: usize,
    max_leaf_size: usize,
    seed: u64,
) -> Result<LshIndex, RetrieverError> {
    assert!(num_trees >= 1, "num_trees must be >= 1");
    assert!(max_leaf_size >= 1, "max_leaf_size must be >= 1");
    let exact = build_exact_index(entries)?;
    let (dim, ids, embs) = (exact.dim, exact.ids, exact.embs);
    let mut trees = Vec::with_capacity(num_trees);
    for t in 0..num_trees {
        let mut rng = stream_rng(seed, &format!("lsh.tree.{t}"));
        let mut nodes = Vec::new();
        let root = build_tree(
            &embs,
            (0..ids.len() as u32).collect(),
            max_leaf_size,
            &mut nodes,
            &mut rng,
        );
        debug_assert_eq!(root, 0);
        trees.push(LshTree { nodes });
    }
    Ok(LshIndex {
        dim,
        num_trees,
        max_leaf_size,
        build_seed: seed,
        ids,
        embs,
        trees,
    })
}

/// Max-heap entry ordered by margin bound, with deterministic tie-breaks.
struct HeapItem {
    bound: f64,
    tree: u32,
    node: u32,
}

impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapItem {}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.bound
            .total_cmp(&other.bound)
            .then_with(|| other.tree.cmp(&self.tree))
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl LshIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_trees(&self) -> usize {
        self.num_trees
    }

    pub fn build_seed(&self) -> u64 {
        self.build_seed
    }

    /// Default candidate budget: 50 per tree.
    pub fn default_search_k(&self) -> usize {
        50 * self.num_trees
    }

    /// Gathers at least `search_k` candidates across all trees in
    /// best-margin-bound order, then exact-ranks them.
    pub fn query(
        &self,
        q: &[f64],
        k: usize,
        exclude_id: Option<&str>,
        search_k: usize,
    ) -> Result<Vec<(String, f64)>, RetrieverError> {
        if k < 1 {
            return Err(RetrieverError::BadK);
        }
        if q.len() != self.dim {
            return Err(RetrieverError::DimMismatch {
                expected: self.dim,
                got: q.len(),
            });
        }
        let mut heap = BinaryHeap::new();
        for t in 0..self.trees.len() {
            heap.push(HeapItem {
                bound: f64::INFINITY,
                tree: t as u32,
                node: 0,
            });
        }
        let mut visited = vec![false; self.ids.len()];
        let mut candidates: Vec<usize> = Vec::with_capacity(search_k.max(k));
        while candidates.len() < search_k.max(k) {
            let Some(item) = heap.pop() else { break };
            match &self.trees[item.tree as usize].nodes[item.node as usize] {
                LshNode::Leaf(items) => {
                    for &i in items {
                        if !visited[i as usize] {
                            visited[i as usize] = true;
                            candidates.push(i as usize);
                        }
                    }
                }
                LshNode::Split { normal, neg, pos } => {
                    let margin: f64 = q.iter().zip(normal).map(|(x, y)| x * y).sum();
                    heap.push(HeapItem {
                        bound: item.bound.min(margin),
                        tree: item.tree,
                        node: *pos,
                    });
                    heap.push(HeapItem {
                        bound: item.bound.min(-margin),
                        tree: item.tree,
                        node: *neg,
                    });
                }
            }
        }
        Ok(rank_candidates(
            &self.ids,
            &self.embs,
            candidates.into_iter(),
            q,
            k,
            exclude_id,
        ))
    }

    pub fn entries(&self) -> Vec<IndexEntry> {
        self.ids
            .iter()
            .zip(&self.embs)
            .map(|(id, e)| IndexEntry {
                id: id.clone(),
                embedding: e.clone(),
            })
            .collect()
    }
}

/// Fraction of queries whose exact top-1 appears in the LSH top-k.
pub fn recall_eval(
    lsh: &LshIndex,
    exact: &ExactIndex,
    queries: &[Vec<f64>],
    k: usize,
    search_k: usize,
) -> Result<f64, RetrieverError> {
    if queries.is_empty() {
        return Ok(1.0);
    }
    let mut hits = 0usize;
    for q in queries {
        let truth = &exact.query(q, 1, None)?[0].0;
        let got = lsh.query(q, k, None, search_k)?;
        if got.iter().any(|(id, _)| id == truth) {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

const STORE_MAGIC: &[u8; 6] = b"REIDX1";

/// Writes the embedding store: magic, d, n, build seed, then one record
/// per entry (id length, id bytes, d little-endian doubles).
pub fn save_store(path: &Path, entries: &[IndexEntry], seed: u64) -> Result<(), RetrieverError> {
    let dim = entries.first().map(|e| e.embedding.len()).unwrap_or(0);
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(STORE_MAGIC)?;
    f.write_all(&(dim as u32).to_le_bytes())?;
    f.write_all(&(entries.len() as u64).to_le_bytes())?;
    f.write_all(&seed.to_le_bytes())?;
    for e in entries {
        f.write_all(&(e.id.len() as u32).to_le_bytes())?;
        f.write_all(e.id.as_bytes())?;
        for x in &e.embedding {
            f.write_all(&x.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_store(path: &Path) -> Result<(Vec<IndexEntry>, u64), RetrieverError> {
    let mut f = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    f.read_exact(&mut magic)
        .map_err(|_| RetrieverError::Format("file too short for header".into()))?;
    if &magic != STORE_MAGIC {
        return Err(RetrieverError::Format("bad magic".into()));
    }
    let mut u32b = [0u8; 4];
    let mut u64b = [0u8; 8];
    f.read_exact(&mut u32b)?;
    let dim = u32::from_le_bytes(u32b) as usize;
    f.read_exact(&mut u64b)?;
    let n = u64::from_le_bytes(u64b) as usize;
    f.read_exact(&mut u64b)?;
    let seed = u64::from_le_bytes(u64b);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        f.read_exact(&mut u32b)
            .map_err(|_| RetrieverError::Format(format!("truncated at record {i}")))?;
        let id_len = u32::from_le_bytes(u32b) as usize;
        let mut id = vec![0u8; id_len];
        f.read_exact(&mut id)
            .map_err(|_| RetrieverError::Format(format!("truncated id at record {i}")))?;
        let id = String::from_utf8(id)
            .map_err(|_| RetrieverError::Format(format!("non-UTF-8 id at record {i}")))?;
        let mut emb = Vec::with_capacity(dim);
        let mut f64b = [0u8; 8];
        for _ in 0..dim {
            f.read_exact(&mut f64b)
                .map_err(|_| RetrieverError::Format(format!("truncated embedding of `{id}`")))?;
            emb.push(f64::from_le_bytes(f64b));
        }
        entries.push(IndexEntry { id, embedding: emb });
    }
    Ok((entries, seed))
}

/// Bag-of-words embedding: token counts over the vocabulary, L2-normalized.
/// All-OOV (or empty) inputs fall back to a pure-UNK count vector.
pub fn lexical_embed(vocab: &Vocabulary, tokens: &[String]) -> Vec<f64> {
    let mut counts = vec![0.0f64; vocab.size()];
    for t in tokens {
        counts[vocab.id(t)] += 1.0;
    }
    let norm = counts.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        counts[UNK] = 1.0;
        return counts;
    }
    counts.iter_mut().for_each(|x| *x /= norm);
    counts
}

/// Which embedding defines retrieval similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrieverKind {
    Task,
    Input,
    Lexical,
}

impl RetrieverKind {
    pub fn label(self) -> &'static str {
        match self {
            RetrieverKind::Task => "task",
            RetrieverKind::Input => "input",
            RetrieverKind::Lexical => "lexical",
        }
    }
}

/// Training examples indexed by id, the retrieval target pool.
pub struct RetrievalContext<'a> {
    examples: &'a [Example],
    by_id: HashMap<&'a str, usize>,
}

impl<'a> RetrievalContext<'a> {
    pub fn new(examples: &'a [Example]) -> Self {
        let by_id = examples
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.as_str(), i))
            .collect();
        RetrievalContext { examples, by_id }
    }

    pub fn get(&self, id: &str) -> Result<&'a Example, RetrieverError> {
        self.by_id
            .get(id)
            .map(|&i| &self.examples[i])
            .ok_or_else(|| RetrieverError::UnknownId(id.to_string()))
    }

    pub fn examples(&self) -> &'a [Example] {
        self.examples
    }
}

enum Embedder {
    Net(Box<EmbedNet>),
    Lexical(Vocabulary),
}

enum Backend {
    Exact(ExactIndex),
    Lsh { index: LshIndex, search_k: usize },
}

/// A retrieval front-end: an embedder plus an index over the training set.
pub struct Retriever {
    kind: RetrieverKind,
    embedder: Embedder,
    backend: Backend,
}

impl Retriever {
    pub fn with_lsh(kind: RetrieverKind, net: EmbedNet, index: LshIndex, search_k: usize) -> Self {
        assert!(matches!(kind, RetrieverKind::Task | RetrieverKind::Input));
        Retriever {
            kind,
            embedder: Embedder::Net(Box::new(net)),
            backend: Backend::Lsh { index, search_k },
        }
    }

    pub fn with_exact(kind: RetrieverKind, net: EmbedNet, index: ExactIndex) -> Self {
        assert!(matches!(kind, RetrieverKind::Task | RetrieverKind::Input));
        Retriever {
            kind,
            embedder: Embedder::Net(Box::new(net)),
            backend: Backend::Exact(index),
        }
    }

    /// Lexical baseline: embeds and indexes with bag-of-words vectors.
    pub fn lexical(vocab: Vocabulary, train: &[Example]) -> Result<Self, RetrieverError> {
        let entries: Vec<IndexEntry> = train
            .iter()
            .map(|ex| IndexEntry {
                id: ex.id.clone(),
                embedding: lexical_embed(&vocab, &input_tokens(ex)),
            })
            .collect();
        let index = build_exact_index(&entries)?;
        Ok(Retriever {
            kind: RetrieverKind::Lexical,
            embedder: Embedder::Lexical(vocab),
            backend: Backend::Exact(index),
        })
    }

    pub fn kind(&self) -> RetrieverKind {
        self.kind
    }

    pub fn net(&self) -> Option<&EmbedNet> {
        match &self.embedder {
            Embedder::Net(net) => Some(net),
            Embedder::Lexical(_) => None,
        }
    }

    /// The query embedding of an example's input under this retriever.
    pub fn embed(&self, vocab: &Vocabulary, x: &Example) -> Result<Vec<f64>, RetrieverError> {
        match &self.embedder {
            Embedder::Net(net) => Ok(net.encode_example(vocab, x)?.into_vec()),
            Embedder::Lexical(v) => Ok(lexical_embed(v, &input_tokens(x))),
        }
    }

    pub fn query(
        &self,
        q: &[f64],
        k: usize,
        exclude_id: Option<&str>,
    ) -> Result<Vec<(String, f64)>, RetrieverError> {
        match &self.backend {
            Backend::Exact(index) => index.query(q, k, exclude_id),
            Backend::Lsh { index, search_k } => index.query(q, k, exclude_id, *search_k),
        }
    }

    /// The single nearest training example for `x`.
    pub fn retrieve<'d>(
        &self,
        ctx: &RetrievalContext<'d>,
        vocab: &Vocabulary,
        x: &Example,
        exclude_id: Option<&str>,
    ) -> Result<(&'d Example, f64), RetrieverError> {
        let q = self.embed(vocab, x)?;
        let ranked = self.query(&q, 1, exclude_id)?;
        let (id, dist) = ranked.first().ok_or(RetrieverError::EmptyIndex)?;
        Ok((ctx.get(id)?, *dist))
    }
}

/// All input-field tokens of an example, concatenated in field order.
pub fn input_tokens(ex: &Example) -> Vec<String> {
    ex.input_fields
        .iter()
        .flat_map(|(_, toks)| toks.iter().cloned())
        .collect()
}
