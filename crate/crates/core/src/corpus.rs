//! Data model, tokenization, deduplication, group-level splitting,
//! vocabulary construction, and JSONL persistence for paired examples.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed JSON: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: missing required key `{key}`")]
    MissingKey { line: usize, key: &'static str },
    #[error("line {line}: key `{key}` has the wrong type (expected {expected})")]
    WrongType {
        line: usize,
        key: String,
        expected: &'static str,
    },
    #[error("line {line}: example id is empty")]
    EmptyId { line: usize },
    #[error("line {line}: duplicate example id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: example `{id}` has an empty output")]
    EmptyOutput { line: usize, id: String },
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    BadRatios((f64, f64, f64)),
    #[error("need at least 3 groups to form train/validation/test, got {0}")]
    TooFewGroups(usize),
    #[error("cannot build a vocabulary from an empty training set")]
    EmptyTrain,
}

/// One paired example: named input token sequences and an output sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub id: String,
    /// Grouping key for split assignment (e.g. repository or template).
    pub group_key: String,
    /// Ordered field-name → token-sequence mapping.
    pub input_fields: Vec<(String, Vec<String>)>,
    pub output: Vec<String>,
}

impl Example {
    /// Token content only, ignoring id and group; the deduplication key.
    fn content_key(&self) -> (&[(String, Vec<String>)], &[String]) {
        (&self.input_fields, &self.output)
    }
}

/// Group-disjoint train/validation/test partition.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    pub split_seed: u64,
}

/// Reserved token ids. All real tokens start at [`Vocabulary::RESERVED`].
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token → id mapping with fixed reserved ids for PAD/BOS/EOS/UNK.
///
/// Reserved strings contain punctuation and alphanumerics mixed, which the
/// tokenizer never produces, so they cannot collide with corpus tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    map: HashMap<String, usize>,
}

impl Vocabulary {
    pub const RESERVED: usize = RESERVED_TOKENS.len();

    fn from_tokens(tokens: Vec<String>) -> Self {
        let map = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, map }
    }

    /// Number of ids including the reserved block.
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Id for a token, falling back to UNK for out-of-vocabulary tokens.
    pub fn id(&self, token: &str) -> usize {
        self.map.get(token).copied().unwrap_or(UNK)
    }

    /// Whether the token has its own (non-UNK) id.
    pub fn contains(&self, token: &str) -> bool {
        self.map.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Non-reserved tokens in id order (token i has id `RESERVED + i`).
    pub fn corpus_tokens(&self) -> &[String] {
        &self.tokens[Self::RESERVED..]
    }

    /// Rebuilds a vocabulary from a [`Vocabulary::corpus_tokens`] list.
    pub fn from_corpus_tokens(tokens: Vec<String>) -> Self {
        let mut all: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        Self::from_tokens(all)
    }

    /// Encodes a token sequence to ids (OOV → UNK).
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut reserved = serde_json::Map::new();
        for (i, t) in RESERVED_TOKENS.iter().enumerate() {
            reserved.insert((*t).to_string(), Value::from(i));
        }
        let mut toks = serde_json::Map::new();
        for (i, t) in self.tokens.iter().enumerate().skip(Self::RESERVED) {
            toks.insert(t.clone(), Value::from(i));
        }
        let obj = serde_json::json!({ "reserved": reserved, "tokens": toks });
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut f, &obj).map_err(|e| CorpusError::Parse {
            line: 0,
            msg: e.to_string(),
        })?;
        writeln!(f)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path)?;
        let obj: Value = serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        let toks = obj
            .get("tokens")
            .and_then(Value::as_object)
            .ok_or(CorpusError::MissingKey { line: 0, key: "tokens" })?;
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut pairs: Vec<(usize, String)> = toks
            .iter()
            .filter_map(|(t, v)| v.as_u64().map(|id| (id as usize, t.clone())))
            .collect();
        pairs.sort();
        for (id, t) in pairs {
            debug_assert_eq!(id, tokens.len(), "vocabulary ids must be contiguous");
            tokens.push(t);
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Splits text on whitespace, with every ASCII punctuation character as its
/// own single-character token. Alphanumeric (and non-ASCII) runs stay whole.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if ch.is_ascii_punctuation() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_string());
        } else {
            current.push(ch);
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Joins tokens with single spaces; `tokenize` inverts this exactly for any
/// sequence the tokenizer itself produced.
pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Keeps the first occurrence of each distinct (input_fields, output) value;
/// ids and groups do not participate in the key.
pub fn deduplicate(examples: Vec<Example>) -> Vec<Example> {
    let mut seen: HashSet<(Vec<(String, Vec<String>)>, Vec<String>)> = HashSet::new();
    examples
        .into_iter()
        .filter(|ex| {
            let (inp, out) = ex.content_key();
            seen.insert((inp.to_vec(), out.to_vec()))
        })
        .collect()
}

/// Assigns whole groups to train/validation/test with the given ratios.
/// Group order is shuffled deterministically from `seed`; examples keep
/// their original relative order inside each split.
pub fn split_by_group(
    examples: &[Example],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit, CorpusError> {
    let (rt, rv, rs) = ratios;
    if rt <= 0.0 || rv <= 0.0 || rs <= 0.0 || (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadRatios(ratios));
    }
    let mut groups: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for ex in examples {
        if seen.insert(ex.group_key.as_str()) {
            groups.push(&ex.group_key);
        }
    }
    let g = groups.len();
    if g < 3 {
        return Err(CorpusError::TooFewGroups(g));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);
    let c1 = ((rt * g as f64).round() as usize).clamp(1, g - 2);
    let c2 = (((rt + rv) * g as f64).round() as usize).clamp(c1 + 1, g - 1);
    let mut assign: HashMap<&str, u8> = HashMap::with_capacity(g);
    for (i, grp) in groups.iter().enumerate() {
        let which = if i < c1 {
            0
        } else if i < c2 {
            1
        } else {
            2
        };
        assign.insert(grp, which);
    }
    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        split_seed: seed,
    };
    for ex in examples {
        match assign[ex.group_key.as_str()] {
            0 => split.train.push(ex.clone()),
            1 => split.validation.push(ex.clone()),
            _ => split.test.push(ex.clone()),
        }
    }
    Ok(split)
}

/// Retains examples whose output is at most `max_tokens` long (inclusive).
pub fn filter_by_length(examples: Vec<Example>, max_tokens: usize) -> Vec<Example> {
    assert!(max_tokens >= 1);
    examples
        .into_iter()
        .filter(|ex| ex.output.len() <= max_tokens)
        .collect()
}

/// Builds a vocabulary from training examples: every token (input fields and
/// output) with frequency ≥ `min_count`, ordered by frequency descending
/// then lexicographically, after the reserved block.
pub fn build_vocabulary(train: &[Example], min_count: usize) -> Result<Vocabulary, CorpusError> {
    if train.is_empty() {
        return Err(CorpusError::EmptyTrain);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for ex in train {
        for (_, toks) in &ex.input_fields {
            for t in toks {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
        for t in &ex.output {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count.max(1))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
    Ok(Vocabulary::from_tokens(tokens))
}

fn require<'v>(
    obj: &'v serde_json::Map<String, Value>,
    key: &'static str,
    line: usize,
) -> Result<&'v Value, CorpusError> {
    obj.get(key).ok_or(CorpusError::MissingKey { line, key })
}

/// Loads examples from a JSONL file: one object per line with keys `id`,
/// `group`, `input` (object of field-name → string), `output` (string).
/// Strings are tokenized at load. Errors carry 1-based line numbers.
pub fn load_jsonl(path: &Path) -> Result<Vec<Example>, CorpusError> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let obj = value.as_object().ok_or(CorpusError::WrongType {
            line: line_no,
            key: "<line>".into(),
            expected: "object",
        })?;
        let id = require(obj, "id", line_no)?
            .as_str()
            .ok_or(CorpusError::WrongType {
                line: line_no,
                key: "id".into(),
                expected: "string",
            })?
            .to_string();
        if id.is_empty() {
            return Err(CorpusError::EmptyId { line: line_no });
        }
        if !ids.insert(id.clone()) {
            return Err(CorpusError::DuplicateId { line: line_no, id });
        }
        let group_key = require(obj, "group", line_no)?
            .as_str()
            .ok_or(CorpusError::WrongType {
                line: line_no,
                key: "group".into(),
                expected: "string",
            })?
            .to_string();
        let input = require(obj, "input", line_no)?
            .as_object()
            .ok_or(CorpusError::WrongType {
                line: line_no,
                key: "input".into(),
                expected: "object",
            })?;
        let mut input_fields = Vec::with_capacity(input.len());
        for (field, v) in input {
            let text = v.as_str().ok_or_else(|| CorpusError::WrongType {
                line: line_no,
                key: format!("input.{field}"),
                expected: "string",
            })?;
            input_fields.push((field.clone(), tokenize(text)));
        }
        let output_text = require(obj, "output", line_no)?
            .as_str()
            .ok_or(CorpusError::WrongType {
                line: line_no,
                key: "output".into(),
                expected: "string",
            })?;
        let output = tokenize(output_text);
        if output.is_empty() {
            return Err(CorpusError::EmptyOutput { line: line_no, id });
        }
        out.push(Example {
            id,
            group_key,
            input_fields,
            output,
        });
    }
    Ok(out)
}

/// Saves examples as JSONL (UTF-8, LF). Token sequences are stored as
/// space-joined strings, which `load_jsonl` re-tokenizes to the same
/// sequences.
pub fn save_jsonl(path: &Path, examples: &[Example]) -> Result<(), CorpusError> {
    let mut f = BufWriter::new(File::create(path)?);
    for ex in examples {
        let mut input = serde_json::Map::new();
        for (field, toks) in &ex.input_fields {
            input.insert(field.clone(), Value::from(detokenize(toks)));
        }
        let obj = serde_json::json!({
            "id": ex.id,
            "group": ex.group_key,
            "input": input,
            "output": detokenize(&ex.output),
        });
        serde_json::to_writer(&mut f, &obj).map_err(|e| CorpusError::Parse {
            line: 0,
            msg: e.to_string(),
        })?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
