//! Document ingestion, tokenization, stream concatenation and chunking, plus
//! the keyed synthetic corpus used for desk-scale verification.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Byte-tokenizer vocabulary size.
pub const BYTE_VOCAB: u32 = 256;

/// Default separator inserted between concatenated documents.
pub const DEFAULT_SEPARATOR: u32 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub source: String,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>, source: impl Into<String>) -> Self {
        Document {
            id: id.into(),
            text: text.into(),
            source: source.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub vocab_size: u32,
}

impl TokenSequence {
    /// Builds a sequence, checking every id against `vocab_size`.
    pub fn new(tokens: Vec<u32>, vocab_size: u32) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::config("vocab_size must be positive"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::domain(format!(
                "token id {bad} out of range for vocab_size {vocab_size}"
            )));
        }
        Ok(TokenSequence { tokens, vocab_size })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.tokens
    }
}

/// A fixed-length window of the token stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub tokens: TokenSequence,
    /// Position of the chunk in stream order.
    pub index: usize,
    /// Offset of the first token in the stream.
    pub offset: usize,
}

impl Chunk {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Frozen word-level vocabulary. Id 0 is reserved for unknown words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: HashMap<String, u32>,
    size: u32,
}

impl Vocab {
    /// Assigns ids 1.. to the `cap - 1` most frequent whitespace-separated
    /// words; ties are ordered lexicographically.
    pub fn build_by_frequency<'a>(texts: impl IntoIterator<Item = &'a str>, cap: u32) -> Result<Self> {
        if cap < 2 {
            return Err(Error::config("vocabulary cap must be at least 2"));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for text in texts {
            for w in text.split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate((cap - 1) as usize);
        let words: HashMap<String, u32> = ranked
            .into_iter()
            .enumerate()
            .map(|(i, (w, _))| (w.to_string(), i as u32 + 1))
            .collect();
        let size = words.len() as u32 + 1;
        Ok(Vocab { words, size })
    }

    /// Builds a vocabulary from explicit `(word, id)` entries.
    pub fn from_entries(entries: impl IntoIterator<Item = (String, u32)>) -> Result<Self> {
        let mut words = HashMap::new();
        let mut seen = HashSet::new();
        let mut max_id = 0;
        for (w, id) in entries {
            if id == 0 {
                return Err(Error::config(format!("word {w:?} uses reserved id 0")));
            }
            if !seen.insert(id) {
                return Err(Error::config(format!("duplicate vocabulary id {id}")));
            }
            max_id = max_id.max(id);
            if words.insert(w.clone(), id).is_some() {
                return Err(Error::config(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Vocab {
            words,
            size: max_id + 1,
        })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.words.get(word).copied().unwrap_or(0)
    }

    /// Entries sorted by id.
    pub fn entries(&self) -> Vec<(&str, u32)> {
        let mut e: Vec<(&str, u32)> = self.words.iter().map(|(w, &i)| (w.as_str(), i)).collect();
        e.sort_by_key(|&(_, i)| i);
        e
    }

    /// Tab-separated `word\tid` lines.
    pub fn to_tsv(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(w, i)| format!("{w}\t{i}\n"))
            .collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (w, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(format!("vocab line {}: expected word<TAB>id", n + 1)))?;
            let id = id
                .trim()
                .parse::<u32>()
                .map_err(|_| Error::format(format!("vocab line {}: bad id {id:?}", n + 1)))?;
            entries.push((w.to_string(), id));
        }
        Vocab::from_entries(entries)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizerKind {
    Byte,
    Whitespace,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    kind: TokenizerKind,
    vocab: Option<Vocab>,
}

impl Tokenizer {
    pub fn byte() -> Self {
        Tokenizer {
            kind: TokenizerKind::Byte,
            vocab: None,
        }
    }

    pub fn whitespace(vocab: Vocab) -> Self {
        Tokenizer {
            kind: TokenizerKind::Whitespace,
            vocab: Some(vocab),
        }
    }

    /// A whitespace tokenizer whose vocabulary has not been built yet.
    pub fn whitespace_unbuilt() -> Self {
        Tokenizer {
            kind: TokenizerKind::Whitespace,
            vocab: None,
        }
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn vocab(&self) -> Option<&Vocab> {
        self.vocab.as_ref()
    }

    pub fn vocab_size(&self) -> Result<u32> {
        match self.kind {
            TokenizerKind::Byte => Ok(BYTE_VOCAB),
            TokenizerKind::Whitespace => self
                .vocab
                .as_ref()
                .map(Vocab::size)
                .ok_or_else(|| Error::config("whitespace tokenizer has no vocabulary")),
        }
    }
}

pub fn tokenize(text: &str, tokenizer: &Tokenizer) -> Result<TokenSequence> {
    match tokenizer.kind {
        TokenizerKind::Byte => Ok(TokenSequence {
            tokens: text.bytes().map(u32::from).collect(),
            vocab_size: BYTE_VOCAB,
        }),
        TokenizerKind::Whitespace => {
            let vocab = tokenizer
                .vocab
                .as_ref()
                .ok_or_else(|| Error::config("whitespace tokenizer has no vocabulary"))?;
            Ok(TokenSequence {
                tokens: text.split_whitespace().map(|w| vocab.id(w)).collect(),
                vocab_size: vocab.size(),
            })
        }
    }
}

/// Tokenizes every document (in parallel) and joins them in input order with
/// `separator` between consecutive documents.
pub fn concat_stream(docs: &[Document], tokenizer: &Tokenizer, separator: u32) -> Result<TokenSequence> {
    if docs.is_empty() {
        return Err(Error::config("concat_stream needs at least one document"));
    }
    let vocab_size = tokenizer.vocab_size()?;
    if separator >= vocab_size {
        return Err(Error::config(format!(
            "separator {separator} out of range for vocab_size {vocab_size}"
        )));
    }
    let parts: Vec<TokenSequence> = docs
        .par_iter()
        .map(|d| tokenize(&d.text, tokenizer))
        .collect::<Result<_>>()?;
    let total = parts.iter().map(TokenSequence::len).sum::<usize>() + docs.len() - 1;
    let mut tokens = Vec::with_capacity(total);
    for (i, p) in parts.into_iter().enumerate() {
        if i > 0 {
            tokens.push(separator);
        }
        tokens.extend(p.tokens);
    }
    Ok(TokenSequence { tokens, vocab_size })
}

/// Cuts the stream into `floor(len / l)` contiguous chunks of exactly `l`
/// tokens; the trailing remainder is dropped.
pub fn chunk_stream(stream: &TokenSequence, l: usize) -> Result<Vec<Chunk>> {
    if l < 2 {
        return Err(Error::config(format!("chunk length must be >= 2, got {l}")));
    }
    Ok(stream
        .tokens
        .chunks_exact(l)
        .enumerate()
        .map(|(index, w)| Chunk {
            tokens: TokenSequence {
                tokens: w.to_vec(),
                vocab_size: stream.vocab_size,
            },
            index,
            offset: index * l,
        })
        .collect())
}

/// Parameters of the keyed synthetic corpus.
///
/// Ids `1..=n_keys` are key tokens, `n_keys + 1 .. vocab_size` are filler and
/// id 0 stays free for the stream separator. Every document picks one key and
/// repeats it at rate `key_density`, so a prefix and its true continuation
/// share a key while continuations of other documents usually do not.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_docs: usize,
    pub vocab_size: u32,
    pub n_keys: u32,
    pub key_density: f64,
    pub doc_len: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 8 {
            return Err(Error::config("synthetic vocab_size must be >= 8"));
        }
        if self.n_keys == 0 || self.n_keys + 2 > self.vocab_size {
            return Err(Error::config(format!(
                "n_keys must be in [1, vocab_size - 2], got {}",
                self.n_keys
            )));
        }
        if !(self.key_density > 0.0 && self.key_density < 1.0) {
            return Err(Error::config(format!(
                "key_density must lie in (0, 1), got {}",
                self.key_density
            )));
        }
        if self.doc_len == 0 {
            return Err(Error::config("doc_len must be positive"));
        }
        Ok(())
    }
}

/// A synthetic document in token form together with its key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyedDoc {
    pub key: u32,
    pub tokens: Vec<u32>,
}

/// Draws one keyed token sequence of `len` tokens.
pub fn sample_keyed_tokens<R: Rng>(rng: &mut R, spec: &SyntheticSpec, key: u32, len: usize) -> Vec<u32> {
    (0..len)
        .map(|_| {
            if rng.gen_bool(spec.key_density) {
                key
            } else {
                rng.gen_range(spec.n_keys + 1..spec.vocab_size)
            }
        })
        .collect()
}

pub fn gen_synthetic_tokens(spec: &SyntheticSpec) -> Result<Vec<KeyedDoc>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.n_docs)
        .map(|_| {
            let key = rng.gen_range(1..=spec.n_keys);
            let tokens = sample_keyed_tokens(&mut rng, spec, key, spec.doc_len);
            KeyedDoc { key, tokens }
        })
        .collect())
}

/// Joins keyed documents into one stream with `DEFAULT_SEPARATOR` between
/// them, matching `concat_stream` over the rendered corpus.
pub fn synthetic_stream(spec: &SyntheticSpec) -> Result<TokenSequence> {
    let docs = gen_synthetic_tokens(spec)?;
    if docs.is_empty() {
        return Err(Error::config("synthetic corpus needs at least one document"));
    }
    let mut tokens = Vec::with_capacity(docs.len() * (spec.doc_len + 1));
    for (i, d) in docs.into_iter().enumerate() {
        if i > 0 {
            tokens.push(DEFAULT_SEPARATOR);
        }
        tokens.extend(d.tokens);
    }
    Ok(TokenSequence {
        tokens,
        vocab_size: spec.vocab_size,
    })
}

/// Word used for token `id` in synthetic document text.
pub fn synthetic_word(id: u32) -> String {
    format!("t{id}")
}

/// Vocabulary mapping synthetic words back to their token ids.
pub fn synthetic_vocab(vocab_size: u32) -> Vocab {
    Vocab {
        words: (1..vocab_size).map(|i| (synthetic_word(i), i)).collect(),
        size: vocab_size,
    }
}

pub fn gen_synthetic_corpus(spec: &SyntheticSpec) -> Result<Vec<Document>> {
    Ok(gen_synthetic_tokens(spec)?
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let text = d
                .tokens
                .iter()
                .map(|&t| synthetic_word(t))
                .collect::<Vec<_>>()
                .join(" ");
            Document::new(format!("syn-{}-{i}", spec.seed), text, format!("synthetic:k{}", d.key))
        })
        .collect())
}

#[derive(Deserialize)]
struct JsonDoc {
    text: String,
    #[serde(default)]
    id: Option<String>,
}

/// Reads JSON-lines documents (`text` required, `id` optional).
pub fn parse_jsonl_documents(content: &str, source: &str) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (n, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let d: JsonDoc = serde_json::from_str(line)
            .map_err(|e| Error::format(format!("{source} line {}: {e}", n + 1)))?;
        let id = d.id.unwrap_or_else(|| format!("{source}:{}", docs.len()));
        docs.push(Document::new(id, d.text, source));
    }
    finish_documents(docs)
}

/// Reads plain text where documents are separated by blank lines.
pub fn parse_text_documents(content: &str, source: &str) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let flush = |current: &mut Vec<&str>, docs: &mut Vec<Document>| {
        if !current.is_empty() {
            let id = format!("{source}:{}", docs.len());
            docs.push(Document::new(id, current.join("\n"), source));
            current.clear();
        }
    };
    for line in content.lines() {
        if line.trim().is_empty() {
            flush(&mut current, &mut docs);
        } else {
            current.push(line);
        }
    }
    flush(&mut current, &mut docs);
    finish_documents(docs)
}

fn finish_documents(docs: Vec<Document>) -> Result<Vec<Document>> {
    let mut ids = HashSet::new();
    let mut out = Vec::with_capacity(docs.len());
    for d in docs {
        if !ids.insert(d.id.clone()) {
            return Err(Error::format(format!("duplicate document id {:?}", d.id)));
        }
        // empty documents carry no tokens; drop them
        if !d.text.trim().is_empty() {
            out.push(d);
        }
    }
    Ok(out)
}

/// Loads a corpus file, choosing the parser from the extension
/// (`.jsonl`/`.json` are JSON-lines, anything else plain text).
pub fn load_documents(path: &Path) -> Result<Vec<Document>> {
    let content = fs::read_to_string(path)?;
    let source = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string());
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") => parse_jsonl_documents(&content, &source),
        _ => parse_text_documents(&content, &source),
    }
}
