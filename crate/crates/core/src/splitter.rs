//! Prefix/suffix pair construction.
//!
//! Three modes: a fixed `L1 | L2` split of every chunk (sentences may be cut),
//! a uniformly random breakpoint inside each chunk, and a sentence-aware
//! splitter that packs whole sentence units into blocks and only cuts at unit
//! boundaries.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Chunk, Document, TokenSequence, Tokenizer};
use crate::error::{Error, Result};
use crate::io::{read_tokens, write_atomic, ByteReader};

pub const PAIR_MAGIC: &[u8; 8] = b"RBSPAIR\0";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairOrigin {
    /// Document id, or `"stream"` for chunk-derived pairs.
    pub source: String,
    /// Chunk or block index.
    pub index: usize,
    /// Token offset of the prefix start in the stream or document.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixSuffixPair {
    pub prefix: TokenSequence,
    pub suffix: TokenSequence,
    pub origin: PairOrigin,
}

impl PrefixSuffixPair {
    pub fn token_count(&self) -> usize {
        self.prefix.len() + self.suffix.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceUnit {
    pub text: String,
    pub tokens: TokenSequence,
    pub terminal: bool,
}

/// Splits a chunk into its first `l1` and remaining `l2` tokens.
pub fn fixed_split(chunk: &Chunk, l1: usize, l2: usize) -> Result<PrefixSuffixPair> {
    if l1 == 0 || l2 == 0 || l1 + l2 != chunk.len() {
        return Err(Error::config(format!(
            "fixed split {l1} + {l2} does not match chunk length {}",
            chunk.len()
        )));
    }
    Ok(split_at(chunk, l1))
}

fn split_at(chunk: &Chunk, at: usize) -> PrefixSuffixPair {
    let vocab_size = chunk.tokens.vocab_size;
    let (p, s) = chunk.tokens.tokens.split_at(at);
    PrefixSuffixPair {
        prefix: TokenSequence {
            tokens: p.to_vec(),
            vocab_size,
        },
        suffix: TokenSequence {
            tokens: s.to_vec(),
            vocab_size,
        },
        origin: PairOrigin {
            source: "stream".to_string(),
            index: chunk.index,
            offset: chunk.offset,
        },
    }
}

/// Splits every chunk at a breakpoint drawn uniformly from
/// `min_prefix..=max_prefix`.
pub fn random_breakpoint_split(
    chunks: &[Chunk],
    min_prefix: usize,
    max_prefix: usize,
    seed: u64,
) -> Result<Vec<PrefixSuffixPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    chunks
        .iter()
        .map(|c| {
            if min_prefix == 0 || min_prefix > max_prefix || max_prefix >= c.len() {
                return Err(Error::config(format!(
                    "breakpoint range [{min_prefix}, {max_prefix}] invalid for chunk length {}",
                    c.len()
                )));
            }
            Ok(split_at(c, rng.gen_range(min_prefix..=max_prefix)))
        })
        .collect()
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits text into sentence-like pieces.
///
/// A unit ends after `.`, `!` or `?` when followed by whitespace or end of
/// text (the terminator stays in the unit), or at a newline. Units are
/// whitespace-normalized and empty ones are skipped.
pub fn segment_sentence_texts(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let push = |cur: &mut String, out: &mut Vec<String>| {
        let n = normalize_ws(cur);
        if !n.is_empty() {
            out.push(n);
        }
        cur.clear();
    };
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '\n' {
            push(&mut cur, &mut out);
            continue;
        }
        cur.push(c);
        if matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|n| n.is_whitespace()) {
            push(&mut cur, &mut out);
        }
    }
    push(&mut cur, &mut out);
    out
}

/// Segments and tokenizes a document. The last unit is flagged terminal and,
/// when `eos` is given, gets that token appended.
pub fn segment_sentences(text: &str, tokenizer: &Tokenizer, eos: Option<u32>) -> Result<Vec<SentenceUnit>> {
    let texts = segment_sentence_texts(text);
    let n = texts.len();
    let vocab_size = tokenizer.vocab_size()?;
    if let Some(e) = eos {
        if e >= vocab_size {
            return Err(Error::config(format!("eos token {e} >= vocab_size {vocab_size}")));
        }
    }
    let mut units = Vec::with_capacity(n);
    for (i, t) in texts.into_iter().enumerate() {
        let terminal = i + 1 == n;
        let mut tokens = tokenize(&t, tokenizer)?;
        if terminal {
            if let Some(e) = eos {
                tokens.tokens.push(e);
            }
        }
        if tokens.is_empty() {
            continue;
        }
        units.push(SentenceUnit {
            text: t,
            tokens,
            terminal,
        });
    }
    Ok(units)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OversizePolicy {
    Split,
    Discard,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceSplitConfig {
    pub max_len: usize,
    pub min_len: usize,
    pub target_prefix: usize,
    pub oversize: OversizePolicy,
    /// Token appended to the document's final unit.
    pub eos: Option<u32>,
}

impl SentenceSplitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(format!(
                "need 0 < min_len <= max_len, got {} and {}",
                self.min_len, self.max_len
            )));
        }
        if self.target_prefix == 0 || self.target_prefix >= self.max_len {
            return Err(Error::config(format!(
                "need 0 < target_prefix < max_len, got {}",
                self.target_prefix
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitStats {
    pub blocks: usize,
    pub emitted: usize,
    /// Blocks below `min_len`.
    pub short_blocks: usize,
    /// Blocks holding a single unit, which have no interior boundary.
    pub unsplittable_blocks: usize,
    pub oversize_units: usize,
}

impl SplitStats {
    pub fn merge(&mut self, other: &SplitStats) {
        self.blocks += other.blocks;
        self.emitted += other.emitted;
        self.short_blocks += other.short_blocks;
        self.unsplittable_blocks += other.unsplittable_blocks;
        self.oversize_units += other.oversize_units;
    }
}

/// Index `k` (1-based count of prefix units) of the interior boundary whose
/// cumulative length is closest to `target`; ties go to the earlier boundary.
pub fn choose_boundary(unit_lens: &[usize], target: usize) -> Option<usize> {
    if unit_lens.len() < 2 {
        return None;
    }
    let mut best: Option<(usize, usize)> = None;
    let mut cum = 0;
    for (k, len) in unit_lens[..unit_lens.len() - 1].iter().enumerate() {
        cum += len;
        let dist = cum.abs_diff(target);
        if best.is_none_or(|(_, d)| dist < d) {
            best = Some((k + 1, dist));
        }
    }
    best.map(|(k, _)| k)
}

/// Greedily packs unit token lists into blocks of at most `max_len` tokens.
/// Returns the blocks as ranges of unit indices.
fn pack_units(lens: &[usize], max_len: usize) -> Vec<std::ops::Range<usize>> {
    let mut blocks = Vec::new();
    let mut start = 0;
    let mut total = 0;
    for (i, &len) in lens.iter().enumerate() {
        if total + len > max_len && i > start {
            blocks.push(start..i);
            start = i;
            total = 0;
        }
        total += len;
    }
    if start < lens.len() {
        blocks.push(start..lens.len());
    }
    blocks
}

/// Sentence-aware pair construction for one document.
pub fn sentence_aware_split(
    doc: &Document,
    tokenizer: &Tokenizer,
    cfg: &SentenceSplitConfig,
) -> Result<(Vec<PrefixSuffixPair>, SplitStats)> {
    cfg.validate()?;
    let mut stats = SplitStats::default();
    let vocab_size = tokenizer.vocab_size()?;

    // (token list, offset in the document's unit-concatenated tokenization)
    let mut pieces: Vec<(Vec<u32>, usize)> = Vec::new();
    let mut offset = 0;
    for unit in segment_sentences(&doc.text, tokenizer, cfg.eos)? {
        let toks = unit.tokens.tokens;
        let n = toks.len();
        if n > cfg.max_len {
            stats.oversize_units += 1;
            if cfg.oversize == OversizePolicy::Split {
                for (i, part) in toks.chunks(cfg.max_len).enumerate() {
                    pieces.push((part.to_vec(), offset + i * cfg.max_len));
                }
            }
        } else {
            pieces.push((toks, offset));
        }
        offset += n;
    }

    let lens: Vec<usize> = pieces.iter().map(|p| p.0.len()).collect();
    let mut pairs = Vec::new();
    for range in pack_units(&lens, cfg.max_len) {
        stats.blocks += 1;
        let block_lens = &lens[range.clone()];
        let total: usize = block_lens.iter().sum();
        if total < cfg.min_len {
            stats.short_blocks += 1;
            continue;
        }
        let Some(k) = choose_boundary(block_lens, cfg.target_prefix) else {
            stats.unsplittable_blocks += 1;
            continue;
        };
        let units = &pieces[range.clone()];
        let prefix: Vec<u32> = units[..k].iter().flat_map(|u| u.0.iter().copied()).collect();
        let suffix: Vec<u32> = units[k..].iter().flat_map(|u| u.0.iter().copied()).collect();
        pairs.push(PrefixSuffixPair {
            prefix: TokenSequence {
                tokens: prefix,
                vocab_size,
            },
            suffix: TokenSequence {
                tokens: suffix,
                vocab_size,
            },
            origin: PairOrigin {
                source: doc.id.clone(),
                index: stats.blocks - 1,
                offset: units[0].1,
            },
        });
        stats.emitted += 1;
    }
    Ok((pairs, stats))
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    prefix_tokens: Vec<u32>,
    suffix_tokens: Vec<u32>,
    origin: PairOrigin,
}

pub fn pairs_to_jsonl(pairs: &[PrefixSuffixPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        let rec = PairRecord {
            prefix_tokens: p.prefix.tokens.clone(),
            suffix_tokens: p.suffix.tokens.clone(),
            origin: p.origin.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("pair record serializes"));
        out.push('\n');
    }
    out
}

pub fn pairs_from_jsonl(content: &str, vocab_size: u32) -> Result<Vec<PrefixSuffixPair>> {
    let mut pairs = Vec::new();
    for (n, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord =
            serde_json::from_str(line).map_err(|e| Error::format(format!("pairs line {}: {e}", n + 1)))?;
        let wrap = |t: Vec<u32>| {
            TokenSequence::new(t, vocab_size).map_err(|e| Error::format(format!("pairs line {}: {e}", n + 1)))
        };
        let pair = PrefixSuffixPair {
            prefix: wrap(rec.prefix_tokens)?,
            suffix: wrap(rec.suffix_tokens)?,
            origin: rec.origin,
        };
        if pair.prefix.is_empty() || pair.suffix.is_empty() {
            return Err(Error::format(format!("pairs line {}: empty prefix or suffix", n + 1)));
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Binary pair file: `"RBSPAIR\0"`, u32 vocab_size, u64 record count, then per
/// record u32 prefix length, prefix tokens, u32 suffix length, suffix tokens.
/// Origins are not stored.
pub fn encode_pairs(pairs: &[PrefixSuffixPair], vocab_size: u32) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PAIR_MAGIC);
    out.extend_from_slice(&vocab_size.to_le_bytes());
    out.extend_from_slice(&(pairs.len() as u64).to_le_bytes());
    for p in pairs {
        for seq in [&p.prefix, &p.suffix] {
            out.extend_from_slice(&(seq.len() as u32).to_le_bytes());
            for t in &seq.tokens {
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_pairs(bytes: &[u8]) -> Result<Vec<PrefixSuffixPair>> {
    let mut r = ByteReader::new(bytes, "pair file");
    r.expect_magic(PAIR_MAGIC)?;
    let vocab_size = r.u32()?;
    let count = r.u64()? as usize;
    let mut pairs = Vec::with_capacity(count.min(1 << 20));
    for index in 0..count {
        let pn = r.u32()? as usize;
        let prefix = read_tokens(&mut r, pn, vocab_size)?;
        let sn = r.u32()? as usize;
        let suffix = read_tokens(&mut r, sn, vocab_size)?;
        pairs.push(PrefixSuffixPair {
            prefix: TokenSequence {
                tokens: prefix,
                vocab_size,
            },
            suffix: TokenSequence {
                tokens: suffix,
                vocab_size,
            },
            origin: PairOrigin {
                source: "binary".to_string(),
                index,
                offset: 0,
            },
        });
    }
    r.finish()?;
    Ok(pairs)
}

/// Loads pairs from either format, detected by the binary magic.
pub fn load_pairs(path: &Path, vocab_size: Option<u32>) -> Result<Vec<PrefixSuffixPair>> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(PAIR_MAGIC) {
        return decode_pairs(&bytes);
    }
    let text = String::from_utf8(bytes).map_err(|_| Error::format("pair file is neither binary nor UTF-8"))?;
    let vocab = match vocab_size {
        Some(v) => v,
        None => infer_vocab(&text)?,
    };
    pairs_from_jsonl(&text, vocab)
}

fn infer_vocab(text: &str) -> Result<u32> {
    let mut max = 0u32;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: PairRecord = serde_json::from_str(line)?;
        for &t in rec.prefix_tokens.iter().chain(&rec.suffix_tokens) {
            max = max.max(t);
        }
    }
    Ok(max + 1)
}

pub fn write_pairs(dir: &Path, pairs: &[PrefixSuffixPair], vocab_size: u32) -> Result<()> {
    write_atomic(&dir.join("pairs.jsonl"), pairs_to_jsonl(pairs).as_bytes())?;
    write_atomic(&dir.join("pairs.bin"), &encode_pairs(pairs, vocab_size))
}
