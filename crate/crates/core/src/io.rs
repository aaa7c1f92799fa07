//! Binary token-stream format and small file helpers.
//!
//! Token stream layout (little-endian):
//!
//! ```text
//! "RBSTOK1\0"  u32 vocab_size  u64 count  count x u32 token
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};

pub const TOKEN_MAGIC: &[u8; 8] = b"RBSTOK1\0";

/// Writes `bytes` to a temporary sibling of `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Little-endian cursor that reports truncation as a format error.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        ByteReader { buf, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format(format!("{}: truncated at byte {}", self.what, self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let got = self.take(magic.len())?;
        if got != magic {
            return Err(Error::format(format!("{}: bad magic {:?}", self.what, got)));
        }
        Ok(())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.remaining()
            )));
        }
        Ok(())
    }
}

/// Reads `n` u32 tokens and checks them against `vocab_size`.
pub(crate) fn read_tokens(r: &mut ByteReader<'_>, n: usize, vocab_size: u32) -> Result<Vec<u32>> {
    let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::format("token count overflow"))?)?;
    let tokens: Vec<u32> = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
        return Err(Error::format(format!("token id {bad} >= vocab_size {vocab_size}")));
    }
    Ok(tokens)
}

pub fn encode_token_stream(seq: &TokenSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * seq.len());
    out.extend_from_slice(TOKEN_MAGIC);
    out.extend_from_slice(&seq.vocab_size.to_le_bytes());
    out.extend_from_slice(&(seq.len() as u64).to_le_bytes());
    for t in &seq.tokens {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

pub fn decode_token_stream(bytes: &[u8]) -> Result<TokenSequence> {
    let mut r = ByteReader::new(bytes, "token stream");
    r.expect_magic(TOKEN_MAGIC)?;
    let vocab_size = r.u32()?;
    if vocab_size == 0 {
        return Err(Error::format("token stream: vocab_size 0"));
    }
    let count = r.u64()? as usize;
    let tokens = read_tokens(&mut r, count, vocab_size)?;
    r.finish()?;
    Ok(TokenSequence { tokens, vocab_size })
}

pub fn write_token_stream(path: &Path, seq: &TokenSequence) -> Result<()> {
    write_atomic(path, &encode_token_stream(seq))
}

pub fn read_token_stream(path: &Path) -> Result<TokenSequence> {
    decode_token_stream(&fs::read(path)?)
}

/// True when the file starts with the token-stream magic.
pub fn is_token_stream(path: &Path) -> bool {
    use std::io::Read;
    let mut head = [0u8; 8];
    fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut head))
        .map(|_| &head == TOKEN_MAGIC)
        .unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_exact() {
        let seq = TokenSequence::new(vec![1, 258], 300).unwrap();
        let bytes = encode_token_stream(&seq);
        let mut expect = b"RBSTOK1\0".to_vec();
        expect.extend_from_slice(&300u32.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&258u32.to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_corruption() {
        let seq = TokenSequence::new(vec![1, 2, 3], 4).unwrap();
        let bytes = encode_token_stream(&seq);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_token_stream(&bad), Err(Error::Format(_))));
        assert!(matches!(decode_token_stream(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut oob = bytes.clone();
        oob[20] = 9;
        assert!(matches!(decode_token_stream(&oob), Err(Error::Format(_))));
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bin");
        let seq = TokenSequence::new(vec![5; 10], 6).unwrap();
        write_token_stream(&p, &seq).unwrap();
        assert!(is_token_stream(&p));
        assert_eq!(read_token_stream(&p).unwrap(), seq);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    proptest! {
        #[test]
        fn round_trip(tokens in proptest::collection::vec(0u32..1000, 0..200)) {
            let seq = TokenSequence::new(tokens, 1000).unwrap();
            prop_assert_eq!(decode_token_stream(&encode_token_stream(&seq)).unwrap(), seq);
        }
    }
}
