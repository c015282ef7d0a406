//! Byte-fallback subword tokenizer.
//!
//! Index layout: 4 reserved tokens, the 256 single bytes, then learned
//! multi-byte pieces. Encoding is greedy longest match, so every byte
//! string is representable and decoding is lossless.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;
pub const N_RESERVED: usize = 4;
const RESERVED_NAMES: [&str; N_RESERVED] = ["<bos>", "<eos>", "<pad>", "<unk>"];

#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    pieces: Vec<Vec<u8>>,
    lookup: HashMap<Vec<u8>, usize>,
    max_piece: usize,
}

impl Tokenizer {
    /// Tokenizer with only reserved and byte tokens.
    pub fn bytes_only() -> Self {
        Self::from_pieces(Vec::new())
    }

    fn from_pieces(learned: Vec<Vec<u8>>) -> Self {
        let mut pieces: Vec<Vec<u8>> = vec![Vec::new(); N_RESERVED];
        pieces.extend((0..=255u8).map(|b| vec![b]));
        pieces.extend(learned);
        let lookup = pieces
            .iter()
            .enumerate()
            .skip(N_RESERVED)
            .map(|(i, p)| (p.clone(), i))
            .collect();
        let max_piece = pieces.iter().map(Vec::len).max().unwrap_or(1);
        Self { pieces, lookup, max_piece }
    }

    /// Learns byte-pair merges over whitespace-delimited words (each word
    /// keeps its leading whitespace) until the vocabulary holds
    /// `vocab_size` entries or no pair occurs twice. Ties between equally
    /// frequent pairs go to the lexicographically smaller pair.
    pub fn train<S: AsRef<str>>(texts: &[S], vocab_size: usize) -> Result<Self> {
        if vocab_size < N_RESERVED + 256 {
            return Err(Error::config("tokenizer.vocab", "must be at least 260"));
        }
        let mut words: HashMap<Vec<u8>, usize> = HashMap::new();
        for t in texts {
            for w in split_words(t.as_ref()) {
                *words.entry(w.as_bytes().to_vec()).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<Vec<u8>>, usize)> = words
            .into_iter()
            .map(|(w, c)| (w.iter().map(|&b| vec![b]).collect(), c))
            .collect();
        words.sort();
        let mut learned: Vec<Vec<u8>> = Vec::new();
        let budget = vocab_size - N_RESERVED - 256;
        while learned.len() < budget {
            let mut counts: HashMap<(&[u8], &[u8]), usize> = HashMap::new();
            for (syms, c) in &words {
                for pair in syms.windows(2) {
                    *counts.entry((&pair[0], &pair[1])).or_default() += c;
                }
            }
            let best = counts
                .into_iter()
                .filter(|&(_, c)| c >= 2)
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
            let Some(((l, r), _)) = best else { break };
            let (l, r) = (l.to_vec(), r.to_vec());
            let merged: Vec<u8> = [l.as_slice(), r.as_slice()].concat();
            for (syms, _) in words.iter_mut() {
                let mut out = Vec::with_capacity(syms.len());
                let mut i = 0;
                while i < syms.len() {
                    if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                        out.push(merged.clone());
                        i += 2;
                    } else {
                        out.push(std::mem::take(&mut syms[i]));
                        i += 1;
                    }
                }
                *syms = out;
            }
            if !learned.contains(&merged) {
                learned.push(merged);
            }
        }
        Ok(Self::from_pieces(learned))
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    /// Greedy longest-match encoding without special tokens.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let bytes = text.as_bytes();
        let mut out = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            let longest = self.max_piece.min(bytes.len() - i);
            let (id, n) = (1..=longest)
                .rev()
                .find_map(|n| self.lookup.get(&bytes[i..i + n]).map(|&id| (id, n)))
                .expect("single bytes are always present");
            out.push(id);
            i += n;
        }
        out
    }

    /// Target sequence: encoding capped at `max_len - 1` tokens, then EOS.
    /// The flag reports truncation.
    pub fn tokenize(&self, text: &str, max_len: usize) -> (Vec<usize>, bool) {
        let mut ids = self.encode(text);
        let cap = max_len.saturating_sub(1);
        let truncated = ids.len() > cap;
        ids.truncate(cap);
        ids.push(EOS);
        (ids, truncated)
    }

    /// Concatenates piece bytes, stopping at EOS and skipping other
    /// reserved tokens. Invalid UTF-8 (possible from sampled sequences)
    /// is replaced lossily.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            if id == EOS {
                break;
            }
            if id >= N_RESERVED {
                if let Some(p) = self.pieces.get(id) {
                    bytes.extend_from_slice(p);
                }
            }
        }
        String::from_utf8(bytes).unwrap_or_else(|e| String::from_utf8_lossy(e.as_bytes()).into_owned())
    }

    /// Display form of one piece, as stored in the artifact file.
    pub fn piece_text(&self, id: usize) -> String {
        if id < N_RESERVED {
            return RESERVED_NAMES[id].to_string();
        }
        escape(&self.pieces[id])
    }

    /// One piece per line in index order, reserved tokens first.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for id in 0..self.pieces.len() {
            s.push_str(&self.piece_text(id));
            s.push('\n');
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        let bad = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };
        if lines.len() < N_RESERVED + 256 {
            return Err(bad(lines.len(), "tokenizer file shorter than the reserved and byte tokens"));
        }
        for (i, name) in RESERVED_NAMES.iter().enumerate() {
            if lines[i] != *name {
                return Err(bad(i + 1, "unexpected reserved token"));
            }
        }
        let mut learned = Vec::new();
        for (i, line) in lines.iter().enumerate().skip(N_RESERVED) {
            let piece = unescape(line).ok_or_else(|| bad(i + 1, "bad escape sequence"))?;
            let index = i - N_RESERVED;
            if index < 256 {
                if piece != [index as u8] {
                    return Err(bad(i + 1, "byte tokens out of order"));
                }
            } else {
                learned.push(piece);
            }
        }
        Ok(Self::from_pieces(learned))
    }
}

/// Splits into words that carry their leading whitespace.
fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev_space = true;
    for (i, c) in text.char_indices() {
        let space = c.is_whitespace();
        if space && !prev_space && i > start {
            out.push(&text[start..i]);
            start = i;
        }
        prev_space = space;
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

fn escape(bytes: &[u8]) -> String {
    let mut s = String::new();
    for &b in bytes {
        if b.is_ascii_graphic() && b != b'\\' {
            s.push(b as char);
        } else if b == b' ' {
            s.push_str("\\s");
        } else {
            s.push_str(&format!("\\x{b:02x}"));
        }
    }
    s
}

fn unescape(s: &str) -> Option<Vec<u8>> {
    let b = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        if b[i] != b'\\' {
            out.push(b[i]);
            i += 1;
            continue;
        }
        match b.get(i + 1)? {
            b's' => {
                out.push(b' ');
                i += 2;
            }
            b'x' => {
                let hex = std::str::from_utf8(b.get(i + 2..i + 4)?).ok()?;
                out.push(u8::from_str_radix(hex, 16).ok()?);
                i += 4;
            }
            _ => return None,
        }
    }
    Some(out)
}
