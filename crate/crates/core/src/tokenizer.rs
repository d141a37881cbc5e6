//! Byte-level BPE tokenization with per-token byte attribution.
//!
//! Two definition formats load into [`TokenizerDef`]: the combined JSON
//! document used by most published models (`model.vocab`, `model.merges`,
//! `added_tokens`), and a two-file form with one vocab token per line (line
//! number = id) and one `left right` merge per line.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::path::Path;

use regex::bytes::Regex;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// The printable alphabet byte-level tokenizers use in place of raw bytes.
pub fn byte_alphabet() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut next = 256u32;
    for b in 0..=255u8 {
        let printable = matches!(b, b'!'..=b'~' | 0xA1..=0xAC | 0xAE..=0xFF);
        table[b as usize] = if printable {
            char::from(b)
        } else {
            let c = char::from_u32(next).expect("valid scalar");
            next += 1;
            c
        };
    }
    table
}

fn inverse_alphabet() -> HashMap<char, u8> {
    byte_alphabet()
        .iter()
        .enumerate()
        .map(|(b, &c)| (c, b as u8))
        .collect()
}

/// Maps raw bytes to their byte-level string form.
pub fn bytes_to_symbols(bytes: &[u8]) -> String {
    let alphabet = byte_alphabet();
    bytes.iter().map(|&b| alphabet[b as usize]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenSpan {
    pub token_id: u32,
    pub byte_len: u32,
}

#[derive(Debug, Clone)]
pub struct TokenizerDef {
    tokens: Vec<String>,
    vocab: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    byte_level: bool,
    special_tokens: BTreeSet<u32>,
    token_bytes: Vec<Vec<u8>>,
    /// (left, right) -> (rank, merged id)
    merge_index: HashMap<(u32, u32), (u32, u32)>,
    byte_ids: Vec<u32>,
    pretokenizer: Option<Regex>,
}

impl TokenizerDef {
    /// Builds and validates a definition. `tokens[i]` is the string of id `i`.
    pub fn new(
        tokens: Vec<String>,
        merges: Vec<(String, String)>,
        byte_level: bool,
        special_tokens: BTreeSet<u32>,
    ) -> Result<Self> {
        let mut vocab = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if let Some(prev) = vocab.insert(tok.clone(), id as u32) {
                return Err(Error::parse(
                    format!("token id {id}"),
                    format!("token {tok:?} duplicates id {prev}"),
                ));
            }
        }
        for &s in &special_tokens {
            if s as usize >= tokens.len() {
                return Err(Error::parse(
                    format!("special token {s}"),
                    "special token id outside vocabulary",
                ));
            }
        }

        let inverse = inverse_alphabet();
        let token_bytes: Vec<Vec<u8>> = tokens
            .iter()
            .enumerate()
            .map(|(id, tok)| {
                if special_tokens.contains(&(id as u32)) {
                    Vec::new()
                } else if byte_level {
                    tok.chars()
                        .map(|c| inverse.get(&c).copied())
                        .collect::<Option<Vec<u8>>>()
                        .unwrap_or_else(|| tok.as_bytes().to_vec())
                } else {
                    tok.as_bytes().to_vec()
                }
            })
            .collect();

        let mut merge_index = HashMap::with_capacity(merges.len());
        for (rank, (left, right)) in merges.iter().enumerate() {
            let location = format!("merge {rank}");
            let lookup = |s: &str| {
                vocab.get(s).copied().ok_or_else(|| {
                    Error::parse(&location, format!("merge references unknown token {s:?}"))
                })
            };
            let l = lookup(left)?;
            let r = lookup(right)?;
            let product = format!("{left}{right}");
            let m = vocab.get(&product).copied().ok_or_else(|| {
                Error::parse(&location, format!("merge product {product:?} missing from vocab"))
            })?;
            // Later duplicates of a merge never fire; keep the first rank.
            merge_index.entry((l, r)).or_insert((rank as u32, m));
        }

        let byte_ids = if byte_level {
            let alphabet = byte_alphabet();
            let mut ids = Vec::with_capacity(256);
            for (b, c) in alphabet.iter().enumerate() {
                let id = vocab.get(&c.to_string()).copied().ok_or_else(|| {
                    Error::parse(
                        "vocab",
                        format!("byte-level vocab lacks the symbol for byte 0x{b:02x} ({c:?})"),
                    )
                })?;
                ids.push(id);
            }
            ids
        } else {
            Vec::new()
        };

        Ok(TokenizerDef {
            tokens,
            vocab,
            merges,
            byte_level,
            special_tokens,
            token_bytes,
            merge_index,
            byte_ids,
            pretokenizer: None,
        })
    }

    /// A byte-level vocabulary of exactly 256 tokens where id == byte value.
    pub fn byte_identity() -> Self {
        let tokens = byte_alphabet().iter().map(|c| c.to_string()).collect();
        Self::new(tokens, Vec::new(), true, BTreeSet::new()).expect("byte alphabet is valid")
    }

    /// Splits input into pieces before merging; BPE never crosses a piece boundary.
    /// Bytes between matches form their own pieces, so encoding stays lossless.
    pub fn with_pretokenizer(mut self, pattern: &str) -> Result<Self> {
        let re = Regex::new(pattern)
            .map_err(|e| Error::parse("pre-tokenizer pattern", e.to_string()))?;
        self.pretokenizer = Some(re);
        Ok(self)
    }

    /// Parses the combined JSON tokenizer document.
    pub fn from_json(text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text).map_err(|e| {
            Error::parse(format!("line {} column {}", e.line(), e.column()), e.to_string())
        })?;
        let model = root
            .get("model")
            .ok_or_else(|| Error::parse("model", "missing 'model' object"))?;
        if let Some(kind) = model.get("type").and_then(Value::as_str) {
            if kind != "BPE" {
                return Err(Error::parse("model.type", format!("unsupported model type {kind:?}")));
            }
        }
        let vocab_obj = model
            .get("vocab")
            .and_then(Value::as_object)
            .ok_or_else(|| Error::parse("model.vocab", "missing or not an object"))?;

        let mut by_id: HashMap<u32, String> = HashMap::with_capacity(vocab_obj.len());
        let mut insert = |id: u32, tok: &str, loc: String| -> Result<()> {
            match by_id.get(&id) {
                Some(existing) if existing == tok => Ok(()),
                Some(existing) => Err(Error::parse(
                    loc,
                    format!("id {id} assigned to both {existing:?} and {tok:?}"),
                )),
                None => {
                    by_id.insert(id, tok.to_string());
                    Ok(())
                }
            }
        };
        for (tok, id) in vocab_obj {
            let id = id
                .as_u64()
                .and_then(|v| u32::try_from(v).ok())
                .ok_or_else(|| Error::parse(format!("model.vocab[{tok:?}]"), "id must be a non-negative integer"))?;
            insert(id, tok, format!("model.vocab[{tok:?}]"))?;
        }

        let mut special = BTreeSet::new();
        if let Some(added) = root.get("added_tokens").and_then(Value::as_array) {
            for (i, entry) in added.iter().enumerate() {
                let loc = format!("added_tokens[{i}]");
                let id = entry
                    .get("id")
                    .and_then(Value::as_u64)
                    .and_then(|v| u32::try_from(v).ok())
                    .ok_or_else(|| Error::parse(&loc, "missing integer 'id'"))?;
                let content = entry
                    .get("content")
                    .and_then(Value::as_str)
                    .ok_or_else(|| Error::parse(&loc, "missing string 'content'"))?;
                insert(id, content, loc)?;
                if entry.get("special").and_then(Value::as_bool).unwrap_or(false) {
                    special.insert(id);
                }
            }
        }

        let n = by_id.len();
        let mut tokens = Vec::with_capacity(n);
        for id in 0..n as u32 {
            let tok = by_id.remove(&id).ok_or_else(|| {
                Error::parse("model.vocab", format!("ids are not dense: id {id} missing (vocab size {n})"))
            })?;
            tokens.push(tok);
        }

        let mut merges = Vec::new();
        if let Some(list) = model.get("merges").and_then(Value::as_array) {
            for (i, m) in list.iter().enumerate() {
                let loc = format!("model.merges[{i}]");
                let pair = match m {
                    Value::String(s) => s
                        .split_once(' ')
                        .map(|(a, b)| (a.to_string(), b.to_string()))
                        .ok_or_else(|| Error::parse(&loc, format!("expected 'left right', got {s:?}")))?,
                    Value::Array(parts) if parts.len() == 2 => {
                        let get = |v: &Value| {
                            v.as_str()
                                .map(str::to_string)
                                .ok_or_else(|| Error::parse(&loc, "merge parts must be strings"))
                        };
                        (get(&parts[0])?, get(&parts[1])?)
                    }
                    _ => return Err(Error::parse(&loc, "merge must be a string or a 2-element array")),
                };
                merges.push(pair);
            }
        }

        let byte_level = mentions_byte_level(root.get("pre_tokenizer"))
            || mentions_byte_level(root.get("decoder"));
        Self::new(tokens, merges, byte_level, special)
    }

    /// Parses the two-file form. Lines starting with `#version` in the merge file are skipped.
    pub fn from_vocab_merges(vocab_text: &str, merges_text: &str, byte_level: bool) -> Result<Self> {
        let tokens: Vec<String> = vocab_text.lines().map(str::to_string).collect();
        let mut merges = Vec::new();
        for (lineno, line) in merges_text.lines().enumerate() {
            if line.is_empty() || line.starts_with("#version") {
                continue;
            }
            let (a, b) = line.split_once(' ').ok_or_else(|| {
                Error::parse(format!("merges line {}", lineno + 1), format!("expected 'left right', got {line:?}"))
            })?;
            merges.push((a.to_string(), b.to_string()));
        }
        Self::new(tokens, merges, byte_level, BTreeSet::new()).map_err(|e| match e {
            Error::Parse { location, message } if location.starts_with("token id ") => Error::Parse {
                location: format!("vocab line {}", location["token id ".len()..].parse::<usize>().unwrap_or(0) + 1),
                message,
            },
            Error::Parse { location, message } if location.starts_with("merge ") => {
                let rank: usize = location["merge ".len()..].parse().unwrap_or(0);
                Error::Parse {
                    location: format!("merge entry {}", rank + 1),
                    message,
                }
            }
            other => other,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_byte_level(&self) -> bool {
        self.byte_level
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn special_tokens(&self) -> &BTreeSet<u32> {
        &self.special_tokens
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.vocab.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Bytes this token contributes to decoded text; empty for special tokens.
    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.token_bytes.get(id as usize).map(Vec::as_slice)
    }

    /// Hex SHA-256 of the vocabulary, merges and flags.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(if self.byte_level { b"byte-level\n" as &[u8] } else { b"plain\n" });
        for tok in &self.tokens {
            h.update((tok.len() as u64).to_le_bytes());
            h.update(tok.as_bytes());
        }
        h.update(b"merges\n");
        for (a, b) in &self.merges {
            h.update((a.len() as u64).to_le_bytes());
            h.update(a.as_bytes());
            h.update((b.len() as u64).to_le_bytes());
            h.update(b.as_bytes());
        }
        for s in &self.special_tokens {
            h.update(s.to_le_bytes());
        }
        if let Some(re) = &self.pretokenizer {
            h.update(b"pre\n");
            h.update(re.as_str().as_bytes());
        }
        hex::encode(h.finalize())
    }

    fn pieces<'a>(&self, text: &'a [u8]) -> Vec<&'a [u8]> {
        let Some(re) = &self.pretokenizer else {
            return vec![text];
        };
        let mut out = Vec::new();
        let mut last = 0;
        for m in re.find_iter(text) {
            if m.start() > last {
                out.push(&text[last..m.start()]);
            }
            if m.end() > m.start() {
                out.push(m.as_bytes());
            }
            last = m.end();
        }
        if last < text.len() {
            out.push(&text[last..]);
        }
        out
    }

    fn initial_symbols(&self, piece: &[u8]) -> Result<Vec<u32>> {
        if self.byte_level {
            return Ok(piece.iter().map(|&b| self.byte_ids[b as usize]).collect());
        }
        let s = std::str::from_utf8(piece)
            .map_err(|e| Error::Coverage(format!("input is not valid UTF-8: {e}")))?;
        let mut buf = [0u8; 4];
        s.chars()
            .map(|c| {
                self.vocab
                    .get(c.encode_utf8(&mut buf) as &str)
                    .copied()
                    .ok_or_else(|| Error::Coverage(format!("character {c:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Tokenizes `text`. Merges apply lowest rank first, leftmost first among equal ranks.
    pub fn encode(&self, text: &[u8]) -> Result<Vec<TokenSpan>> {
        let mut ids = Vec::with_capacity(text.len());
        for piece in self.pieces(text) {
            let symbols = self.initial_symbols(piece)?;
            ids.extend(self.merge_symbols(symbols));
        }
        Ok(ids
            .into_iter()
            .map(|id| TokenSpan {
                token_id: id,
                byte_len: self.token_bytes[id as usize].len() as u32,
            })
            .collect())
    }

    pub fn encode_ids(&self, text: &[u8]) -> Result<Vec<u32>> {
        Ok(self.encode(text)?.into_iter().map(|s| s.token_id).collect())
    }

    fn merge_symbols(&self, ids: Vec<u32>) -> Vec<u32> {
        let n = ids.len();
        if n < 2 || self.merge_index.is_empty() {
            return ids;
        }
        const NONE: usize = usize::MAX;
        let mut id = ids;
        let mut prev: Vec<usize> = (0..n).map(|i| if i == 0 { NONE } else { i - 1 }).collect();
        let mut next: Vec<usize> = (0..n).map(|i| if i + 1 == n { NONE } else { i + 1 }).collect();
        let mut alive = vec![true; n];

        let mut heap = BinaryHeap::new();
        for i in 0..n - 1 {
            if let Some(&(rank, _)) = self.merge_index.get(&(id[i], id[i + 1])) {
                heap.push(Reverse((rank, i, id[i], id[i + 1])));
            }
        }

        while let Some(Reverse((rank, pos, left, right))) = heap.pop() {
            let nxt = next[pos];
            if !alive[pos] || nxt == NONE || id[pos] != left || id[nxt] != right {
                continue;
            }
            let (r, merged) = self.merge_index[&(left, right)];
            debug_assert_eq!(r, rank);
            id[pos] = merged;
            alive[nxt] = false;
            let after = next[nxt];
            next[pos] = after;
            if after != NONE {
                prev[after] = pos;
                if let Some(&(rk, _)) = self.merge_index.get(&(merged, id[after])) {
                    heap.push(Reverse((rk, pos, merged, id[after])));
                }
            }
            let before = prev[pos];
            if before != NONE {
                if let Some(&(rk, _)) = self.merge_index.get(&(id[before], merged)) {
                    heap.push(Reverse((rk, before, id[before], merged)));
                }
            }
        }

        let mut out = Vec::new();
        let mut cur = 0;
        while cur != NONE {
            out.push(id[cur]);
            cur = next[cur];
        }
        out
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for (pos, &id) in ids.iter().enumerate() {
            let bytes = self.token_bytes(id).ok_or_else(|| {
                Error::Coverage(format!("token id {id} at position {pos} is outside the vocabulary"))
            })?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    pub fn decode_spans(&self, spans: &[TokenSpan]) -> Result<Vec<u8>> {
        let ids: Vec<u32> = spans.iter().map(|s| s.token_id).collect();
        self.decode(&ids)
    }
}

fn mentions_byte_level(v: Option<&Value>) -> bool {
    match v {
        Some(Value::Object(map)) => {
            map.get("type").and_then(Value::as_str) == Some("ByteLevel")
                || map.values().any(|v| mentions_byte_level(Some(v)))
        }
        Some(Value::Array(items)) => items.iter().any(|v| mentions_byte_level(Some(v))),
        _ => false,
    }
}

/// Reads either a combined `.json` definition or a `vocab` + `merges` file pair.
pub fn load_tokenizer(path: &Path, merges: Option<&Path>, byte_level: bool) -> Result<TokenizerDef> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::ingest(path, e))?;
    match merges {
        Some(mpath) => {
            let mtext = std::fs::read_to_string(mpath).map_err(|e| Error::ingest(mpath, e))?;
            TokenizerDef::from_vocab_merges(&text, &mtext, byte_level)
        }
        None => TokenizerDef::from_json(&text),
    }
}

/// Average text size per token in bits: `8 * bytes / tokens` over the counted spans.
pub fn bits_per_token(spans: &[TokenSpan], skip_first: bool) -> Result<f64> {
    let counted = if skip_first {
        if spans.len() < 2 {
            return Err(Error::Domain(format!(
                "need at least 2 spans when skipping the first, got {}",
                spans.len()
            )));
        }
        &spans[1..]
    } else {
        if spans.is_empty() {
            return Err(Error::Domain("need at least 1 span".into()));
        }
        spans
    };
    let bytes: u64 = counted.iter().map(|s| u64::from(s.byte_len)).sum();
    Ok(8.0 * bytes as f64 / counted.len() as f64)
}
