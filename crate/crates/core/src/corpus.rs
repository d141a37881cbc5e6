//! Dataset ingestion, sample selection and the record join.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flops::FlopsEstimate;
use crate::metric::{CompensatedSum, SampleMeasurement};
use crate::tokenizer::{TokenSpan, TokenizerDef};

pub const DEFAULT_SEQ_LEN: u64 = 1024;

/// First 16 hex digits of the SHA-256 of the raw sample bytes.
pub fn sample_id(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(&digest[..8])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub sample_id: String,
    pub text: Vec<u8>,
    /// `path:line` for record files, the file path for directories.
    pub origin: String,
}

impl Sample {
    pub fn new(text: Vec<u8>, origin: impl Into<String>) -> Self {
        Sample {
            sample_id: sample_id(&text),
            text,
            origin: origin.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSpec {
    pub dataset_id: String,
    /// Newline-delimited JSON files with a `"text"` field, or directories
    /// holding one text file per sample.
    pub sources: Vec<PathBuf>,
    pub seq_len: u64,
    pub min_token_len: u64,
    pub sample_limit: Option<usize>,
}

impl DatasetSpec {
    pub fn new(dataset_id: impl Into<String>, sources: Vec<PathBuf>, seq_len: u64) -> Result<Self> {
        let spec = DatasetSpec {
            dataset_id: dataset_id.into(),
            sources,
            seq_len,
            min_token_len: seq_len,
            sample_limit: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 {
            return Err(Error::Pipeline(format!("seq_len must be at least 2, got {}", self.seq_len)));
        }
        if self.min_token_len < self.seq_len {
            return Err(Error::Pipeline(format!(
                "min_token_len {} is below seq_len {}",
                self.min_token_len, self.seq_len
            )));
        }
        if self.sources.is_empty() {
            return Err(Error::Pipeline(format!("dataset '{}' has no sources", self.dataset_id)));
        }
        Ok(())
    }

    /// Streams every sample of every source, in source order.
    pub fn samples(&self) -> impl Iterator<Item = Result<Sample>> + '_ {
        self.sources.iter().flat_map(|p| -> Box<dyn Iterator<Item = Result<Sample>>> {
            match open_source(p) {
                Ok(it) => it,
                Err(e) => Box::new(std::iter::once(Err(e))),
            }
        })
    }
}

/// Opens one source as a streaming sample reader.
pub fn open_source(path: &Path) -> Result<Box<dyn Iterator<Item = Result<Sample>>>> {
    let meta = std::fs::metadata(path).map_err(|e| Error::ingest(path, e))?;
    if meta.is_dir() {
        Ok(Box::new(DirectoryReader::open(path)?))
    } else {
        Ok(Box::new(JsonlReader::open(path)?))
    }
}

#[derive(Deserialize)]
struct TextRecord {
    text: String,
}

/// Reads `{"text": ...}` objects, one per line; blank lines are skipped.
pub struct JsonlReader {
    path: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
}

impl JsonlReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::ingest(path, e))?;
        Ok(JsonlReader {
            path: path.to_path_buf(),
            lines: BufReader::new(file).lines(),
            line_no: 0,
        })
    }
}

impl Iterator for JsonlReader {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::ingest(&self.path, format!("line {}: {e}", self.line_no)))),
            };
            if line.trim().is_empty() {
                continue;
            }
            let origin = format!("{}:{}", self.path.display(), self.line_no);
            return Some(
                serde_json::from_str::<TextRecord>(&line)
                    .map(|r| Sample::new(r.text.into_bytes(), origin))
                    .map_err(|e| Error::ingest(&self.path, format!("line {}: {e}", self.line_no))),
            );
        }
    }
}

/// Reads every regular file of a directory (not recursive) as raw bytes, in name order.
pub struct DirectoryReader {
    files: std::vec::IntoIter<PathBuf>,
}

impl DirectoryReader {
    pub fn open(dir: &Path) -> Result<Self> {
        let mut files = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| Error::ingest(dir, e))? {
            let entry = entry.map_err(|e| Error::ingest(dir, e))?;
            let kind = entry.file_type().map_err(|e| Error::ingest(entry.path(), e))?;
            if kind.is_file() {
                files.push(entry.path());
            }
        }
        files.sort();
        Ok(DirectoryReader {
            files: files.into_iter(),
        })
    }
}

impl Iterator for DirectoryReader {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        let path = self.files.next()?;
        Some(
            std::fs::read(&path)
                .map(|bytes| Sample::new(bytes, path.display().to_string()))
                .map_err(|e| Error::ingest(&path, e)),
        )
    }
}

/// A sample that qualified under every tokenizer, already truncated to L.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectedSample {
    pub sample_id: String,
    pub byte_len: usize,
    /// One span list per tokenizer, in registration order, each exactly L long.
    pub spans: Vec<Vec<TokenSpan>>,
}

const SELECT_BATCH: usize = 256;

/// Keeps samples whose token count reaches `min_token_len` under every
/// tokenizer, truncated to `seq_len`, sorted by `sample_id`.
///
/// Tokens never span fewer than one byte, so samples shorter than
/// `min_token_len` bytes are dropped before tokenizing. Repeated texts share
/// a `sample_id`; only the first occurrence is kept.
pub fn select_samples(spec: &DatasetSpec, tokenizers: &[&TokenizerDef]) -> Result<Vec<SelectedSample>> {
    spec.validate()?;
    if tokenizers.is_empty() {
        return Err(Error::Pipeline("select_samples needs at least one tokenizer".into()));
    }
    let min_bytes = spec.min_token_len;
    let mut seen = BTreeSet::new();
    let mut selected = Vec::new();
    let mut batch = Vec::with_capacity(SELECT_BATCH);

    let flush = |batch: &mut Vec<Sample>, selected: &mut Vec<SelectedSample>| -> Result<()> {
        let results: Vec<Result<Option<SelectedSample>>> = batch
            .par_iter()
            .map(|s| qualify(s, tokenizers, spec.min_token_len, spec.seq_len))
            .collect();
        batch.clear();
        for r in results {
            if let Some(s) = r? {
                selected.push(s);
            }
        }
        Ok(())
    };

    for sample in spec.samples() {
        let sample = sample?;
        if (sample.text.len() as u64) < min_bytes {
            continue;
        }
        if !seen.insert(sample.sample_id.clone()) {
            warn!("duplicate sample {} at {} ignored", sample.sample_id, sample.origin);
            continue;
        }
        batch.push(sample);
        if batch.len() == SELECT_BATCH {
            flush(&mut batch, &mut selected)?;
        }
    }
    flush(&mut batch, &mut selected)?;

    selected.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    if let Some(limit) = spec.sample_limit {
        selected.truncate(limit);
    }
    if selected.is_empty() {
        warn!(
            "dataset '{}': no sample reaches {} tokens under every tokenizer",
            spec.dataset_id, spec.min_token_len
        );
    }
    Ok(selected)
}

fn qualify(sample: &Sample, tokenizers: &[&TokenizerDef], min_tokens: u64, seq_len: u64) -> Result<Option<SelectedSample>> {
    let mut spans = Vec::with_capacity(tokenizers.len());
    for t in tokenizers {
        let s = t.encode(&sample.text)?;
        if (s.len() as u64) < min_tokens {
            return Ok(None);
        }
        spans.push(truncate(&s, seq_len)?);
    }
    Ok(Some(SelectedSample {
        sample_id: sample.sample_id.clone(),
        byte_len: sample.text.len(),
        spans,
    }))
}

pub fn truncate(spans: &[TokenSpan], seq_len: u64) -> Result<Vec<TokenSpan>> {
    let l = usize::try_from(seq_len).map_err(|_| Error::Pipeline(format!("seq_len {seq_len} too large")))?;
    if spans.len() < l {
        return Err(Error::Pipeline(format!(
            "sample has {} tokens, fewer than seq_len {seq_len}",
            spans.len()
        )));
    }
    Ok(spans[..l].to_vec())
}

/// Per-token NLL for one sample under one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenNllRecord {
    pub sample_id: String,
    pub model_id: String,
    pub token_ids: Vec<u32>,
    /// `-log2 p` of tokens 2..L.
    pub nll_bits: Vec<f64>,
    pub vocab_size_used: u64,
}

impl TokenNllRecord {
    /// Checks the record's own invariants, and its vocabulary width when known.
    pub fn validate(&self, vocab_size: Option<usize>) -> Result<()> {
        let who = || format!("record {}/{}", self.model_id, self.sample_id);
        if self.token_ids.is_empty() || self.nll_bits.len() != self.token_ids.len() - 1 {
            return Err(Error::Integrity(format!(
                "{}: {} nll values for {} tokens",
                who(),
                self.nll_bits.len(),
                self.token_ids.len()
            )));
        }
        if let Some(i) = self.nll_bits.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Integrity(format!(
                "{}: nll_bits[{i}] = {} is not a finite non-negative number",
                who(),
                self.nll_bits[i]
            )));
        }
        if let Some(v) = vocab_size {
            if self.vocab_size_used != v as u64 {
                return Err(Error::Integrity(format!(
                    "{}: vocab_size_used {} differs from tokenizer vocab size {v}",
                    who(),
                    self.vocab_size_used
                )));
            }
            if let Some(i) = self.token_ids.iter().position(|&t| t as usize >= v) {
                return Err(Error::Integrity(format!(
                    "{}: token_ids[{i}] = {} outside vocab of {v}",
                    who(),
                    self.token_ids[i]
                )));
            }
        }
        Ok(())
    }
}

/// Streams records from a newline-delimited file; blank lines are skipped.
pub struct RecordReader {
    path: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
}

impl RecordReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::ingest(path, e))?;
        Ok(RecordReader {
            path: path.to_path_buf(),
            lines: BufReader::new(file).lines(),
            line_no: 0,
        })
    }
}

impl Iterator for RecordReader {
    type Item = Result<TokenNllRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::ingest(&self.path, e))),
            };
            if line.trim().is_empty() {
                continue;
            }
            return Some(parse_record(&line).map_err(|e| match e {
                Error::Parse { message, .. } => {
                    Error::parse(format!("{}:{}", self.path.display(), self.line_no), message)
                }
                other => other,
            }));
        }
    }
}

pub fn parse_record(line: &str) -> Result<TokenNllRecord> {
    let rec: TokenNllRecord = serde_json::from_str(line).map_err(|e| Error::parse(format!("column {}", e.column()), e.to_string()))?;
    rec.validate(None)?;
    Ok(rec)
}

pub fn read_records(path: &Path) -> Result<Vec<TokenNllRecord>> {
    RecordReader::open(path)?.collect()
}

pub fn write_records<W: Write>(mut out: W, records: &[TokenNllRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Combines a truncated sample with its record into the per-sample sums.
pub fn join_measurement(spans: &[TokenSpan], rec: &TokenNllRecord, flops: &FlopsEstimate) -> Result<SampleMeasurement> {
    rec.validate(None)?;
    let ids = spans.iter().map(|s| s.token_id);
    if let Some((pos, (want, got))) = ids.zip(rec.token_ids.iter()).enumerate().find(|(_, (a, b))| a != *b) {
        return Err(Error::Integrity(format!(
            "sample {} model {}: token mismatch at position {pos} (tokenizer {want}, record {got})",
            rec.sample_id, rec.model_id
        )));
    }
    if spans.len() != rec.token_ids.len() {
        return Err(Error::Integrity(format!(
            "sample {} model {}: token mismatch at position {} ({} tokens after truncation, record has {})",
            rec.sample_id,
            rec.model_id,
            spans.len().min(rec.token_ids.len()),
            spans.len(),
            rec.token_ids.len()
        )));
    }
    let seq_len = spans.len() as u64;
    let text_bits = 8 * spans[1..].iter().map(|s| u64::from(s.byte_len)).sum::<u64>();
    let nll: CompensatedSum = rec.nll_bits.iter().copied().collect();
    SampleMeasurement::new(
        rec.sample_id.clone(),
        seq_len,
        text_bits,
        nll.value(),
        flops.total_excluding_first(seq_len)?,
    )
}

/// Describes how a record file was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub dataset_id: String,
    pub seq_len: u64,
    pub tokenizer_digest: String,
    pub vocab_size: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_digest: Option<String>,
    /// Free-form producer settings (precision, batch size, ...).
    #[serde(default)]
    pub adapter: BTreeMap<String, serde_json::Value>,
}

impl RunManifest {
    pub fn new(dataset_id: &str, seq_len: u64, tokenizer: &TokenizerDef) -> Self {
        RunManifest {
            dataset_id: dataset_id.to_string(),
            seq_len,
            tokenizer_digest: tokenizer.digest(),
            vocab_size: tokenizer.vocab_size() as u64,
            model_id: None,
            model_digest: None,
            adapter: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ingest(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(format!("{}:{}", path.display(), e.line()), e.to_string()))
    }

    /// Fails unless the manifest was produced for this dataset, length and tokenizer.
    pub fn check(&self, dataset_id: &str, seq_len: u64, tokenizer: &TokenizerDef) -> Result<()> {
        if self.dataset_id != dataset_id {
            return Err(Error::Integrity(format!(
                "manifest dataset '{}' differs from '{dataset_id}'",
                self.dataset_id
            )));
        }
        if self.seq_len != seq_len {
            return Err(Error::Integrity(format!("manifest seq_len {} differs from {seq_len}", self.seq_len)));
        }
        let digest = tokenizer.digest();
        if self.tokenizer_digest != digest {
            return Err(Error::Integrity(format!(
                "manifest tokenizer digest {} differs from {digest}",
                self.tokenizer_digest
            )));
        }
        if self.vocab_size != tokenizer.vocab_size() as u64 {
            return Err(Error::Integrity(format!(
                "manifest vocab size {} differs from {}",
                self.vocab_size,
                tokenizer.vocab_size()
            )));
        }
        Ok(())
    }
}
