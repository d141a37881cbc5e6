//! Information-capacity formulas and their aggregation over samples.
//!
//! Every logarithm here is base 2: NLL arrives in bits and the FLOPs
//! denominator is `log2` of an absolute FLOP count (e.g. `1.074e9`, not
//! giga-FLOPs).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Neumaier's variant of Kahan summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = CompensatedSum::new();
        for v in iter {
            acc.add(v);
        }
        acc
    }
}

fn check_finite(name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be finite, got {value}")))
    }
}

fn log2_flops(flops: f64) -> Result<f64> {
    check_finite("flops", flops)?;
    if flops <= 1.0 {
        return Err(Error::Domain(format!(
            "flops must exceed 1 so that log2(flops) > 0, got {flops}"
        )));
    }
    Ok(flops.log2())
}

/// Whole-sample form: `(text_bits - nll_bits_total) / log2(flops_total)`.
pub fn ic_raw(text_bits: f64, nll_bits_total: f64, flops_total: f64) -> Result<f64> {
    check_finite("text_bits", text_bits)?;
    check_finite("nll_bits_total", nll_bits_total)?;
    let denom = log2_flops(flops_total)?;
    Ok((text_bits - nll_bits_total) / denom)
}

/// Per-token form without bias.
pub fn ic_per_token(mean_text_bits: f64, mean_nll_bits: f64, mean_flops: f64) -> Result<f64> {
    ic_biased(mean_text_bits, mean_nll_bits, mean_flops, 0.0)
}

/// Per-token form with a dataset bias `b` (bits/token) added to the gain.
pub fn ic_biased(
    mean_text_bits: f64,
    mean_nll_bits: f64,
    mean_flops: f64,
    bias: f64,
) -> Result<f64> {
    check_finite("mean_text_bits", mean_text_bits)?;
    check_finite("mean_nll_bits", mean_nll_bits)?;
    check_finite("bias", bias)?;
    let denom = log2_flops(mean_flops)?;
    Ok((mean_text_bits - mean_nll_bits + bias) / denom)
}

/// Per-sample quantities with the first token already excluded from every sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeasurement {
    pub sample_id: String,
    /// Sequence length L, including the excluded first token.
    pub token_count: u64,
    /// UTF-8 bytes x 8 of tokens 2..L.
    pub text_bits: u64,
    pub nll_bits_total: f64,
    pub flops_total: f64,
}

impl SampleMeasurement {
    pub fn new(
        sample_id: impl Into<String>,
        token_count: u64,
        text_bits: u64,
        nll_bits_total: f64,
        flops_total: f64,
    ) -> Result<Self> {
        let m = SampleMeasurement {
            sample_id: sample_id.into(),
            token_count,
            text_bits,
            nll_bits_total,
            flops_total,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.sample_id;
        if self.token_count < 2 {
            return Err(Error::Domain(format!(
                "sample {id}: token_count must be at least 2, got {}",
                self.token_count
            )));
        }
        if self.text_bits == 0 || self.text_bits % 8 != 0 {
            return Err(Error::Domain(format!(
                "sample {id}: text_bits must be a positive multiple of 8, got {}",
                self.text_bits
            )));
        }
        if !(self.nll_bits_total.is_finite() && self.nll_bits_total >= 0.0) {
            return Err(Error::Domain(format!(
                "sample {id}: nll_bits_total must be finite and non-negative, got {}",
                self.nll_bits_total
            )));
        }
        if !(self.flops_total.is_finite() && self.flops_total > 0.0) {
            return Err(Error::Domain(format!(
                "sample {id}: flops_total must be finite and positive, got {}",
                self.flops_total
            )));
        }
        Ok(())
    }

    /// Number of predicted tokens, L - 1.
    pub fn predicted_tokens(&self) -> u64 {
        self.token_count - 1
    }

    pub fn mean_text_bits(&self) -> f64 {
        self.text_bits as f64 / self.predicted_tokens() as f64
    }

    pub fn mean_nll_bits(&self) -> f64 {
        self.nll_bits_total / self.predicted_tokens() as f64
    }

    pub fn mean_flops(&self) -> f64 {
        self.flops_total / self.predicted_tokens() as f64
    }
}

/// Dataset id to bias (bits per token). Keys are matched case-insensitively.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasTable {
    entries: BTreeMap<String, f64>,
    default: f64,
}

impl Default for BiasTable {
    fn default() -> Self {
        Self::seeded()
    }
}

impl BiasTable {
    /// Reserved key in config files that sets the fallback bias.
    pub const DEFAULT_KEY: &'static str = "default";

    pub fn empty() -> Self {
        BiasTable {
            entries: BTreeMap::new(),
            default: 0.0,
        }
    }

    /// The published per-dataset biases.
    pub fn seeded() -> Self {
        let mut table = Self::empty();
        for (id, b) in [
            ("mixed", -24.0),
            ("finepdfs-en", -27.0),
            ("ch-fineweb-edu", -18.7),
            ("fineweb-edu", -27.0),
            ("nextcoder", -27.0),
        ] {
            table.insert(id, b);
        }
        table
    }

    pub fn insert(&mut self, dataset_id: &str, bias: f64) {
        self.entries.insert(dataset_id.to_ascii_lowercase(), bias);
    }

    pub fn set_default(&mut self, bias: f64) {
        self.default = bias;
    }

    pub fn default_bias(&self) -> f64 {
        self.default
    }

    pub fn get(&self, dataset_id: &str) -> Option<f64> {
        self.entries.get(&dataset_id.to_ascii_lowercase()).copied()
    }

    /// Bias for `dataset_id`, falling back to the default with a warning.
    pub fn bias_for(&self, dataset_id: &str) -> f64 {
        match self.get(dataset_id) {
            Some(b) => b,
            None => {
                log::warn!(
                    "no bias configured for dataset '{dataset_id}', using default {}",
                    self.default
                );
                self.default
            }
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, f64)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Applies `key=value` lines on top of this table. `#` starts a comment.
    pub fn merge_config(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let location = format!("line {}", lineno + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(&location, format!("expected key=value, got '{line}'")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::parse(&location, "empty dataset id"));
            }
            let bias: f64 = value
                .trim()
                .parse()
                .map_err(|e| Error::parse(&location, format!("bad bias value '{}': {e}", value.trim())))?;
            if !bias.is_finite() {
                return Err(Error::parse(&location, "bias must be finite"));
            }
            if key.eq_ignore_ascii_case(Self::DEFAULT_KEY) {
                self.default = bias;
            } else {
                self.insert(key, bias);
            }
        }
        Ok(())
    }

    pub fn parse_config(text: &str) -> Result<Self> {
        let mut table = Self::empty();
        table.merge_config(text)?;
        Ok(table)
    }

    pub fn to_config(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}={}", Self::DEFAULT_KEY, self.default);
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

/// Pooled result for one model on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcResult {
    pub model_id: String,
    pub dataset_id: String,
    pub mean_text_bits_per_token: f64,
    pub mean_nll_bits_per_token: f64,
    pub mean_flops_per_token: f64,
    pub bias: f64,
    pub ic_unbiased: f64,
    pub ic: f64,
    pub sample_count: u64,
}

impl IcResult {
    /// Recomputes `ic` from the stored means and bias.
    pub fn recompute_ic(&self) -> Result<f64> {
        ic_biased(
            self.mean_text_bits_per_token,
            self.mean_nll_bits_per_token,
            self.mean_flops_per_token,
            self.bias,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleIc {
    pub model_id: String,
    pub dataset_id: String,
    pub sample_id: String,
    pub ic_unbiased: f64,
    pub ic: f64,
}

/// IC of a single sample using that sample's own per-token means.
pub fn sample_ic(
    sample: &SampleMeasurement,
    model_id: &str,
    dataset_id: &str,
    bias: f64,
) -> Result<SampleIc> {
    sample.validate()?;
    let (t, n, f) = (sample.mean_text_bits(), sample.mean_nll_bits(), sample.mean_flops());
    Ok(SampleIc {
        model_id: model_id.to_string(),
        dataset_id: dataset_id.to_string(),
        sample_id: sample.sample_id.clone(),
        ic_unbiased: ic_per_token(t, n, f)?,
        ic: ic_biased(t, n, f, bias)?,
    })
}

/// Pools all samples: sums are divided once by the total predicted-token count.
///
/// Summation runs in `sample_id` order so the result does not depend on the
/// order (or parallel schedule) in which samples were produced.
pub fn aggregate(
    samples: &[SampleMeasurement],
    model_id: &str,
    dataset_id: &str,
    bias_table: &BiasTable,
) -> Result<IcResult> {
    if samples.is_empty() {
        return Err(Error::Empty(format!(
            "no samples to aggregate for model '{model_id}' on dataset '{dataset_id}'"
        )));
    }
    let mut ordered: Vec<&SampleMeasurement> = samples.iter().collect();
    ordered.sort_by(|a, b| {
        a.sample_id
            .cmp(&b.sample_id)
            .then(a.token_count.cmp(&b.token_count))
            .then(a.text_bits.cmp(&b.text_bits))
            .then(a.nll_bits_total.total_cmp(&b.nll_bits_total))
            .then(a.flops_total.total_cmp(&b.flops_total))
    });

    let mut tokens: u64 = 0;
    let mut text_bits: u64 = 0;
    let mut nll = CompensatedSum::new();
    let mut flops = CompensatedSum::new();
    for s in ordered {
        s.validate()?;
        tokens += s.predicted_tokens();
        text_bits += s.text_bits;
        nll.add(s.nll_bits_total);
        flops.add(s.flops_total);
    }
    let denom = tokens as f64;
    let mean_text = text_bits as f64 / denom;
    let mean_nll = nll.value() / denom;
    let mean_flops = flops.value() / denom;
    let bias = bias_table.bias_for(dataset_id);

    Ok(IcResult {
        model_id: model_id.to_string(),
        dataset_id: dataset_id.to_string(),
        mean_text_bits_per_token: mean_text,
        mean_nll_bits_per_token: mean_nll,
        mean_flops_per_token: mean_flops,
        bias,
        ic_unbiased: ic_per_token(mean_text, mean_nll, mean_flops)?,
        ic: ic_biased(mean_text, mean_nll, mean_flops, bias)?,
        sample_count: samples.len() as u64,
    })
}
