//! Leaderboards, series summaries, correlations and plot data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metric::{IcResult, SampleIc};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputFormat {
    #[default]
    Table,
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(OutputFormat::Table),
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::Input(format!("unknown format '{other}' (table, csv, json)"))),
        }
    }
}

/// `model_id = series` lines; unmapped models form their own series.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeriesMap {
    map: BTreeMap<String, String>,
}

impl SeriesMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(format!("line {}", i + 1), "expected model_id = series"))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(Error::parse(format!("line {}", i + 1), "empty model id or series"));
            }
            map.insert(k.to_string(), v.to_string());
        }
        Ok(SeriesMap { map })
    }

    pub fn insert(&mut self, model_id: &str, series: &str) {
        self.map.insert(model_id.to_string(), series.to_string());
    }

    pub fn series_of<'a>(&'a self, model_id: &'a str) -> &'a str {
        self.map.get(model_id).map_or(model_id, String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedEntry {
    pub dataset_id: String,
    pub rank: usize,
    pub model_id: String,
    pub series: String,
    pub ic: f64,
    pub ic_unbiased: f64,
    pub bias: f64,
    pub mean_text_bits_per_token: f64,
    pub mean_nll_bits_per_token: f64,
    pub mean_flops_per_token: f64,
    pub sample_count: u64,
    /// Shares its IC with a neighbour and was ordered by `model_id`.
    pub tied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesSummary {
    pub dataset_id: String,
    pub series_id: String,
    pub rank: usize,
    pub members: Vec<(String, f64)>,
    pub mean_ic: f64,
    /// max - min of member ICs.
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Leaderboard {
    /// Grouped by dataset, then by rank.
    pub entries: Vec<RankedEntry>,
    pub series: Vec<SeriesSummary>,
}

pub const TIE_NOTE: &str = "Equal IC values are ordered by model id (series id for series).";

impl Leaderboard {
    pub fn has_ties(&self) -> bool {
        self.entries.iter().any(|e| e.tied)
    }
}

/// Ranks results per dataset by IC, highest first; ties go to the
/// lexicographically smaller `model_id`.
pub fn rank(results: &[IcResult], series: &SeriesMap) -> Result<Leaderboard> {
    if results.is_empty() {
        return Err(Error::Empty("no results to rank".into()));
    }
    let mut by_dataset: BTreeMap<&str, Vec<&IcResult>> = BTreeMap::new();
    for r in results {
        if !r.ic.is_finite() {
            return Err(Error::Input(format!("model {} on {}: IC is not finite", r.model_id, r.dataset_id)));
        }
        by_dataset.entry(r.dataset_id.as_str()).or_default().push(r);
    }

    let mut entries = Vec::new();
    let mut summaries = Vec::new();
    for (dataset, mut rows) in by_dataset {
        if rows.iter().any(|r| r.bias.to_bits() != rows[0].bias.to_bits()) {
            return Err(Error::Input(format!("results for dataset '{dataset}' use different bias values")));
        }
        rows.sort_by(|a, b| b.ic.total_cmp(&a.ic).then_with(|| a.model_id.cmp(&b.model_id)));
        if let Some(w) = rows.windows(2).find(|w| w[0].model_id == w[1].model_id) {
            return Err(Error::Input(format!("model {} appears twice for dataset '{dataset}'", w[0].model_id)));
        }
        for (i, r) in rows.iter().enumerate() {
            let tied = (i > 0 && rows[i - 1].ic == r.ic) || rows.get(i + 1).is_some_and(|n| n.ic == r.ic);
            entries.push(RankedEntry {
                dataset_id: dataset.to_string(),
                rank: i + 1,
                model_id: r.model_id.clone(),
                series: series.series_of(&r.model_id).to_string(),
                ic: r.ic,
                ic_unbiased: r.ic_unbiased,
                bias: r.bias,
                mean_text_bits_per_token: r.mean_text_bits_per_token,
                mean_nll_bits_per_token: r.mean_nll_bits_per_token,
                mean_flops_per_token: r.mean_flops_per_token,
                sample_count: r.sample_count,
                tied,
            });
        }

        let mut groups: BTreeMap<&str, Vec<(String, f64)>> = BTreeMap::new();
        for r in &rows {
            groups.entry(series.series_of(&r.model_id)).or_default().push((r.model_id.clone(), r.ic));
        }
        let mut ds: Vec<SeriesSummary> = groups
            .into_iter()
            .map(|(id, mut members)| {
                members.sort_by(|a, b| a.0.cmp(&b.0));
                let ics: Vec<f64> = members.iter().map(|m| m.1).collect();
                let max = ics.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let min = ics.iter().copied().fold(f64::INFINITY, f64::min);
                SeriesSummary {
                    dataset_id: dataset.to_string(),
                    series_id: id.to_string(),
                    rank: 0,
                    mean_ic: ics.iter().sum::<f64>() / ics.len() as f64,
                    spread: max - min,
                    members,
                }
            })
            .collect();
        ds.sort_by(|a, b| b.mean_ic.total_cmp(&a.mean_ic).then_with(|| a.series_id.cmp(&b.series_id)));
        for (i, s) in ds.iter_mut().enumerate() {
            s.rank = i + 1;
        }
        summaries.extend(ds);
    }
    Ok(Leaderboard {
        entries,
        series: summaries,
    })
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Domain(format!("length mismatch: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!("need at least 2 points, got {}", xs.len())));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite value".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotMode {
    IcVsFlops,
    IcVsBitsPerToken,
}

impl FromStr for PlotMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ic_vs_flops" => Ok(PlotMode::IcVsFlops),
            "ic_vs_bits_per_token" => Ok(PlotMode::IcVsBitsPerToken),
            other => Err(Error::Input(format!(
                "unknown plot mode '{other}' (ic_vs_flops, ic_vs_bits_per_token)"
            ))),
        }
    }
}

fn csv_string(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w).map_err(|e| Error::Pipeline(format!("csv: {e}")))?;
    let bytes = w.into_inner().map_err(|e| Error::Pipeline(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// One row per result in input order; numbers are written at full precision.
pub fn emit_plot_data(results: &[IcResult], mode: PlotMode, series: &SeriesMap) -> Result<String> {
    if results.is_empty() {
        return Err(Error::Empty("no results to plot".into()));
    }
    csv_string(|w| {
        let mut header = vec!["model_id", "series", "dataset_id", "log2_mean_flops"];
        if mode == PlotMode::IcVsBitsPerToken {
            header.push("mean_text_bits_per_token");
        }
        header.push("ic");
        w.write_record(&header)?;
        for r in results {
            let mut row = vec![
                r.model_id.clone(),
                series.series_of(&r.model_id).to_string(),
                r.dataset_id.clone(),
                r.mean_flops_per_token.log2().to_string(),
            ];
            if mode == PlotMode::IcVsBitsPerToken {
                row.push(r.mean_text_bits_per_token.to_string());
            }
            row.push(r.ic.to_string());
            w.write_record(&row)?;
        }
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Correlation {
    pub dataset_id: String,
    pub against: String,
    pub r: Option<f64>,
}

/// Pearson r of IC against log2 FLOPs and against bits per token, per dataset.
pub fn correlations(results: &[IcResult]) -> Vec<Correlation> {
    let mut by_dataset: BTreeMap<&str, Vec<&IcResult>> = BTreeMap::new();
    for r in results {
        by_dataset.entry(&r.dataset_id).or_default().push(r);
    }
    let mut out = Vec::new();
    for (dataset, rows) in by_dataset {
        let ic: Vec<f64> = rows.iter().map(|r| r.ic).collect();
        let flops: Vec<f64> = rows.iter().map(|r| r.mean_flops_per_token.log2()).collect();
        let bits: Vec<f64> = rows.iter().map(|r| r.mean_text_bits_per_token).collect();
        for (name, xs) in [("log2_mean_flops", flops), ("mean_text_bits_per_token", bits)] {
            out.push(Correlation {
                dataset_id: dataset.to_string(),
                against: name.to_string(),
                r: pearson(&xs, &ic).ok(),
            });
        }
    }
    out
}

fn ic4(v: f64) -> String {
    format!("{v:.4}")
}

fn nll3(v: f64) -> String {
    format!("{v:.3}")
}

fn bits2(v: f64) -> String {
    format!("{v:.2}")
}

/// Column-aligned text; numeric-looking cells are right-aligned.
fn aligned(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let numeric = |s: &str| !s.is_empty() && s.parse::<f64>().is_ok();
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| if numeric(c) { format!("{c:>w$}") } else { format!("{c:<w$}") })
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(headers.to_vec(), &mut out);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(rule.iter().map(String::as_str).collect(), &mut out);
    for row in rows {
        line(row.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

fn csv_table(headers: &[&str], rows: &[Vec<String>]) -> Result<String> {
    csv_string(|w| {
        w.write_record(headers)?;
        for r in rows {
            w.write_record(r)?;
        }
        Ok(())
    })
}

/// Plain table or CSV of pre-formatted cells; JSON callers serialize their own types.
pub fn render_table(headers: &[&str], rows: &[Vec<String>], format: OutputFormat) -> Result<String> {
    match format {
        OutputFormat::Table => Ok(aligned(headers, rows)),
        OutputFormat::Csv => csv_table(headers, rows),
        OutputFormat::Json => Err(Error::Input("render_table has no JSON form".into())),
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

const RESULT_HEADERS: [&str; 9] = [
    "model_id",
    "dataset_id",
    "samples",
    "bits_per_token",
    "nll_per_token",
    "log2_flops",
    "bias",
    "ic_b0",
    "ic",
];

fn result_row(r: &IcResult) -> Vec<String> {
    vec![
        r.model_id.clone(),
        r.dataset_id.clone(),
        r.sample_count.to_string(),
        bits2(r.mean_text_bits_per_token),
        nll3(r.mean_nll_bits_per_token),
        bits2(r.mean_flops_per_token.log2()),
        r.bias.to_string(),
        ic4(r.ic_unbiased),
        ic4(r.ic),
    ]
}

/// Renders `eval` output. JSON carries both results and per-sample ICs.
pub fn render_results(results: &[IcResult], samples: &[SampleIc], format: OutputFormat) -> Result<String> {
    let rows: Vec<Vec<String>> = results.iter().map(result_row).collect();
    match format {
        OutputFormat::Table => Ok(aligned(&RESULT_HEADERS, &rows)),
        OutputFormat::Csv => csv_table(&RESULT_HEADERS, &rows),
        OutputFormat::Json => {
            #[derive(Serialize)]
            struct Out<'a> {
                results: &'a [IcResult],
                samples: &'a [SampleIc],
            }
            to_json(&Out { results, samples })
        }
    }
}

const LEADERBOARD_HEADERS: [&str; 9] = [
    "dataset_id",
    "rank",
    "model_id",
    "series",
    "ic",
    "ic_b0",
    "nll_per_token",
    "bits_per_token",
    "log2_flops",
];

pub fn render_leaderboard(board: &Leaderboard, correlations: &[Correlation], format: OutputFormat) -> Result<String> {
    let rows: Vec<Vec<String>> = board
        .entries
        .iter()
        .map(|e| {
            vec![
                e.dataset_id.clone(),
                if e.tied { format!("{}*", e.rank) } else { e.rank.to_string() },
                e.model_id.clone(),
                e.series.clone(),
                ic4(e.ic),
                ic4(e.ic_unbiased),
                nll3(e.mean_nll_bits_per_token),
                bits2(e.mean_text_bits_per_token),
                bits2(e.mean_flops_per_token.log2()),
            ]
        })
        .collect();
    let series_headers = ["dataset_id", "rank", "series", "members", "mean_ic", "spread"];
    let series_rows: Vec<Vec<String>> = board
        .series
        .iter()
        .map(|s| {
            vec![
                s.dataset_id.clone(),
                s.rank.to_string(),
                s.series_id.clone(),
                s.members.len().to_string(),
                ic4(s.mean_ic),
                ic4(s.spread),
            ]
        })
        .collect();
    match format {
        OutputFormat::Table => {
            let mut out = aligned(&LEADERBOARD_HEADERS, &rows);
            out.push('\n');
            out.push_str(&aligned(&series_headers, &series_rows));
            if !correlations.is_empty() {
                out.push('\n');
                for c in correlations {
                    let r = c.r.map_or_else(|| "undefined".to_string(), ic4);
                    let _ = writeln!(out, "pearson r(ic, {}) on {}: {r}", c.against, c.dataset_id);
                }
            }
            if board.has_ties() {
                let _ = write!(out, "\n* {TIE_NOTE}\n");
            }
            Ok(out)
        }
        OutputFormat::Csv => csv_table(&LEADERBOARD_HEADERS, &rows),
        OutputFormat::Json => {
            #[derive(Serialize)]
            struct Out<'a> {
                leaderboard: &'a Leaderboard,
                correlations: &'a [Correlation],
                #[serde(skip_serializing_if = "Option::is_none")]
                note: Option<&'static str>,
            }
            to_json(&Out {
                leaderboard: board,
                correlations,
                note: board.has_ties().then_some(TIE_NOTE),
            })
        }
    }
}
