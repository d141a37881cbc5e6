use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use infocap::codec::{ideal_bits, model_from_id, pack, unpack, CoderConfig, Container};
use infocap::corpus::{read_records, select_samples, write_records, DatasetSpec, RunManifest, DEFAULT_SEQ_LEN};
use infocap::eval::{evaluate, reference_records, EvalRequest};
use infocap::flops::{estimate_flops, load_descriptor, mean_flops_per_token};
use infocap::metric::{BiasTable, IcResult};
use infocap::report::{
    correlations, emit_plot_data, rank, render_leaderboard, render_results, render_table, to_json, OutputFormat,
    PlotMode, SeriesMap,
};
use infocap::tokenizer::{load_tokenizer, TokenizerDef};

#[derive(Parser)]
#[command(name = "infocap", version, about = "Information-capacity evaluation of language models")]
struct Cli {
    /// Tokens per sample; the first is excluded from all accounting.
    #[arg(long, global = true, default_value_t = DEFAULT_SEQ_LEN)]
    seq_len: u64,
    /// key=value file of per-dataset biases, layered over the built-in table.
    #[arg(long, global = true)]
    bias_table: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset_id: Option<String>,
    /// table, csv or json.
    #[arg(long, global = true, default_value = "table")]
    format: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenizer statistics over a corpus.
    Tokenize(TokenizeArgs),
    /// FLOPs per token for an architecture config.
    Flops(FlopsArgs),
    /// Compress a file into a container.
    Pack(PackArgs),
    /// Restore a file from a container.
    Unpack(UnpackArgs),
    /// Join records with a corpus and compute IC per model.
    Eval(EvalArgs),
    /// Leaderboard or plot data from eval results.
    Report(ReportArgs),
    /// Write NLL records from the built-in adaptive context model.
    ScoreReference(ScoreArgs),
}

#[derive(Args)]
struct TokenizerArgs {
    /// Tokenizer definition (.json), a vocab file paired with --merges, or `byte-identity`.
    #[arg(long)]
    tokenizer: String,
    #[arg(long)]
    merges: Option<PathBuf>,
    /// Vocabulary strings are literal text rather than byte-level symbols (two-file form only).
    #[arg(long)]
    plain_vocab: bool,
}

impl TokenizerArgs {
    fn load(&self) -> anyhow::Result<TokenizerDef> {
        open_tokenizer(&self.tokenizer, self.merges.as_deref(), !self.plain_vocab)
    }
}

fn open_tokenizer(spec: &str, merges: Option<&Path>, byte_level: bool) -> anyhow::Result<TokenizerDef> {
    if spec == "byte-identity" {
        return Ok(TokenizerDef::byte_identity());
    }
    load_tokenizer(Path::new(spec), merges, byte_level).with_context(|| format!("loading tokenizer {spec}"))
}

#[derive(Args)]
struct CorpusArgs {
    /// Record files with a "text" field, or directories of text files.
    #[arg(long, required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
    /// Keep at most this many samples (after sorting by sample id).
    #[arg(long)]
    sample_limit: Option<usize>,
}

#[derive(Args)]
struct TokenizeArgs {
    /// Repeatable; each is a definition file or `byte-identity`.
    #[arg(long, required = true, num_args = 1..)]
    tokenizer: Vec<String>,
    #[arg(long)]
    merges: Option<PathBuf>,
    #[arg(long)]
    plain_vocab: bool,
    #[command(flatten)]
    corpus: CorpusArgs,
}

#[derive(Args)]
struct FlopsArgs {
    /// Model config JSON.
    #[arg(long)]
    descriptor: PathBuf,
}

#[derive(Args)]
struct PackArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value = "adaptive-o2-256")]
    model: String,
    #[arg(long, default_value_t = CoderConfig::default().precision_bits)]
    precision_bits: u32,
    #[arg(long, default_value_t = CoderConfig::default().freq_bits)]
    freq_bits: u32,
}

#[derive(Args)]
struct UnpackArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    tokenizer: TokenizerArgs,
    /// Model config JSON shared by every model in the records.
    #[arg(long)]
    descriptor: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    records: Vec<PathBuf>,
    /// Run manifest to check against the dataset, length and tokenizer.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// JSON output of `eval`, or a JSON array of results.
    #[arg(long, required = true, num_args = 1..)]
    results: Vec<PathBuf>,
    /// model_id=series lines.
    #[arg(long)]
    series: Option<PathBuf>,
    /// Emit plot data instead of a leaderboard: ic_vs_flops or ic_vs_bits_per_token.
    #[arg(long)]
    plot: Option<String>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    tokenizer: TokenizerArgs,
    #[arg(long, default_value_t = 2)]
    order: u32,
    #[arg(long)]
    model_id: Option<String>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

struct Globals {
    seq_len: u64,
    bias_table: BiasTable,
    dataset_id: Option<String>,
    format: OutputFormat,
}

impl Globals {
    fn dataset_id(&self) -> anyhow::Result<&str> {
        self.dataset_id.as_deref().ok_or_else(|| anyhow!("--dataset-id is required for this command"))
    }

    fn dataset(&self, corpus: &CorpusArgs) -> anyhow::Result<DatasetSpec> {
        let mut spec = DatasetSpec::new(self.dataset_id()?, corpus.corpus.clone(), self.seq_len)?;
        spec.sample_limit = corpus.sample_limit;
        Ok(spec)
    }
}

fn emit(output: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match output {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

fn read(path: &Path) -> anyhow::Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

#[derive(Serialize)]
struct TokenizerStats {
    tokenizer: String,
    vocab_size: usize,
    digest: String,
    samples: u64,
    eligible_samples: u64,
    bytes: u64,
    tokens: u64,
    bits_per_token: f64,
    bits_per_token_excluding_first: f64,
}

#[derive(Serialize)]
struct TokenizeReport {
    seq_len: u64,
    selected_under_all: usize,
    tokenizers: Vec<TokenizerStats>,
}

fn cmd_tokenize(g: &Globals, args: &TokenizeArgs) -> anyhow::Result<()> {
    if args.merges.is_some() && args.tokenizer.len() > 1 {
        bail!("--merges can only be combined with a single --tokenizer");
    }
    let toks: Vec<TokenizerDef> = args
        .tokenizer
        .iter()
        .map(|t| open_tokenizer(t, args.merges.as_deref(), !args.plain_vocab))
        .collect::<anyhow::Result<_>>()?;
    let mut spec = DatasetSpec::new(g.dataset_id.clone().unwrap_or_default(), args.corpus.corpus.clone(), g.seq_len)?;
    spec.sample_limit = args.corpus.sample_limit;

    let mut acc = vec![(0u64, 0u64, 0u64, 0u64, 0u64); toks.len()];
    let mut samples = 0u64;
    for sample in spec.samples() {
        let sample = sample?;
        samples += 1;
        for (t, a) in toks.iter().zip(acc.iter_mut()) {
            let spans = t.encode(&sample.text)?;
            let bytes: u64 = spans.iter().map(|s| u64::from(s.byte_len)).sum();
            a.0 += bytes;
            a.1 += spans.len() as u64;
            if let Some(first) = spans.first() {
                a.2 += bytes - u64::from(first.byte_len);
                a.3 += spans.len() as u64 - 1;
            }
            if spans.len() as u64 >= g.seq_len {
                a.4 += 1;
            }
        }
    }
    let refs: Vec<&TokenizerDef> = toks.iter().collect();
    let selected = select_samples(&spec, &refs)?.len();
    let ratio = |bits: u64, n: u64| if n == 0 { 0.0 } else { 8.0 * bits as f64 / n as f64 };
    let report = TokenizeReport {
        seq_len: g.seq_len,
        selected_under_all: selected,
        tokenizers: toks
            .iter()
            .zip(&args.tokenizer)
            .zip(&acc)
            .map(|((t, name), a)| TokenizerStats {
                tokenizer: name.clone(),
                vocab_size: t.vocab_size(),
                digest: t.digest(),
                samples,
                eligible_samples: a.4,
                bytes: a.0,
                tokens: a.1,
                bits_per_token: ratio(a.0, a.1),
                bits_per_token_excluding_first: ratio(a.2, a.3),
            })
            .collect(),
    };
    let text = match g.format {
        OutputFormat::Json => to_json(&report)?,
        f => {
            let headers = [
                "tokenizer", "vocab", "samples", "eligible", "bytes", "tokens", "bits_per_token", "bits_per_token_excl_first",
            ];
            let rows: Vec<Vec<String>> = report
                .tokenizers
                .iter()
                .map(|s| {
                    vec![
                        s.tokenizer.clone(),
                        s.vocab_size.to_string(),
                        s.samples.to_string(),
                        s.eligible_samples.to_string(),
                        s.bytes.to_string(),
                        s.tokens.to_string(),
                        format!("{:.2}", s.bits_per_token),
                        format!("{:.2}", s.bits_per_token_excluding_first),
                    ]
                })
                .collect();
            let mut t = render_table(&headers, &rows, f)?;
            if f == OutputFormat::Table {
                t.push_str(&format!("\n{selected} samples reach {} tokens under every tokenizer\n", g.seq_len));
            }
            t
        }
    };
    emit(None, &text)
}

#[derive(Serialize)]
struct FlopsReport {
    seq_len: u64,
    flops_per_token_linear: u64,
    flops_per_token_attn_coeff: u64,
    attention_projections: u64,
    ffn: u64,
    lm_head: u64,
    activated_params: u64,
    mean_flops_per_token: f64,
    log2_mean_flops_per_token: f64,
    ignored_fields: Vec<String>,
}

fn cmd_flops(g: &Globals, args: &FlopsArgs) -> anyhow::Result<()> {
    let text = String::from_utf8(read(&args.descriptor)?).context("descriptor is not UTF-8")?;
    let loaded = load_descriptor(&text).with_context(|| format!("loading {}", args.descriptor.display()))?;
    for f in &loaded.ignored_fields {
        log::warn!("descriptor field '{f}' does not affect FLOPs and was ignored");
    }
    let est = estimate_flops(&loaded.descriptor)?;
    let mean = mean_flops_per_token(&est, g.seq_len)?;
    let r = FlopsReport {
        seq_len: g.seq_len,
        flops_per_token_linear: est.flops_per_token_linear,
        flops_per_token_attn_coeff: est.flops_per_token_attn_coeff,
        attention_projections: est.breakdown.attention_projections,
        ffn: est.breakdown.ffn,
        lm_head: est.breakdown.lm_head,
        activated_params: loaded.descriptor.activated_params(),
        mean_flops_per_token: mean,
        log2_mean_flops_per_token: mean.log2(),
        ignored_fields: loaded.ignored_fields.clone(),
    };
    let out = match g.format {
        OutputFormat::Json => to_json(&r)?,
        f => {
            let rows = vec![
                vec!["attention_projections".into(), r.attention_projections.to_string()],
                vec!["ffn".into(), r.ffn.to_string()],
                vec!["lm_head".into(), r.lm_head.to_string()],
                vec!["flops_per_token_linear".into(), r.flops_per_token_linear.to_string()],
                vec!["flops_per_token_attn_coeff".into(), r.flops_per_token_attn_coeff.to_string()],
                vec!["activated_params".into(), r.activated_params.to_string()],
                vec![format!("mean_flops_per_token@{}", g.seq_len), format!("{:.6e}", r.mean_flops_per_token)],
                vec!["log2_mean_flops_per_token".into(), format!("{:.4}", r.log2_mean_flops_per_token)],
            ];
            render_table(&["quantity", "value"], &rows, f)?
        }
    };
    emit(None, &out)
}

fn cmd_pack(args: &PackArgs) -> anyhow::Result<()> {
    let cfg = CoderConfig::new(args.precision_bits, args.freq_bits)?;
    let data = read(&args.input)?;
    let container = pack(&data, &args.model, cfg)?;
    let symbols: Vec<u32> = data.iter().map(|&b| u32::from(b)).collect();
    let ideal = ideal_bits(model_from_id(&args.model, cfg.freq_bits)?.as_mut(), &symbols)?;
    let bytes = container.to_bytes();
    fs::write(&args.output, &bytes).with_context(|| format!("writing {}", args.output.display()))?;
    eprintln!(
        "{} -> {} bytes; payload {} bits, ideal {:.1} bits",
        data.len(),
        bytes.len(),
        container.bitstream.len() * 8,
        ideal
    );
    Ok(())
}

fn cmd_unpack(args: &UnpackArgs) -> anyhow::Result<()> {
    let container = Container::from_bytes(&read(&args.input)?)?;
    let data = unpack(&container).with_context(|| format!("decoding {}", args.input.display()))?;
    fs::write(&args.output, &data).with_context(|| format!("writing {}", args.output.display()))?;
    Ok(())
}

fn load_descriptor_estimate(path: &Path) -> anyhow::Result<infocap::flops::FlopsEstimate> {
    let text = String::from_utf8(read(path)?).context("descriptor is not UTF-8")?;
    let loaded = load_descriptor(&text).with_context(|| format!("loading {}", path.display()))?;
    Ok(estimate_flops(&loaded.descriptor)?)
}

fn cmd_eval(g: &Globals, args: &EvalArgs) -> anyhow::Result<()> {
    let spec = g.dataset(&args.corpus)?;
    let tokenizer = args.tokenizer.load()?;
    if let Some(m) = &args.manifest {
        RunManifest::load(m)?.check(&spec.dataset_id, spec.seq_len, &tokenizer)?;
    }
    let flops = load_descriptor_estimate(&args.descriptor)?;
    let samples = select_samples(&spec, &[&tokenizer])?;
    let mut records = Vec::new();
    for p in &args.records {
        records.extend(read_records(p)?);
    }
    let out = evaluate(
        &EvalRequest {
            dataset_id: &spec.dataset_id,
            samples: &samples,
            tokenizer_index: 0,
            vocab_size: tokenizer.vocab_size(),
            flops,
            bias_table: &g.bias_table,
            workers: args.workers,
        },
        records,
    )?;
    emit(args.output.as_deref(), &render_results(&out.results, &out.samples, g.format)?)
}

fn load_results(path: &Path) -> anyhow::Result<Vec<IcResult>> {
    let text = read(path)?;
    let value: serde_json::Value =
        serde_json::from_slice(&text).with_context(|| format!("parsing {}", path.display()))?;
    let results = match value {
        serde_json::Value::Object(mut o) => o.remove("results").ok_or_else(|| anyhow!("{}: no \"results\" field", path.display()))?,
        v => v,
    };
    serde_json::from_value(results).with_context(|| format!("reading results from {}", path.display()))
}

fn cmd_report(g: &Globals, args: &ReportArgs) -> anyhow::Result<()> {
    let mut results = Vec::new();
    for p in &args.results {
        results.extend(load_results(p)?);
    }
    let series = match &args.series {
        Some(p) => SeriesMap::parse(&String::from_utf8(read(p)?).context("series file is not UTF-8")?)?,
        None => SeriesMap::default(),
    };
    let text = match &args.plot {
        Some(mode) => emit_plot_data(&results, mode.parse::<PlotMode>()?, &series)?,
        None => render_leaderboard(&rank(&results, &series)?, &correlations(&results), g.format)?,
    };
    emit(args.output.as_deref(), &text)
}

fn cmd_score(g: &Globals, args: &ScoreArgs) -> anyhow::Result<()> {
    let spec = g.dataset(&args.corpus)?;
    let tokenizer = args.tokenizer.load()?;
    let samples = select_samples(&spec, &[&tokenizer])?;
    let model_id = args.model_id.clone().unwrap_or_else(|| format!("adaptive-o{}", args.order));
    let freq_bits = CoderConfig::default().freq_bits;
    let records = reference_records(&samples, 0, tokenizer.vocab_size(), args.order, &model_id, freq_bits)?;
    let mut buf = Vec::new();
    write_records(&mut buf, &records)?;
    fs::write(&args.output, &buf).with_context(|| format!("writing {}", args.output.display()))?;
    if let Some(m) = &args.manifest {
        let mut manifest = RunManifest::new(&spec.dataset_id, spec.seq_len, &tokenizer);
        manifest.model_id = Some(model_id);
        manifest.adapter.insert("order".into(), args.order.into());
        manifest.adapter.insert("freq_bits".into(), freq_bits.into());
        fs::write(m, to_json(&manifest)?).with_context(|| format!("writing {}", m.display()))?;
    }
    eprintln!("{} records written to {}", records.len(), args.output.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut bias_table = BiasTable::seeded();
    if let Some(p) = &cli.bias_table {
        let text = String::from_utf8(read(p)?).context("bias table is not UTF-8")?;
        bias_table.merge_config(&text).with_context(|| format!("parsing {}", p.display()))?;
    }
    let g = Globals {
        seq_len: cli.seq_len,
        bias_table,
        dataset_id: cli.dataset_id,
        format: cli.format.parse()?,
    };
    match &cli.command {
        Command::Tokenize(a) => cmd_tokenize(&g, a),
        Command::Flops(a) => cmd_flops(&g, a),
        Command::Pack(a) => cmd_pack(a),
        Command::Unpack(a) => cmd_unpack(a),
        Command::Eval(a) => cmd_eval(&g, a),
        Command::Report(a) => cmd_report(&g, a),
        Command::ScoreReference(a) => cmd_score(&g, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let integrity = e.chain().any(|c| c.downcast_ref::<infocap::Error>().is_some_and(|e| e.is_integrity()));
            ExitCode::from(if integrity { 2 } else { 1 })
        }
    }
}
