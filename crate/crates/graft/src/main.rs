//! Command-line front end: tokenizer construction and surgery, data
//! mixtures, embedding transplants, staged training, evaluation, the
//! synthetic bilingual fixture, and the end-to-end pipeline.
//!
//! Exit codes: 0 success, 2 configuration error, 3 operation failure,
//! 4 acceptance-contrast failure under `pipeline run --check`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use base64::Engine;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use graft::evalh::{
    classify_tasks, generation_tasks, greedy_decode, latency_bench, perplexity, read_tasks,
};
use graft::model::{init_model, inject_lora, load_checkpoint, save_checkpoint, Checkpoint,
    ModelConfig};
use graft::pipeline::{metrics_path, run_pipeline, PipelineConfig, PipelineError};
use graft::sampler::{
    cap_sample, compose_pretraining_mixture, Example, LanguageCorpus, MixtureSpec,
};
use graft::surgery::{compose, init_embeddings, EmbeddingMatrix, Pooling};
use graft::synth::{gen_synthetic_corpora, SyntheticLangSpec, TargetMode};
use graft::tokenizer::{
    extend, fertility, overlap, prune_to_english, train_bpe, EncodingMode, TokenizerModel,
};
use graft::trainer::{train_stage, Stage, StageConfig, TrainEvent};

#[derive(Parser)]
#[command(
    name = "graft",
    version,
    about = "Tokenizer surgery, embedding transplants, and staged training for small causal LMs"
)]
struct Cli {
    /// Root for inputs and outputs; relative paths resolve against it.
    /// Defaults to $GRAFT_ARTIFACTS, then the current directory.
    #[arg(long, global = true)]
    artifacts: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, prune, extend, and measure tokenizers.
    #[command(subcommand)]
    Tok(TokCmd),
    /// Subsample corpora and compose training mixtures.
    #[command(subcommand)]
    Data(DataCmd),
    /// Transplant and compose embedding matrices.
    #[command(subcommand)]
    Embed(EmbedCmd),
    /// Run one training stage.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Score checkpoints.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Generate the synthetic bilingual fixture.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Run the end-to-end pipeline.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
}

#[derive(Subcommand)]
enum TokCmd {
    /// Train a byte-level BPE tokenizer on line files.
    Train {
        /// Input text files (one example per line); repeatable.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Total vocabulary budget, byte alphabet included.
        #[arg(long)]
        vocab: usize,
        /// merge_rank or longest_match.
        #[arg(long, default_value = "merge_rank")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep only tokens observed when encoding a reference corpus.
    Prune {
        #[arg(long)]
        tok: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Minimum observed count for a token to survive.
        #[arg(long, default_value_t = 1)]
        min_count: u64,
        /// Retained-token list (JSON, base64 byte-strings).
        #[arg(long)]
        out: PathBuf,
    },
    /// Fill a retained-token list up to a budget with novel tokens from a
    /// freshly trained tokenizer; the result matches longest tokens first.
    Extend {
        #[arg(long)]
        retained: PathBuf,
        /// Tokenizer supplying novel tokens.
        #[arg(long)]
        fresh: PathBuf,
        #[arg(long)]
        vocab: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tokens per word, per language.
    Fertility {
        #[arg(long)]
        tok: PathBuf,
        /// tag=path pairs; repeatable.
        #[arg(long, required = true, num_args = 1..)]
        corpus: Vec<String>,
        /// Tokenizer to report length ratios against.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Fraction of one tokenizer's byte-strings present in another.
    Overlap {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
}

#[derive(Subcommand)]
enum DataCmd {
    /// Cap each corpus at a line budget by seeded subsampling.
    Sample {
        /// tag=path pairs; repeatable.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<String>,
        #[arg(long)]
        cap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory receiving one <tag>.txt per corpus.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compose a sentence/document mixture with per-language epoch caps.
    Mix {
        /// Sentence-level tag=path pairs; repeatable.
        #[arg(long, num_args = 1..)]
        sent: Vec<String>,
        /// Document-level tag=path pairs; repeatable.
        #[arg(long, num_args = 1..)]
        doc: Vec<String>,
        #[arg(long)]
        total: usize,
        /// Epoch cap per language.
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        /// Anchor language tag guaranteed representation in the mixture.
        #[arg(long)]
        anchor: Option<String>,
        #[arg(long, default_value_t = 0.65)]
        sentence_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output JSONL of {text, language_tag, level} records.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EmbedCmd {
    /// Build an embedding matrix for a new vocabulary from a donor
    /// checkpoint: verbatim rows are copied, novel rows are pooled.
    Init {
        /// Donor checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        donor_tok: PathBuf,
        #[arg(long)]
        new_tok: PathBuf,
        /// avg or max.
        #[arg(long, default_value = "avg")]
        pooling: String,
        #[arg(long)]
        out: PathBuf,
        /// Optional provenance report (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Swap an embedding matrix into a checkpoint, keeping the body.
    Compose {
        /// Checkpoint supplying the transformer body.
        #[arg(long)]
        body: PathBuf,
        #[arg(long)]
        embedding: PathBuf,
        /// Tokenizer the embedding must correspond to (fingerprint check).
        #[arg(long)]
        tok: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shape and fingerprint of a stored embedding matrix.
    Report {
        #[arg(long)]
        embedding: PathBuf,
    },
}

#[derive(Args)]
struct TrainCommon {
    /// Training examples: .txt (line per example) or .jsonl mixture records.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    tok: PathBuf,
    /// Output checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: usize,
    /// Stage default when omitted.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 128)]
    pack_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Held-out examples for periodic perplexity (same formats as --data).
    #[arg(long)]
    held_out: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    eval_every: usize,
    /// Stream one JSON event per logged step to this file.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Train all parameter groups from random initialization.
    Pretrain {
        #[command(flatten)]
        common: TrainCommon,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 128)]
        mlp: usize,
        #[arg(long, default_value_t = 64)]
        max_seq: usize,
        #[arg(long, default_value_t = 10_000.0)]
        rope_base: f64,
        #[arg(long, default_value_t = 0)]
        model_seed: u64,
    },
    /// Tune only the embedding matrix.
    LangAdapt {
        #[command(flatten)]
        common: TrainCommon,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Tune only the transformer body.
    Instruct {
        #[command(flatten)]
        common: TrainCommon,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Tune only low-rank adapters (injected here if absent).
    Lora {
        #[command(flatten)]
        common: TrainCommon,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8)]
        rank: usize,
        #[arg(long, default_value_t = 16.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        inject_seed: u64,
    },
    /// Continue tuning embedding and body together.
    Cpt {
        #[command(flatten)]
        common: TrainCommon,
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Per-language perplexity over tagged line files.
    Ppl {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        tok: PathBuf,
        /// tag=path pairs; repeatable.
        #[arg(long, required = true, num_args = 1..)]
        corpus: Vec<String>,
    },
    /// Option-scoring accuracy on a task file.
    Classify {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        tok: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        /// Divide option scores by their token length.
        #[arg(long)]
        normalize: bool,
    },
    /// Greedy decoding: one prompt, or exact-match over a task file.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        tok: PathBuf,
        #[arg(long, conflicts_with = "tasks")]
        prompt: Option<String>,
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
    },
    /// Prefill throughput and tokenizer-length speedup estimate.
    Latency {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        tok: PathBuf,
        /// Line file of passages to score.
        #[arg(long)]
        passages: PathBuf,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Tokenizer whose token counts serve as the speedup reference.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Write the bilingual fixture (corpora, tasks, held-out files).
    Gen {
        /// Full spec as JSON; explicit flags below are ignored with a
        /// warning when this is given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        vocab_words: Option<usize>,
        /// cipher or script_shift.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long, default_value = "fixture")]
        out_dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum PipelineCmd {
    /// Run (or resume) every stage under one artifacts directory.
    Run {
        /// Full pipeline config as JSON; explicit flags below are ignored
        /// with a warning when this is given.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Pipeline directory, under the artifacts root.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        pretrain_steps: Option<usize>,
        #[arg(long)]
        instruct_steps: Option<usize>,
        #[arg(long)]
        lang_adapt_steps: Option<usize>,
        #[arg(long)]
        lora_steps: Option<usize>,
        /// Also run the full continued-pretraining contrast arm.
        #[arg(long)]
        cpt: bool,
        /// Exit 4 unless every evaluation contrast holds.
        #[arg(long)]
        check: bool,
    },
}

// ---------------------------------------------------------------------------

enum CliError {
    /// Bad arguments, unreadable config, malformed inputs. Exit 2.
    Config(String),
    /// An operation failed while running. Exit 3.
    Run(String),
    /// `--check` found failing contrasts. Exit 4.
    Check(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) => 3,
            CliError::Check(_) => 4,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Run(m) | CliError::Check(m) => m,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn run_err(e: impl std::fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(), // usage errors exit 2; --help/--version exit 0
    };
    let root = cli
        .artifacts
        .or_else(|| std::env::var_os("GRAFT_ARTIFACTS").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    match dispatch(&root, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn dispatch(root: &Path, command: Command) -> Result<(), CliError> {
    match command {
        Command::Tok(cmd) => tok_command(root, cmd),
        Command::Data(cmd) => data_command(root, cmd),
        Command::Embed(cmd) => embed_command(root, cmd),
        Command::Train(cmd) => train_command(root, cmd),
        Command::Eval(cmd) => eval_command(root, cmd),
        Command::Synth(cmd) => synth_command(root, cmd),
        Command::Pipeline(cmd) => pipeline_command(root, cmd),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing.
// ---------------------------------------------------------------------------

fn resolve(root: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        root.join(path)
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
    Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
}

/// `tag=path` pairs from repeated flags, resolved against the root.
fn parse_tagged(root: &Path, specs: &[String]) -> Result<Vec<(String, PathBuf)>, CliError> {
    specs
        .iter()
        .map(|spec| {
            let (tag, path) = spec.split_once('=').ok_or_else(|| {
                config_err(format!("expected tag=path, got {spec:?}"))
            })?;
            if tag.is_empty() {
                return Err(config_err(format!("empty tag in {spec:?}")));
            }
            Ok((tag.to_string(), resolve(root, Path::new(path))))
        })
        .collect()
}

fn tagged_lines(root: &Path, specs: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (tag, path) in parse_tagged(root, specs)? {
        for line in read_lines(&path)? {
            out.push((tag.clone(), line));
        }
    }
    Ok(out)
}

fn tagged_corpora(root: &Path, specs: &[String]) -> Result<Vec<LanguageCorpus>, CliError> {
    parse_tagged(root, specs)?
        .into_iter()
        .map(|(tag, path)| Ok(LanguageCorpus::new(tag, read_lines(&path)?)))
        .collect()
}

/// Training examples from either a plain line file or mixture JSONL.
fn read_examples(path: &Path) -> Result<Vec<String>, CliError> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        let mut out = Vec::new();
        for (i, line) in read_lines(path)?.into_iter().enumerate() {
            let ex: Example = serde_json::from_str(&line).map_err(|e| {
                config_err(format!("{}:{}: not a mixture record: {e}", path.display(), i + 1))
            })?;
            out.push(ex.text);
        }
        Ok(out)
    } else {
        read_lines(path)
    }
}

fn load_tok(path: &Path) -> Result<TokenizerModel, CliError> {
    TokenizerModel::load(path).map_err(config_err)
}

fn load_ckpt(path: &Path) -> Result<Checkpoint, CliError> {
    load_checkpoint(path).map_err(config_err)
}

fn parse_mode(s: &str) -> Result<EncodingMode, CliError> {
    match s.to_ascii_lowercase().replace('-', "_").as_str() {
        "merge_rank" => Ok(EncodingMode::MergeRank),
        "longest_match" => Ok(EncodingMode::LongestMatch),
        other => Err(config_err(format!(
            "unknown encoding mode {other:?}, expected merge_rank or longest_match"
        ))),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(run_err)?;
    println!("{text}");
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(run_err)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(run_err)?;
    std::fs::write(path, text).map_err(run_err)
}

/// Applies an explicit flag unless a config file already decided the key,
/// in which case the file wins and the flag is called out.
fn apply_flag<T: PartialEq + std::fmt::Display>(
    target: &mut T,
    flag: Option<T>,
    name: &str,
    file_present: bool,
) {
    if let Some(value) = flag {
        if file_present {
            if *target != value {
                eprintln!("warning: --{name} {value} ignored: the config file wins conflicts");
            }
        } else {
            *target = value;
        }
    }
}

// ---------------------------------------------------------------------------
// Subcommand bodies.
// ---------------------------------------------------------------------------

fn tok_command(root: &Path, cmd: TokCmd) -> Result<(), CliError> {
    match cmd {
        TokCmd::Train { input, vocab, mode, out } => {
            let mode = parse_mode(&mode)?;
            let mut lines = Vec::new();
            for path in &input {
                lines.extend(read_lines(&resolve(root, path))?);
            }
            let tok = train_bpe(&lines, vocab, mode).map_err(run_err)?;
            let out = resolve(root, &out);
            tok.save(&out).map_err(run_err)?;
            print_json(&serde_json::json!({
                "vocab_size": tok.vocab_size(),
                "truncated": tok.truncated(),
                "path": out.display().to_string(),
            }))
        }
        TokCmd::Prune { tok, input, min_count, out } => {
            let model = load_tok(&resolve(root, &tok))?;
            let mut lines = Vec::new();
            for path in &input {
                lines.extend(read_lines(&resolve(root, path))?);
            }
            let retained = prune_to_english(&model, &lines, min_count).map_err(run_err)?;
            let engine = base64::engine::general_purpose::STANDARD;
            let encoded: Vec<String> = retained.iter().map(|t| engine.encode(t)).collect();
            write_json(&resolve(root, &out), &encoded)?;
            print_json(&serde_json::json!({
                "retained": retained.len(),
                "of": model.vocab_size(),
            }))
        }
        TokCmd::Extend { retained, fresh, vocab, out } => {
            let text = std::fs::read_to_string(resolve(root, &retained))
                .map_err(|e| config_err(format!("cannot read retained list: {e}")))?;
            let encoded: Vec<String> = serde_json::from_str(&text)
                .map_err(|e| config_err(format!("retained list is not a JSON array: {e}")))?;
            let engine = base64::engine::general_purpose::STANDARD;
            let tokens = encoded
                .iter()
                .map(|s| engine.decode(s))
                .collect::<Result<Vec<Vec<u8>>, _>>()
                .map_err(|e| config_err(format!("retained list holds invalid base64: {e}")))?;
            let fresh = load_tok(&resolve(root, &fresh))?;
            let extended = extend(&tokens, &fresh, vocab).map_err(run_err)?;
            let out = resolve(root, &out);
            extended.save(&out).map_err(run_err)?;
            print_json(&serde_json::json!({
                "vocab_size": extended.vocab_size(),
                "path": out.display().to_string(),
            }))
        }
        TokCmd::Fertility { tok, corpus, reference } => {
            let model = load_tok(&resolve(root, &tok))?;
            let corpus = tagged_lines(root, &corpus)?;
            let reference = reference
                .map(|p| load_tok(&resolve(root, &p)))
                .transpose()?;
            let report = fertility(&model, &corpus, reference.as_ref());
            print_json(&report)
        }
        TokCmd::Overlap { a, b } => {
            let ta = load_tok(&resolve(root, &a))?;
            let tb = load_tok(&resolve(root, &b))?;
            print_json(&serde_json::json!({ "overlap": overlap(&ta, &tb) }))
        }
    }
}

fn data_command(root: &Path, cmd: DataCmd) -> Result<(), CliError> {
    match cmd {
        DataCmd::Sample { input, cap, seed, out_dir } => {
            let corpora = tagged_corpora(root, &input)?;
            let sampled = cap_sample(&corpora, cap, seed).map_err(run_err)?;
            let out_dir = resolve(root, &out_dir);
            std::fs::create_dir_all(&out_dir).map_err(run_err)?;
            let mut summary = serde_json::Map::new();
            for corpus in &sampled {
                let path = out_dir.join(format!("{}.txt", corpus.language_tag));
                std::fs::write(&path, corpus.lines.join("\n") + "\n").map_err(run_err)?;
                summary.insert(
                    corpus.language_tag.clone(),
                    serde_json::json!(corpus.lines.len()),
                );
            }
            print_json(&summary)
        }
        DataCmd::Mix { sent, doc, total, epochs, anchor, sentence_fraction, seed, out } => {
            if sent.is_empty() && doc.is_empty() {
                return Err(config_err("at least one --sent or --doc source is required"));
            }
            let sent = tagged_corpora(root, &sent)?;
            let doc = tagged_corpora(root, &doc)?;
            let spec = MixtureSpec {
                sentence_fraction,
                doc_fraction: 1.0 - sentence_fraction,
                unimax_n: epochs,
                english_always_included: anchor.is_some(),
                english_tag: anchor.unwrap_or_default(),
                seed,
            };
            let mixture =
                compose_pretraining_mixture(&sent, &doc, &spec, total).map_err(run_err)?;
            let out = resolve(root, &out);
            let mut text = String::new();
            for ex in &mixture {
                text.push_str(&serde_json::to_string(ex).map_err(run_err)?);
                text.push('\n');
            }
            std::fs::write(&out, text).map_err(run_err)?;
            let mut by_tag = std::collections::BTreeMap::new();
            for ex in &mixture {
                *by_tag.entry(ex.language_tag.clone()).or_insert(0usize) += 1;
            }
            print_json(&serde_json::json!({
                "examples": mixture.len(),
                "by_language": by_tag,
                "path": out.display().to_string(),
            }))
        }
    }
}

fn embed_command(root: &Path, cmd: EmbedCmd) -> Result<(), CliError> {
    match cmd {
        EmbedCmd::Init { ckpt, donor_tok, new_tok, pooling, out, report } => {
            let pooling: Pooling = pooling.parse().map_err(config_err)?;
            let donor = load_ckpt(&resolve(root, &ckpt))?;
            let donor_tok = load_tok(&resolve(root, &donor_tok))?;
            let new_tok = load_tok(&resolve(root, &new_tok))?;
            let donor_emb = EmbeddingMatrix::from_checkpoint(&donor).map_err(run_err)?;
            let (emb, surgery_report) =
                init_embeddings(&donor_emb, &donor_tok, &new_tok, pooling).map_err(run_err)?;
            emb.save(&resolve(root, &out)).map_err(run_err)?;
            if let Some(report_path) = report {
                write_json(&resolve(root, &report_path), &surgery_report)?;
            }
            print_json(&serde_json::json!({
                "copied": surgery_report.copied_count,
                "pooled": surgery_report.pooled_count,
                "overlap_fraction": surgery_report.overlap_fraction,
            }))
        }
        EmbedCmd::Compose { body, embedding, tok, out } => {
            let body = load_ckpt(&resolve(root, &body))?;
            let emb = EmbeddingMatrix::load(&resolve(root, &embedding)).map_err(config_err)?;
            let tok = tok.map(|p| load_tok(&resolve(root, &p))).transpose()?;
            let composed = compose(&body, &emb, tok.as_ref()).map_err(run_err)?;
            let out = resolve(root, &out);
            save_checkpoint(&out, &composed).map_err(run_err)?;
            print_json(&serde_json::json!({
                "vocab_size": composed.config.vocab_size,
                "path": out.display().to_string(),
            }))
        }
        EmbedCmd::Report { embedding } => {
            let emb = EmbeddingMatrix::load(&resolve(root, &embedding)).map_err(config_err)?;
            print_json(&serde_json::json!({
                "vocab_size": emb.vocab_size(),
                "dim": emb.dim(),
                "vocab_fingerprint": emb.vocab_fingerprint(),
            }))
        }
    }
}

fn train_command(root: &Path, cmd: TrainCmd) -> Result<(), CliError> {
    let (common, stage, start): (TrainCommon, Stage, Checkpoint) = match cmd {
        TrainCmd::Pretrain {
            common, dim, layers, heads, mlp, max_seq, rope_base, model_seed,
        } => {
            let tok = load_tok(&resolve(root, &common.tok))?;
            let config = ModelConfig {
                vocab_size: tok.vocab_size(),
                model_dim: dim,
                num_layers: layers,
                num_heads: heads,
                mlp_hidden: mlp,
                max_seq_len: max_seq,
                rope_base,
                seed: model_seed,
                lora: None,
            };
            let params = init_model::<f32>(&config).map_err(config_err)?;
            let ckpt =
                Checkpoint { config, params, vocab_fingerprint: tok.fingerprint() };
            (common, Stage::FullCpt, ckpt)
        }
        TrainCmd::LangAdapt { common, ckpt } => {
            let ckpt = load_ckpt(&resolve(root, &ckpt))?;
            (common, Stage::LangAdapt, ckpt)
        }
        TrainCmd::Instruct { common, ckpt } => {
            let ckpt = load_ckpt(&resolve(root, &ckpt))?;
            (common, Stage::InstructTune, ckpt)
        }
        TrainCmd::Lora { common, ckpt, rank, alpha, inject_seed } => {
            let mut ckpt = load_ckpt(&resolve(root, &ckpt))?;
            if ckpt.config.lora.is_none() {
                inject_lora(&mut ckpt.config, &mut ckpt.params, rank, alpha, inject_seed)
                    .map_err(run_err)?;
            }
            (common, Stage::LoraAdapt, ckpt)
        }
        TrainCmd::Cpt { common, ckpt } => {
            let ckpt = load_ckpt(&resolve(root, &ckpt))?;
            (common, Stage::FullCpt, ckpt)
        }
    };

    let tok = load_tok(&resolve(root, &common.tok))?;
    let texts = read_examples(&resolve(root, &common.data))?;
    let data: Vec<Vec<graft::tokenizer::TokenId>> = texts
        .iter()
        .map(|t| tok.encode(t))
        .filter(|ids| !ids.is_empty())
        .collect();
    let held_out: Option<Vec<Vec<graft::tokenizer::TokenId>>> = common
        .held_out
        .as_ref()
        .map(|p| -> Result<_, CliError> {
            Ok(read_examples(&resolve(root, p))?
                .iter()
                .map(|t| tok.encode(t))
                .filter(|ids| !ids.is_empty())
                .collect())
        })
        .transpose()?;

    let mut stage_cfg = StageConfig::for_stage(stage, common.steps);
    if let Some(lr) = common.lr {
        stage_cfg.learning_rate = lr;
    }
    stage_cfg.batch_size = common.batch;
    stage_cfg.pack_len = common.pack_len;
    stage_cfg.seed = common.seed;
    stage_cfg.eval_every = common.eval_every;

    let mut log_writer = common
        .log
        .as_ref()
        .map(|p| -> Result<_, CliError> {
            let path = resolve(root, p);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(run_err)?;
            }
            Ok(std::io::BufWriter::new(std::fs::File::create(path).map_err(run_err)?))
        })
        .transpose()?;

    let on_event = |event: &TrainEvent| {
        if let Some(w) = log_writer.as_mut() {
            use std::io::Write;
            if let Ok(line) = serde_json::to_string(event) {
                let _ = writeln!(w, "{line}");
            }
        }
    };
    let outcome = train_stage(
        &start.config,
        &start.params,
        &data,
        held_out.as_deref(),
        &stage_cfg,
        on_event,
    )
    .map_err(run_err)?;
    if let Some(mut w) = log_writer {
        use std::io::Write;
        w.flush().map_err(run_err)?;
    }

    let out = resolve(root, &common.out);
    save_checkpoint(
        &out,
        &Checkpoint {
            config: start.config,
            params: outcome.params,
            vocab_fingerprint: start.vocab_fingerprint,
        },
    )
    .map_err(run_err)?;
    print_json(&serde_json::json!({
        "stage": outcome.metrics.stage.name(),
        "steps": outcome.metrics.events.last().map_or(0, |e| e.step),
        "final_loss": outcome.metrics.final_loss,
        "total_tokens": outcome.metrics.total_tokens,
        "wall_ms": outcome.metrics.wall_ms,
        "best_held_out_ppl": outcome.best.as_ref().map(|b| b.held_out_ppl),
        "path": out.display().to_string(),
    }))
}

fn eval_command(root: &Path, cmd: EvalCmd) -> Result<(), CliError> {
    match cmd {
        EvalCmd::Ppl { ckpt, tok, corpus } => {
            let ckpt = load_ckpt(&resolve(root, &ckpt))?;
            let tok = load_tok(&resolve(root, &tok))?;
            let corpus = tagged_lines(root, &corpus)?;
            let report = perplexity(&ckpt, &tok, &corpus).map_err(run_err)?;
            print_json(&report)
        }
        EvalCmd::Classify { ckpt, tok, tasks, normalize } => {
            let ckpt = load_ckpt(&resolve(root, &ckpt))?;
            let tok = load_tok(&resolve(root, &tok))?;
            let items = read_tasks(&resolve(root, &tasks)).map_err(config_err)?;
            let report = classify_tasks(&ckpt, &tok, &items, normalize).map_err(run_err)?;
            print_json(&report)
        }
        EvalCmd::Decode { ckpt, tok, prompt, tasks, max_new } => {
            let ckpt = load_ckpt(&resolve(root, &ckpt))?;
            let tok = load_tok(&resolve(root, &tok))?;
            match (prompt, tasks) {
                (Some(prompt), None) => {
                    let completion =
                        greedy_decode(&ckpt, &tok, &prompt, max_new).map_err(run_err)?;
                    print_json(&serde_json::json!({
                        "prompt": prompt,
                        "completion": completion,
                    }))
                }
                (None, Some(tasks)) => {
                    let items = read_tasks(&resolve(root, &tasks)).map_err(config_err)?;
                    let report =
                        generation_tasks(&ckpt, &tok, &items, max_new).map_err(run_err)?;
                    print_json(&report)
                }
                _ => Err(config_err("provide exactly one of --prompt or --tasks")),
            }
        }
        EvalCmd::Latency { ckpt, tok, passages, repeats, reference } => {
            let ckpt = load_ckpt(&resolve(root, &ckpt))?;
            let tok = load_tok(&resolve(root, &tok))?;
            let passages = read_lines(&resolve(root, &passages))?;
            let reference = reference.map(|p| load_tok(&resolve(root, &p))).transpose()?;
            let report = latency_bench(&ckpt, &tok, &passages, repeats, reference.as_ref())
                .map_err(run_err)?;
            print_json(&report)
        }
    }
}

fn synth_command(root: &Path, cmd: SynthCmd) -> Result<(), CliError> {
    match cmd {
        SynthCmd::Gen { config, seed, vocab_words, mode, out_dir } => {
            let file_present = config.is_some();
            let mut spec = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(resolve(root, &path))
                        .map_err(|e| config_err(format!("cannot read spec: {e}")))?;
                    serde_json::from_str::<SyntheticLangSpec>(&text)
                        .map_err(|e| config_err(format!("malformed spec: {e}")))?
                }
                None => SyntheticLangSpec::default(),
            };
            apply_flag(&mut spec.seed, seed, "seed", file_present);
            apply_flag(&mut spec.base_vocab_words, vocab_words, "vocab-words", file_present);
            let mode = mode
                .map(|m| m.parse::<TargetMode>())
                .transpose()
                .map_err(config_err)?;
            if let Some(m) = mode {
                if file_present {
                    if spec.mode != m {
                        eprintln!("warning: --mode ignored: the config file wins conflicts");
                    }
                } else {
                    spec.mode = m;
                }
            }
            let corpora = gen_synthetic_corpora(&spec).map_err(run_err)?;
            let dir = resolve(root, &out_dir);
            let written = corpora.write_to_dir(&dir).map_err(run_err)?;
            print_json(&serde_json::json!({
                "files": written
                    .iter()
                    .map(|p| p.display().to_string())
                    .collect::<Vec<_>>(),
                "lexicon_words": corpora.lexicon.len(),
            }))
        }
    }
}

fn pipeline_command(root: &Path, cmd: PipelineCmd) -> Result<(), CliError> {
    match cmd {
        PipelineCmd::Run {
            config,
            out,
            seed,
            pretrain_steps,
            instruct_steps,
            lang_adapt_steps,
            lora_steps,
            cpt,
            check,
        } => {
            let file_present = config.is_some();
            let mut cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(resolve(root, &path))
                        .map_err(|e| config_err(format!("cannot read config: {e}")))?;
                    serde_json::from_str::<PipelineConfig>(&text)
                        .map_err(|e| config_err(format!("malformed config: {e}")))?
                }
                None => PipelineConfig::default(),
            };
            apply_flag(&mut cfg.seed, seed, "seed", file_present);
            apply_flag(&mut cfg.pretrain_steps, pretrain_steps, "pretrain-steps", file_present);
            apply_flag(&mut cfg.instruct_steps, instruct_steps, "instruct-steps", file_present);
            apply_flag(
                &mut cfg.lang_adapt_steps,
                lang_adapt_steps,
                "lang-adapt-steps",
                file_present,
            );
            apply_flag(&mut cfg.lora_steps, lora_steps, "lora-steps", file_present);
            if cpt {
                apply_flag(&mut cfg.cpt, Some(true), "cpt", file_present);
            }

            let run_root = resolve(root, &out);
            let outcome = run_pipeline(&cfg, &run_root, |line| eprintln!("{line}"))
                .map_err(|e| match e {
                    PipelineError::Config(_) => config_err(e),
                    other => run_err(other),
                })?;
            eprintln!("metrics: {}", metrics_path(&run_root).display());
            print_json(&outcome.metrics)?;

            if check {
                let c = &outcome.metrics.contrasts;
                let mut failing = Vec::new();
                if !c.improved_target_ppl {
                    failing.push(format!(
                        "target perplexity ratio {:.3} > 0.8",
                        c.target_ppl_ratio
                    ));
                }
                if !c.improved_target_accuracy {
                    failing.push(format!(
                        "target accuracy gain {:.1}pp < 15pp",
                        c.accuracy_gain_pp
                    ));
                }
                if !c.preserved_base_ppl {
                    failing.push(format!(
                        "base perplexity ratio {:.3} ≥ 1.1",
                        c.base_ppl_ratio
                    ));
                }
                if c.cpt_forgets_more == Some(false) {
                    failing.push("contrast arm did not forget more".to_string());
                }
                if !failing.is_empty() {
                    return Err(CliError::Check(failing.join("; ")));
                }
            }
            Ok(())
        }
    }
}
