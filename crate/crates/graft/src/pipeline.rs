//! End-to-end orchestration: synthetic fixture → donor tokenizer →
//! pretraining → the two independent adaptation arms (instruction-tuned
//! body; custom tokenizer + transplanted, language-adapted embeddings) →
//! composition → low-rank reconciliation → evaluation, with an optional
//! full continued-pretraining contrast arm.
//!
//! Every stage persists its artifacts under one root and records them in a
//! manifest with CRCs. A rerun over an intact root skips completed stages
//! (verified by CRC, not trust) and reproduces downstream bytes exactly;
//! deleting any stage's files causes just that stage and its dependents to
//! run again.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalh::{
    classify_tasks, generation_tasks, latency_bench, perplexity, read_tasks, LatencyReport,
    TaskItem,
};
use crate::model::{
    init_model, inject_lora, load_checkpoint, save_checkpoint, Checkpoint, ModelConfig,
    ParamSet,
};
use crate::sampler::{
    compose_lora_mixture, compose_pretraining_mixture, Example, LanguageCorpus, MixtureSpec,
    SourceLevel,
};
use crate::surgery::{compose, init_embeddings, EmbeddingMatrix, Pooling, SurgeryReport};
use crate::synth::{gen_synthetic_corpora, SyntheticLangSpec, BASE_TAG, PARALLEL_TAG, TARGET_TAG};
use crate::tokenizer::{
    extend, fertility, overlap, prune_to_english, train_bpe, EncodingMode, TokenId,
    TokenizerModel,
};
use crate::trainer::{train_stage, Stage, StageConfig};

type BoxErr = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: BoxErr,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed artifact state: {0}")]
    State(String),
}

/// Everything a full run needs; one master seed drives every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub synth: SyntheticLangSpec,
    /// Vocabulary budget of the base-only (donor) tokenizer.
    pub donor_vocab: usize,
    /// Vocabulary budget of the pruned-and-extended tokenizer.
    pub custom_vocab: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub pooling: Pooling,
    /// Ablation: initialize transplanted embeddings randomly instead of
    /// from the donor. Off by default; the donor rows are what make the
    /// composition work.
    pub random_embedding_init: bool,
    /// Fraction of the instruction set drawn into the reconciliation mix.
    pub it_fraction: f64,
    pub pretrain_examples: usize,
    pub adapt_examples: usize,
    pub pretrain_steps: usize,
    pub instruct_steps: usize,
    pub lang_adapt_steps: usize,
    pub lora_steps: usize,
    /// Run the full continued-pretraining contrast arm.
    pub cpt: bool,
    pub batch_size: usize,
    pub pack_len: usize,
    pub pretrain_lr: f64,
    pub instruct_lr: f64,
    pub lang_adapt_lr: f64,
    pub lora_lr: f64,
    pub cpt_lr: f64,
    /// Length-normalize option scores during classification.
    pub normalize_options: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SyntheticLangSpec::default(),
            donor_vocab: 2000,
            custom_vocab: 2000,
            model_dim: 64,
            num_layers: 2,
            num_heads: 4,
            mlp_hidden: 128,
            max_seq_len: 64,
            rope_base: 10_000.0,
            lora_rank: 8,
            lora_alpha: 16.0,
            pooling: Pooling::Avg,
            random_embedding_init: false,
            it_fraction: 0.5,
            pretrain_examples: 6000,
            adapt_examples: 4000,
            pretrain_steps: 550,
            instruct_steps: 350,
            lang_adapt_steps: 350,
            lora_steps: 200,
            cpt: false,
            batch_size: 8,
            pack_len: 64,
            pretrain_lr: 1e-3,
            instruct_lr: 5e-4,
            lang_adapt_lr: 3e-3,
            lora_lr: 1e-3,
            cpt_lr: 1e-3,
            normalize_options: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        self.synth.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        for (name, v) in [
            ("donor_vocab", self.donor_vocab),
            ("custom_vocab", self.custom_vocab),
        ] {
            if v < 300 {
                return err(format!("{name} {v} leaves no room beyond the byte alphabet"));
            }
        }
        if self.model_dim == 0
            || self.num_layers == 0
            || self.num_heads == 0
            || self.mlp_hidden == 0
        {
            return err("model dimensions must be positive".to_string());
        }
        if self.model_dim % self.num_heads != 0
            || (self.model_dim / self.num_heads) % 2 != 0
        {
            return err(format!(
                "model_dim {} must split into num_heads {} even-sized halves",
                self.model_dim, self.num_heads
            ));
        }
        if self.pack_len < 2 || self.pack_len > self.max_seq_len {
            return err(format!(
                "pack_len {} must lie in [2, max_seq_len {}]",
                self.pack_len, self.max_seq_len
            ));
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".to_string());
        }
        if self.lora_rank == 0 || self.lora_rank > self.model_dim {
            return err(format!(
                "lora_rank {} must lie in [1, model_dim {}]",
                self.lora_rank, self.model_dim
            ));
        }
        if !(self.it_fraction > 0.0 && self.it_fraction <= 1.0) {
            return err(format!("it_fraction {} must lie in (0, 1]", self.it_fraction));
        }
        if self.pretrain_examples == 0 || self.adapt_examples == 0 {
            return err("mixture sizes must be at least 1".to_string());
        }
        for (name, lr) in [
            ("pretrain_lr", self.pretrain_lr),
            ("instruct_lr", self.instruct_lr),
            ("lang_adapt_lr", self.lang_adapt_lr),
            ("lora_lr", self.lora_lr),
            ("cpt_lr", self.cpt_lr),
        ] {
            if !(lr.is_finite() && lr >= 0.0) {
                return err(format!("{name} {lr} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Distinct deterministic stream per consumer of the master seed.
fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
}

// ---------------------------------------------------------------------------
// Artifact store: relative paths, CRCs, stages, atomic manifest updates.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    pub crc32: String,
    pub bytes: u64,
}

/// Maps every artifact file (relative path) to its producing stage and CRC.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub version: u32,
    pub files: BTreeMap<String, ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";
const CONFIG_NAME: &str = "config.json";

fn file_crc(path: &Path) -> std::io::Result<(String, u64)> {
    let bytes = std::fs::read(path)?;
    let mut h = crc32fast::Hasher::new();
    h.update(&bytes);
    Ok((format!("{:08x}", h.finalize()), bytes.len() as u64))
}

struct Store {
    root: PathBuf,
    manifest: PipelineManifest,
}

impl Store {
    fn open(root: &Path) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(root)?;
        let path = root.join(MANIFEST_NAME);
        let manifest = if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            serde_json::from_str(&text)
                .map_err(|e| PipelineError::State(format!("unreadable manifest: {e}")))?
        } else {
            PipelineManifest { version: 1, files: BTreeMap::new() }
        };
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    fn rel(&self, path: &Path) -> Result<String, PipelineError> {
        let rel = path.strip_prefix(&self.root).map_err(|_| {
            PipelineError::State(format!("{} is outside the artifacts root", path.display()))
        })?;
        Ok(rel.components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/"))
    }

    /// True iff every listed output is already recorded for this stage and
    /// its bytes on disk still match the recorded CRC.
    fn stage_complete(&self, stage: &str, outputs: &[PathBuf]) -> bool {
        outputs.iter().all(|path| {
            let Ok(rel) = self.rel(path) else { return false };
            let Some(entry) = self.manifest.files.get(&rel) else { return false };
            if entry.stage != stage {
                return false;
            }
            match file_crc(path) {
                Ok((crc, bytes)) => crc == entry.crc32 && bytes == entry.bytes,
                Err(_) => false,
            }
        })
    }

    fn record(&mut self, stage: &str, outputs: &[PathBuf]) -> Result<(), PipelineError> {
        for path in outputs {
            let rel = self.rel(path)?;
            let (crc32, bytes) = file_crc(path).map_err(|e| {
                PipelineError::State(format!("stage {stage} did not produce {rel}: {e}"))
            })?;
            self.manifest.files.insert(rel, ManifestEntry { stage: stage.to_string(), crc32, bytes });
        }
        self.save_manifest()
    }

    fn save_manifest(&self) -> Result<(), PipelineError> {
        let path = self.root.join(MANIFEST_NAME);
        let tmp = self.root.join(format!("{MANIFEST_NAME}.tmp"));
        let text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| PipelineError::State(e.to_string()))?;
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Stage names and artifact layout.
// ---------------------------------------------------------------------------

const S_FIXTURE: &str = "fixture";
const S_DONOR_TOK: &str = "donor_tokenizer";
const S_PRETRAIN: &str = "pretrain";
const S_INSTRUCT: &str = "instruct";
const S_CUSTOM_TOK: &str = "custom_tokenizer";
const S_TRANSPLANT: &str = "transplant";
const S_LANG_ADAPT: &str = "lang_adapt";
const S_COMPOSE: &str = "compose";
const S_LORA: &str = "lora_adapt";
const S_CPT_FULL: &str = "cpt_full";
const S_CPT_INSTRUCT: &str = "cpt_instruct";
const S_EVAL: &str = "eval";

fn fixture_dir(root: &Path) -> PathBuf {
    root.join("fixture")
}

fn fixture_paths(root: &Path) -> Vec<PathBuf> {
    let dir = fixture_dir(root);
    [
        "lexicon.txt".to_string(),
        format!("{BASE_TAG}.sent.txt"),
        format!("{BASE_TAG}.doc.txt"),
        format!("{TARGET_TAG}.sent.txt"),
        format!("{TARGET_TAG}.doc.txt"),
        "parallel.sent.txt".to_string(),
        "instruct.txt".to_string(),
        format!("heldout.{BASE_TAG}.txt"),
        format!("heldout.{TARGET_TAG}.txt"),
        format!("eval.{BASE_TAG}.jsonl"),
        format!("eval.{TARGET_TAG}.jsonl"),
    ]
    .into_iter()
    .map(|n| dir.join(n))
    .collect()
}

fn donor_tok_path(root: &Path) -> PathBuf {
    root.join("tok").join("donor.json")
}

fn custom_tok_path(root: &Path) -> PathBuf {
    root.join("tok").join("custom.json")
}

/// The files `save_checkpoint` writes for a model with or without adapters.
fn ckpt_paths(dir: &Path, with_lora: bool) -> Vec<PathBuf> {
    let mut names = vec!["config.json", "embedding.bin", "body.bin"];
    if with_lora {
        names.push("lora.bin");
    }
    names.push("manifest.json");
    names.into_iter().map(|n| dir.join(n)).collect()
}

pub fn checkpoint_dir(root: &Path, name: &str) -> PathBuf {
    root.join("ckpt").join(name)
}

fn metrics_dir(root: &Path) -> PathBuf {
    root.join("metrics")
}

fn train_log_path(root: &Path, stage: &str) -> PathBuf {
    metrics_dir(root).join(format!("train_{stage}.ndjson"))
}

pub fn metrics_path(root: &Path) -> PathBuf {
    metrics_dir(root).join("metrics.json")
}

// ---------------------------------------------------------------------------
// Metrics.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenizerStats {
    pub donor_vocab: usize,
    pub custom_vocab: usize,
    /// Fraction of custom-tokenizer byte-strings present in the donor.
    pub overlap: f64,
    pub donor_fertility_base: f64,
    pub donor_fertility_target: f64,
    pub custom_fertility_base: f64,
    pub custom_fertility_target: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransplantStats {
    pub copied_count: usize,
    pub pooled_count: usize,
    pub overlap_fraction: f64,
}

/// One model's scores over both languages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelEval {
    pub base_perplexity: f64,
    pub target_perplexity: f64,
    pub base_accuracy: f64,
    pub target_accuracy: f64,
    pub base_exact_match: f64,
    pub target_exact_match: f64,
}

/// The headline comparisons between the composed model and the
/// instruction-tuned baseline (plus the continued-pretraining arm if run).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Contrasts {
    /// composed ÷ baseline target-language perplexity (< 1 is better).
    pub target_ppl_ratio: f64,
    /// Composed minus baseline target-language accuracy, in percentage points.
    pub accuracy_gain_pp: f64,
    /// composed ÷ baseline base-language perplexity (≈ 1 means no forgetting).
    pub base_ppl_ratio: f64,
    pub cpt_base_ppl_ratio: Option<f64>,
    pub improved_target_ppl: bool,
    pub improved_target_accuracy: bool,
    pub preserved_base_ppl: bool,
    /// The contrast arm forgets the base language strictly more.
    pub cpt_forgets_more: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineMetrics {
    pub tokenizers: TokenizerStats,
    pub transplant: TransplantStats,
    /// Keyed by model name: pretrain, baseline, composed, cpt.
    pub models: BTreeMap<String, ModelEval>,
    pub latency: LatencyReport,
    pub contrasts: Contrasts,
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub root: PathBuf,
    pub metrics: PipelineMetrics,
}

// ---------------------------------------------------------------------------
// Shared helpers for stage bodies.
// ---------------------------------------------------------------------------

fn read_lines(path: &Path) -> Result<Vec<String>, BoxErr> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
}

fn encode_examples(tok: &TokenizerModel, examples: &[Example]) -> Vec<Vec<TokenId>> {
    examples
        .iter()
        .map(|e| tok.encode(&e.text))
        .filter(|ids| !ids.is_empty())
        .collect()
}

fn tag_lines(tag: &str, lines: &[String]) -> Vec<(String, String)> {
    lines.iter().map(|l| (tag.to_string(), l.clone())).collect()
}

struct Fixture {
    base_sent: Vec<String>,
    base_doc: Vec<String>,
    target_sent: Vec<String>,
    target_doc: Vec<String>,
    parallel: Vec<String>,
    instructions: Vec<String>,
    heldout_base: Vec<String>,
    heldout_target: Vec<String>,
    eval_tasks: Vec<TaskItem>,
}

fn load_fixture(root: &Path) -> Result<Fixture, BoxErr> {
    let dir = fixture_dir(root);
    let mut eval_tasks = read_tasks(&dir.join(format!("eval.{BASE_TAG}.jsonl")))?;
    eval_tasks.extend(read_tasks(&dir.join(format!("eval.{TARGET_TAG}.jsonl")))?);
    Ok(Fixture {
        base_sent: read_lines(&dir.join(format!("{BASE_TAG}.sent.txt")))?,
        base_doc: read_lines(&dir.join(format!("{BASE_TAG}.doc.txt")))?,
        target_sent: read_lines(&dir.join(format!("{TARGET_TAG}.sent.txt")))?,
        target_doc: read_lines(&dir.join(format!("{TARGET_TAG}.doc.txt")))?,
        parallel: read_lines(&dir.join("parallel.sent.txt"))?,
        instructions: read_lines(&dir.join("instruct.txt"))?,
        heldout_base: read_lines(&dir.join(format!("heldout.{BASE_TAG}.txt")))?,
        heldout_target: read_lines(&dir.join(format!("heldout.{TARGET_TAG}.txt")))?,
        eval_tasks,
    })
}

/// The pretraining mixture: base-language sentences and documents only.
fn pretrain_mixture(cfg: &PipelineConfig, fx: &Fixture) -> Result<Vec<Example>, BoxErr> {
    let spec = MixtureSpec {
        english_tag: BASE_TAG.to_string(),
        seed: derive_seed(cfg.seed, 2),
        ..MixtureSpec::default()
    };
    let sent = [LanguageCorpus::new(BASE_TAG, fx.base_sent.clone())];
    let doc = [LanguageCorpus::new(BASE_TAG, fx.base_doc.clone())];
    Ok(compose_pretraining_mixture(&sent, &doc, &spec, cfg.pretrain_examples)?)
}

/// The adaptation mixture: both languages plus parallel pairs.
fn adapt_mixture(cfg: &PipelineConfig, fx: &Fixture) -> Result<Vec<Example>, BoxErr> {
    let spec = MixtureSpec {
        english_tag: BASE_TAG.to_string(),
        seed: derive_seed(cfg.seed, 6),
        ..MixtureSpec::default()
    };
    let sent = [
        LanguageCorpus::new(BASE_TAG, fx.base_sent.clone()),
        LanguageCorpus::new(TARGET_TAG, fx.target_sent.clone()),
        LanguageCorpus::new(PARALLEL_TAG, fx.parallel.clone()),
    ];
    let doc = [
        LanguageCorpus::new(BASE_TAG, fx.base_doc.clone()),
        LanguageCorpus::new(TARGET_TAG, fx.target_doc.clone()),
    ];
    Ok(compose_pretraining_mixture(&sent, &doc, &spec, cfg.adapt_examples)?)
}

fn instruction_examples(fx: &Fixture) -> Vec<Example> {
    fx.instructions
        .iter()
        .map(|l| Example {
            text: l.clone(),
            language_tag: BASE_TAG.to_string(),
            level: SourceLevel::Sentence,
        })
        .collect()
}

/// Runs one training stage, streaming events to an NDJSON log. With zero
/// steps the parameters pass through bit-unchanged (the log is still
/// created, empty), which keeps no-op pipelines expressible.
#[allow(clippy::too_many_arguments)]
fn run_training(
    cfg: &PipelineConfig,
    model_cfg: &ModelConfig,
    params: &ParamSet<f32>,
    examples: &[Example],
    tok: &TokenizerModel,
    stage: Stage,
    steps: usize,
    lr: f64,
    seed: u64,
    log_path: &Path,
) -> Result<ParamSet<f32>, BoxErr> {
    std::fs::create_dir_all(log_path.parent().expect("log path has a parent"))?;
    let file = std::fs::File::create(log_path)?;
    let mut writer = BufWriter::new(file);
    if steps == 0 {
        writer.flush()?;
        return Ok(params.clone());
    }
    let data = encode_examples(tok, examples);
    let mut stage_cfg = StageConfig::for_stage(stage, steps);
    stage_cfg.learning_rate = lr;
    stage_cfg.batch_size = cfg.batch_size;
    stage_cfg.pack_len = cfg.pack_len;
    stage_cfg.seed = seed;
    let mut log_err: Option<std::io::Error> = None;
    let outcome = train_stage(model_cfg, params, &data, None, &stage_cfg, |event| {
        if log_err.is_none() {
            if let Err(e) = serde_json::to_string(event)
                .map_err(std::io::Error::other)
                .and_then(|line| writeln!(writer, "{line}"))
            {
                log_err = Some(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(Box::new(e));
    }
    writer.flush()?;
    Ok(outcome.params)
}

fn save_ckpt(dir: &Path, ckpt: &Checkpoint) -> Result<(), BoxErr> {
    save_checkpoint(dir, ckpt)?;
    Ok(())
}

fn load_ckpt(dir: &Path) -> Result<Checkpoint, BoxErr> {
    Ok(load_checkpoint(dir)?)
}

fn load_tok(path: &Path) -> Result<TokenizerModel, BoxErr> {
    Ok(TokenizerModel::load(path)?)
}

fn model_config(cfg: &PipelineConfig, vocab_size: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        model_dim: cfg.model_dim,
        num_layers: cfg.num_layers,
        num_heads: cfg.num_heads,
        mlp_hidden: cfg.mlp_hidden,
        max_seq_len: cfg.max_seq_len,
        rope_base: cfg.rope_base,
        seed: derive_seed(cfg.seed, 3),
        lora: None,
    }
}

fn eval_model(
    ckpt: &Checkpoint,
    tok: &TokenizerModel,
    fx: &Fixture,
    normalize: bool,
) -> Result<ModelEval, BoxErr> {
    let mut corpus = tag_lines(BASE_TAG, &fx.heldout_base);
    corpus.extend(tag_lines(TARGET_TAG, &fx.heldout_target));
    let ppl = perplexity(ckpt, tok, &corpus)?;
    let ppl_of = |tag: &str| -> Result<f64, BoxErr> {
        ppl.language(tag)
            .map(|l| l.perplexity)
            .ok_or_else(|| format!("no perplexity computed for language {tag}").into())
    };
    let cls = classify_tasks(ckpt, tok, &fx.eval_tasks, normalize)?;
    let acc_of = |tag: &str| {
        cls.per_language
            .iter()
            .find(|l| l.language == tag)
            .map(|l| l.accuracy)
            .unwrap_or(0.0)
    };
    let gen = generation_tasks(ckpt, tok, &fx.eval_tasks, 32)?;
    let gen_of = |tag: &str| {
        let scored: Vec<_> = gen.outcomes.iter().filter(|o| o.language_tag == tag).collect();
        if scored.is_empty() {
            0.0
        } else {
            scored.iter().filter(|o| o.exact_match).count() as f64 / scored.len() as f64
        }
    };
    Ok(ModelEval {
        base_perplexity: ppl_of(BASE_TAG)?,
        target_perplexity: ppl_of(TARGET_TAG)?,
        base_accuracy: acc_of(BASE_TAG),
        target_accuracy: acc_of(TARGET_TAG),
        base_exact_match: gen_of(BASE_TAG),
        target_exact_match: gen_of(TARGET_TAG),
    })
}

// ---------------------------------------------------------------------------
// The pipeline itself.
// ---------------------------------------------------------------------------

/// Runs (or resumes) the full pipeline under `root`, reporting one line per
/// stage to `progress`. Returns the final metrics, which are also written
/// to `metrics/metrics.json`.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    root: &Path,
    mut progress: impl FnMut(&str),
) -> Result<PipelineOutcome, PipelineError> {
    cfg.validate()?;
    let mut store = Store::open(root)?;

    // The stored config gates resumption: silently mixing configs would
    // produce artifacts that belong to no single run.
    let config_path = root.join(CONFIG_NAME);
    if config_path.exists() {
        let text = std::fs::read_to_string(&config_path)?;
        let stored: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::State(format!("unreadable stored config: {e}")))?;
        if &stored != cfg {
            return Err(PipelineError::Config(format!(
                "artifacts at {} were produced by a different config; \
                 use a fresh directory or the matching config",
                root.display()
            )));
        }
    } else {
        let text = serde_json::to_string_pretty(cfg)
            .map_err(|e| PipelineError::State(e.to_string()))?;
        std::fs::write(&config_path, text)?;
    }
    store.record("config", &[config_path])?;

    let run_stage = |store: &mut Store,
                         progress: &mut dyn FnMut(&str),
                         name: &'static str,
                         outputs: Vec<PathBuf>,
                         body: &mut dyn FnMut() -> Result<(), BoxErr>|
     -> Result<(), PipelineError> {
        if store.stage_complete(name, &outputs) {
            progress(&format!("[skip] {name}"));
            return Ok(());
        }
        progress(&format!("[run ] {name}"));
        for out in &outputs {
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
        }
        body().map_err(|source| PipelineError::Stage { stage: name, source })?;
        store.record(name, &outputs)
    };

    // -- fixture ------------------------------------------------------------
    let synth_spec = SyntheticLangSpec { seed: derive_seed(cfg.seed, 1), ..cfg.synth.clone() };
    run_stage(&mut store, &mut progress, S_FIXTURE, fixture_paths(root), &mut || {
        let corpora = gen_synthetic_corpora(&synth_spec)?;
        corpora.write_to_dir(&fixture_dir(root))?;
        Ok(())
    })?;

    // -- donor tokenizer ------------------------------------------------------
    run_stage(
        &mut store,
        &mut progress,
        S_DONOR_TOK,
        vec![donor_tok_path(root)],
        &mut || {
            let fx = load_fixture(root)?;
            let mut lines = fx.base_sent.clone();
            lines.extend(fx.base_doc.iter().cloned());
            lines.extend(fx.instructions.iter().cloned());
            let tok = train_bpe(&lines, cfg.donor_vocab, EncodingMode::MergeRank)?;
            tok.save(&donor_tok_path(root))?;
            Ok(())
        },
    )?;

    // -- pretrain -------------------------------------------------------------
    let pretrain_dir = checkpoint_dir(root, "pretrain");
    {
        let mut outputs = ckpt_paths(&pretrain_dir, false);
        outputs.push(train_log_path(root, S_PRETRAIN));
        run_stage(&mut store, &mut progress, S_PRETRAIN, outputs, &mut || {
            let fx = load_fixture(root)?;
            let tok = load_tok(&donor_tok_path(root))?;
            let mixture = pretrain_mixture(cfg, &fx)?;
            let model_cfg = model_config(cfg, tok.vocab_size());
            let params = init_model::<f32>(&model_cfg)?;
            let trained = run_training(
                cfg,
                &model_cfg,
                &params,
                &mixture,
                &tok,
                Stage::FullCpt,
                cfg.pretrain_steps,
                cfg.pretrain_lr,
                derive_seed(cfg.seed, 4),
                &train_log_path(root, S_PRETRAIN),
            )?;
            save_ckpt(
                &pretrain_dir,
                &Checkpoint {
                    config: model_cfg,
                    params: trained,
                    vocab_fingerprint: tok.fingerprint(),
                },
            )
        })?;
    }

    // -- instruction tuning (arm a: body only, embeddings frozen) -------------
    let instruct_dir = checkpoint_dir(root, "instruct");
    {
        let mut outputs = ckpt_paths(&instruct_dir, false);
        outputs.push(train_log_path(root, S_INSTRUCT));
        run_stage(&mut store, &mut progress, S_INSTRUCT, outputs, &mut || {
            let fx = load_fixture(root)?;
            let tok = load_tok(&donor_tok_path(root))?;
            let base = load_ckpt(&pretrain_dir)?;
            let examples = instruction_examples(&fx);
            let trained = run_training(
                cfg,
                &base.config,
                &base.params,
                &examples,
                &tok,
                Stage::InstructTune,
                cfg.instruct_steps,
                cfg.instruct_lr,
                derive_seed(cfg.seed, 5),
                &train_log_path(root, S_INSTRUCT),
            )?;
            save_ckpt(
                &instruct_dir,
                &Checkpoint { config: base.config, params: trained, vocab_fingerprint: base.vocab_fingerprint },
            )
        })?;
    }

    // -- custom tokenizer (arm b: prune the donor, extend multilingually) -----
    run_stage(
        &mut store,
        &mut progress,
        S_CUSTOM_TOK,
        vec![custom_tok_path(root)],
        &mut || {
            let fx = load_fixture(root)?;
            let donor = load_tok(&donor_tok_path(root))?;
            let mut base_lines = fx.base_sent.clone();
            base_lines.extend(fx.base_doc.iter().cloned());
            base_lines.extend(fx.instructions.iter().cloned());
            let retained = prune_to_english(&donor, &base_lines, 1)?;
            let mut multilingual = base_lines;
            multilingual.extend(fx.target_sent.iter().cloned());
            multilingual.extend(fx.target_doc.iter().cloned());
            multilingual.extend(fx.parallel.iter().cloned());
            let fresh = train_bpe(&multilingual, cfg.custom_vocab, EncodingMode::MergeRank)?;
            let custom = extend(&retained, &fresh, cfg.custom_vocab)?;
            custom.save(&custom_tok_path(root))?;
            Ok(())
        },
    )?;

    // -- transplant: donor rows → custom vocabulary, body unchanged -----------
    let la_start_dir = checkpoint_dir(root, "la_start");
    let transplant_json = metrics_dir(root).join("transplant.json");
    {
        let mut outputs = ckpt_paths(&la_start_dir, false);
        outputs.push(transplant_json.clone());
        run_stage(&mut store, &mut progress, S_TRANSPLANT, outputs, &mut || {
            let donor_tok = load_tok(&donor_tok_path(root))?;
            let custom_tok = load_tok(&custom_tok_path(root))?;
            let pretrain = load_ckpt(&pretrain_dir)?;
            let donor_emb = EmbeddingMatrix::from_checkpoint(&pretrain)?;
            let (mut emb, report) =
                init_embeddings(&donor_emb, &donor_tok, &custom_tok, cfg.pooling)?;
            if cfg.random_embedding_init {
                emb = random_embedding(
                    custom_tok.vocab_size(),
                    pretrain.config.model_dim,
                    custom_tok.fingerprint(),
                    derive_seed(cfg.seed, 13),
                )?;
            }
            let start = compose(&pretrain, &emb, Some(&custom_tok))?;
            save_ckpt(&la_start_dir, &start)?;
            write_json(&transplant_json, &report)?;
            Ok(())
        })?;
    }

    // -- language adaptation (arm b: embeddings only, body frozen) ------------
    let lang_adapt_dir = checkpoint_dir(root, "lang_adapt");
    {
        let mut outputs = ckpt_paths(&lang_adapt_dir, false);
        outputs.push(train_log_path(root, S_LANG_ADAPT));
        run_stage(&mut store, &mut progress, S_LANG_ADAPT, outputs, &mut || {
            let fx = load_fixture(root)?;
            let tok = load_tok(&custom_tok_path(root))?;
            let start = load_ckpt(&la_start_dir)?;
            let mixture = adapt_mixture(cfg, &fx)?;
            let trained = run_training(
                cfg,
                &start.config,
                &start.params,
                &mixture,
                &tok,
                Stage::LangAdapt,
                cfg.lang_adapt_steps,
                cfg.lang_adapt_lr,
                derive_seed(cfg.seed, 7),
                &train_log_path(root, S_LANG_ADAPT),
            )?;
            save_ckpt(
                &lang_adapt_dir,
                &Checkpoint { config: start.config, params: trained, vocab_fingerprint: start.vocab_fingerprint },
            )
        })?;
    }

    // -- composition: instruction-tuned body + adapted embeddings -------------
    let composed_dir = checkpoint_dir(root, "composed");
    run_stage(
        &mut store,
        &mut progress,
        S_COMPOSE,
        ckpt_paths(&composed_dir, false),
        &mut || {
            let custom_tok = load_tok(&custom_tok_path(root))?;
            let instruct = load_ckpt(&instruct_dir)?;
            let adapted = load_ckpt(&lang_adapt_dir)?;
            let emb = EmbeddingMatrix::from_checkpoint(&adapted)?;
            let franken = compose(&instruct, &emb, Some(&custom_tok))?;
            save_ckpt(&composed_dir, &franken)
        },
    )?;

    // -- low-rank reconciliation ----------------------------------------------
    let franken_dir = checkpoint_dir(root, "franken");
    {
        let mut outputs = ckpt_paths(&franken_dir, true);
        outputs.push(train_log_path(root, S_LORA));
        run_stage(&mut store, &mut progress, S_LORA, outputs, &mut || {
            let fx = load_fixture(root)?;
            let tok = load_tok(&custom_tok_path(root))?;
            let composed = load_ckpt(&composed_dir)?;
            let mut model_cfg = composed.config.clone();
            let mut params = composed.params.clone();
            inject_lora(
                &mut model_cfg,
                &mut params,
                cfg.lora_rank,
                cfg.lora_alpha,
                derive_seed(cfg.seed, 8),
            )?;
            let d_it = instruction_examples(&fx);
            let d_la = adapt_mixture(cfg, &fx)?;
            let mix = compose_lora_mixture(&d_it, &d_la, cfg.it_fraction, derive_seed(cfg.seed, 9))?;
            let trained = run_training(
                cfg,
                &model_cfg,
                &params,
                &mix,
                &tok,
                Stage::LoraAdapt,
                cfg.lora_steps,
                cfg.lora_lr,
                derive_seed(cfg.seed, 10),
                &train_log_path(root, S_LORA),
            )?;
            save_ckpt(
                &franken_dir,
                &Checkpoint { config: model_cfg, params: trained, vocab_fingerprint: composed.vocab_fingerprint },
            )
        })?;
    }

    // -- contrast arm: full continued pretraining, then instruction tuning ----
    let cpt_full_dir = checkpoint_dir(root, "cpt_full");
    let cpt_final_dir = checkpoint_dir(root, "cpt_final");
    if cfg.cpt {
        let mut outputs = ckpt_paths(&cpt_full_dir, false);
        outputs.push(train_log_path(root, S_CPT_FULL));
        run_stage(&mut store, &mut progress, S_CPT_FULL, outputs, &mut || {
            let fx = load_fixture(root)?;
            let tok = load_tok(&custom_tok_path(root))?;
            let start = load_ckpt(&la_start_dir)?;
            let mixture = adapt_mixture(cfg, &fx)?;
            // Same token budget as adaptation plus reconciliation combined.
            let steps = cfg.lang_adapt_steps + cfg.lora_steps;
            let trained = run_training(
                cfg,
                &start.config,
                &start.params,
                &mixture,
                &tok,
                Stage::FullCpt,
                steps,
                cfg.cpt_lr,
                derive_seed(cfg.seed, 11),
                &train_log_path(root, S_CPT_FULL),
            )?;
            save_ckpt(
                &cpt_full_dir,
                &Checkpoint { config: start.config, params: trained, vocab_fingerprint: start.vocab_fingerprint },
            )
        })?;

        let mut outputs = ckpt_paths(&cpt_final_dir, false);
        outputs.push(train_log_path(root, S_CPT_INSTRUCT));
        run_stage(&mut store, &mut progress, S_CPT_INSTRUCT, outputs, &mut || {
            let fx = load_fixture(root)?;
            let tok = load_tok(&custom_tok_path(root))?;
            let full = load_ckpt(&cpt_full_dir)?;
            let examples = instruction_examples(&fx);
            let trained = run_training(
                cfg,
                &full.config,
                &full.params,
                &examples,
                &tok,
                Stage::InstructTune,
                cfg.instruct_steps,
                cfg.instruct_lr,
                derive_seed(cfg.seed, 12),
                &train_log_path(root, S_CPT_INSTRUCT),
            )?;
            save_ckpt(
                &cpt_final_dir,
                &Checkpoint { config: full.config, params: trained, vocab_fingerprint: full.vocab_fingerprint },
            )
        })?;
    }

    // -- evaluation -------------------------------------------------------------
    run_stage(
        &mut store,
        &mut progress,
        S_EVAL,
        vec![metrics_path(root)],
        &mut || {
            let fx = load_fixture(root)?;
            let donor_tok = load_tok(&donor_tok_path(root))?;
            let custom_tok = load_tok(&custom_tok_path(root))?;

            let mut corpus = tag_lines(BASE_TAG, &fx.heldout_base);
            corpus.extend(tag_lines(TARGET_TAG, &fx.heldout_target));
            let donor_fert = fertility(&donor_tok, &corpus, None);
            let custom_fert = fertility(&custom_tok, &corpus, None);
            let fert_of = |report: &crate::tokenizer::FertilityReport,
                           tag: &str|
             -> Result<f64, BoxErr> {
                report
                    .language(tag)
                    .map(|l| l.fertility)
                    .ok_or_else(|| format!("no fertility for language {tag}").into())
            };
            let tokenizers = TokenizerStats {
                donor_vocab: donor_tok.vocab_size(),
                custom_vocab: custom_tok.vocab_size(),
                overlap: overlap(&custom_tok, &donor_tok),
                donor_fertility_base: fert_of(&donor_fert, BASE_TAG)?,
                donor_fertility_target: fert_of(&donor_fert, TARGET_TAG)?,
                custom_fertility_base: fert_of(&custom_fert, BASE_TAG)?,
                custom_fertility_target: fert_of(&custom_fert, TARGET_TAG)?,
            };

            let report: SurgeryReport = read_json(&transplant_json)?;
            let transplant = TransplantStats {
                copied_count: report.copied_count,
                pooled_count: report.pooled_count,
                overlap_fraction: report.overlap_fraction,
            };

            let mut models = BTreeMap::new();
            let pretrain = load_ckpt(&pretrain_dir)?;
            models.insert(
                "pretrain".to_string(),
                eval_model(&pretrain, &donor_tok, &fx, cfg.normalize_options)?,
            );
            let baseline = load_ckpt(&instruct_dir)?;
            let baseline_eval = eval_model(&baseline, &donor_tok, &fx, cfg.normalize_options)?;
            let franken = load_ckpt(&franken_dir)?;
            let franken_eval = eval_model(&franken, &custom_tok, &fx, cfg.normalize_options)?;
            let cpt_eval = if cfg.cpt {
                let cpt = load_ckpt(&cpt_final_dir)?;
                Some(eval_model(&cpt, &custom_tok, &fx, cfg.normalize_options)?)
            } else {
                None
            };

            let passages: Vec<String> =
                fx.heldout_target.iter().take(16).cloned().collect();
            let latency = latency_bench(&franken, &custom_tok, &passages, 3, Some(&donor_tok))?;

            let target_ppl_ratio =
                franken_eval.target_perplexity / baseline_eval.target_perplexity;
            let accuracy_gain_pp =
                (franken_eval.target_accuracy - baseline_eval.target_accuracy) * 100.0;
            let base_ppl_ratio = franken_eval.base_perplexity / baseline_eval.base_perplexity;
            let cpt_base_ppl_ratio = cpt_eval
                .as_ref()
                .map(|c| c.base_perplexity / baseline_eval.base_perplexity);
            let contrasts = Contrasts {
                target_ppl_ratio,
                accuracy_gain_pp,
                base_ppl_ratio,
                cpt_base_ppl_ratio,
                improved_target_ppl: target_ppl_ratio <= 0.8,
                improved_target_accuracy: accuracy_gain_pp >= 15.0,
                preserved_base_ppl: base_ppl_ratio < 1.1,
                cpt_forgets_more: cpt_base_ppl_ratio.map(|r| r > base_ppl_ratio),
            };

            models.insert("baseline".to_string(), baseline_eval);
            models.insert("composed".to_string(), franken_eval);
            if let Some(c) = cpt_eval {
                models.insert("cpt".to_string(), c);
            }

            let metrics =
                PipelineMetrics { tokenizers, transplant, models, latency, contrasts };
            write_json(&metrics_path(root), &metrics)?;
            Ok(())
        },
    )?;

    let text = std::fs::read_to_string(metrics_path(root))?;
    let metrics: PipelineMetrics = serde_json::from_str(&text)
        .map_err(|e| PipelineError::State(format!("unreadable metrics: {e}")))?;
    Ok(PipelineOutcome { root: root.to_path_buf(), metrics })
}

fn random_embedding(
    vocab_size: usize,
    dim: usize,
    fingerprint: String,
    seed: u64,
) -> Result<EmbeddingMatrix, BoxErr> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 0.02).expect("valid distribution");
    let weights = ndarray::Array2::from_shape_fn((vocab_size, dim), |_| normal.sample(&mut rng));
    Ok(EmbeddingMatrix::new(weights, fingerprint)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), BoxErr> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, BoxErr> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Every file under `root`, as manifest-style relative paths.
pub fn artifact_files(root: &Path) -> std::io::Result<Vec<String>> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<String>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let entry = entry?;
            let path = entry.path();
            if path.is_dir() {
                walk(&path, root, out)?;
            } else {
                let rel = path
                    .strip_prefix(root)
                    .expect("walk stays under root")
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/");
                out.push(rel);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort();
    Ok(out)
}

pub fn load_manifest(root: &Path) -> Result<PipelineManifest, PipelineError> {
    let text = std::fs::read_to_string(root.join(MANIFEST_NAME))?;
    serde_json::from_str(&text)
        .map_err(|e| PipelineError::State(format!("unreadable manifest: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{group_bits_equal, ParamGroup};
    use crate::synth::TargetMode;

    /// Small enough to run the whole flow in seconds.
    fn tiny_config(steps: usize) -> PipelineConfig {
        PipelineConfig {
            seed: 11,
            synth: SyntheticLangSpec {
                base_vocab_words: 50,
                mode: TargetMode::ScriptShift,
                base_sentences: 80,
                base_docs: 12,
                target_sentences: 50,
                target_docs: 8,
                parallel_pairs: 20,
                instruction_examples: 60,
                eval_classification: 8,
                eval_generation: 4,
                heldout_lines: 12,
                ..SyntheticLangSpec::default()
            },
            donor_vocab: 340,
            custom_vocab: 380,
            model_dim: 16,
            num_layers: 1,
            num_heads: 2,
            mlp_hidden: 32,
            max_seq_len: 32,
            lora_rank: 2,
            lora_alpha: 4.0,
            pretrain_examples: 120,
            adapt_examples: 100,
            pretrain_steps: steps,
            instruct_steps: steps,
            lang_adapt_steps: steps,
            lora_steps: steps,
            cpt: false,
            batch_size: 4,
            pack_len: 32,
            ..PipelineConfig::default()
        }
    }

    fn silent() -> impl FnMut(&str) {
        |_: &str| {}
    }

    #[test]
    fn zero_step_pipeline_composes_the_transplant_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        run_pipeline(&tiny_config(0), dir.path(), silent()).unwrap();
        let pretrain = load_checkpoint(&checkpoint_dir(dir.path(), "pretrain")).unwrap();
        let la_start = load_checkpoint(&checkpoint_dir(dir.path(), "la_start")).unwrap();
        let composed = load_checkpoint(&checkpoint_dir(dir.path(), "composed")).unwrap();
        // With no training anywhere, the composed model is exactly the
        // pretrained body plus the donor-initialized embeddings.
        assert!(group_bits_equal(&composed.params, &la_start.params, ParamGroup::Embedding));
        assert!(group_bits_equal(&composed.params, &la_start.params, ParamGroup::Body));
        assert!(group_bits_equal(&composed.params, &pretrain.params, ParamGroup::Body));
        // The adapters exist but the final model still scores identically
        // (zero-init low-rank delta); spot-check the manifest knows it.
        let franken = load_checkpoint(&checkpoint_dir(dir.path(), "franken")).unwrap();
        assert!(franken.params.has_group(ParamGroup::Lora));
    }

    #[test]
    fn every_artifact_is_manifested_with_its_crc() {
        let dir = tempfile::tempdir().unwrap();
        run_pipeline(&tiny_config(1), dir.path(), silent()).unwrap();
        let manifest = load_manifest(dir.path()).unwrap();
        let files = artifact_files(dir.path()).unwrap();
        for rel in files.iter().filter(|r| r.as_str() != MANIFEST_NAME) {
            let entry = manifest
                .files
                .get(rel)
                .unwrap_or_else(|| panic!("{rel} missing from manifest"));
            let (crc, bytes) = file_crc(&dir.path().join(rel)).unwrap();
            assert_eq!(entry.crc32, crc, "{rel} CRC drifted");
            assert_eq!(entry.bytes, bytes);
        }
        // And nothing is manifested that does not exist.
        for rel in manifest.files.keys() {
            assert!(files.contains(rel), "{rel} manifested but absent");
        }
    }

    #[test]
    fn rerun_skips_every_stage_and_changes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        run_pipeline(&tiny_config(1), dir.path(), silent()).unwrap();
        let franken = checkpoint_dir(dir.path(), "franken").join("body.bin");
        let before = std::fs::read(&franken).unwrap();

        let mut lines = Vec::new();
        run_pipeline(&tiny_config(1), dir.path(), |l| lines.push(l.to_string())).unwrap();
        assert!(
            lines.iter().all(|l| l.starts_with("[skip]")),
            "expected all stages skipped, got {lines:?}"
        );
        assert_eq!(std::fs::read(&franken).unwrap(), before);
    }

    #[test]
    fn deleting_a_late_stage_reruns_only_it_and_reproduces_bytes() {
        let dir = tempfile::tempdir().unwrap();
        run_pipeline(&tiny_config(1), dir.path(), silent()).unwrap();
        let franken_dir = checkpoint_dir(dir.path(), "franken");
        let before = std::fs::read(franken_dir.join("lora.bin")).unwrap();
        std::fs::remove_dir_all(&franken_dir).unwrap();

        let mut lines = Vec::new();
        run_pipeline(&tiny_config(1), dir.path(), |l| lines.push(l.to_string())).unwrap();
        // Downstream stages keep their CRC-valid outputs, so only the
        // deleted stage reruns — and it reproduces the original bytes.
        let reran: Vec<&String> = lines.iter().filter(|l| l.starts_with("[run ]")).collect();
        assert_eq!(reran.len(), 1, "only the deleted stage reruns: {lines:?}");
        assert!(reran[0].contains(S_LORA));
        assert_eq!(std::fs::read(franken_dir.join("lora.bin")).unwrap(), before);
    }

    #[test]
    fn identical_seeds_give_bit_identical_checkpoints() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_pipeline(&tiny_config(2), a.path(), silent()).unwrap();
        run_pipeline(&tiny_config(2), b.path(), silent()).unwrap();
        for name in ["pretrain", "instruct", "lang_adapt", "composed", "franken"] {
            for file in ["config.json", "embedding.bin", "body.bin"] {
                let pa = checkpoint_dir(a.path(), name).join(file);
                let pb = checkpoint_dir(b.path(), name).join(file);
                assert_eq!(
                    std::fs::read(&pa).unwrap(),
                    std::fs::read(&pb).unwrap(),
                    "{name}/{file} differs between identically seeded runs"
                );
            }
        }
        let la = checkpoint_dir(a.path(), "franken").join("lora.bin");
        let lb = checkpoint_dir(b.path(), "franken").join("lora.bin");
        assert_eq!(std::fs::read(la).unwrap(), std::fs::read(lb).unwrap());
    }

    #[test]
    fn resuming_with_a_different_config_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        run_pipeline(&tiny_config(1), dir.path(), silent()).unwrap();
        let mut other = tiny_config(1);
        other.seed = 999;
        let err = run_pipeline(&other, dir.path(), silent()).unwrap_err();
        assert!(matches!(err, PipelineError::Config(_)), "{err}");
    }

    #[test]
    fn a_failing_stage_names_itself_and_keeps_finished_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(1);
        // An empty held-out set passes config validation but breaks the
        // evaluation stage, well after training artifacts are on disk.
        cfg.synth.heldout_lines = 0;
        let err = run_pipeline(&cfg, dir.path(), silent()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stage eval failed"), "unexpected error {msg}");
        // Everything up to the failing stage is on disk and manifested.
        assert!(donor_tok_path(dir.path()).exists());
        assert!(checkpoint_dir(dir.path(), "pretrain").join("body.bin").exists());
        let manifest = load_manifest(dir.path()).unwrap();
        assert!(manifest.files.keys().any(|k| k.starts_with("ckpt/pretrain/")));
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut cfg = tiny_config(1);
        cfg.model_dim = 15;
        assert!(matches!(
            run_pipeline(&cfg, Path::new("/nonexistent"), silent()),
            Err(PipelineError::Config(_))
        ));
        let mut cfg = tiny_config(1);
        cfg.pack_len = 64;
        cfg.max_seq_len = 32;
        assert!(matches!(
            run_pipeline(&cfg, Path::new("/nonexistent"), silent()),
            Err(PipelineError::Config(_))
        ));
    }
}
