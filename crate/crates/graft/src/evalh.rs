//! Evaluation harness: per-language perplexity, option-logit
//! classification, greedy decoding, and a prefill latency benchmark with
//! exact token-count reporting.
//!
//! Sequences are framed the way training packs them: every example is
//! scored as if it followed an EOS separator, so a line's first token is
//! conditioned on EOS and every token of the line is scored exactly once.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{forward, lm_loss_grad, Checkpoint, ModelError};
use crate::tokenizer::{TokError, TokenId, TokenizerModel, EOS_ID, PAD_ID};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation input: {0}")]
    Input(String),
    #[error("checkpoint was built for a different vocabulary than the tokenizer")]
    VocabMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tok(#[from] TokError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad task file line {line}: {source}")]
    TaskFormat {
        line: usize,
        source: serde_json::Error,
    },
}

/// One evaluation instance, stored as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskItem {
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    pub language_tag: String,
}

pub fn read_tasks(path: &Path) -> Result<Vec<TaskItem>, EvalError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|source| EvalError::TaskFormat { line: i + 1, source })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_tasks(path: &Path, items: &[TaskItem]) -> Result<(), EvalError> {
    let mut file = std::fs::File::create(path)?;
    for item in items {
        serde_json::to_writer(&mut file, item).map_err(|e| {
            EvalError::Input(format!("cannot serialize task: {e}"))
        })?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

fn check_vocab(ckpt: &Checkpoint, tok: &TokenizerModel) -> Result<(), EvalError> {
    if ckpt.vocab_fingerprint != tok.fingerprint() || ckpt.config.vocab_size != tok.vocab_size() {
        return Err(EvalError::VocabMismatch);
    }
    Ok(())
}

/// Sum of next-token cross-entropies (nats) and scored-token count for one
/// EOS-framed sequence, windowed to the model's maximum length so every
/// token is scored exactly once.
fn sequence_ce(ckpt: &Checkpoint, ids: &[TokenId]) -> Result<(f64, usize), EvalError> {
    if ids.is_empty() {
        return Ok((0.0, 0));
    }
    let mut seq = Vec::with_capacity(ids.len() + 1);
    seq.push(EOS_ID);
    seq.extend_from_slice(ids);
    let max = ckpt.config.max_seq_len;
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut start = 0usize;
    while start + 1 < seq.len() {
        let end = (start + max).min(seq.len());
        let window = &seq[start..end];
        let mut targets: Vec<TokenId> = seq[start + 1..end].to_vec();
        targets.push(PAD_ID);
        let fwd = forward(&ckpt.config, &ckpt.params, window)?;
        let (s, c, _) = lm_loss_grad(&fwd.logits, &targets);
        sum += s;
        count += c;
        start += max - 1;
    }
    Ok((sum, count))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LanguagePerplexity {
    pub language: String,
    pub perplexity: f64,
    pub token_count: usize,
    pub line_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerplexityReport {
    /// Sorted by language tag.
    pub languages: Vec<LanguagePerplexity>,
    /// Over all scored tokens of all languages.
    pub overall_perplexity: f64,
    /// Languages whose lines produced no scorable tokens.
    pub skipped_languages: Vec<String>,
}

impl PerplexityReport {
    pub fn language(&self, tag: &str) -> Option<&LanguagePerplexity> {
        self.languages.iter().find(|l| l.language == tag)
    }
}

/// Per-language perplexity `exp(mean next-token cross-entropy)` over a
/// tagged corpus. Line order cannot affect the result: per-line sums are
/// sorted before reduction, so permuted corpora reduce in the same order.
pub fn perplexity<S: AsRef<str>, T: AsRef<str>>(
    ckpt: &Checkpoint,
    tok: &TokenizerModel,
    corpus: &[(S, T)],
) -> Result<PerplexityReport, EvalError> {
    check_vocab(ckpt, tok)?;
    if corpus.is_empty() {
        return Err(EvalError::Input("empty evaluation corpus".to_string()));
    }
    let mut per_lang: BTreeMap<&str, Vec<(f64, usize)>> = BTreeMap::new();
    let mut line_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (tag, line) in corpus {
        let ids = tok.encode(line.as_ref());
        let entry = per_lang.entry(tag.as_ref()).or_default();
        *line_counts.entry(tag.as_ref()).or_default() += 1;
        if ids.is_empty() {
            continue;
        }
        entry.push(sequence_ce(ckpt, &ids)?);
    }
    let mut languages = Vec::new();
    let mut skipped = Vec::new();
    let mut all: Vec<(f64, usize)> = Vec::new();
    for (tag, mut sums) in per_lang {
        sums.sort_by(|a, b| {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
        });
        let tokens: usize = sums.iter().map(|s| s.1).sum();
        if tokens == 0 {
            skipped.push(tag.to_string());
            continue;
        }
        let ce: f64 = sums.iter().map(|s| s.0).sum();
        all.extend_from_slice(&sums);
        languages.push(LanguagePerplexity {
            language: tag.to_string(),
            perplexity: (ce / tokens as f64).exp(),
            token_count: tokens,
            line_count: line_counts[tag],
        });
    }
    if languages.is_empty() {
        return Err(EvalError::Input(
            "no language produced any scorable tokens".to_string(),
        ));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let total_tokens: usize = all.iter().map(|s| s.1).sum();
    let total_ce: f64 = all.iter().map(|s| s.0).sum();
    Ok(PerplexityReport {
        languages,
        overall_perplexity: (total_ce / total_tokens as f64).exp(),
        skipped_languages: skipped,
    })
}

/// Log-probability of one row's target under a numerically stable
/// log-softmax.
fn row_log_prob(logits: &Array2<f32>, row: usize, target: usize) -> f64 {
    let r = logits.row(row);
    let mut m = f64::NEG_INFINITY;
    for &x in r.iter() {
        m = m.max(x as f64);
    }
    let mut sum = 0.0f64;
    for &x in r.iter() {
        sum += (x as f64 - m).exp();
    }
    (r[target] as f64 - m) - sum.ln()
}

/// Sum of option-token log-probabilities for each option, conditioned on
/// the prompt (and, within the option, on its own earlier tokens). Only the
/// option's tokens are scored: the span is the suffix of
/// `encode(prompt + option)` after its longest common prefix with
/// `encode(prompt)`. `normalize` divides by span length (ablation variant;
/// the default ranking uses raw sums).
pub fn option_scores(
    ckpt: &Checkpoint,
    tok: &TokenizerModel,
    prompt: &str,
    options: &[String],
    normalize: bool,
) -> Result<Vec<f64>, EvalError> {
    check_vocab(ckpt, tok)?;
    if options.len() < 2 {
        return Err(EvalError::Input(format!(
            "need at least 2 options, got {}",
            options.len()
        )));
    }
    let prompt_ids = tok.encode(prompt);
    let mut scores = Vec::with_capacity(options.len());
    for option in options {
        if option.is_empty() {
            return Err(EvalError::Input("empty option string".to_string()));
        }
        let full = tok.encode(&format!("{prompt}{option}"));
        let shared = prompt_ids
            .iter()
            .zip(full.iter())
            .take_while(|(a, b)| a == b)
            .count();
        if shared == full.len() {
            return Err(EvalError::Input(format!(
                "option {option:?} adds no tokens after the prompt"
            )));
        }
        // EOS framing, as everywhere: position j of `full` sits at sequence
        // index j+1 and is predicted by logits row j.
        let mut seq = Vec::with_capacity(full.len() + 1);
        seq.push(EOS_ID);
        seq.extend_from_slice(&full);
        if seq.len() > ckpt.config.max_seq_len {
            return Err(EvalError::Input(format!(
                "prompt and option tokenize to {} ids, beyond the model's {}",
                seq.len(),
                ckpt.config.max_seq_len
            )));
        }
        let fwd = forward(&ckpt.config, &ckpt.params, &seq)?;
        let mut score = 0.0;
        for (j, &id) in full.iter().enumerate().skip(shared) {
            score += row_log_prob(&fwd.logits, j, id as usize);
        }
        if normalize {
            score /= (full.len() - shared) as f64;
        }
        scores.push(score);
    }
    Ok(scores)
}

/// Index of the highest-scoring option; exact ties go to the lowest index.
pub fn classify_options(
    ckpt: &Checkpoint,
    tok: &TokenizerModel,
    prompt: &str,
    options: &[String],
    normalize: bool,
) -> Result<usize, EvalError> {
    let scores = option_scores(ckpt, tok, prompt, options, normalize)?;
    let mut best = 0usize;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LanguageAccuracy {
    pub language: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub per_language: Vec<LanguageAccuracy>,
}

/// Runs [`classify_options`] over every task that has options and a known
/// answer, reporting accuracy per language and overall.
pub fn classify_tasks(
    ckpt: &Checkpoint,
    tok: &TokenizerModel,
    items: &[TaskItem],
    normalize: bool,
) -> Result<ClassificationReport, EvalError> {
    let mut per: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut total = 0usize;
    let mut correct = 0usize;
    for item in items {
        let (Some(options), Some(answer)) = (&item.options, item.answer_index) else {
            continue;
        };
        if answer >= options.len() {
            return Err(EvalError::Input(format!(
                "answer index {answer} out of range for {} options",
                options.len()
            )));
        }
        let chosen = classify_options(ckpt, tok, &item.prompt, options, normalize)?;
        let e = per.entry(item.language_tag.as_str()).or_default();
        e.1 += 1;
        total += 1;
        if chosen == answer {
            e.0 += 1;
            correct += 1;
        }
    }
    if total == 0 {
        return Err(EvalError::Input(
            "no task carries options and an answer index".to_string(),
        ));
    }
    Ok(ClassificationReport {
        total,
        correct,
        accuracy: correct as f64 / total as f64,
        per_language: per
            .into_iter()
            .map(|(tag, (c, t))| LanguageAccuracy {
                language: tag.to_string(),
                correct: c,
                total: t,
                accuracy: c as f64 / t as f64,
            })
            .collect(),
    })
}

/// Greedy continuation: repeatedly appends the argmax next token (lowest id
/// on exact ties) until EOS, `max_new_tokens`, or the context limit.
/// Returns the decoded continuation only, never the prompt.
pub fn greedy_decode(
    ckpt: &Checkpoint,
    tok: &TokenizerModel,
    prompt: &str,
    max_new_tokens: usize,
) -> Result<String, EvalError> {
    check_vocab(ckpt, tok)?;
    let mut seq = vec![EOS_ID];
    seq.extend(tok.encode(prompt));
    if seq.len() > ckpt.config.max_seq_len {
        return Err(EvalError::Input(format!(
            "prompt tokenizes to {} ids, beyond the model's {}",
            seq.len(),
            ckpt.config.max_seq_len
        )));
    }
    let mut generated: Vec<TokenId> = Vec::new();
    for _ in 0..max_new_tokens {
        if seq.len() >= ckpt.config.max_seq_len {
            break;
        }
        let fwd = forward(&ckpt.config, &ckpt.params, &seq)?;
        let last = fwd.logits.row(fwd.logits.nrows() - 1);
        let mut best = 0usize;
        for (j, &x) in last.iter().enumerate().skip(1) {
            if x > last[best] {
                best = j;
            }
        }
        let id = best as TokenId;
        if id == EOS_ID {
            break;
        }
        generated.push(id);
        seq.push(id);
    }
    Ok(tok.decode(&generated)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationOutcome {
    pub prompt: String,
    pub output: String,
    pub reference: Option<String>,
    pub exact_match: bool,
    pub language_tag: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationReport {
    pub total: usize,
    pub exact_matches: usize,
    pub exact_match_rate: f64,
    pub outcomes: Vec<GenerationOutcome>,
}

/// Greedy-decodes every task that has a reference, scoring whitespace-
/// trimmed exact match.
pub fn generation_tasks(
    ckpt: &Checkpoint,
    tok: &TokenizerModel,
    items: &[TaskItem],
    max_new_tokens: usize,
) -> Result<GenerationReport, EvalError> {
    let mut outcomes = Vec::new();
    let mut matches = 0usize;
    for item in items {
        let Some(reference) = &item.reference else {
            continue;
        };
        let output = greedy_decode(ckpt, tok, &item.prompt, max_new_tokens)?;
        let hit = output.trim() == reference.trim();
        if hit {
            matches += 1;
        }
        outcomes.push(GenerationOutcome {
            prompt: item.prompt.clone(),
            output,
            reference: Some(reference.clone()),
            exact_match: hit,
            language_tag: item.language_tag.clone(),
        });
    }
    if outcomes.is_empty() {
        return Err(EvalError::Input("no task carries a reference".to_string()));
    }
    Ok(GenerationReport {
        total: outcomes.len(),
        exact_matches: matches,
        exact_match_rate: matches as f64 / outcomes.len() as f64,
        outcomes,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyReport {
    pub passages: usize,
    pub repeats: usize,
    /// Median over repeats of (passages / wall seconds) for full prefill
    /// passes. Informational: wall-clock is machine- and load-dependent.
    pub instances_per_second: f64,
    pub median_seconds: f64,
    /// Exact token counts under the benchmarked tokenizer.
    pub total_tokens: usize,
    pub per_passage_tokens: Vec<usize>,
    /// Token counts under the reference tokenizer, when one was supplied.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_total_tokens: Option<usize>,
    /// reference_total / total: the speedup the fertility gap predicts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted_speedup: Option<f64>,
}

/// Times full prefill forward passes over the passages, reporting the
/// median rate over `repeats` plus exact token counts for the benchmarked
/// tokenizer and an optional reference.
pub fn latency_bench(
    ckpt: &Checkpoint,
    tok: &TokenizerModel,
    passages: &[String],
    repeats: usize,
    reference: Option<&TokenizerModel>,
) -> Result<LatencyReport, EvalError> {
    check_vocab(ckpt, tok)?;
    if passages.is_empty() {
        return Err(EvalError::Input("no passages to benchmark".to_string()));
    }
    if repeats == 0 {
        return Err(EvalError::Input("repeats must be at least 1".to_string()));
    }
    let encoded: Vec<Vec<TokenId>> = passages.iter().map(|p| tok.encode(p)).collect();
    let per_passage_tokens: Vec<usize> = encoded.iter().map(|e| e.len()).collect();
    let total_tokens: usize = per_passage_tokens.iter().sum();
    let truncated: Vec<&[TokenId]> = encoded
        .iter()
        .filter(|e| !e.is_empty())
        .map(|e| &e[..e.len().min(ckpt.config.max_seq_len)])
        .collect();
    let mut seconds = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        for ids in &truncated {
            let fwd = forward(&ckpt.config, &ckpt.params, ids)?;
            std::hint::black_box(&fwd.logits);
        }
        seconds.push(start.elapsed().as_secs_f64());
    }
    seconds.sort_by(f64::total_cmp);
    let median = seconds[seconds.len() / 2].max(f64::MIN_POSITIVE);
    let reference_total_tokens =
        reference.map(|r| passages.iter().map(|p| r.encode(p).len()).sum::<usize>());
    Ok(LatencyReport {
        passages: passages.len(),
        repeats,
        instances_per_second: passages.len() as f64 / median,
        median_seconds: median,
        total_tokens,
        per_passage_tokens,
        reference_total_tokens,
        predicted_speedup: reference_total_tokens
            .map(|r| r as f64 / total_tokens.max(1) as f64),
    })
}
