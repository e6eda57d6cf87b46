//! Deterministic synthetic bilingual fixture: a pseudo-language of made-up
//! words plus a "foreign" twin of it, with pretraining corpora, templated
//! instruction tasks, parallel pairs, and labeled evaluation tasks.
//!
//! The twin comes in two flavors. CIPHER substitutes every word through a
//! seeded bijection (same script, different words). SCRIPT_SHIFT rewrites
//! the letters `a..z` into a disjoint non-ASCII block, so a tokenizer
//! trained only on the base language is forced into byte fallback — the
//! failure mode vocabulary adaptation exists to fix.
//!
//! Two task templates appear in instructions and evaluations:
//! `words ? answer` (pick the option that occurred in the sequence) and
//! `words = words` (echo the sequence). Both are solvable by short-range
//! attention, so a two-layer model can learn them, and both are purely
//! lexical, so the skill survives an embedding swap.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalh::TaskItem;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid fixture spec: {0}")]
    Input(String),
    #[error("text is not valid target-language output: {0}")]
    NotTargetText(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How the target language is derived from the base language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Seeded word-to-word bijection; same script.
    Cipher,
    /// Letters moved to a disjoint non-ASCII block; forces byte fallback
    /// under a base-only tokenizer.
    ScriptShift,
}

impl std::str::FromStr for TargetMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "cipher" => Ok(TargetMode::Cipher),
            "script_shift" | "script-shift" => Ok(TargetMode::ScriptShift),
            other => Err(format!("unknown target mode {other:?}")),
        }
    }
}

/// Language tags used in corpora, mixtures, and evaluation reports.
pub const BASE_TAG: &str = "base";
pub const TARGET_TAG: &str = "target";
/// Tag for the bilingual pair lines in the adaptation mixture.
pub const PARALLEL_TAG: &str = "parallel";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLangSpec {
    pub seed: u64,
    /// Distinct made-up words in the base lexicon.
    pub base_vocab_words: usize,
    pub mode: TargetMode,
    /// Words per sentence, inclusive bounds.
    pub sentence_len: (usize, usize),
    /// Sentences per document, inclusive bounds.
    pub doc_sentences: (usize, usize),
    pub base_sentences: usize,
    pub base_docs: usize,
    pub target_sentences: usize,
    pub target_docs: usize,
    pub parallel_pairs: usize,
    pub instruction_examples: usize,
    /// Four-option classification tasks per language.
    pub eval_classification: usize,
    /// Echo-generation tasks per language.
    pub eval_generation: usize,
    /// Held-out perplexity lines per language.
    pub heldout_lines: usize,
    /// Words per task sequence, inclusive bounds.
    pub task_words: (usize, usize),
}

impl Default for SyntheticLangSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            base_vocab_words: 400,
            mode: TargetMode::ScriptShift,
            sentence_len: (4, 10),
            doc_sentences: (3, 6),
            base_sentences: 4000,
            base_docs: 400,
            target_sentences: 1600,
            target_docs: 160,
            parallel_pairs: 400,
            instruction_examples: 1600,
            eval_classification: 200,
            eval_generation: 60,
            heldout_lines: 200,
            task_words: (3, 6),
        }
    }
}

impl SyntheticLangSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: String| Err(SynthError::Input(m));
        if self.base_vocab_words < 20 {
            return err(format!(
                "base_vocab_words {} is too small for 4-option tasks",
                self.base_vocab_words
            ));
        }
        for (name, (lo, hi)) in [
            ("sentence_len", self.sentence_len),
            ("doc_sentences", self.doc_sentences),
            ("task_words", self.task_words),
        ] {
            if lo == 0 || hi < lo {
                return err(format!("{name} bounds ({lo}, {hi}) are not a valid range"));
            }
        }
        if self.task_words.1 + 3 > self.base_vocab_words {
            return err("task_words upper bound leaves no room for distractors".to_string());
        }
        Ok(())
    }
}

/// The deterministic base↔target text mapping for a given lexicon.
#[derive(Debug, Clone)]
pub struct TargetTransform {
    mode: TargetMode,
    forward: HashMap<String, String>,
    backward: HashMap<String, String>,
}

const SHIFT_BASE: u32 = 0x0430; // first code point of the shifted letter block

impl TargetTransform {
    /// Builds the transform; for CIPHER the word bijection is a seeded
    /// permutation of the lexicon.
    pub fn new(mode: TargetMode, lexicon: &[String], seed: u64) -> Self {
        let mut forward = HashMap::new();
        let mut backward = HashMap::new();
        if mode == TargetMode::Cipher {
            let mut perm: Vec<usize> = (0..lexicon.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a_5a5a);
            for i in (1..perm.len()).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
            for (i, &j) in perm.iter().enumerate() {
                forward.insert(lexicon[i].clone(), lexicon[j].clone());
                backward.insert(lexicon[j].clone(), lexicon[i].clone());
            }
        }
        Self { mode, forward, backward }
    }

    fn shift_char(c: char) -> char {
        if c.is_ascii_lowercase() {
            char::from_u32(SHIFT_BASE + (c as u32 - 'a' as u32)).expect("in range")
        } else {
            c
        }
    }

    fn unshift_char(c: char) -> char {
        let u = c as u32;
        if (SHIFT_BASE..SHIFT_BASE + 26).contains(&u) {
            char::from_u32('a' as u32 + (u - SHIFT_BASE)).expect("in range")
        } else {
            c
        }
    }

    /// Base-language text → target-language text. Separators, digits and
    /// whitespace pass through unchanged in both modes.
    pub fn apply(&self, text: &str) -> String {
        match self.mode {
            TargetMode::ScriptShift => text.chars().map(Self::shift_char).collect(),
            TargetMode::Cipher => map_words(text, |w| {
                self.forward.get(w).cloned().unwrap_or_else(|| w.to_string())
            }),
        }
    }

    /// Exact inverse of [`TargetTransform::apply`].
    pub fn invert(&self, text: &str) -> Result<String, SynthError> {
        match self.mode {
            TargetMode::ScriptShift => {
                if text.bytes().any(|b| b.is_ascii_lowercase()) {
                    return Err(SynthError::NotTargetText(text.to_string()));
                }
                Ok(text.chars().map(Self::unshift_char).collect())
            }
            TargetMode::Cipher => {
                let mut missing = None;
                let out = map_words(text, |w| match self.backward.get(w) {
                    Some(b) => b.clone(),
                    None => {
                        missing = Some(w.to_string());
                        w.to_string()
                    }
                });
                match missing {
                    Some(w) => Err(SynthError::NotTargetText(w)),
                    None => Ok(out),
                }
            }
        }
    }
}

/// Applies `f` to every maximal ASCII-letter run, leaving everything else
/// in place.
fn map_words(text: &str, mut f: impl FnMut(&str) -> String) -> String {
    let mut out = String::with_capacity(text.len());
    let mut word = String::new();
    for c in text.chars() {
        if c.is_ascii_lowercase() {
            word.push(c);
        } else {
            if !word.is_empty() {
                out.push_str(&f(&word));
                word.clear();
            }
            out.push(c);
        }
    }
    if !word.is_empty() {
        out.push_str(&f(&word));
    }
    out
}

/// Everything the pipeline consumes, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpora {
    pub lexicon: Vec<String>,
    pub base_sentences: Vec<String>,
    pub base_docs: Vec<String>,
    pub target_sentences: Vec<String>,
    pub target_docs: Vec<String>,
    /// Lines of the form `base sentence = target sentence`.
    pub parallel_pairs: Vec<String>,
    /// Base-language task lines (`… ? answer` and `… = echo`).
    pub instructions: Vec<String>,
    pub eval_base: Vec<TaskItem>,
    pub eval_target: Vec<TaskItem>,
    pub heldout_base: Vec<String>,
    pub heldout_target: Vec<String>,
}

struct Generator {
    rng: ChaCha8Rng,
    lexicon: Vec<String>,
    /// Cumulative Zipf weights over the lexicon.
    cumulative: Vec<f64>,
    spec: SyntheticLangSpec,
}

impl Generator {
    fn new(spec: &SyntheticLangSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let lexicon = make_lexicon(&mut rng, spec.base_vocab_words);
        let mut cumulative = Vec::with_capacity(lexicon.len());
        let mut acc = 0.0;
        for i in 0..lexicon.len() {
            acc += 1.0 / (i as f64 + 1.0);
            cumulative.push(acc);
        }
        Self { rng, lexicon, cumulative, spec: spec.clone() }
    }

    /// Zipf-distributed word (frequent words first in the lexicon).
    fn zipf_word(&mut self) -> &str {
        let total = *self.cumulative.last().expect("non-empty lexicon");
        let u = self.rng.random_range(0.0..total);
        let idx = self.cumulative.partition_point(|&c| c <= u);
        &self.lexicon[idx.min(self.lexicon.len() - 1)]
    }

    fn uniform_word(&mut self) -> String {
        let idx = self.rng.random_range(0..self.lexicon.len());
        self.lexicon[idx].clone()
    }

    fn range(&mut self, (lo, hi): (usize, usize)) -> usize {
        self.rng.random_range(lo..=hi)
    }

    fn sentence(&mut self) -> String {
        let k = self.range(self.spec.sentence_len);
        let mut words = Vec::with_capacity(k);
        for _ in 0..k {
            let w = self.zipf_word().to_string();
            words.push(w);
        }
        words.join(" ")
    }

    fn document(&mut self) -> String {
        let n = self.range(self.spec.doc_sentences);
        let sentences: Vec<String> = (0..n).map(|_| self.sentence()).collect();
        format!("{}.", sentences.join(". "))
    }

    /// Distinct uniform words for a task sequence.
    fn distinct_words(&mut self, k: usize, exclude: &[String]) -> Vec<String> {
        let mut out: Vec<String> = Vec::with_capacity(k);
        while out.len() < k {
            let w = self.uniform_word();
            if !out.contains(&w) && !exclude.contains(&w) {
                out.push(w);
            }
        }
        out
    }

    /// `words = words` — echo the sequence.
    fn copy_line(&mut self) -> String {
        let k = self.range(self.spec.task_words);
        let seq = self.distinct_words(k, &[]).join(" ");
        format!("{seq} = {seq}")
    }

    /// `words ? answer` — one of the words, asked back.
    fn pick_line(&mut self) -> String {
        let k = self.range(self.spec.task_words);
        let words = self.distinct_words(k, &[]);
        let answer = words[self.rng.random_range(0..words.len())].clone();
        format!("{} ? {answer}", words.join(" "))
    }

    fn pick_task(&mut self) -> TaskItem {
        let k = self.range(self.spec.task_words);
        let words = self.distinct_words(k, &[]);
        let answer = words[self.rng.random_range(0..words.len())].clone();
        let distractors = self.distinct_words(3, &words);
        let mut options = vec![answer.clone()];
        options.extend(distractors);
        // Seeded shuffle so the answer is not always option 0.
        for i in (1..options.len()).rev() {
            let j = self.rng.random_range(0..=i);
            options.swap(i, j);
        }
        let answer_index = options.iter().position(|o| *o == answer).expect("present");
        TaskItem {
            prompt: format!("{} ?", words.join(" ")),
            // Leading spaces keep the prompt/option token boundary clean.
            options: Some(options.into_iter().map(|o| format!(" {o}")).collect()),
            answer_index: Some(answer_index),
            reference: None,
            language_tag: BASE_TAG.to_string(),
        }
    }

    fn copy_task(&mut self) -> TaskItem {
        let k = self.range(self.spec.task_words);
        let seq = self.distinct_words(k, &[]).join(" ");
        TaskItem {
            prompt: format!("{seq} ="),
            options: None,
            answer_index: None,
            reference: Some(seq),
            language_tag: BASE_TAG.to_string(),
        }
    }
}

fn make_lexicon(rng: &mut ChaCha8Rng, count: usize) -> Vec<String> {
    const ONSETS: [&str; 14] = [
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
    ];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    const CODAS: [&str; 6] = ["", "", "n", "r", "s", "t"];
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
        }
        w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn retag(mut item: TaskItem, transform: &TargetTransform) -> TaskItem {
    item.prompt = transform.apply(&item.prompt);
    item.options = item
        .options
        .map(|opts| opts.iter().map(|o| transform.apply(o)).collect());
    item.reference = item.reference.map(|r| transform.apply(&r));
    item.language_tag = TARGET_TAG.to_string();
    item
}

/// Generates the whole fixture, byte-deterministically from the spec.
pub fn gen_synthetic_corpora(spec: &SyntheticLangSpec) -> Result<SyntheticCorpora, SynthError> {
    spec.validate()?;
    let mut g = Generator::new(spec);
    let transform = TargetTransform::new(spec.mode, &g.lexicon, spec.seed);

    let base_sentences: Vec<String> = (0..spec.base_sentences).map(|_| g.sentence()).collect();
    let base_docs: Vec<String> = (0..spec.base_docs).map(|_| g.document()).collect();
    let target_sentences: Vec<String> = (0..spec.target_sentences)
        .map(|_| transform.apply(&g.sentence()))
        .collect();
    let target_docs: Vec<String> = (0..spec.target_docs)
        .map(|_| transform.apply(&g.document()))
        .collect();
    let parallel_pairs: Vec<String> = (0..spec.parallel_pairs)
        .map(|_| {
            let s = g.sentence();
            format!("{s} = {}", transform.apply(&s))
        })
        .collect();

    let instructions: Vec<String> = (0..spec.instruction_examples)
        .map(|_| {
            if g.rng.random_range(0..2) == 0 {
                g.copy_line()
            } else {
                g.pick_line()
            }
        })
        .collect();

    let mut eval_base = Vec::new();
    for _ in 0..spec.eval_classification {
        eval_base.push(g.pick_task());
    }
    for _ in 0..spec.eval_generation {
        eval_base.push(g.copy_task());
    }
    let mut eval_target = Vec::new();
    for _ in 0..spec.eval_classification {
        eval_target.push(retag(g.pick_task(), &transform));
    }
    for _ in 0..spec.eval_generation {
        eval_target.push(retag(g.copy_task(), &transform));
    }

    let heldout_base: Vec<String> = (0..spec.heldout_lines).map(|_| g.sentence()).collect();
    let heldout_target: Vec<String> = (0..spec.heldout_lines)
        .map(|_| transform.apply(&g.sentence()))
        .collect();

    Ok(SyntheticCorpora {
        lexicon: g.lexicon,
        base_sentences,
        base_docs,
        target_sentences,
        target_docs,
        parallel_pairs,
        instructions,
        eval_base,
        eval_target,
        heldout_base,
        heldout_target,
    })
}

fn write_lines(path: &Path, lines: &[String]) -> Result<(), SynthError> {
    let mut f = std::fs::File::create(path)?;
    for line in lines {
        f.write_all(line.as_bytes())?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

impl SyntheticCorpora {
    /// Writes the fixture as line files and task JSONL under `dir`,
    /// returning every path written.
    pub fn write_to_dir(&self, dir: &Path) -> Result<Vec<PathBuf>, SynthError> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let line_files: [(String, &Vec<String>); 9] = [
            ("lexicon.txt".to_string(), &self.lexicon),
            (format!("{BASE_TAG}.sent.txt"), &self.base_sentences),
            (format!("{BASE_TAG}.doc.txt"), &self.base_docs),
            (format!("{TARGET_TAG}.sent.txt"), &self.target_sentences),
            (format!("{TARGET_TAG}.doc.txt"), &self.target_docs),
            ("parallel.sent.txt".to_string(), &self.parallel_pairs),
            ("instruct.txt".to_string(), &self.instructions),
            (format!("heldout.{BASE_TAG}.txt"), &self.heldout_base),
            (format!("heldout.{TARGET_TAG}.txt"), &self.heldout_target),
        ];
        for (name, lines) in line_files {
            let path = dir.join(name);
            write_lines(&path, lines)?;
            written.push(path);
        }
        for (name, items) in [
            ("eval.base.jsonl", &self.eval_base),
            ("eval.target.jsonl", &self.eval_target),
        ] {
            let path = dir.join(name);
            crate::evalh::write_tasks(&path, items)
                .map_err(|e| SynthError::Input(format!("cannot write {name}: {e}")))?;
            written.push(path);
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(mode: TargetMode) -> SyntheticLangSpec {
        SyntheticLangSpec {
            seed: 7,
            base_vocab_words: 60,
            mode,
            base_sentences: 40,
            base_docs: 8,
            target_sentences: 30,
            target_docs: 6,
            parallel_pairs: 10,
            instruction_examples: 30,
            eval_classification: 12,
            eval_generation: 6,
            heldout_lines: 10,
            ..SyntheticLangSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec(TargetMode::ScriptShift);
        assert_eq!(
            gen_synthetic_corpora(&spec).unwrap(),
            gen_synthetic_corpora(&spec).unwrap()
        );
    }

    #[test]
    fn corpus_sizes_match_the_spec() {
        let spec = small_spec(TargetMode::ScriptShift);
        let c = gen_synthetic_corpora(&spec).unwrap();
        assert_eq!(c.base_sentences.len(), 40);
        assert_eq!(c.base_docs.len(), 8);
        assert_eq!(c.target_sentences.len(), 30);
        assert_eq!(c.target_docs.len(), 6);
        assert_eq!(c.parallel_pairs.len(), 10);
        assert_eq!(c.instructions.len(), 30);
        assert_eq!(c.eval_base.len(), 18);
        assert_eq!(c.eval_target.len(), 18);
        assert_eq!(c.lexicon.len(), 60);
    }

    #[test]
    fn lexicon_words_are_distinct_lowercase_ascii() {
        let c = gen_synthetic_corpora(&small_spec(TargetMode::ScriptShift)).unwrap();
        let distinct: std::collections::HashSet<&String> = c.lexicon.iter().collect();
        assert_eq!(distinct.len(), c.lexicon.len());
        for w in &c.lexicon {
            assert!(!w.is_empty());
            assert!(w.bytes().all(|b| b.is_ascii_lowercase()), "{w}");
        }
    }

    #[test]
    fn shifted_corpus_shares_no_letter_bytes_with_the_base() {
        let c = gen_synthetic_corpora(&small_spec(TargetMode::ScriptShift)).unwrap();
        for line in c.target_sentences.iter().chain(&c.target_docs) {
            assert!(
                line.bytes().all(|b| !b.is_ascii_lowercase()),
                "base letters leaked into {line:?}"
            );
            assert!(std::str::from_utf8(line.as_bytes()).is_ok());
        }
        for line in &c.base_sentences {
            assert!(line.bytes().all(|b| b.is_ascii_lowercase() || b == b' '));
        }
    }

    #[test]
    fn cipher_is_invertible() {
        let spec = small_spec(TargetMode::Cipher);
        let c = gen_synthetic_corpora(&spec).unwrap();
        let transform = TargetTransform::new(TargetMode::Cipher, &c.lexicon, spec.seed);
        for line in &c.base_sentences {
            let there = transform.apply(line);
            assert_eq!(&transform.invert(&there).unwrap(), line);
        }
        // Target corpus lines invert to pure base-language text.
        for line in &c.target_sentences {
            let back = transform.invert(line).unwrap();
            for w in back.split(' ') {
                assert!(c.lexicon.contains(&w.to_string()), "{w} not in lexicon");
            }
        }
    }

    #[test]
    fn script_shift_is_invertible() {
        let spec = small_spec(TargetMode::ScriptShift);
        let c = gen_synthetic_corpora(&spec).unwrap();
        let transform = TargetTransform::new(spec.mode, &c.lexicon, spec.seed);
        for line in &c.base_sentences {
            assert_eq!(&transform.invert(&transform.apply(line)).unwrap(), line);
        }
        // Base-language text is rejected as target input.
        assert!(transform.invert("plain words").is_err());
    }

    #[test]
    fn parallel_pairs_really_are_translations() {
        let spec = small_spec(TargetMode::ScriptShift);
        let c = gen_synthetic_corpora(&spec).unwrap();
        let transform = TargetTransform::new(spec.mode, &c.lexicon, spec.seed);
        for pair in &c.parallel_pairs {
            let (left, right) = pair.split_once(" = ").expect("separator");
            assert_eq!(transform.apply(left), right);
        }
    }

    #[test]
    fn classification_tasks_are_well_formed() {
        let c = gen_synthetic_corpora(&small_spec(TargetMode::ScriptShift)).unwrap();
        for item in c.eval_base.iter().filter(|t| t.options.is_some()) {
            let options = item.options.as_ref().unwrap();
            assert_eq!(options.len(), 4);
            let answer = item.answer_index.unwrap();
            assert!(answer < 4);
            let distinct: std::collections::HashSet<&String> = options.iter().collect();
            assert_eq!(distinct.len(), 4);
            // The answer occurs in the prompt sequence; distractors do not.
            let prompt_words: Vec<&str> =
                item.prompt.trim_end_matches(" ?").split(' ').collect();
            for (i, opt) in options.iter().enumerate() {
                assert!(opt.starts_with(' '), "option {opt:?} lacks a leading space");
                let word = opt.trim();
                if i == answer {
                    assert!(prompt_words.contains(&word));
                } else {
                    assert!(!prompt_words.contains(&word));
                }
            }
        }
        for item in c.eval_base.iter().filter(|t| t.reference.is_some()) {
            let seq = item.prompt.trim_end_matches(" =");
            assert_eq!(item.reference.as_deref().unwrap(), seq);
        }
    }

    #[test]
    fn target_tasks_are_the_transformed_twins_structurally() {
        let c = gen_synthetic_corpora(&small_spec(TargetMode::ScriptShift)).unwrap();
        for item in &c.eval_target {
            assert_eq!(item.language_tag, TARGET_TAG);
            assert!(item.prompt.bytes().all(|b| !b.is_ascii_lowercase()));
            if let Some(options) = &item.options {
                for o in options {
                    assert!(o.bytes().all(|b| !b.is_ascii_lowercase()));
                }
            }
        }
    }

    #[test]
    fn instruction_lines_use_both_templates() {
        let c = gen_synthetic_corpora(&small_spec(TargetMode::ScriptShift)).unwrap();
        let copies = c.instructions.iter().filter(|l| l.contains(" = ")).count();
        let picks = c.instructions.iter().filter(|l| l.contains(" ? ")).count();
        assert_eq!(copies + picks, c.instructions.len());
        assert!(copies > 0 && picks > 0);
        for line in c.instructions.iter().filter(|l| l.contains(" = ")) {
            let (l, r) = line.split_once(" = ").unwrap();
            assert_eq!(l, r, "echo tasks repeat their sequence");
        }
        for line in c.instructions.iter().filter(|l| l.contains(" ? ")) {
            let (l, r) = line.split_once(" ? ").unwrap();
            assert!(l.split(' ').any(|w| w == r), "answer {r} not in {l}");
        }
    }

    #[test]
    fn the_fixture_writes_and_reads_back() {
        let spec = small_spec(TargetMode::ScriptShift);
        let c = gen_synthetic_corpora(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let written = c.write_to_dir(dir.path()).unwrap();
        assert_eq!(written.len(), 11);
        for path in &written {
            assert!(path.exists(), "{} missing", path.display());
        }
        let sent = std::fs::read_to_string(dir.path().join("base.sent.txt")).unwrap();
        let lines: Vec<&str> = sent.lines().collect();
        assert_eq!(lines.len(), c.base_sentences.len());
        assert_eq!(lines[0], c.base_sentences[0]);
        let tasks = crate::evalh::read_tasks(&dir.path().join("eval.target.jsonl")).unwrap();
        assert_eq!(tasks, c.eval_target);
    }
}
