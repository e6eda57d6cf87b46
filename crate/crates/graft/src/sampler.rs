//! Training-mixture construction: per-language line caps, temperature
//! weights, epoch-capped budget allocation, and the composed datasets used
//! by the adaptation stages (language-adaptation stream, instruction stream,
//! and the balanced adapter stream).
//!
//! Everything here is a pure function of its inputs and a seed, so mixtures
//! are exactly reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("invalid sampling input: {0}")]
    Input(String),
    #[error("{part}: need {needed} examples, sources can supply at most {available}")]
    Shortfall {
        part: String,
        needed: usize,
        available: usize,
    },
}

/// One language's text under one level of granularity, plus its token count
/// under whatever tokenizer the caller declared. The token count is carried
/// data, not derived: after subsampling it becomes a proportional estimate
/// until the caller recounts (see [`LanguageCorpus::recount_tokens`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageCorpus {
    pub language_tag: String,
    pub lines: Vec<String>,
    pub size_tokens: usize,
}

impl LanguageCorpus {
    pub fn new(language_tag: impl Into<String>, lines: Vec<String>) -> Self {
        Self { language_tag: language_tag.into(), lines, size_tokens: 0 }
    }

    /// Recomputes `size_tokens` with a per-line token counter.
    pub fn recount_tokens(&mut self, count: impl Fn(&str) -> usize) {
        self.size_tokens = self.lines.iter().map(|l| count(l)).sum();
    }
}

/// Whether an example came from sentence-level or document-level data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceLevel {
    Sentence,
    Document,
}

/// One training example: a text with its origin labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    pub language_tag: String,
    pub level: SourceLevel,
}

/// Knobs for composing the pretraining-style adaptation mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    /// Share of examples drawn from sentence-level sources (default 0.65).
    pub sentence_fraction: f64,
    /// Share drawn from document-level sources (default 0.35).
    pub doc_fraction: f64,
    /// Epoch cap: no language contributes more than N times its own size.
    pub unimax_n: usize,
    /// Keep the anchor language in the mixture even though it is not a
    /// target language; when false, anchor-tagged sources are dropped.
    pub english_always_included: bool,
    /// Tag identifying the anchor language in the source lists.
    pub english_tag: String,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            sentence_fraction: 0.65,
            doc_fraction: 0.35,
            unimax_n: 5,
            english_always_included: true,
            english_tag: "en".to_string(),
            seed: 0,
        }
    }
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<(), SampleError> {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if !in_unit(self.sentence_fraction) || !in_unit(self.doc_fraction) {
            return Err(SampleError::Input("fractions must lie in [0, 1]".to_string()));
        }
        if (self.sentence_fraction + self.doc_fraction - 1.0).abs() > 1e-9 {
            return Err(SampleError::Input(format!(
                "sentence_fraction {} and doc_fraction {} must sum to 1",
                self.sentence_fraction, self.doc_fraction
            )));
        }
        if self.unimax_n == 0 {
            return Err(SampleError::Input("unimax_n must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// Draws `k` distinct indices from `0..n` uniformly (partial Fisher–Yates),
/// returned in ascending order so subsampling preserves line order.
fn sample_indices(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    debug_assert!(k <= n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

fn shuffle<T>(rng: &mut ChaCha8Rng, v: &mut [T]) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Caps each corpus at `max_lines` by seeded uniform subsampling; smaller
/// corpora pass through unchanged. A subsampled corpus's `size_tokens`
/// becomes a proportional estimate — recount it before using it as a real
/// token budget.
pub fn cap_sample(
    corpora: &[LanguageCorpus],
    max_lines: usize,
    seed: u64,
) -> Result<Vec<LanguageCorpus>, SampleError> {
    if max_lines == 0 {
        return Err(SampleError::Input("max_lines must be at least 1".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(corpora.len());
    for corpus in corpora {
        if corpus.lines.len() <= max_lines {
            out.push(corpus.clone());
            continue;
        }
        let keep = sample_indices(&mut rng, corpus.lines.len(), max_lines);
        let lines: Vec<String> = keep.iter().map(|&i| corpus.lines[i].clone()).collect();
        let size_tokens = ((corpus.size_tokens as u128 * max_lines as u128)
            / corpus.lines.len() as u128) as usize;
        out.push(LanguageCorpus {
            language_tag: corpus.language_tag.clone(),
            lines,
            size_tokens,
        });
    }
    Ok(out)
}

/// Sampling weights `p_i ∝ sizes_i^(1/tau)`. `tau = 1` reproduces the size
/// distribution; `tau → ∞` flattens toward uniform.
pub fn temperature_weights(sizes: &[f64], tau: f64) -> Result<Vec<f64>, SampleError> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(SampleError::Input(format!("temperature must be positive, got {tau}")));
    }
    if sizes.is_empty() {
        return Err(SampleError::Input("no sizes given".to_string()));
    }
    if let Some(bad) = sizes.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(SampleError::Input(format!("sizes must be positive, got {bad}")));
    }
    let mut w: Vec<f64> = sizes.iter().map(|s| s.powf(1.0 / tau)).collect();
    let sum: f64 = w.iter().sum();
    for x in &mut w {
        *x /= sum;
    }
    Ok(w)
}

/// Budget allocation with an epoch cap: languages are visited in ascending
/// size order, and each receives `min(N·size, ⌊remaining / languages_left⌋)`.
/// Small languages are up-sampled (at most N epochs); the surplus flows to
/// larger ones. Allocations come back in input order.
pub fn unimax_allocate(sizes: &[usize], budget: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&i| (sizes[i], i));
    let mut out = vec![0usize; sizes.len()];
    let mut remaining = budget;
    for (visited, &i) in order.iter().enumerate() {
        let left = order.len() - visited;
        let share = remaining / left;
        let alloc = n.saturating_mul(sizes[i]).min(share);
        out[i] = alloc;
        remaining -= alloc;
    }
    out
}

/// Draws exactly `count` examples from one corpus: whole epochs first, then
/// a seeded partial epoch, so every allocation up to N·size is satisfiable.
fn draw_examples(
    rng: &mut ChaCha8Rng,
    corpus: &LanguageCorpus,
    count: usize,
    level: SourceLevel,
) -> Vec<Example> {
    let n = corpus.lines.len();
    let mut out = Vec::with_capacity(count);
    let epochs = count / n;
    for _ in 0..epochs {
        for line in &corpus.lines {
            out.push(Example {
                text: line.clone(),
                language_tag: corpus.language_tag.clone(),
                level,
            });
        }
    }
    for &i in &sample_indices(rng, n, count % n) {
        out.push(Example {
            text: corpus.lines[i].clone(),
            language_tag: corpus.language_tag.clone(),
            level,
        });
    }
    out
}

fn compose_part(
    rng: &mut ChaCha8Rng,
    sources: &[LanguageCorpus],
    spec: &MixtureSpec,
    part_total: usize,
    level: SourceLevel,
    part_name: &str,
) -> Result<Vec<Example>, SampleError> {
    if part_total == 0 {
        return Ok(Vec::new());
    }
    let pool: Vec<&LanguageCorpus> = sources
        .iter()
        .filter(|c| !c.lines.is_empty())
        .filter(|c| spec.english_always_included || c.language_tag != spec.english_tag)
        .collect();
    if pool.is_empty() {
        return Err(SampleError::Input(format!(
            "{part_name} part needs sources but none are usable"
        )));
    }
    let sizes: Vec<usize> = pool.iter().map(|c| c.lines.len()).collect();
    let mut alloc = unimax_allocate(&sizes, part_total, spec.unimax_n);
    // The anchor language must actually appear when the flag asks for it,
    // even if integer shares rounded its quota to zero.
    if spec.english_always_included {
        if let Some(en) = pool.iter().position(|c| c.language_tag == spec.english_tag) {
            if alloc[en] == 0 {
                let donor = (0..alloc.len())
                    .filter(|&i| alloc[i] > 1)
                    .max_by_key(|&i| alloc[i]);
                if let Some(d) = donor {
                    alloc[d] -= 1;
                    alloc[en] = 1;
                }
            }
        }
    }
    let total: usize = alloc.iter().sum();
    if total < part_total {
        let capacity: usize = sizes.iter().map(|s| spec.unimax_n * s).sum();
        return Err(SampleError::Shortfall {
            part: format!("{part_name} part (epoch cap {})", spec.unimax_n),
            needed: part_total,
            available: capacity.min(total),
        });
    }
    let mut out = Vec::with_capacity(part_total);
    for (corpus, &count) in pool.iter().zip(alloc.iter()) {
        out.extend(draw_examples(rng, corpus, count, level));
    }
    Ok(out)
}

/// Builds the language-adaptation dataset: a sentence-level part and a
/// document-level part in the spec's proportions, each split across
/// languages by [`unimax_allocate`], shuffled into one seeded order.
pub fn compose_pretraining_mixture(
    sentence_sources: &[LanguageCorpus],
    doc_sources: &[LanguageCorpus],
    spec: &MixtureSpec,
    total_examples: usize,
) -> Result<Vec<Example>, SampleError> {
    spec.validate()?;
    if total_examples == 0 {
        return Err(SampleError::Input("total_examples must be at least 1".to_string()));
    }
    let sent_total = (spec.sentence_fraction * total_examples as f64).floor() as usize;
    let doc_total = total_examples - sent_total;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = compose_part(
        &mut rng,
        sentence_sources,
        spec,
        sent_total,
        SourceLevel::Sentence,
        "sentence",
    )?;
    out.extend(compose_part(
        &mut rng,
        doc_sources,
        spec,
        doc_total,
        SourceLevel::Document,
        "document",
    )?);
    shuffle(&mut rng, &mut out);
    Ok(out)
}

/// Builds the adapter-training dataset: a seeded `it_fraction` sample of the
/// instruction examples plus an equal number of multilingual examples,
/// interleaved by a seeded shuffle.
pub fn compose_lora_mixture(
    d_it: &[Example],
    d_la: &[Example],
    it_fraction: f64,
    seed: u64,
) -> Result<Vec<Example>, SampleError> {
    if !(it_fraction > 0.0 && it_fraction <= 1.0) {
        return Err(SampleError::Input(format!(
            "instruction fraction must lie in (0, 1], got {it_fraction}"
        )));
    }
    let k = (it_fraction * d_it.len() as f64).floor() as usize;
    if k == 0 {
        return Err(SampleError::Input(format!(
            "instruction sample of {} examples at fraction {it_fraction} is empty",
            d_it.len()
        )));
    }
    if d_la.len() < k {
        return Err(SampleError::Shortfall {
            part: "multilingual half of the adapter mixture".to_string(),
            needed: k,
            available: d_la.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Example> = sample_indices(&mut rng, d_it.len(), k)
        .into_iter()
        .map(|i| d_it[i].clone())
        .collect();
    out.extend(
        sample_indices(&mut rng, d_la.len(), k)
            .into_iter()
            .map(|i| d_la[i].clone()),
    );
    shuffle(&mut rng, &mut out);
    Ok(out)
}
