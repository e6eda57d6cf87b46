//! Embedding transplantation: build an embedding matrix for a new
//! vocabulary out of a donor model's embeddings, and recombine embedding
//! matrices with transformer bodies.
//!
//! A new token whose byte-string already exists in the donor vocabulary gets
//! the donor row copied bit-exactly. Any other token is decomposed with the
//! donor's own encoder and its row is pooled from the donor subtoken rows —
//! element-wise mean (left-to-right summation, fixed order) or element-wise
//! max. Rows are never re-normalized.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, Checkpoint, ModelError};
use crate::tokenizer::{overlap, TokError, TokenizerModel};

#[derive(Debug, Error)]
pub enum SurgeryError {
    #[error("embedding/tokenizer mismatch: {0}")]
    Mismatch(String),
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("token {0} decomposed into no donor tokens")]
    EmptyDecomposition(String),
    #[error("embedding matrix contains a non-finite value at row {row}")]
    NonFinite { row: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tok(#[from] TokError),
}

/// A `V × d` embedding matrix bound to the vocabulary that indexes it. The
/// fingerprint is the owning tokenizer's, so mismatched pairings fail loudly
/// instead of silently permuting meanings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    weights: Array2<f32>,
    vocab_fingerprint: String,
}

impl EmbeddingMatrix {
    pub fn new(weights: Array2<f32>, vocab_fingerprint: String) -> Result<Self, SurgeryError> {
        for (i, row) in weights.rows().into_iter().enumerate() {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(SurgeryError::NonFinite { row: i });
            }
        }
        Ok(Self { weights, vocab_fingerprint })
    }

    pub fn weights(&self) -> &Array2<f32> {
        &self.weights
    }

    pub fn vocab_fingerprint(&self) -> &str {
        &self.vocab_fingerprint
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Extracts the embedding group of a checkpoint, keeping its vocabulary
    /// binding.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, SurgeryError> {
        Self::new(
            ckpt.params.get("embed.weight").clone(),
            ckpt.vocab_fingerprint.clone(),
        )
    }

    /// Writes the matrix as a standalone tensor file — the same container
    /// checkpoints use for their embedding group, so the file is
    /// interchangeable with a checkpoint's `embedding.bin`.
    pub fn save(&self, path: &Path) -> Result<(), SurgeryError> {
        let name = "embed.weight".to_string();
        model::write_tensor_file(path, &[(&name, &self.weights)], &self.vocab_fingerprint)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SurgeryError> {
        let (mut tensors, fingerprint) = model::read_tensor_file(path)?;
        if tensors.len() != 1 || tensors[0].0 != "embed.weight" {
            return Err(SurgeryError::Mismatch(format!(
                "{} is not a standalone embedding file",
                path.display()
            )));
        }
        Self::new(tensors.remove(0).1, fingerprint)
    }
}

/// How rows for tokens absent from the donor vocabulary are built from
/// their donor-tokenized pieces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Avg,
    Max,
}

impl std::str::FromStr for Pooling {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "avg" => Ok(Pooling::Avg),
            "max" => Ok(Pooling::Max),
            other => Err(format!("unknown pooling {other:?}, expected avg or max")),
        }
    }
}

/// Per-token provenance of a transplanted row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenOrigin {
    Copied,
    Pooled,
}

/// What the transplant did, token by token.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurgeryReport {
    pub copied_count: usize,
    pub pooled_count: usize,
    /// Fraction of the new vocabulary whose byte-strings exist verbatim in
    /// the donor vocabulary; equals copied_count / V by construction.
    pub overlap_fraction: f64,
    pub provenance: Vec<TokenOrigin>,
}

/// Builds an embedding matrix for `new_tok` from a donor model's embeddings:
/// bit-exact row copies where byte-strings match, pooled donor subtoken rows
/// everywhere else.
pub fn init_embeddings(
    donor_emb: &EmbeddingMatrix,
    donor_tok: &TokenizerModel,
    new_tok: &TokenizerModel,
    pooling: Pooling,
) -> Result<(EmbeddingMatrix, SurgeryReport), SurgeryError> {
    if donor_emb.vocab_fingerprint != donor_tok.fingerprint() {
        return Err(SurgeryError::Mismatch(
            "donor embeddings were built for a different vocabulary".to_string(),
        ));
    }
    if donor_emb.vocab_size() != donor_tok.vocab_size() {
        return Err(SurgeryError::Dim(format!(
            "donor embeddings have {} rows for a vocabulary of {}",
            donor_emb.vocab_size(),
            donor_tok.vocab_size()
        )));
    }
    let d = donor_emb.dim();
    let v = new_tok.vocab_size();
    let mut weights = Array2::<f32>::zeros((v, d));
    let mut provenance = Vec::with_capacity(v);
    let mut copied_count = 0usize;
    for id in 0..v {
        let bytes = new_tok.token_bytes(id as u32)?;
        if let Some(donor_id) = donor_tok.token_id(bytes) {
            weights
                .row_mut(id)
                .assign(&donor_emb.weights.row(donor_id as usize));
            provenance.push(TokenOrigin::Copied);
            copied_count += 1;
            continue;
        }
        let pieces = donor_tok.encode_bytes(bytes);
        if pieces.is_empty() {
            return Err(SurgeryError::EmptyDecomposition(new_tok.token_display(id as u32)));
        }
        match pooling {
            Pooling::Avg => {
                // Left-to-right summation, then one divide: fixed order so
                // the result is bit-reproducible.
                let mut acc = vec![0f32; d];
                for &p in &pieces {
                    let row = donor_emb.weights.row(p as usize);
                    for (a, &x) in acc.iter_mut().zip(row.iter()) {
                        *a += x;
                    }
                }
                let inv = pieces.len() as f32;
                for (j, a) in acc.iter().enumerate() {
                    weights[[id, j]] = a / inv;
                }
            }
            Pooling::Max => {
                let first = donor_emb.weights.row(pieces[0] as usize);
                let mut acc: Vec<f32> = first.iter().copied().collect();
                for &p in &pieces[1..] {
                    let row = donor_emb.weights.row(p as usize);
                    for (a, &x) in acc.iter_mut().zip(row.iter()) {
                        *a = a.max(x);
                    }
                }
                for (j, a) in acc.iter().enumerate() {
                    weights[[id, j]] = *a;
                }
            }
        }
        provenance.push(TokenOrigin::Pooled);
    }
    let report = SurgeryReport {
        copied_count,
        pooled_count: v - copied_count,
        overlap_fraction: copied_count as f64 / v as f64,
        provenance,
    };
    let emb = EmbeddingMatrix::new(weights, new_tok.fingerprint())?;
    debug_assert!((report.overlap_fraction - overlap(new_tok, donor_tok)).abs() < 1e-12);
    Ok((emb, report))
}

/// Recombines a transformer body with an embedding matrix: the result keeps
/// the body's BODY (and any LORA) tensors bit-for-bit and takes the
/// embedding matrix as its EMBEDDING group, adopting the embedding's
/// vocabulary size and fingerprint. When `expect_tok` is given, the
/// embedding must have been built for exactly that tokenizer.
pub fn compose(
    body_source: &Checkpoint,
    embedding: &EmbeddingMatrix,
    expect_tok: Option<&TokenizerModel>,
) -> Result<Checkpoint, SurgeryError> {
    if embedding.dim() != body_source.config.model_dim {
        return Err(SurgeryError::Dim(format!(
            "embedding dimension {} does not match body model_dim {}",
            embedding.dim(),
            body_source.config.model_dim
        )));
    }
    if let Some(tok) = expect_tok {
        if tok.fingerprint() != embedding.vocab_fingerprint {
            return Err(SurgeryError::Mismatch(
                "embedding was built for a different tokenizer than the composed model declares"
                    .to_string(),
            ));
        }
    }
    let mut config = body_source.config.clone();
    config.vocab_size = embedding.vocab_size();
    config.validate()?;
    let mut params = body_source.params.clone();
    *params.get_mut("embed.weight") = embedding.weights.clone();
    Ok(Checkpoint {
        config,
        params,
        vocab_fingerprint: embedding.vocab_fingerprint.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_model, inject_lora, group_bits_equal, ModelConfig, ParamGroup};
    use crate::tokenizer::{EncodingMode, BASE_VOCAB_SIZE};

    /// The 259 base tokens every vocabulary starts from.
    fn base_tokens() -> Vec<Vec<u8>> {
        let mut t = vec![vec![0xC0, 0x00], vec![0xC0, 0x01], vec![0xC0, 0x02]];
        for b in 0..=255u8 {
            t.push(vec![b]);
        }
        t
    }

    fn byte_id(b: u8) -> usize {
        3 + b as usize
    }

    fn donor_model() -> TokenizerModel {
        TokenizerModel::from_parts(base_tokens(), Vec::new(), EncodingMode::MergeRank, false)
            .unwrap()
    }

    fn random_embedding(tok: &TokenizerModel, d: usize, scale: f32) -> EmbeddingMatrix {
        let v = tok.vocab_size();
        let weights = Array2::from_shape_fn((v, d), |(i, j)| {
            ((i * 31 + j * 7) % 13) as f32 * scale - 0.5
        });
        EmbeddingMatrix::new(weights, tok.fingerprint()).unwrap()
    }

    #[test]
    fn identity_transplant_is_a_bitwise_copy() {
        let donor = donor_model();
        let emb = random_embedding(&donor, 8, 0.125);
        let (out, report) = init_embeddings(&emb, &donor, &donor, Pooling::Avg).unwrap();
        assert_eq!(report.pooled_count, 0);
        assert_eq!(report.copied_count, donor.vocab_size());
        assert_eq!(report.overlap_fraction, 1.0);
        for (a, b) in out.weights().iter().zip(emb.weights().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(out.vocab_fingerprint(), donor.fingerprint());
    }

    #[test]
    fn pooled_rows_average_and_max_the_donor_pieces() {
        let donor = donor_model();
        let d = 2;
        let mut weights = Array2::<f32>::zeros((donor.vocab_size(), d));
        weights[[byte_id(b'a'), 0]] = 1.0; // "a" → [1, 0]
        weights[[byte_id(b'b'), 1]] = 1.0; // "b" → [0, 1]
        let emb = EmbeddingMatrix::new(weights, donor.fingerprint()).unwrap();

        // New vocabulary adds one token "ab" the donor lacks.
        let mut tokens = base_tokens();
        tokens.push(b"ab".to_vec());
        let new_tok =
            TokenizerModel::from_parts(tokens, Vec::new(), EncodingMode::LongestMatch, false)
                .unwrap();

        let (avg, report) = init_embeddings(&emb, &donor, &new_tok, Pooling::Avg).unwrap();
        assert_eq!(report.copied_count, BASE_VOCAB_SIZE);
        assert_eq!(report.pooled_count, 1);
        assert_eq!(report.provenance[BASE_VOCAB_SIZE], TokenOrigin::Pooled);
        assert_eq!(avg.weights()[[BASE_VOCAB_SIZE, 0]], 0.5);
        assert_eq!(avg.weights()[[BASE_VOCAB_SIZE, 1]], 0.5);

        let (max, _) = init_embeddings(&emb, &donor, &new_tok, Pooling::Max).unwrap();
        assert_eq!(max.weights()[[BASE_VOCAB_SIZE, 0]], 1.0);
        assert_eq!(max.weights()[[BASE_VOCAB_SIZE, 1]], 1.0);

        // Overlap bookkeeping agrees with the vocabulary-level measure.
        let expected = overlap(&new_tok, &donor);
        assert!((report.overlap_fraction - expected).abs() < 1e-15);
    }

    #[test]
    fn pooled_rows_match_an_independent_recomputation_exactly() {
        let donor = donor_model();
        let emb = random_embedding(&donor, 6, 0.25);
        let mut tokens = base_tokens();
        tokens.push(b"hello".to_vec());
        tokens.push(b"\xFFworld".to_vec());
        let new_tok =
            TokenizerModel::from_parts(tokens, Vec::new(), EncodingMode::LongestMatch, false)
                .unwrap();
        let (out, report) = init_embeddings(&emb, &donor, &new_tok, Pooling::Avg).unwrap();
        assert_eq!(report.copied_count + report.pooled_count, new_tok.vocab_size());
        for id in 0..new_tok.vocab_size() {
            if report.provenance[id] == TokenOrigin::Copied {
                continue;
            }
            let pieces = donor.encode_bytes(new_tok.token_bytes(id as u32).unwrap());
            for j in 0..6 {
                let mut acc = 0f32;
                for &p in &pieces {
                    acc += emb.weights()[[p as usize, j]];
                }
                let want = acc / pieces.len() as f32;
                assert_eq!(out.weights()[[id, j]].to_bits(), want.to_bits());
            }
        }
    }

    #[test]
    fn transplant_rejects_mismatched_donor_pairs() {
        let donor = donor_model();
        let mut emb = random_embedding(&donor, 4, 0.5);
        emb.vocab_fingerprint = "not-the-donor".to_string();
        let err = init_embeddings(&emb, &donor, &donor, Pooling::Avg).unwrap_err();
        assert!(matches!(err, SurgeryError::Mismatch(_)));
    }

    fn tiny_checkpoint(seed: u64) -> Checkpoint {
        let cfg = ModelConfig {
            vocab_size: BASE_VOCAB_SIZE,
            model_dim: 16,
            num_layers: 1,
            num_heads: 2,
            mlp_hidden: 20,
            max_seq_len: 16,
            rope_base: 10_000.0,
            seed,
            lora: None,
        };
        let params = init_model(&cfg).unwrap();
        Checkpoint { config: cfg, params, vocab_fingerprint: donor_model().fingerprint() }
    }

    #[test]
    fn identity_composition_changes_nothing() {
        let ckpt = tiny_checkpoint(3);
        let emb = EmbeddingMatrix::from_checkpoint(&ckpt).unwrap();
        let out = compose(&ckpt, &emb, None).unwrap();
        assert_eq!(out.config, ckpt.config);
        assert_eq!(out.vocab_fingerprint, ckpt.vocab_fingerprint);
        for g in ParamGroup::ALL {
            assert!(group_bits_equal(&out.params, &ckpt.params, g));
        }
    }

    #[test]
    fn composition_swaps_the_embedding_and_keeps_the_body() {
        let mut body = tiny_checkpoint(3);
        inject_lora(&mut body.config, &mut body.params, 2, 4.0, 8).unwrap();
        // A different vocabulary: base plus one extra token.
        let mut tokens = base_tokens();
        tokens.push(b"zz".to_vec());
        let new_tok =
            TokenizerModel::from_parts(tokens, Vec::new(), EncodingMode::LongestMatch, false)
                .unwrap();
        let emb = random_embedding(&new_tok, 16, 0.03125);
        let out = compose(&body, &emb, Some(&new_tok)).unwrap();
        assert_eq!(out.config.vocab_size, BASE_VOCAB_SIZE + 1);
        assert!(group_bits_equal(&out.params, &body.params, ParamGroup::Body));
        assert!(group_bits_equal(&out.params, &body.params, ParamGroup::Lora));
        for (a, b) in out.params.get("embed.weight").iter().zip(emb.weights().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // The composed model runs and produces finite logits.
        let fwd = forward(&out.config, &out.params, &[1, 259, 100, 2]).unwrap();
        assert!(fwd.logits.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn composition_rejects_dimension_and_fingerprint_mismatches() {
        let body = tiny_checkpoint(3);
        let donor = donor_model();
        let narrow = random_embedding(&donor, 8, 0.5);
        assert!(matches!(compose(&body, &narrow, None), Err(SurgeryError::Dim(_))));

        let mut tokens = base_tokens();
        tokens.push(b"qq".to_vec());
        let other =
            TokenizerModel::from_parts(tokens, Vec::new(), EncodingMode::LongestMatch, false)
                .unwrap();
        let emb = random_embedding(&donor, 16, 0.5);
        assert!(matches!(
            compose(&body, &emb, Some(&other)),
            Err(SurgeryError::Mismatch(_))
        ));
    }

    #[test]
    fn embedding_files_round_trip_bit_exactly() {
        let donor = donor_model();
        let emb = random_embedding(&donor, 12, 0.0625);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embedding.bin");
        emb.save(&path).unwrap();
        let loaded = EmbeddingMatrix::load(&path).unwrap();
        assert_eq!(loaded.vocab_fingerprint(), emb.vocab_fingerprint());
        for (a, b) in loaded.weights().iter().zip(emb.weights().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn non_finite_rows_are_rejected() {
        let w = Array2::from_shape_vec((2, 2), vec![0.0, 1.0, f32::NAN, 2.0]).unwrap();
        let err = EmbeddingMatrix::new(w, "fp".to_string()).unwrap_err();
        assert!(matches!(err, SurgeryError::NonFinite { row: 1 }));
    }
}
