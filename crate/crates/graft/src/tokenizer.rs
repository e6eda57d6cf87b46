//! Byte-level BPE tokenizer with trainable merges and two inference modes.
//!
//! Every model shares a fixed base vocabulary: three special tokens
//! (`PAD`, `BOS`, `EOS`) followed by all 256 single-byte tokens. Training
//! appends merged tokens on top of that base, so any byte sequence can always
//! be encoded (byte fallback is total) and `decode(encode(s)) == s` holds for
//! arbitrary strings.
//!
//! Words preceded by a single ASCII space absorb that space as a leading
//! marker byte ([`WORD_MARKER`]), the byte-level analogue of the `▁` prefix
//! used by sentencepiece-style tokenizers. The marker byte never occurs in
//! UTF-8 text, so marked words cannot collide with literal corpus bytes and
//! decoding can restore the space exactly.
//!
//! Two encoding modes are supported:
//!
//! * [`EncodingMode::MergeRank`] replays the learned merges in rank order —
//!   the classic BPE inference rule. Requires a consistent merge list, i.e. a
//!   tokenizer that came straight out of training.
//! * [`EncodingMode::LongestMatch`] greedily takes the longest vocabulary
//!   token at each position. This is the only sound choice for stitched
//!   vocabularies (see [`extend`]) whose tokens come from two different merge
//!   histories.

use std::collections::HashMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const EOS_ID: TokenId = 2;

/// Marker byte prefixed to a word that absorbed the single space before it.
/// `0xFF` never occurs in UTF-8 encoded text.
pub const WORD_MARKER: u8 = 0xFF;

/// Id of the first single-byte token; byte `b` has id `BYTE_TOKENS_START + b`.
pub const BYTE_TOKENS_START: usize = 3;

/// Size of the fixed base vocabulary: 3 specials + 256 bytes.
pub const BASE_VOCAB_SIZE: usize = BYTE_TOKENS_START + 256;

/// Byte strings backing the special tokens. `0xC0` is an overlong-encoding
/// prefix that valid UTF-8 never contains, so no merge learned from text can
/// collide with these.
const SPECIAL_BYTES: [&[u8]; 3] = [&[0xC0, 0x00], &[0xC0, 0x01], &[0xC0, 0x02]];

#[derive(Debug, Error)]
pub enum TokError {
    #[error("target vocabulary size {target} is below the minimum of {minimum}")]
    TargetTooSmall { target: usize, minimum: usize },
    #[error("corpus contains no words")]
    EmptyCorpus,
    #[error("invalid tokenizer model: {0}")]
    Format(String),
    #[error("token id {0} is out of range for this vocabulary")]
    UnknownTokenId(TokenId),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How a trained model maps pre-token byte units to token ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingMode {
    /// Replay merges in the order they were learned (classic BPE inference).
    MergeRank,
    /// Greedy longest prefix match against the vocabulary.
    LongestMatch,
}

/// A trained tokenizer: the vocabulary, the merge list that produced it and
/// the inference mode to use.
#[derive(Debug, Clone)]
pub struct TokenizerModel {
    tokens: Vec<Vec<u8>>,
    merges: Vec<(Vec<u8>, Vec<u8>)>,
    mode: EncodingMode,
    /// True when training or extension ran out of material before reaching
    /// the requested vocabulary size.
    truncated: bool,
    // Derived lookup structures, rebuilt on construction and load.
    index: HashMap<Vec<u8>, TokenId>,
    merge_table: HashMap<(TokenId, TokenId), (u32, TokenId)>,
    max_token_len: usize,
}

fn base_tokens() -> Vec<Vec<u8>> {
    let mut tokens: Vec<Vec<u8>> = SPECIAL_BYTES.iter().map(|s| s.to_vec()).collect();
    for b in 0..=255u8 {
        tokens.push(vec![b]);
    }
    tokens
}

fn byte_token_id(b: u8) -> TokenId {
    (BYTE_TOKENS_START + b as usize) as TokenId
}

impl TokenizerModel {
    /// Builds a model from explicit parts, checking all structural
    /// invariants: base vocabulary layout, unique non-empty tokens, and merge
    /// closure (both sides and the concatenation of every merge are in the
    /// vocabulary).
    pub fn from_parts(
        tokens: Vec<Vec<u8>>,
        merges: Vec<(Vec<u8>, Vec<u8>)>,
        mode: EncodingMode,
        truncated: bool,
    ) -> Result<Self, TokError> {
        if tokens.len() < BASE_VOCAB_SIZE {
            return Err(TokError::Format(format!(
                "vocabulary has {} entries, below the {BASE_VOCAB_SIZE}-entry base",
                tokens.len()
            )));
        }
        for (i, special) in SPECIAL_BYTES.iter().enumerate() {
            if tokens[i] != *special {
                return Err(TokError::Format(format!("special token {i} has wrong bytes")));
            }
        }
        for b in 0..=255u8 {
            if tokens[BYTE_TOKENS_START + b as usize] != [b] {
                return Err(TokError::Format(format!("byte token {b:#04x} missing or misplaced")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(TokError::Format(format!("token {id} is empty")));
            }
            if index.insert(tok.clone(), id as TokenId).is_some() {
                return Err(TokError::Format(format!("duplicate token at id {id}")));
            }
        }
        let mut merge_table = HashMap::with_capacity(merges.len());
        let mut producible: std::collections::HashSet<&[u8]> = std::collections::HashSet::new();
        for (rank, (left, right)) in merges.iter().enumerate() {
            let (Some(&lid), Some(&rid)) = (index.get(left), index.get(right)) else {
                return Err(TokError::Format(format!("merge {rank} refers to unknown tokens")));
            };
            let merged = [left.as_slice(), right.as_slice()].concat();
            let Some(&mid) = index.get(&merged) else {
                return Err(TokError::Format(format!("merge {rank} produces an unknown token")));
            };
            producible.insert(tokens[mid as usize].as_slice());
            merge_table.entry((lid, rid)).or_insert((rank as u32, mid));
        }
        if mode == EncodingMode::MergeRank {
            // Merge-rank inference can only ever emit tokens it can build, so
            // every beyond-base token must be the product of some merge.
            for tok in &tokens[BASE_VOCAB_SIZE..] {
                if !producible.contains(tok.as_slice()) {
                    return Err(TokError::Format(
                        "merge-rank model contains tokens unreachable by its merges".to_string(),
                    ));
                }
            }
        }
        let max_token_len = tokens.iter().map(Vec::len).max().unwrap_or(1);
        Ok(Self { tokens, merges, mode, truncated, index, merge_table, max_token_len })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn mode(&self) -> EncodingMode {
        self.mode
    }

    pub fn truncated(&self) -> bool {
        self.truncated
    }

    pub fn merges(&self) -> &[(Vec<u8>, Vec<u8>)] {
        &self.merges
    }

    /// All token byte strings in id order.
    pub fn tokens(&self) -> &[Vec<u8>] {
        &self.tokens
    }

    pub fn token_bytes(&self, id: TokenId) -> Result<&[u8], TokError> {
        self.tokens
            .get(id as usize)
            .map(Vec::as_slice)
            .ok_or(TokError::UnknownTokenId(id))
    }

    pub fn token_id(&self, bytes: &[u8]) -> Option<TokenId> {
        self.index.get(bytes).copied()
    }

    /// Printable form of a token for reports: the marker byte shows as `▁`,
    /// other non-UTF-8 bytes as `\u{FFFD}`.
    pub fn token_display(&self, id: TokenId) -> String {
        let Ok(bytes) = self.token_bytes(id) else {
            return format!("<invalid:{id}>");
        };
        match id {
            PAD_ID => return "<pad>".to_string(),
            BOS_ID => return "<bos>".to_string(),
            EOS_ID => return "<eos>".to_string(),
            _ => {}
        }
        let mut out = String::new();
        for chunk in bytes.split_inclusive(|&b| b == WORD_MARKER) {
            let (head, marked) = match chunk.split_last() {
                Some((&WORD_MARKER, head)) => (head, true),
                _ => (&chunk[..], false),
            };
            out.push_str(&String::from_utf8_lossy(head));
            if marked {
                out.push('▁');
            }
        }
        out
    }

    /// Hex digest identifying the vocabulary (id-to-bytes mapping). Two
    /// tokenizers with equal fingerprints assign identical meanings to every
    /// embedding row, regardless of how their merge lists differ.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.tokens.len() as u64).to_le_bytes());
        for tok in &self.tokens {
            hasher.update((tok.len() as u32).to_le_bytes());
            hasher.update(tok);
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Encodes text to token ids. No specials are added; callers append
    /// `BOS`/`EOS` themselves where their framing needs them.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for unit in pre_tokenize(text) {
            self.encode_unit_into(&unit, &mut out);
        }
        out
    }

    /// Encodes a single pre-token byte unit (no whitespace splitting). Used
    /// internally per unit and externally to decompose a foreign token's byte
    /// string into this model's tokens.
    pub fn encode_bytes(&self, unit: &[u8]) -> Vec<TokenId> {
        let mut out = Vec::new();
        self.encode_unit_into(unit, &mut out);
        out
    }

    fn encode_unit_into(&self, unit: &[u8], out: &mut Vec<TokenId>) {
        match self.mode {
            EncodingMode::MergeRank => self.merge_rank_unit(unit, out),
            EncodingMode::LongestMatch => self.longest_match_unit(unit, out),
        }
    }

    fn merge_rank_unit(&self, unit: &[u8], out: &mut Vec<TokenId>) {
        let mut syms: Vec<TokenId> = unit.iter().map(|&b| byte_token_id(b)).collect();
        loop {
            // Lowest-rank pair present anywhere in the unit.
            let mut best: Option<(u32, TokenId, TokenId, TokenId)> = None;
            for w in syms.windows(2) {
                if let Some(&(rank, merged)) = self.merge_table.get(&(w[0], w[1])) {
                    if best.map_or(true, |(r, ..)| rank < r) {
                        best = Some((rank, w[0], w[1], merged));
                    }
                }
            }
            let Some((_, a, b, merged)) = best else { break };
            // Replace occurrences left to right, non-overlapping.
            let mut next = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(syms[i]);
                    i += 1;
                }
            }
            syms = next;
        }
        out.extend_from_slice(&syms);
    }

    fn longest_match_unit(&self, unit: &[u8], out: &mut Vec<TokenId>) {
        let mut i = 0;
        while i < unit.len() {
            let limit = (unit.len() - i).min(self.max_token_len);
            let mut matched = None;
            for len in (1..=limit).rev() {
                if let Some(&id) = self.index.get(&unit[i..i + len]) {
                    matched = Some((id, len));
                    break;
                }
            }
            // Single-byte tokens make a match at length 1 guaranteed.
            let (id, len) = matched.expect("byte tokens cover every byte");
            out.push(id);
            i += len;
        }
    }

    /// Decodes ids back to text. Special tokens are skipped, the word marker
    /// becomes a space, and any non-UTF-8 byte runs decode lossily.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokError> {
        let mut bytes = Vec::new();
        for &id in ids {
            if id == PAD_ID || id == BOS_ID || id == EOS_ID {
                continue;
            }
            bytes.extend_from_slice(self.token_bytes(id)?);
        }
        for b in &mut bytes {
            if *b == WORD_MARKER {
                *b = b' ';
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Saves the model as JSON with base64-encoded token byte strings.
    pub fn save(&self, path: &Path) -> Result<(), TokError> {
        let file = TokenizerFile {
            version: FORMAT_VERSION,
            encoding_mode: self.mode,
            specials: SpecialIds::default(),
            truncated: self.truncated,
            tokens: self.tokens.iter().map(|t| BASE64.encode(t)).collect(),
            merges: self
                .merges
                .iter()
                .map(|(l, r)| (BASE64.encode(l), BASE64.encode(r)))
                .collect(),
        };
        let json = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokError> {
        let json = std::fs::read_to_string(path)?;
        let file: TokenizerFile = serde_json::from_str(&json)?;
        if file.version != FORMAT_VERSION {
            return Err(TokError::Format(format!(
                "unsupported tokenizer format version {}",
                file.version
            )));
        }
        if file.specials != SpecialIds::default() {
            return Err(TokError::Format("unexpected special token ids".to_string()));
        }
        let decode_b64 = |s: &String| {
            BASE64
                .decode(s)
                .map_err(|e| TokError::Format(format!("bad base64 token: {e}")))
        };
        let tokens = file.tokens.iter().map(decode_b64).collect::<Result<_, _>>()?;
        let merges = file
            .merges
            .iter()
            .map(|(l, r)| Ok((decode_b64(l)?, decode_b64(r)?)))
            .collect::<Result<_, TokError>>()?;
        Self::from_parts(tokens, merges, file.encoding_mode, file.truncated)
    }
}

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize, PartialEq, Eq)]
struct SpecialIds {
    pad: TokenId,
    bos: TokenId,
    eos: TokenId,
}

impl Default for SpecialIds {
    fn default() -> Self {
        Self { pad: PAD_ID, bos: BOS_ID, eos: EOS_ID }
    }
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    version: u32,
    encoding_mode: EncodingMode,
    specials: SpecialIds,
    truncated: bool,
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
}

/// Splits text into byte units that are encoded independently.
///
/// * A word preceded by exactly one space absorbs it: the unit is
///   [`WORD_MARKER`] followed by the word's bytes.
/// * Any other whitespace character is its own unit.
/// * A word at the start of the text or after non-space whitespace is a bare
///   unit with no marker.
///
/// Concatenating the units (with markers read as spaces) reproduces the
/// input exactly, which is what makes round-trip decoding lossless.
fn pre_tokenize(text: &str) -> Vec<Vec<u8>> {
    let bytes = text.as_bytes();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut units = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if c == ' ' && i + 1 < chars.len() && !chars[i + 1].1.is_whitespace() {
            let start = chars[i + 1].0;
            let mut j = i + 1;
            while j < chars.len() && !chars[j].1.is_whitespace() {
                j += 1;
            }
            let end = chars.get(j).map_or(bytes.len(), |&(p, _)| p);
            let mut unit = Vec::with_capacity(1 + end - start);
            unit.push(WORD_MARKER);
            unit.extend_from_slice(&bytes[start..end]);
            units.push(unit);
            i = j;
        } else if c.is_whitespace() {
            let end = chars.get(i + 1).map_or(bytes.len(), |&(p, _)| p);
            units.push(bytes[pos..end].to_vec());
            i += 1;
        } else {
            let mut j = i;
            while j < chars.len() && !chars[j].1.is_whitespace() {
                j += 1;
            }
            let end = chars.get(j).map_or(bytes.len(), |&(p, _)| p);
            units.push(bytes[pos..end].to_vec());
            i = j;
        }
    }
    units
}

/// Trains a BPE model on the given lines.
///
/// Lines are split on whitespace and every word is counted with a leading
/// [`WORD_MARKER`]. Each round merges the most frequent adjacent pair; ties
/// break on the lexicographically smaller left token byte string, then the
/// smaller right one, making training fully deterministic. Training stops at
/// `target_vocab` tokens, or earlier (with the `truncated` flag set) when no
/// adjacent pairs remain.
pub fn train_bpe<S: AsRef<str>>(
    lines: &[S],
    target_vocab: usize,
    mode: EncodingMode,
) -> Result<TokenizerModel, TokError> {
    if target_vocab < BASE_VOCAB_SIZE {
        return Err(TokError::TargetTooSmall { target: target_vocab, minimum: BASE_VOCAB_SIZE });
    }

    // Deduplicated words in first-occurrence order keep everything that
    // follows deterministic.
    let mut word_index: HashMap<Vec<u8>, usize> = HashMap::new();
    let mut words: Vec<(Vec<TokenId>, i64)> = Vec::new();
    for line in lines {
        for w in line.as_ref().split_whitespace() {
            let mut unit = Vec::with_capacity(w.len() + 1);
            unit.push(WORD_MARKER);
            unit.extend_from_slice(w.as_bytes());
            if let Some(&i) = word_index.get(&unit) {
                words[i].1 += 1;
            } else {
                let syms = unit.iter().map(|&b| byte_token_id(b)).collect();
                word_index.insert(unit, words.len());
                words.push((syms, 1));
            }
        }
    }
    if words.is_empty() {
        return Err(TokError::EmptyCorpus);
    }

    let mut tokens = base_tokens();
    let mut index: HashMap<Vec<u8>, TokenId> = tokens
        .iter()
        .enumerate()
        .map(|(id, t)| (t.clone(), id as TokenId))
        .collect();
    let mut merges: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();

    let mut pair_counts: HashMap<(TokenId, TokenId), i64> = HashMap::new();
    for (syms, n) in &words {
        for w in syms.windows(2) {
            *pair_counts.entry((w[0], w[1])).or_insert(0) += n;
        }
    }

    let mut truncated = false;
    while tokens.len() < target_vocab {
        // Highest count wins; ties go to the smaller (left, right) byte
        // strings. Scanning the whole map keeps selection independent of
        // hash iteration order.
        let mut best: Option<((TokenId, TokenId), i64)> = None;
        for (&pair, &count) in &pair_counts {
            if count <= 0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((bp, bc)) => {
                    count > bc
                        || (count == bc && {
                            let cand = (&tokens[pair.0 as usize], &tokens[pair.1 as usize]);
                            let incumbent = (&tokens[bp.0 as usize], &tokens[bp.1 as usize]);
                            cand < incumbent
                        })
                }
            };
            if better {
                best = Some((pair, count));
            }
        }
        let Some(((aid, bid), _)) = best else {
            truncated = true;
            break;
        };

        let left = tokens[aid as usize].clone();
        let right = tokens[bid as usize].clone();
        let merged_bytes = [left.as_slice(), right.as_slice()].concat();
        let mid = match index.get(&merged_bytes) {
            // A different pair already produced this byte string; the merge
            // rule is still recorded, but no new token appears.
            Some(&existing) => existing,
            None => {
                let id = tokens.len() as TokenId;
                tokens.push(merged_bytes.clone());
                index.insert(merged_bytes, id);
                id
            }
        };
        merges.push((left, right));

        // Apply the merge to every word, updating pair counts by deltas:
        // the left neighbour is read from the already-rewritten prefix, the
        // right neighbour from the untouched suffix, which handles chains of
        // adjacent occurrences correctly.
        for (syms, n) in &mut words {
            if !syms.windows(2).any(|w| w[0] == aid && w[1] == bid) {
                continue;
            }
            let n = *n;
            let mut next = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == aid && syms[i + 1] == bid {
                    if let Some(&prev) = next.last() {
                        *pair_counts.entry((prev, aid)).or_insert(0) -= n;
                        *pair_counts.entry((prev, mid)).or_insert(0) += n;
                    }
                    if i + 2 < syms.len() {
                        let after = syms[i + 2];
                        *pair_counts.entry((bid, after)).or_insert(0) -= n;
                        *pair_counts.entry((mid, after)).or_insert(0) += n;
                    }
                    *pair_counts.entry((aid, bid)).or_insert(0) -= n;
                    next.push(mid);
                    i += 2;
                } else {
                    next.push(syms[i]);
                    i += 1;
                }
            }
            *syms = next;
        }
        pair_counts.remove(&(aid, bid));
    }

    TokenizerModel::from_parts(tokens, merges, mode, truncated)
}

/// Returns the subsequence of `model`'s tokens worth keeping for an
/// English-only vocabulary: the base vocabulary always survives, and a merged
/// token survives when it occurs at least `min_count` times when encoding
/// `lines` and contains no alphabetic character outside the Latin script.
pub fn prune_to_english<S: AsRef<str>>(
    model: &TokenizerModel,
    lines: &[S],
    min_count: u64,
) -> Result<Vec<Vec<u8>>, TokError> {
    if lines.iter().all(|l| l.as_ref().split_whitespace().next().is_none()) {
        return Err(TokError::EmptyCorpus);
    }
    let mut counts = vec![0u64; model.vocab_size()];
    for line in lines {
        for id in model.encode(line.as_ref()) {
            counts[id as usize] += 1;
        }
    }
    Ok(model
        .tokens
        .iter()
        .enumerate()
        .filter(|&(id, tok)| {
            id < BASE_VOCAB_SIZE || (counts[id] >= min_count && latin_only(tok))
        })
        .map(|(_, tok)| tok.clone())
        .collect())
}

/// True when every alphabetic character in the token's text is Latin script.
/// The marker byte reads as a space; bytes that do not form valid UTF-8
/// decode to the replacement character, which is not alphabetic and so never
/// disqualifies a token.
fn latin_only(token: &[u8]) -> bool {
    let text: Vec<u8> = token
        .iter()
        .map(|&b| if b == WORD_MARKER { b' ' } else { b })
        .collect();
    String::from_utf8_lossy(&text)
        .chars()
        .all(|c| !c.is_alphabetic() || is_latin(c))
}

fn is_latin(c: char) -> bool {
    matches!(c,
        'A'..='Z' | 'a'..='z'
        | '\u{00AA}' | '\u{00BA}'
        | '\u{00C0}'..='\u{00FF}'
        | '\u{0100}'..='\u{024F}' // Latin Extended-A/B
        | '\u{0250}'..='\u{02AF}' // IPA extensions
        | '\u{1E00}'..='\u{1EFF}' // Latin Extended Additional
        | '\u{2C60}'..='\u{2C7F}' // Latin Extended-C
        | '\u{A720}'..='\u{A7FF}' // Latin Extended-D
        | '\u{AB30}'..='\u{AB6F}' // Latin Extended-E
        | '\u{FB00}'..='\u{FB06}' // Latin ligatures
    )
}

/// Builds a stitched vocabulary: the retained (pruned) tokens first, then
/// tokens from `donor` in id order until `target_vocab` entries exist.
/// Because the two merge histories are mutually inconsistent, the result
/// always uses [`EncodingMode::LongestMatch`] and carries no merges. Sets the
/// `truncated` flag if the donor runs out of novel tokens first.
pub fn extend(
    retained: &[Vec<u8>],
    donor: &TokenizerModel,
    target_vocab: usize,
) -> Result<TokenizerModel, TokError> {
    let mut tokens = base_tokens();
    let mut seen: HashMap<Vec<u8>, ()> =
        tokens.iter().map(|t| (t.clone(), ())).collect();
    let mut push_novel = |tokens: &mut Vec<Vec<u8>>, tok: &Vec<u8>| {
        if !seen.contains_key(tok) {
            seen.insert(tok.clone(), ());
            tokens.push(tok.clone());
        }
    };
    for tok in retained {
        push_novel(&mut tokens, tok);
    }
    if tokens.len() > target_vocab {
        return Err(TokError::TargetTooSmall { target: target_vocab, minimum: tokens.len() });
    }
    for tok in &donor.tokens {
        if tokens.len() >= target_vocab {
            break;
        }
        push_novel(&mut tokens, tok);
    }
    let truncated = tokens.len() < target_vocab;
    TokenizerModel::from_parts(tokens, Vec::new(), EncodingMode::LongestMatch, truncated)
}

/// Per-language token economy of one tokenizer over a tagged corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageFertility {
    pub language: String,
    pub token_count: u64,
    pub word_count: u64,
    /// Average tokens per whitespace-separated word.
    pub fertility: f64,
    /// Token count under the reference tokenizer, when one was supplied.
    pub reference_token_count: Option<u64>,
    /// reference_token_count / token_count: > 1 means this tokenizer is the
    /// more compact one.
    pub compression_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FertilityReport {
    /// One entry per language tag, sorted by tag.
    pub languages: Vec<LanguageFertility>,
    /// Language tags that contained no words and were excluded.
    pub skipped: Vec<String>,
}

impl FertilityReport {
    pub fn language(&self, tag: &str) -> Option<&LanguageFertility> {
        self.languages.iter().find(|l| l.language == tag)
    }
}

/// Measures tokens emitted per whitespace-separated word for each language
/// tag, optionally alongside a reference tokenizer for compression ratios.
/// Languages with zero words are excluded and listed in `skipped`. Totals are
/// exact counts, so the report is invariant under corpus line reordering.
pub fn fertility<S: AsRef<str>, T: AsRef<str>>(
    model: &TokenizerModel,
    corpus: &[(S, T)],
    reference: Option<&TokenizerModel>,
) -> FertilityReport {
    use std::collections::BTreeMap;
    let mut totals: BTreeMap<String, (u64, u64, u64)> = BTreeMap::new();
    for (tag, line) in corpus {
        let line = line.as_ref();
        let entry = totals.entry(tag.as_ref().to_string()).or_insert((0, 0, 0));
        entry.0 += model.encode(line).len() as u64;
        entry.1 += line.split_whitespace().count() as u64;
        if let Some(r) = reference {
            entry.2 += r.encode(line).len() as u64;
        }
    }
    let mut languages = Vec::new();
    let mut skipped = Vec::new();
    for (language, (token_count, word_count, ref_tokens)) in totals {
        if word_count == 0 {
            skipped.push(language);
            continue;
        }
        languages.push(LanguageFertility {
            language,
            token_count,
            word_count,
            fertility: token_count as f64 / word_count as f64,
            reference_token_count: reference.map(|_| ref_tokens),
            compression_ratio: reference.map(|_| ref_tokens as f64 / token_count as f64),
        });
    }
    FertilityReport { languages, skipped }
}

/// Fraction of `a`'s tokens that also exist in `b` (directional: measures
/// how much of `a` is covered by `b`).
pub fn overlap(a: &TokenizerModel, b: &TokenizerModel) -> f64 {
    let shared = a.tokens.iter().filter(|t| b.index.contains_key(*t)).count();
    shared as f64 / a.tokens.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(model: &TokenizerModel, s: &str) -> TokenId {
        model.token_id(s.as_bytes()).expect("token should exist")
    }

    #[test]
    fn base_vocab_layout() {
        let model = train_bpe(&["x"], BASE_VOCAB_SIZE, EncodingMode::MergeRank).unwrap();
        assert_eq!(model.vocab_size(), BASE_VOCAB_SIZE);
        assert_eq!(model.token_bytes(PAD_ID).unwrap(), &[0xC0, 0x00]);
        assert_eq!(model.token_bytes(BOS_ID).unwrap(), &[0xC0, 0x01]);
        assert_eq!(model.token_bytes(EOS_ID).unwrap(), &[0xC0, 0x02]);
        for b in 0..=255u8 {
            assert_eq!(model.token_bytes(byte_token_id(b)).unwrap(), &[b]);
        }
    }

    #[test]
    fn first_merge_breaks_tie_on_smaller_left_token() {
        // "ab" appears three times, always marker-prefixed, so the pairs
        // (marker, a) and (a, b) both have count 3. The left token "a"
        // (0x61) sorts below the marker (0xFF), so (a, b) merges first.
        let model =
            train_bpe(&["ab ab", "ab"], BASE_VOCAB_SIZE + 2, EncodingMode::MergeRank).unwrap();
        assert_eq!(model.merges()[0], (b"a".to_vec(), b"b".to_vec()));
        assert_eq!(
            model.merges()[1],
            (vec![WORD_MARKER], b"ab".to_vec()),
            "second merge glues the marker onto the whole word"
        );
        assert!(!model.truncated());
        // A mid-sentence "ab" is one token; a line-initial one has no marker
        // but still benefits from the (a, b) merge.
        let marked = vec![WORD_MARKER, b'a', b'b'];
        assert_eq!(model.encode(" ab"), vec![model.token_id(&marked).unwrap()]);
        assert_eq!(model.encode("ab"), vec![tok(&model, "ab")]);
    }

    #[test]
    fn training_stops_early_when_no_pairs_remain() {
        let model =
            train_bpe(&["ab ab", "ab"], BASE_VOCAB_SIZE + 50, EncodingMode::MergeRank).unwrap();
        // Only two merges are learnable from this corpus.
        assert_eq!(model.vocab_size(), BASE_VOCAB_SIZE + 2);
        assert!(model.truncated());
    }

    #[test]
    fn repeated_symbol_merges_left_to_right() {
        // Four 'a's: (a,a) merges non-overlapping left-to-right into two
        // "aa" tokens, then those merge again into "aaaa".
        let model = train_bpe(&["aaaa"], BASE_VOCAB_SIZE + 8, EncodingMode::MergeRank).unwrap();
        assert_eq!(model.encode("aaaa"), vec![tok(&model, "aaaa")]);
        assert_eq!(model.encode("aaa"), vec![tok(&model, "aa"), byte_token_id(b'a')]);
    }

    #[test]
    fn round_trip_is_exact() {
        let corpus = ["the cat sat on the mat", "a tab\tseparated line"];
        for mode in [EncodingMode::MergeRank, EncodingMode::LongestMatch] {
            let model = train_bpe(&corpus, BASE_VOCAB_SIZE + 40, mode).unwrap();
            for text in [
                "the cat sat",
                "double  space",
                " leading space",
                "trailing space ",
                "tabs\tand\nnewlines",
                "ünïcödé — 日本語 текст",
                "",
                " ",
                "   ",
                "a",
                "\t indented",
                "nbsp\u{a0}here",
            ] {
                let ids = model.encode(text);
                assert_eq!(model.decode(&ids).unwrap(), text, "mode {mode:?}");
            }
        }
    }

    #[test]
    fn longest_match_prefers_longest_prefix() {
        // Merges learned: (a,b) → "ab", (ab,c) → "abc", then the marked word.
        let model = train_bpe(
            &["abc abc abc"],
            BASE_VOCAB_SIZE + 20,
            EncodingMode::LongestMatch,
        )
        .unwrap();
        // Both "ab" and "abc" exist; greedy matching takes the longer one.
        assert!(model.token_id(b"ab").is_some());
        assert_eq!(model.encode("abc"), vec![tok(&model, "abc")]);
        // Unknown suffix falls back to shorter matches, never failing.
        let ids = model.encode("abcx");
        assert_eq!(ids, vec![tok(&model, "abc"), byte_token_id(b'x')]);
        assert_eq!(model.decode(&ids).unwrap(), "abcx");
        // Greedy "aab" with vocab {a, ab, abc}: "a" then "ab".
        assert_eq!(
            model.encode("aab"),
            vec![byte_token_id(b'a'), tok(&model, "ab")]
        );
    }

    #[test]
    fn encode_emits_no_specials_and_decode_skips_them() {
        let model = train_bpe(&["hello"], BASE_VOCAB_SIZE + 5, EncodingMode::MergeRank).unwrap();
        let ids = model.encode("hello world");
        assert!(ids.iter().all(|&id| id != PAD_ID && id != BOS_ID && id != EOS_ID));
        let mut framed = vec![BOS_ID];
        framed.extend_from_slice(&ids);
        framed.push(EOS_ID);
        assert_eq!(model.decode(&framed).unwrap(), "hello world");
    }

    #[test]
    fn prune_keeps_base_and_latin_drops_rest() {
        let corpus = ["the cat щи the cat щи", "the cat щи"];
        let model = train_bpe(&corpus, BASE_VOCAB_SIZE + 30, EncodingMode::MergeRank).unwrap();
        // Cyrillic merges exist before pruning.
        assert!(model.tokens().iter().any(|t| !latin_only(t)));
        let retained = prune_to_english(&model, &corpus, 1).unwrap();
        assert_eq!(&retained[..BASE_VOCAB_SIZE], &base_tokens()[..]);
        assert!(retained.iter().all(|t| latin_only(t)));
        // The frequent Latin word survives as a merged token.
        assert!(retained.iter().any(|t| t.as_slice() == b"\xFFcat"));
        // Everything retained must come from the original vocabulary, in order.
        let ids: Vec<_> = retained.iter().map(|t| model.token_id(t).unwrap()).collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn prune_respects_min_count() {
        let corpus = ["rare rare common common common common"];
        let model = train_bpe(&corpus, BASE_VOCAB_SIZE + 40, EncodingMode::MergeRank).unwrap();
        let common = model.token_id(b"\xFFcommon");
        assert!(common.is_some(), "frequent word should have merged fully");
        let retained = prune_to_english(&model, &["common common common"], 2).unwrap();
        assert!(retained.iter().any(|t| t.as_slice() == b"\xFFcommon"));
        assert!(
            !retained.iter().any(|t| t.as_slice() == b"\xFFrare"),
            "token absent from the counting corpus must be pruned"
        );
    }

    #[test]
    fn empty_corpora_are_rejected() {
        assert!(matches!(
            train_bpe::<&str>(&[], 300, EncodingMode::MergeRank),
            Err(TokError::EmptyCorpus)
        ));
        assert!(matches!(
            train_bpe(&["   ", "\t"], 300, EncodingMode::MergeRank),
            Err(TokError::EmptyCorpus)
        ));
        let model = train_bpe(&["ab"], BASE_VOCAB_SIZE, EncodingMode::MergeRank).unwrap();
        assert!(matches!(
            prune_to_english(&model, &[" "], 1),
            Err(TokError::EmptyCorpus)
        ));
    }

    #[test]
    fn extend_stitches_vocabularies_without_duplicates() {
        let english =
            train_bpe(&["the the the cat"], BASE_VOCAB_SIZE + 10, EncodingMode::MergeRank)
                .unwrap();
        let donor = train_bpe(
            &["щи борщ the щи борщ"],
            BASE_VOCAB_SIZE + 20,
            EncodingMode::MergeRank,
        )
        .unwrap();
        let retained = prune_to_english(&english, &["the the the cat"], 1).unwrap();
        let target = BASE_VOCAB_SIZE + 15;
        let extended = extend(&retained, &donor, target).unwrap();
        assert_eq!(extended.vocab_size(), target);
        assert_eq!(extended.mode(), EncodingMode::LongestMatch);
        assert!(extended.merges().is_empty());
        // No duplicates.
        let mut seen = std::collections::HashSet::new();
        assert!(extended.tokens().iter().all(|t| seen.insert(t.clone())));
        // Retained tokens come before donor additions.
        let retained_extra = retained.len() - BASE_VOCAB_SIZE;
        for (i, tok) in retained[BASE_VOCAB_SIZE..].iter().enumerate() {
            assert_eq!(&extended.tokens()[BASE_VOCAB_SIZE + i], tok);
        }
        assert!(extended.vocab_size() > BASE_VOCAB_SIZE + retained_extra);
    }

    #[test]
    fn extend_rejects_target_below_retained_count() {
        let donor = train_bpe(&["xy xy"], BASE_VOCAB_SIZE + 5, EncodingMode::MergeRank).unwrap();
        let retained = donor.tokens().to_vec();
        let err = extend(&retained, &donor, BASE_VOCAB_SIZE + 1).unwrap_err();
        assert!(matches!(err, TokError::TargetTooSmall { .. }));
    }

    #[test]
    fn fertility_reports_per_language_with_reference() {
        let model = train_bpe(&["aa aa aa aa"], BASE_VOCAB_SIZE + 2, EncodingMode::MergeRank)
            .unwrap();
        let base_only = train_bpe(&["zz"], BASE_VOCAB_SIZE, EncodingMode::MergeRank).unwrap();
        let corpus = [("xx", "aa aa"), ("yy", "aa"), ("zz", "   ")];
        let report = fertility(&model, &corpus, Some(&base_only));
        assert_eq!(report.skipped, vec!["zz".to_string()]);
        assert_eq!(report.languages.len(), 2);
        let xx = report.language("xx").unwrap();
        assert_eq!(xx.word_count, 2);
        assert_eq!(xx.token_count, model.encode("aa aa").len() as u64);
        assert_eq!(xx.fertility, xx.token_count as f64 / xx.word_count as f64);
        // The merge-free reference spends one token per byte, so the trained
        // model compresses: ratio strictly above 1.
        assert!(xx.compression_ratio.unwrap() > 1.0);
        // Identical tokenizer as reference → ratio exactly 1.
        let self_ref = fertility(&model, &[("xx", "aa aa")], Some(&model));
        assert_eq!(self_ref.language("xx").unwrap().compression_ratio, Some(1.0));
    }

    #[test]
    fn fertility_is_line_order_invariant() {
        let model =
            train_bpe(&["ab cd ef gh"], BASE_VOCAB_SIZE + 10, EncodingMode::MergeRank).unwrap();
        let a = fertility(&model, &[("t", "ab cd"), ("t", "ef"), ("u", "gh gh")], None);
        let b = fertility(&model, &[("u", "gh gh"), ("t", "ef"), ("t", "ab cd")], None);
        assert_eq!(a, b);
    }

    #[test]
    fn overlap_is_directional() {
        let small = train_bpe(&["ab ab"], BASE_VOCAB_SIZE + 2, EncodingMode::MergeRank).unwrap();
        let big = train_bpe(
            &["ab ab cd cd ab cd"],
            BASE_VOCAB_SIZE + 6,
            EncodingMode::MergeRank,
        )
        .unwrap();
        let forward = overlap(&small, &big);
        let backward = overlap(&big, &small);
        assert!(forward > backward);
        // The base vocabulary alone guarantees a high floor.
        assert!(backward >= BASE_VOCAB_SIZE as f64 / big.vocab_size() as f64);
    }

    #[test]
    fn overlap_counts_shared_byte_strings() {
        // Vocabularies sharing {B, C} beyond base, each with two private
        // tokens: restricted to non-base tokens the overlap is 2/4 = 0.5, and
        // the full-vocabulary figure adds the always-shared base.
        let make = |extra: [&str; 4]| {
            let mut toks = base_tokens();
            toks.extend(extra.iter().map(|s| s.as_bytes().to_vec()));
            TokenizerModel::from_parts(toks, Vec::new(), EncodingMode::LongestMatch, false)
                .unwrap()
        };
        let a = make(["AA", "BB", "CC", "DD"]);
        let b = make(["BB", "CC", "EE", "FF"]);
        let shared_nonbase = a.tokens()[BASE_VOCAB_SIZE..]
            .iter()
            .filter(|t| b.token_id(t).is_some())
            .count();
        assert_eq!(shared_nonbase as f64 / 4.0, 0.5);
        let expected_full = (BASE_VOCAB_SIZE + shared_nonbase) as f64 / a.vocab_size() as f64;
        assert_eq!(overlap(&a, &b), expected_full);
        // Fully disjoint non-base sets: only the base contributes.
        let c = make(["GG", "HH", "II", "JJ"]);
        assert_eq!(overlap(&a, &c), BASE_VOCAB_SIZE as f64 / a.vocab_size() as f64);
        // A model compared with itself overlaps completely.
        assert_eq!(overlap(&a, &a), 1.0);
    }

    #[test]
    fn json_round_trip_preserves_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tok.json");
        let model = train_bpe(
            &["the quick brown fox", "jumps over the lazy dog"],
            BASE_VOCAB_SIZE + 25,
            EncodingMode::MergeRank,
        )
        .unwrap();
        model.save(&path).unwrap();
        let loaded = TokenizerModel::load(&path).unwrap();
        assert_eq!(loaded.tokens(), model.tokens());
        assert_eq!(loaded.merges(), model.merges());
        assert_eq!(loaded.mode(), model.mode());
        assert_eq!(loaded.fingerprint(), model.fingerprint());
        let text = "the quick brown fox jumps";
        assert_eq!(loaded.encode(text), model.encode(text));
    }

    #[test]
    fn load_rejects_corrupted_vocabularies() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tok.json");
        let model = train_bpe(&["ab ab"], BASE_VOCAB_SIZE + 2, EncodingMode::MergeRank).unwrap();

        // Duplicate token.
        let mut tokens = model.tokens().to_vec();
        let last = tokens.last().unwrap().clone();
        tokens.push(last);
        assert!(TokenizerModel::from_parts(
            tokens,
            model.merges().to_vec(),
            EncodingMode::MergeRank,
            false
        )
        .is_err());

        // Merge whose product is missing from the vocabulary.
        let bad = TokenizerModel::from_parts(
            base_tokens(),
            vec![(b"a".to_vec(), b"b".to_vec())],
            EncodingMode::MergeRank,
            false,
        );
        assert!(bad.is_err());

        // Tampered JSON (wrong version).
        model.save(&path).unwrap();
        let mut json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        json["version"] = serde_json::json!(99);
        std::fs::write(&path, serde_json::to_string(&json).unwrap()).unwrap();
        assert!(TokenizerModel::load(&path).is_err());
    }

    #[test]
    fn fingerprint_tracks_vocabulary_only() {
        let a = train_bpe(&["ab ab"], BASE_VOCAB_SIZE + 2, EncodingMode::MergeRank).unwrap();
        let b = train_bpe(&["ab ab ab"], BASE_VOCAB_SIZE + 2, EncodingMode::MergeRank).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint(), "same vocabulary, same digest");
        let c = train_bpe(&["cd cd"], BASE_VOCAB_SIZE + 2, EncodingMode::MergeRank).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn token_display_is_readable() {
        let model = train_bpe(&["ab ab", "ab"], BASE_VOCAB_SIZE + 2, EncodingMode::MergeRank)
            .unwrap();
        assert_eq!(model.token_display(PAD_ID), "<pad>");
        let marked = model.token_id(&[WORD_MARKER, b'a', b'b']).unwrap();
        assert_eq!(model.token_display(marked), "▁ab");
    }
}
