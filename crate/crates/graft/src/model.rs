//! A minimal decoder-only transformer with tied embeddings, handwritten
//! forward and backward passes, strict parameter grouping, and low-rank
//! adapters on the attention projections.
//!
//! Architecture: pre-norm RMSNorm blocks, rotary position encoding on
//! queries and keys, GELU (tanh approximation) MLP, causal masking, and a
//! tied output head (`logits = h · Eᵀ` — there is no separate output
//! projection, so tying is structural, not a runtime promise).
//!
//! Every parameter lives in exactly one of three groups — [`ParamGroup`]:
//! the embedding matrix, the transformer body, and the optional LoRA
//! adapters. The split is the load-bearing contract of the whole crate:
//! training stages freeze and tune whole groups, and checkpoints store one
//! file per group so embeddings and bodies can be recombined.
//!
//! Everything is generic over `f32`/`f64` ([`FloatX`]); training runs in
//! single precision, the finite-difference gradient checker in double.

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::io::{Read, Write};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::path::Path;

use ndarray::{s, Array1, Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{TokenId, PAD_ID};

/// Numeric types the model can run in.
pub trait FloatX:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
{
    fn f64(self) -> f64;
}

impl FloatX for f32 {
    fn f64(self) -> f64 {
        self as f64
    }
}
impl FloatX for f64 {
    fn f64(self) -> f64 {
        self
    }
}

/// Added inside the RMS normalizer before the square root.
pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("low-rank adapters already present")]
    LoraPresent,
    #[error("no low-rank adapters present")]
    LoraAbsent,
    #[error("all target positions are padding")]
    AllPadded,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("vocabulary fingerprint mismatch: checkpoint has {found}, expected {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Low-rank adapter hyperparameters; the effective update is
/// `W x + (alpha / rank) · B (A x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub seed: u64,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.vocab_size < 4 {
            return err(format!("vocab_size {} leaves no room beyond specials", self.vocab_size));
        }
        if self.model_dim == 0 || self.num_layers == 0 || self.num_heads == 0 || self.mlp_hidden == 0
        {
            return err("all dimensions must be at least 1".to_string());
        }
        if self.model_dim % self.num_heads != 0 {
            return err(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if (self.model_dim / self.num_heads) % 2 != 0 {
            return err("head dimension must be even for rotary positions".to_string());
        }
        if self.max_seq_len < 2 {
            return err("max_seq_len must be at least 2".to_string());
        }
        if self.rope_base <= 1.0 {
            return err("rope_base must exceed 1".to_string());
        }
        if let Some(l) = &self.lora {
            if l.rank == 0 || l.rank > self.model_dim {
                return err(format!("lora rank {} out of range", l.rank));
            }
            if !(l.alpha.is_finite() && l.alpha > 0.0) {
                return err("lora alpha must be positive and finite".to_string());
            }
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// The three disjoint, jointly exhaustive parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embedding,
    Body,
    Lora,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Embedding, ParamGroup::Body, ParamGroup::Lora];

    pub fn file_name(self) -> &'static str {
        match self {
            ParamGroup::Embedding => "embedding.bin",
            ParamGroup::Body => "body.bin",
            ParamGroup::Lora => "lora.bin",
        }
    }
}

/// Which group a tensor name belongs to. Total over all names this crate
/// creates; grouping is by name so it survives serialization.
pub fn group_of(name: &str) -> ParamGroup {
    if name == "embed.weight" {
        ParamGroup::Embedding
    } else if name.ends_with(".lora_a") || name.ends_with(".lora_b") {
        ParamGroup::Lora
    } else {
        ParamGroup::Body
    }
}

const ATTN_PROJS: [&str; 4] = ["wq", "wk", "wv", "wo"];

/// Canonical tensor names and shapes for a config, in the fixed order used
/// for initialization, optimizer iteration, and serialization.
pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, (usize, usize))> {
    let (v, d, m) = (cfg.vocab_size, cfg.model_dim, cfg.mlp_hidden);
    let mut out = vec![("embed.weight".to_string(), (v, d))];
    for i in 0..cfg.num_layers {
        out.push((format!("layers.{i}.attn_norm.weight"), (1, d)));
        for p in ATTN_PROJS {
            out.push((format!("layers.{i}.attn.{p}.weight"), (d, d)));
        }
        out.push((format!("layers.{i}.mlp_norm.weight"), (1, d)));
        out.push((format!("layers.{i}.mlp.w_in.weight"), (m, d)));
        out.push((format!("layers.{i}.mlp.w_out.weight"), (d, m)));
    }
    out.push(("norm.weight".to_string(), (1, d)));
    if let Some(l) = &cfg.lora {
        for i in 0..cfg.num_layers {
            for p in ATTN_PROJS {
                out.push((format!("layers.{i}.attn.{p}.lora_a"), (l.rank, d)));
                out.push((format!("layers.{i}.attn.{p}.lora_b"), (d, l.rank)));
            }
        }
    }
    out
}

/// Named tensors in a fixed iteration order. Doubles as the gradient
/// container (same names, same shapes).
#[derive(Debug, Clone)]
pub struct ParamSet<F> {
    names: Vec<String>,
    tensors: HashMap<String, Array2<F>>,
}

impl<F: FloatX> ParamSet<F> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: HashMap::new() }
    }

    pub fn insert(&mut self, name: String, tensor: Array2<F>) {
        if self.tensors.insert(name.clone(), tensor).is_none() {
            self.names.push(name);
        }
    }

    pub fn remove(&mut self, name: &str) -> Option<Array2<F>> {
        let t = self.tensors.remove(name);
        if t.is_some() {
            self.names.retain(|n| n != name);
        }
        t
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn try_get(&self, name: &str) -> Option<&Array2<F>> {
        self.tensors.get(name)
    }

    /// Panics on unknown names: lookups use canonical names derived from the
    /// same config that built the store, so a miss is a bug, not bad input.
    pub fn get(&self, name: &str) -> &Array2<F> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing tensor {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<F> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing tensor {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<F>)> {
        self.names.iter().map(move |n| (n, &self.tensors[n]))
    }

    pub fn group_names(&self, group: ParamGroup) -> Vec<String> {
        self.names
            .iter()
            .filter(|n| group_of(n) == group)
            .cloned()
            .collect()
    }

    pub fn has_group(&self, group: ParamGroup) -> bool {
        self.names.iter().any(|n| group_of(n) == group)
    }

    pub fn num_scalars(&self, group: ParamGroup) -> usize {
        self.iter()
            .filter(|(n, _)| group_of(n) == group)
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Zero tensors with the same names and shapes (gradient buffer).
    pub fn zeros_like(&self) -> Self {
        let mut out = Self::new();
        for (n, t) in self.iter() {
            out.insert(n.clone(), Array2::zeros(t.dim()));
        }
        out
    }
}

impl<F: FloatX> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Bitwise equality of every tensor in a group — the currency of freeze
/// contracts. Returns false if the two stores disagree on which tensors the
/// group contains.
pub fn group_bits_equal(a: &ParamSet<f32>, b: &ParamSet<f32>, group: ParamGroup) -> bool {
    let an = a.group_names(group);
    let bn = b.group_names(group);
    if an != bn {
        return false;
    }
    an.iter().all(|name| {
        let (ta, tb) = (a.get(name), b.get(name));
        ta.dim() == tb.dim()
            && ta
                .iter()
                .zip(tb.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits())
    })
}

/// Deterministic initialization: seeded Gaussians for the embedding and all
/// weight matrices (scaled by fan-in), ones for norm scales. Never creates
/// adapters; see [`inject_lora`].
pub fn init_model<F: FloatX>(cfg: &ModelConfig) -> Result<ParamSet<F>, ModelError> {
    cfg.validate()?;
    let base = ModelConfig { lora: None, ..cfg.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    for (name, (rows, cols)) in expected_shapes(&base) {
        let tensor = if name.ends_with("norm.weight") {
            Array2::from_elem((rows, cols), F::one())
        } else {
            let std = if name == "embed.weight" { 0.02 } else { 1.0 / (cols as f64).sqrt() };
            sample_gaussian(&mut rng, (rows, cols), std)
        };
        params.insert(name, tensor);
    }
    Ok(params)
}

fn sample_gaussian<F: FloatX>(rng: &mut ChaCha8Rng, dim: (usize, usize), std: f64) -> Array2<F> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn(dim, |_| F::from_f64(normal.sample(rng)).unwrap())
}

/// Adds zero-effect adapters (`A` seeded Gaussian, `B` zero) to every
/// attention projection. Until `B` trains away from zero the forward pass is
/// bit-identical to the adapter-free model.
pub fn inject_lora<F: FloatX>(
    cfg: &mut ModelConfig,
    params: &mut ParamSet<F>,
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<(), ModelError> {
    if cfg.lora.is_some() || params.has_group(ParamGroup::Lora) {
        return Err(ModelError::LoraPresent);
    }
    let with = ModelConfig { lora: Some(LoraConfig { rank, alpha }), ..cfg.clone() };
    with.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, dim) in expected_shapes(&with) {
        if group_of(&name) != ParamGroup::Lora {
            continue;
        }
        let tensor = if name.ends_with(".lora_a") {
            sample_gaussian(&mut rng, dim, 0.02)
        } else {
            Array2::zeros(dim)
        };
        params.insert(name, tensor);
    }
    *cfg = with;
    Ok(())
}

/// Folds each adapter into its projection (`W += (alpha/rank)·B·A`) and
/// removes the LORA group.
pub fn merge_lora<F: FloatX>(
    cfg: &mut ModelConfig,
    params: &mut ParamSet<F>,
) -> Result<(), ModelError> {
    let Some(l) = cfg.lora else {
        return Err(ModelError::LoraAbsent);
    };
    let scale = F::from_f64(l.alpha / l.rank as f64).unwrap();
    for i in 0..cfg.num_layers {
        for p in ATTN_PROJS {
            let a = params
                .remove(&format!("layers.{i}.attn.{p}.lora_a"))
                .ok_or(ModelError::LoraAbsent)?;
            let b = params
                .remove(&format!("layers.{i}.attn.{p}.lora_b"))
                .ok_or(ModelError::LoraAbsent)?;
            let delta = b.dot(&a) * scale;
            *params.get_mut(&format!("layers.{i}.attn.{p}.weight")) += &delta;
        }
    }
    cfg.lora = None;
    Ok(())
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct LayerCache<F> {
    /// RMS-normalized input of the attention block, before the scale gain.
    attn_hat: Array2<F>,
    attn_rinv: Array1<F>,
    /// Normalized input after the gain — what the projections actually see.
    attn_y: Array2<F>,
    /// Post-rotary queries/keys and raw values, heads side by side: [T, d].
    q_rot: Array2<F>,
    k_rot: Array2<F>,
    v: Array2<F>,
    /// Per-head attention probabilities.
    probs: Vec<Array2<F>>,
    /// Concatenated attention context before the output projection.
    ctx: Array2<F>,
    /// Adapter intermediates (x·Aᵀ) for q/k/v/o when LoRA is present.
    lora_z: [Option<Array2<F>>; 4],
    mlp_hat: Array2<F>,
    mlp_rinv: Array1<F>,
    mlp_y: Array2<F>,
    mlp_pre: Array2<F>,
    mlp_act: Array2<F>,
}

struct Cache<F> {
    ids: Vec<TokenId>,
    layers: Vec<LayerCache<F>>,
    final_hat: Array2<F>,
    final_rinv: Array1<F>,
    final_y: Array2<F>,
}

/// Result of a forward pass over one sequence: logits plus the activation
/// cache the backward pass consumes.
pub struct Forward<F> {
    pub logits: Array2<F>,
    cache: Cache<F>,
}

fn rmsnorm<F: FloatX>(x: &Array2<F>, gain: &Array2<F>) -> (Array2<F>, Array1<F>, Array2<F>) {
    let (t, d) = x.dim();
    let eps = F::from_f64(NORM_EPS).unwrap();
    let dn = F::from_f64(d as f64).unwrap();
    let mut hat = Array2::zeros((t, d));
    let mut rinv = Array1::zeros(t);
    for i in 0..t {
        let mut ss = F::zero();
        for j in 0..d {
            let v = x[[i, j]];
            ss += v * v;
        }
        let r = (ss / dn + eps).sqrt().recip();
        rinv[i] = r;
        for j in 0..d {
            hat[[i, j]] = x[[i, j]] * r;
        }
    }
    let mut y = hat.clone();
    for i in 0..t {
        for j in 0..d {
            y[[i, j]] *= gain[[0, j]];
        }
    }
    (hat, rinv, y)
}

/// dL/dx for y = gain ⊙ (x · rinv); also accumulates the gain gradient.
fn rmsnorm_backward<F: FloatX>(
    dy: &Array2<F>,
    hat: &Array2<F>,
    rinv: &Array1<F>,
    gain: &Array2<F>,
    gain_grad: &mut Array2<F>,
) -> Array2<F> {
    let (t, d) = dy.dim();
    let dn = F::from_f64(d as f64).unwrap();
    let mut dx = Array2::zeros((t, d));
    for i in 0..t {
        let r = rinv[i];
        let mut dot = F::zero();
        for j in 0..d {
            let dhat = dy[[i, j]] * gain[[0, j]];
            dot += dhat * hat[[i, j]];
            dx[[i, j]] = dhat; // staging: finish below once dot is known
            gain_grad[[0, j]] += dy[[i, j]] * hat[[i, j]];
        }
        let k = r * dot / dn;
        for j in 0..d {
            dx[[i, j]] = dx[[i, j]] * r - k * hat[[i, j]];
        }
    }
    dx
}

fn gelu_tanh<F: FloatX>(x: F) -> F {
    let c = F::from_f64(0.797_884_560_802_865_4).unwrap();
    let a = F::from_f64(0.044715).unwrap();
    let half = F::from_f64(0.5).unwrap();
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_tanh_deriv<F: FloatX>(x: F) -> F {
    let c = F::from_f64(0.797_884_560_802_865_4).unwrap();
    let a = F::from_f64(0.044715).unwrap();
    let half = F::from_f64(0.5).unwrap();
    let three = F::from_f64(3.0).unwrap();
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

fn rope_tables<F: FloatX>(cfg: &ModelConfig, t: usize) -> (Array2<F>, Array2<F>) {
    let half = cfg.head_dim() / 2;
    let mut cos = Array2::zeros((t, half));
    let mut sin = Array2::zeros((t, half));
    for pos in 0..t {
        for j in 0..half {
            let freq = cfg.rope_base.powf(-2.0 * j as f64 / cfg.head_dim() as f64);
            let angle = pos as f64 * freq;
            cos[[pos, j]] = F::from_f64(angle.cos()).unwrap();
            sin[[pos, j]] = F::from_f64(angle.sin()).unwrap();
        }
    }
    (cos, sin)
}

/// Rotates query/key pairs in place, one head's column block at a time.
fn rope_apply<F: FloatX>(x: &mut Array2<F>, cfg: &ModelConfig, cos: &Array2<F>, sin: &Array2<F>) {
    let (t, _) = x.dim();
    let dh = cfg.head_dim();
    for h in 0..cfg.num_heads {
        let off = h * dh;
        for pos in 0..t {
            for j in 0..dh / 2 {
                let (c, sn) = (cos[[pos, j]], sin[[pos, j]]);
                let x0 = x[[pos, off + 2 * j]];
                let x1 = x[[pos, off + 2 * j + 1]];
                x[[pos, off + 2 * j]] = x0 * c - x1 * sn;
                x[[pos, off + 2 * j + 1]] = x0 * sn + x1 * c;
            }
        }
    }
}

/// Transpose of the rotation: maps gradients w.r.t. rotated vectors back.
fn rope_unapply<F: FloatX>(x: &mut Array2<F>, cfg: &ModelConfig, cos: &Array2<F>, sin: &Array2<F>) {
    let (t, _) = x.dim();
    let dh = cfg.head_dim();
    for h in 0..cfg.num_heads {
        let off = h * dh;
        for pos in 0..t {
            for j in 0..dh / 2 {
                let (c, sn) = (cos[[pos, j]], sin[[pos, j]]);
                let d0 = x[[pos, off + 2 * j]];
                let d1 = x[[pos, off + 2 * j + 1]];
                x[[pos, off + 2 * j]] = d0 * c + d1 * sn;
                x[[pos, off + 2 * j + 1]] = -d0 * sn + d1 * c;
            }
        }
    }
}

struct Projected<F> {
    out: Array2<F>,
    z: Option<Array2<F>>,
}

/// y = x·Wᵀ, plus the adapter path (alpha/r)·(x·Aᵀ)·Bᵀ when present.
fn project<F: FloatX>(
    cfg: &ModelConfig,
    params: &ParamSet<F>,
    layer: usize,
    proj: &str,
    x: &Array2<F>,
) -> Projected<F> {
    let w = params.get(&format!("layers.{layer}.attn.{proj}.weight"));
    let mut out = x.dot(&w.t());
    let mut z = None;
    if let Some(l) = &cfg.lora {
        let a = params.get(&format!("layers.{layer}.attn.{proj}.lora_a"));
        let b = params.get(&format!("layers.{layer}.attn.{proj}.lora_b"));
        let scale = F::from_f64(l.alpha / l.rank as f64).unwrap();
        let zx = x.dot(&a.t());
        out = out + zx.dot(&b.t()) * scale;
        z = Some(zx);
    }
    Projected { out, z }
}

/// Backward through [`project`]: accumulates weight (and adapter) gradients
/// and returns dL/dx.
fn project_backward<F: FloatX>(
    cfg: &ModelConfig,
    params: &ParamSet<F>,
    grads: &mut ParamSet<F>,
    layer: usize,
    proj: &str,
    x: &Array2<F>,
    z: &Option<Array2<F>>,
    dout: &Array2<F>,
) -> Array2<F> {
    let wname = format!("layers.{layer}.attn.{proj}.weight");
    *grads.get_mut(&wname) += &dout.t().dot(x);
    let mut dx = dout.dot(params.get(&wname));
    if let Some(l) = &cfg.lora {
        let scale = F::from_f64(l.alpha / l.rank as f64).unwrap();
        let z = z.as_ref().expect("adapter intermediate cached when lora present");
        let aname = format!("layers.{layer}.attn.{proj}.lora_a");
        let bname = format!("layers.{layer}.attn.{proj}.lora_b");
        *grads.get_mut(&bname) += &(dout.t().dot(z) * scale);
        let dz = dout.dot(params.get(&bname)) * scale;
        *grads.get_mut(&aname) += &dz.t().dot(x);
        dx += &dz.dot(params.get(&aname));
    }
    dx
}

/// Runs the model over one token sequence, returning logits `[T, V]` and the
/// caches needed by [`backward`]. Position `i`'s logits depend only on ids
/// `0..=i` (causal mask).
pub fn forward<F: FloatX>(
    cfg: &ModelConfig,
    params: &ParamSet<F>,
    ids: &[TokenId],
) -> Result<Forward<F>, ModelError> {
    let t = ids.len();
    if t == 0 {
        return Err(ModelError::Input("empty sequence".to_string()));
    }
    if t > cfg.max_seq_len {
        return Err(ModelError::Input(format!(
            "sequence length {t} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(ModelError::Input(format!("token id {bad} out of vocabulary")));
    }
    let (d, h, dh) = (cfg.model_dim, cfg.num_heads, cfg.head_dim());
    let scale = F::from_f64(1.0 / (dh as f64).sqrt()).unwrap();
    let (cos, sin) = rope_tables::<F>(cfg, t);
    let embed = params.get("embed.weight");

    let mut x = Array2::zeros((t, d));
    for (i, &id) in ids.iter().enumerate() {
        x.row_mut(i).assign(&embed.row(id as usize));
    }

    let mut layers = Vec::with_capacity(cfg.num_layers);
    for layer in 0..cfg.num_layers {
        let g_attn = params.get(&format!("layers.{layer}.attn_norm.weight"));
        let (attn_hat, attn_rinv, attn_y) = rmsnorm(&x, g_attn);

        let q = project(cfg, params, layer, "wq", &attn_y);
        let k = project(cfg, params, layer, "wk", &attn_y);
        let v = project(cfg, params, layer, "wv", &attn_y);
        let mut q_rot = q.out;
        let mut k_rot = k.out;
        rope_apply(&mut q_rot, cfg, &cos, &sin);
        rope_apply(&mut k_rot, cfg, &cos, &sin);

        let mut probs = Vec::with_capacity(h);
        let mut ctx = Array2::zeros((t, d));
        for head in 0..h {
            let cols = s![.., head * dh..(head + 1) * dh];
            let qh = q_rot.slice(cols);
            let kh = k_rot.slice(cols);
            let vh = v.out.slice(cols);
            let mut p = qh.dot(&kh.t()) * scale;
            causal_softmax(&mut p);
            ctx.slice_mut(cols).assign(&p.dot(&vh));
            probs.push(p);
        }

        let o = project(cfg, params, layer, "wo", &ctx);
        x += &o.out;

        let g_mlp = params.get(&format!("layers.{layer}.mlp_norm.weight"));
        let (mlp_hat, mlp_rinv, mlp_y) = rmsnorm(&x, g_mlp);
        let w_in = params.get(&format!("layers.{layer}.mlp.w_in.weight"));
        let w_out = params.get(&format!("layers.{layer}.mlp.w_out.weight"));
        let mlp_pre = mlp_y.dot(&w_in.t());
        let mlp_act = mlp_pre.mapv(gelu_tanh);
        x += &mlp_act.dot(&w_out.t());

        layers.push(LayerCache {
            attn_hat,
            attn_rinv,
            attn_y,
            q_rot,
            k_rot,
            v: v.out,
            probs,
            ctx,
            lora_z: [q.z, k.z, v.z, o.z],
            mlp_hat,
            mlp_rinv,
            mlp_y,
            mlp_pre,
            mlp_act,
        });
    }

    let g_final = params.get("norm.weight");
    let (final_hat, final_rinv, final_y) = rmsnorm(&x, g_final);
    let logits = final_y.dot(&embed.t());
    Ok(Forward {
        logits,
        cache: Cache { ids: ids.to_vec(), layers, final_hat, final_rinv, final_y },
    })
}

fn causal_softmax<F: FloatX>(scores: &mut Array2<F>) {
    let t = scores.nrows();
    for i in 0..t {
        let mut m = scores[[i, 0]];
        for j in 1..=i {
            if scores[[i, j]] > m {
                m = scores[[i, j]];
            }
        }
        let mut sum = F::zero();
        for j in 0..=i {
            let e = (scores[[i, j]] - m).exp();
            scores[[i, j]] = e;
            sum += e;
        }
        for j in 0..=i {
            scores[[i, j]] /= sum;
        }
        for j in i + 1..t {
            scores[[i, j]] = F::zero();
        }
    }
}

/// Accumulates dL/dθ for every tensor into `grads`, given dL/dlogits.
/// Deterministic: fixed iteration order, no data-dependent reassociation.
pub fn backward<F: FloatX>(
    cfg: &ModelConfig,
    params: &ParamSet<F>,
    fwd: &Forward<F>,
    dlogits: &Array2<F>,
    grads: &mut ParamSet<F>,
) {
    let cache = &fwd.cache;
    let t = cache.ids.len();
    let (d, h, dh) = (cfg.model_dim, cfg.num_heads, cfg.head_dim());
    let scale = F::from_f64(1.0 / (dh as f64).sqrt()).unwrap();
    let (cos, sin) = rope_tables::<F>(cfg, t);
    let embed = params.get("embed.weight");

    // Tied head: the embedding collects gradient from the output side here
    // and from the input side at the very end.
    *grads.get_mut("embed.weight") += &dlogits.t().dot(&cache.final_y);
    let dfinal_y = dlogits.dot(embed);
    let mut dx = rmsnorm_backward(
        &dfinal_y,
        &cache.final_hat,
        &cache.final_rinv,
        params.get("norm.weight"),
        grads.get_mut("norm.weight"),
    );

    for layer in (0..cfg.num_layers).rev() {
        let lc = &cache.layers[layer];

        // MLP block (x = x_mid + w_out(gelu(w_in(norm(x_mid))))).
        let w_in_name = format!("layers.{layer}.mlp.w_in.weight");
        let w_out_name = format!("layers.{layer}.mlp.w_out.weight");
        let dact = dx.dot(params.get(&w_out_name));
        *grads.get_mut(&w_out_name) += &dx.t().dot(&lc.mlp_act);
        let mut dpre = dact;
        dpre.zip_mut_with(&lc.mlp_pre, |g, &p| *g *= gelu_tanh_deriv(p));
        *grads.get_mut(&w_in_name) += &dpre.t().dot(&lc.mlp_y);
        let dmlp_y = dpre.dot(params.get(&w_in_name));
        let gname = format!("layers.{layer}.mlp_norm.weight");
        let dthrough = rmsnorm_backward(
            &dmlp_y,
            &lc.mlp_hat,
            &lc.mlp_rinv,
            params.get(&gname),
            grads.get_mut(&gname),
        );
        dx += &dthrough;

        // Attention block.
        let dattn = dx.clone();
        let dctx_direct = project_backward(
            cfg, params, grads, layer, "wo", &lc.ctx, &lc.lora_z[3], &dattn,
        );
        let mut dq_rot = Array2::zeros((t, d));
        let mut dk_rot = Array2::zeros((t, d));
        let mut dv = Array2::zeros((t, d));
        for head in 0..h {
            let cols = s![.., head * dh..(head + 1) * dh];
            let p = &lc.probs[head];
            let dctxh = dctx_direct.slice(cols);
            let vh = lc.v.slice(cols);
            let mut dp = dctxh.dot(&vh.t());
            dv.slice_mut(cols).assign(&p.t().dot(&dctxh));
            // Softmax backward, restricted to the causal region.
            for i in 0..t {
                let mut dot = F::zero();
                for j in 0..=i {
                    dot += dp[[i, j]] * p[[i, j]];
                }
                for j in 0..=i {
                    dp[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot);
                }
                for j in i + 1..t {
                    dp[[i, j]] = F::zero();
                }
            }
            let qh = lc.q_rot.slice(cols);
            let kh = lc.k_rot.slice(cols);
            dq_rot.slice_mut(cols).assign(&(dp.dot(&kh) * scale));
            dk_rot.slice_mut(cols).assign(&(dp.t().dot(&qh) * scale));
        }
        rope_unapply(&mut dq_rot, cfg, &cos, &sin);
        rope_unapply(&mut dk_rot, cfg, &cos, &sin);

        let mut dattn_y = project_backward(
            cfg, params, grads, layer, "wq", &lc.attn_y, &lc.lora_z[0], &dq_rot,
        );
        dattn_y += &project_backward(
            cfg, params, grads, layer, "wk", &lc.attn_y, &lc.lora_z[1], &dk_rot,
        );
        dattn_y += &project_backward(
            cfg, params, grads, layer, "wv", &lc.attn_y, &lc.lora_z[2], &dv,
        );
        let gname = format!("layers.{layer}.attn_norm.weight");
        let dthrough = rmsnorm_backward(
            &dattn_y,
            &lc.attn_hat,
            &lc.attn_rinv,
            params.get(&gname),
            grads.get_mut(&gname),
        );
        dx += &dthrough;
    }

    // Input side of the tied embedding.
    let ge = grads.get_mut("embed.weight");
    for (i, &id) in cache.ids.iter().enumerate() {
        let mut row = ge.row_mut(id as usize);
        row += &dx.row(i);
    }
}

/// Sum of next-token cross-entropies and the matching dL/dlogits. Targets
/// equal to `PAD` contribute nothing (their gradient rows stay zero). The
/// caller divides by the predicted-token count it is averaging over.
pub fn lm_loss_grad<F: FloatX>(
    logits: &Array2<F>,
    targets: &[TokenId],
) -> (f64, usize, Array2<F>) {
    assert_eq!(logits.nrows(), targets.len(), "one target per logit row");
    let v = logits.ncols();
    let mut dlogits = Array2::zeros(logits.dim());
    let mut sum_ce = 0.0;
    let mut count = 0;
    for (i, &target) in targets.iter().enumerate() {
        if target == PAD_ID {
            continue;
        }
        let row = logits.row(i);
        let mut m = row[0];
        for j in 1..v {
            if row[j] > m {
                m = row[j];
            }
        }
        let mut sum = F::zero();
        for j in 0..v {
            sum += (row[j] - m).exp();
        }
        let lse = m.f64() + sum.f64().ln();
        sum_ce += lse - row[target as usize].f64();
        count += 1;
        let inv = sum.recip();
        let mut drow = dlogits.row_mut(i);
        for j in 0..v {
            drow[j] = (row[j] - m).exp() * inv;
        }
        drow[target as usize] -= F::one();
    }
    (sum_ce, count, dlogits)
}

/// Mean next-token cross-entropy over non-pad targets.
pub fn lm_loss<F: FloatX>(logits: &Array2<F>, targets: &[TokenId]) -> Result<f64, ModelError> {
    let (sum_ce, count, _) = lm_loss_grad(logits, targets);
    if count == 0 {
        return Err(ModelError::AllPadded);
    }
    Ok(sum_ce / count as f64)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// A model on disk: `config.json`, one tensor file per parameter group
/// (`embedding.bin`, `body.bin`, optional `lora.bin`), and `manifest.json`
/// tying them together with CRCs and the vocabulary fingerprint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
    pub vocab_fingerprint: String,
}

const TENSOR_MAGIC: &[u8; 4] = b"GTEN";
const TENSOR_VERSION: u32 = 1;
const MANIFEST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    dtype: String,
    vocab_fingerprint: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct Manifest {
    pub version: u32,
    pub vocab_fingerprint: String,
    pub files: Vec<ManifestFile>,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct ManifestFile {
    pub name: String,
    pub crc32: String,
    pub bytes: u64,
    pub tensors: usize,
}

pub(crate) fn write_tensor_file(
    path: &Path,
    named: &[(&String, &Array2<f32>)],
    fingerprint: &str,
) -> Result<(u32, u64), ModelError> {
    let header = TensorHeader {
        dtype: "f32".to_string(),
        vocab_fingerprint: fingerprint.to_string(),
        tensors: named
            .iter()
            .map(|(n, t)| TensorEntry { name: (*n).clone(), rows: t.nrows(), cols: t.ncols() })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut payload = Vec::new();
    for (_, tensor) in named {
        for &x in tensor.iter() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&payload);
    let mut file = std::fs::File::create(path)?;
    file.write_all(TENSOR_MAGIC)?;
    file.write_all(&TENSOR_VERSION.to_le_bytes())?;
    file.write_all(&(header_json.len() as u32).to_le_bytes())?;
    file.write_all(&header_json)?;
    file.write_all(&payload)?;
    file.write_all(&crc.to_le_bytes())?;
    file.sync_all()?;
    let total = 4 + 4 + 4 + header_json.len() as u64 + payload.len() as u64 + 4;
    Ok((crc, total))
}

pub(crate) fn read_tensor_file(
    path: &Path,
) -> Result<(Vec<(String, Array2<f32>)>, String), ModelError> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let corrupt = |m: &str| ModelError::Corrupt(format!("{}: {m}", path.display()));
    if bytes.len() < 12 || &bytes[..4] != TENSOR_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != TENSOR_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len + 4 {
        return Err(corrupt("truncated header"));
    }
    let header: TensorHeader = serde_json::from_slice(&bytes[12..12 + header_len])?;
    if header.dtype != "f32" {
        return Err(corrupt(&format!("unsupported dtype {}", header.dtype)));
    }
    let payload_len: usize = header.tensors.iter().map(|t| t.rows * t.cols * 4).sum();
    let payload_start = 12 + header_len;
    if bytes.len() != payload_start + payload_len + 4 {
        return Err(corrupt("payload length mismatch"));
    }
    let payload = &bytes[payload_start..payload_start + payload_len];
    let stored_crc = u32::from_le_bytes(bytes[payload_start + payload_len..].try_into().unwrap());
    let crc = crc32fast::hash(payload);
    if crc != stored_crc {
        return Err(corrupt(&format!("checksum mismatch: stored {stored_crc:08x}, computed {crc:08x}")));
    }
    let mut out = Vec::with_capacity(header.tensors.len());
    let mut offset = 0usize;
    for entry in header.tensors {
        let n = entry.rows * entry.cols;
        let mut data = Vec::with_capacity(n);
        for k in 0..n {
            let at = offset + k * 4;
            data.push(f32::from_le_bytes(payload[at..at + 4].try_into().unwrap()));
        }
        offset += n * 4;
        let arr = Array2::from_shape_vec((entry.rows, entry.cols), data)
            .map_err(|e| corrupt(&format!("bad shape for {}: {e}", entry.name)))?;
        out.push((entry.name, arr));
    }
    Ok((out, header.vocab_fingerprint))
}

/// Writes a checkpoint directory, one tensor file per present group.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<(), ModelError> {
    ckpt.config.validate()?;
    std::fs::create_dir_all(dir)?;
    let config_json = serde_json::to_string_pretty(&ckpt.config)?;
    std::fs::write(dir.join("config.json"), config_json)?;
    let mut files = Vec::new();
    for group in ParamGroup::ALL {
        let names = ckpt.params.group_names(group);
        if names.is_empty() {
            continue;
        }
        let named: Vec<(&String, &Array2<f32>)> = ckpt
            .params
            .iter()
            .filter(|(n, _)| group_of(n) == group)
            .collect();
        let path = dir.join(group.file_name());
        let (crc, total) = write_tensor_file(&path, &named, &ckpt.vocab_fingerprint)?;
        files.push(ManifestFile {
            name: group.file_name().to_string(),
            crc32: format!("{crc:08x}"),
            bytes: total,
            tensors: named.len(),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        vocab_fingerprint: ckpt.vocab_fingerprint.clone(),
        files,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Loads and validates a checkpoint directory: config invariants, expected
/// tensor names/shapes per group, checksums, and fingerprint agreement.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, ModelError> {
    let config: ModelConfig =
        serde_json::from_str(&std::fs::read_to_string(dir.join("config.json"))?)?;
    config.validate()?;
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(ModelError::Corrupt(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let expected = expected_shapes(&config);
    let mut params = ParamSet::new();
    let mut loaded: HashMap<String, Array2<f32>> = HashMap::new();
    for group in ParamGroup::ALL {
        let group_expected: Vec<_> =
            expected.iter().filter(|(n, _)| group_of(n) == group).collect();
        if group_expected.is_empty() {
            continue;
        }
        let path = dir.join(group.file_name());
        let (tensors, fp) = read_tensor_file(&path)?;
        if fp != manifest.vocab_fingerprint {
            return Err(ModelError::FingerprintMismatch {
                expected: manifest.vocab_fingerprint,
                found: fp,
            });
        }
        for (name, tensor) in tensors {
            if group_of(&name) != group {
                return Err(ModelError::Corrupt(format!(
                    "tensor {name} does not belong in {}",
                    group.file_name()
                )));
            }
            loaded.insert(name, tensor);
        }
    }
    for (name, (rows, cols)) in &expected {
        let Some(tensor) = loaded.remove(name) else {
            return Err(ModelError::Corrupt(format!("missing tensor {name}")));
        };
        if tensor.dim() != (*rows, *cols) {
            return Err(ModelError::Corrupt(format!(
                "tensor {name} has shape {:?}, expected ({rows}, {cols})",
                tensor.dim()
            )));
        }
        params.insert(name.clone(), tensor);
    }
    if let Some(extra) = loaded.keys().next() {
        return Err(ModelError::Corrupt(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint { config, params, vocab_fingerprint: manifest.vocab_fingerprint })
}

/// Replaces exactly one group's tensors with those stored in another
/// checkpoint directory. Shapes must match the receiving store.
pub fn load_group_into(
    dir: &Path,
    group: ParamGroup,
    params: &mut ParamSet<f32>,
) -> Result<(), ModelError> {
    let (tensors, _) = read_tensor_file(&dir.join(group.file_name()))?;
    for (name, tensor) in &tensors {
        if group_of(name) != group {
            return Err(ModelError::Corrupt(format!("tensor {name} not in group")));
        }
        let Some(existing) = params.try_get(name) else {
            return Err(ModelError::Corrupt(format!("receiving store lacks tensor {name}")));
        };
        if existing.dim() != tensor.dim() {
            return Err(ModelError::Corrupt(format!("tensor {name} shape mismatch")));
        }
    }
    for (name, tensor) in tensors {
        *params.get_mut(&name) = tensor;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 40,
            model_dim: 16,
            num_layers: 2,
            num_heads: 2,
            mlp_hidden: 24,
            max_seq_len: 32,
            rope_base: 10_000.0,
            seed: 7,
            lora: None,
        }
    }

    fn ids(v: &[u32]) -> Vec<TokenId> {
        v.to_vec()
    }

    #[test]
    fn init_is_deterministic_and_counts_match() {
        let cfg = tiny_config();
        let a: ParamSet<f32> = init_model(&cfg).unwrap();
        let b: ParamSet<f32> = init_model(&cfg).unwrap();
        for g in ParamGroup::ALL {
            assert!(group_bits_equal(&a, &b, g));
        }
        assert_eq!(a.num_scalars(ParamGroup::Embedding), 40 * 16);
        assert!(!a.has_group(ParamGroup::Lora));
        // Norm scales initialize to exactly one.
        assert!(a.get("norm.weight").iter().all(|&x| x == 1.0));
        assert!(a.get("layers.0.attn_norm.weight").iter().all(|&x| x == 1.0));
    }

    #[test]
    fn groups_are_disjoint_and_exhaustive() {
        let mut cfg = tiny_config();
        let mut params: ParamSet<f32> = init_model(&cfg).unwrap();
        inject_lora(&mut cfg, &mut params, 4, 4.0, 11).unwrap();
        let total: usize = ParamGroup::ALL
            .iter()
            .map(|&g| params.num_scalars(g))
            .sum();
        let all: usize = params.iter().map(|(_, t)| t.len()).sum();
        assert_eq!(total, all, "every scalar in exactly one group");
        assert_eq!(params.num_scalars(ParamGroup::Embedding), 40 * 16);
        // L·4·(r·d + d·r) adapter scalars.
        assert_eq!(params.num_scalars(ParamGroup::Lora), 2 * 4 * (4 * 16 + 16 * 4));
    }

    #[test]
    fn forward_is_causal() {
        let cfg = tiny_config();
        let params: ParamSet<f32> = init_model(&cfg).unwrap();
        let a = forward(&cfg, &params, &ids(&[5, 6, 7, 8])).unwrap();
        let b = forward(&cfg, &params, &ids(&[5, 6, 7, 9])).unwrap();
        // Positions before the perturbed one are bit-identical.
        for i in 0..3 {
            for j in 0..cfg.vocab_size {
                assert_eq!(a.logits[[i, j]].to_bits(), b.logits[[i, j]].to_bits());
            }
        }
        assert_ne!(a.logits.row(3), b.logits.row(3));
    }

    #[test]
    fn forward_rejects_bad_input() {
        let cfg = tiny_config();
        let params: ParamSet<f32> = init_model(&cfg).unwrap();
        assert!(forward(&cfg, &params, &[]).is_err());
        assert!(forward(&cfg, &params, &ids(&[40])).is_err());
        assert!(forward(&cfg, &params, &vec![1u32; 33]).is_err());
    }

    #[test]
    fn scaling_an_absent_tokens_embedding_touches_only_its_column() {
        let cfg = tiny_config();
        let params: ParamSet<f32> = init_model(&cfg).unwrap();
        let mut scaled = params.clone();
        let absent = 39usize;
        let input = ids(&[3, 4, 5]);
        let mut row = scaled.get_mut("embed.weight").row_mut(absent);
        row *= 2.0f32;
        let a = forward(&cfg, &params, &input).unwrap();
        let b = forward(&cfg, &scaled, &input).unwrap();
        for i in 0..3 {
            for j in 0..cfg.vocab_size {
                if j == absent {
                    continue;
                }
                assert_eq!(a.logits[[i, j]].to_bits(), b.logits[[i, j]].to_bits());
            }
            assert_ne!(a.logits[[i, absent]], b.logits[[i, absent]]);
        }
    }

    #[test]
    fn lora_zero_injection_is_a_bitwise_noop() {
        let mut cfg = tiny_config();
        let params: ParamSet<f32> = init_model(&cfg).unwrap();
        let input = ids(&[1, 2, 3, 4, 5]);
        let before = forward(&cfg, &params, &input).unwrap();
        let mut with = params.clone();
        inject_lora(&mut cfg, &mut with, 4, 8.0, 123).unwrap();
        let after = forward(&cfg, &with, &input).unwrap();
        for (x, y) in before.logits.iter().zip(after.logits.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        // Injection refuses to run twice.
        assert!(matches!(
            inject_lora(&mut cfg, &mut with, 4, 8.0, 123),
            Err(ModelError::LoraPresent)
        ));
    }

    #[test]
    fn merge_lora_folds_adapters() {
        let mut cfg = tiny_config();
        let mut params: ParamSet<f32> = init_model(&cfg).unwrap();
        inject_lora(&mut cfg, &mut params, 4, 4.0, 5).unwrap();
        // Give B nonzero values so the merge actually moves weights.
        for i in 0..cfg.num_layers {
            for p in ATTN_PROJS {
                let b = params.get_mut(&format!("layers.{i}.attn.{p}.lora_b"));
                b.mapv_inplace(|_| 0.01);
            }
        }
        let input = ids(&[2, 9, 4, 7, 1, 3]);
        let unmerged = forward(&cfg, &params, &input).unwrap();
        let mut merged_cfg = cfg.clone();
        let mut merged = params.clone();
        merge_lora(&mut merged_cfg, &mut merged).unwrap();
        assert!(merged_cfg.lora.is_none());
        assert!(!merged.has_group(ParamGroup::Lora));
        let after = forward(&merged_cfg, &merged, &input).unwrap();
        for (x, y) in unmerged.logits.iter().zip(after.logits.iter()) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-3);
            assert!(rel < 1e-5, "merged forward drifted: {x} vs {y}");
        }
        assert!(matches!(
            merge_lora(&mut merged_cfg, &mut merged),
            Err(ModelError::LoraAbsent)
        ));
    }

    #[test]
    fn merge_lora_with_zero_b_is_bitwise_identity() {
        let mut cfg = tiny_config();
        let mut params: ParamSet<f32> = init_model(&cfg).unwrap();
        inject_lora(&mut cfg, &mut params, 4, 4.0, 5).unwrap();
        let mut merged_cfg = cfg.clone();
        let mut merged = params.clone();
        merge_lora(&mut merged_cfg, &mut merged).unwrap();
        // 0·A contributes exactly zero, and W + 0 = W bitwise.
        assert!(group_bits_equal(&params, &merged, ParamGroup::Body));
    }

    #[test]
    fn uniform_logits_lose_ln_v() {
        let logits = Array2::<f32>::zeros((5, 30));
        let targets = ids(&[4, 9, 2, 29, 17]);
        let loss = lm_loss(&logits, &targets).unwrap();
        assert!((loss - (30f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn lm_loss_matches_hand_computed_cross_entropy() {
        // Row 0: logits [1, 2, 3], target 2; row 1: [0.5, -0.5, 0], target 1.
        // (Id 0 is the padding id and would be skipped, so row 1 targets 1.)
        let logits =
            Array2::from_shape_vec((2, 3), vec![1.0f64, 2.0, 3.0, 0.5, -0.5, 0.0]).unwrap();
        let targets = ids(&[2, 1]);
        let e = |x: f64| x.exp();
        let ce0 = (e(1.0) + e(2.0) + e(3.0)).ln() - 3.0;
        let ce1 = (e(0.5) + e(-0.5) + e(0.0)).ln() + 0.5;
        let expected = (ce0 + ce1) / 2.0;
        let loss = lm_loss(&logits, &targets).unwrap();
        assert!((loss - expected).abs() < 1e-6, "{loss} vs {expected}");
        // Gradient rows are softmax minus one-hot; they sum to ~0.
        let (_, count, dlogits) = lm_loss_grad(&logits, &targets);
        assert_eq!(count, 2);
        for i in 0..2 {
            let s: f64 = dlogits.row(i).sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn pad_targets_are_ignored_and_all_pad_errors() {
        let logits = Array2::<f32>::zeros((3, 10));
        let (sum, count, dlogits) = lm_loss_grad(&logits, &ids(&[PAD_ID, 4, PAD_ID]));
        assert_eq!(count, 1);
        assert!(sum > 0.0);
        assert!(dlogits.row(0).iter().all(|&x| x == 0.0));
        assert!(dlogits.row(2).iter().all(|&x| x == 0.0));
        assert!(matches!(
            lm_loss(&logits, &ids(&[PAD_ID, PAD_ID, PAD_ID])),
            Err(ModelError::AllPadded)
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        let mut params: ParamSet<f32> = init_model(&cfg).unwrap();
        inject_lora(&mut cfg, &mut params, 4, 4.0, 99).unwrap();
        let ckpt = Checkpoint {
            config: cfg,
            params,
            vocab_fingerprint: "feedbeef".to_string(),
        };
        save_checkpoint(dir.path(), &ckpt).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.config, ckpt.config);
        assert_eq!(loaded.vocab_fingerprint, "feedbeef");
        for g in ParamGroup::ALL {
            assert!(group_bits_equal(&ckpt.params, &loaded.params, g), "group {g:?}");
        }
        // Saving the load reproduces identical bytes, file for file.
        let dir2 = tempfile::tempdir().unwrap();
        save_checkpoint(dir2.path(), &loaded).unwrap();
        for f in ["config.json", "embedding.bin", "body.bin", "lora.bin", "manifest.json"] {
            let a = std::fs::read(dir.path().join(f)).unwrap();
            let b = std::fs::read(dir2.path().join(f)).unwrap();
            assert_eq!(a, b, "{f} differs between saves");
        }
    }

    #[test]
    fn load_group_into_swaps_only_that_group() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let params: ParamSet<f32> = init_model(&cfg).unwrap();
        let other_cfg = ModelConfig { seed: 1234, ..cfg.clone() };
        let other: ParamSet<f32> = init_model(&other_cfg).unwrap();
        save_checkpoint(
            dir.path(),
            &Checkpoint { config: other_cfg, params: other.clone(), vocab_fingerprint: "x".into() },
        )
        .unwrap();
        let mut target = params.clone();
        load_group_into(dir.path(), ParamGroup::Body, &mut target).unwrap();
        assert!(group_bits_equal(&target, &other, ParamGroup::Body));
        assert!(group_bits_equal(&target, &params, ParamGroup::Embedding));
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let params: ParamSet<f32> = init_model(&cfg).unwrap();
        let ckpt = Checkpoint { config: cfg, params, vocab_fingerprint: "fp".to_string() };
        save_checkpoint(dir.path(), &ckpt).unwrap();

        // Truncation breaks the payload length check.
        let body = dir.path().join("body.bin");
        let bytes = std::fs::read(&body).unwrap();
        std::fs::write(&body, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(ModelError::Corrupt(_))));

        // A flipped payload byte breaks the checksum.
        let mut bytes2 = bytes.clone();
        let mid = bytes2.len() / 2;
        bytes2[mid] ^= 0xFF;
        std::fs::write(&body, &bytes2).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(matches!(err, ModelError::Corrupt(m) if m.contains("checksum")));
    }
}
