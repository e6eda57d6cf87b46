//! The four training stages with strict freeze contracts, plus the pieces
//! they are made of: example packing, bias-corrected Adam, and a
//! finite-difference gradient checker.
//!
//! Each stage trains exactly one fixed set of parameter groups and leaves
//! every other group bit-identical — that guarantee is what makes embedding
//! matrices and bodies recombinable after independent tuning runs.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    backward, forward, lm_loss_grad, ModelConfig, ModelError, ParamGroup, ParamSet,
};
use crate::tokenizer::{TokenId, EOS_ID, PAD_ID};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training input: {0}")]
    Input(String),
    #[error("no usable training data (every packed chunk is shorter than two tokens)")]
    EmptyData,
    #[error("{stage} requires low-rank adapters but the model has none")]
    MissingLora { stage: String },
    #[error("{stage} aborted: loss became non-finite at step {step} (last finite loss {last_finite:?})")]
    NonFiniteLoss {
        stage: String,
        step: usize,
        last_finite: Option<f64>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Gradients are rescaled to global norm 1 when they exceed it.
const GRAD_CLIP: f64 = 1.0;
/// Adapter training warms the learning rate up over this share of steps.
const LORA_WARMUP_FRACTION: f64 = 0.10;

/// The four stages. Each one determines its trainable groups; nothing else
/// ever trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    /// Tune the embedding matrix only (vocabulary adaptation).
    LangAdapt,
    /// Tune the transformer body only; embeddings stay frozen.
    InstructTune,
    /// Tune the low-rank adapters only.
    LoraAdapt,
    /// Continued pretraining: embeddings and body together.
    FullCpt,
}

impl Stage {
    pub fn trainable_groups(self) -> &'static [ParamGroup] {
        match self {
            Stage::LangAdapt => &[ParamGroup::Embedding],
            Stage::InstructTune => &[ParamGroup::Body],
            Stage::LoraAdapt => &[ParamGroup::Lora],
            Stage::FullCpt => &[ParamGroup::Embedding, ParamGroup::Body],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::LangAdapt => "LANG_ADAPT",
            Stage::InstructTune => "INSTRUCT_TUNE",
            Stage::LoraAdapt => "LORA_ADAPT",
            Stage::FullCpt => "FULL_CPT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub pack_len: usize,
    pub seed: u64,
    /// Evaluate held-out perplexity every this many steps (0 = never).
    pub eval_every: usize,
}

impl StageConfig {
    /// Toy-scale defaults: embedding-only tuning takes a higher rate than
    /// stages that move the body or adapters.
    pub fn for_stage(stage: Stage, max_steps: usize) -> Self {
        let learning_rate = match stage {
            Stage::LangAdapt => 3e-4,
            _ => 1e-4,
        };
        Self {
            stage,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            max_steps,
            pack_len: 128,
            seed: 0,
            eval_every: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Input(m));
        // Zero is allowed so no-op validation runs stay expressible.
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return err(format!("learning rate {} must be finite and non-negative", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return err(format!("{name} {b} must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return err("adam_eps must be positive".to_string());
        }
        if self.batch_size == 0 || self.max_steps == 0 {
            return err("batch_size and max_steps must be at least 1".to_string());
        }
        if self.pack_len < 2 {
            return err(format!("pack_len {} must be at least 2", self.pack_len));
        }
        Ok(())
    }
}

/// Concatenates tokenized examples into one stream with an EOS after each
/// example, then splits the stream into `pack_len` chunks; the final partial
/// chunk is padded with PAD. Σ non-pad ids = Σ example lengths + example
/// count.
pub fn pack_examples(
    examples: &[Vec<TokenId>],
    pack_len: usize,
) -> Result<Vec<Vec<TokenId>>, TrainError> {
    if pack_len < 2 {
        return Err(TrainError::Input(format!("pack_len {pack_len} must be at least 2")));
    }
    let mut chunks = Vec::new();
    let mut current: Vec<TokenId> = Vec::with_capacity(pack_len);
    for example in examples {
        for &id in example.iter().chain(std::iter::once(&EOS_ID)) {
            current.push(id);
            if current.len() == pack_len {
                chunks.push(std::mem::replace(&mut current, Vec::with_capacity(pack_len)));
            }
        }
    }
    if !current.is_empty() {
        current.resize(pack_len, PAD_ID);
        chunks.push(current);
    }
    Ok(chunks)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First/second-moment buffers for exactly the trainable tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    names: Vec<String>,
    m: ParamSet<f32>,
    v: ParamSet<f32>,
    pub t: usize,
}

impl AdamState {
    pub fn new(params: &ParamSet<f32>, names: Vec<String>) -> Self {
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        for n in &names {
            let dim = params.get(n).dim();
            m.insert(n.clone(), Array2::zeros(dim));
            v.insert(n.clone(), Array2::zeros(dim));
        }
        Self { names, m, v, t: 0 }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// One bias-corrected Adam update over the state's tensors. Tensors outside
/// the state (frozen groups) are untouched by construction.
pub fn adam_step(
    params: &mut ParamSet<f32>,
    grads: &ParamSet<f32>,
    state: &mut AdamState,
    hyper: &AdamHyper,
) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let (b1, b2) = (hyper.beta1 as f32, hyper.beta2 as f32);
    for name in &state.names {
        let g = grads.get(name);
        let m = state.m.get_mut(name);
        m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
        let v = state.v.get_mut(name);
        v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
        let p = params.get_mut(name);
        let m = state.m.get(name);
        let v = state.v.get(name);
        for ((p, &m), &v) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
            let mhat = m as f64 / bc1;
            let vhat = v as f64 / bc2;
            *p -= (hyper.lr * mhat / (vhat.sqrt() + hyper.eps)) as f32;
        }
    }
}

/// One emitted training event; serialized as one NDJSON line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainEvent {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub tokens_consumed: u64,
    pub wall_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub held_out_ppl: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub stage: Stage,
    pub events: Vec<TrainEvent>,
    pub total_tokens: u64,
    pub wall_ms: u64,
    pub final_loss: f64,
}

/// A snapshot that beat every other held-out evaluation during the stage.
#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub step: usize,
    pub held_out_ppl: f64,
    pub params: ParamSet<f32>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ParamSet<f32>,
    pub metrics: TrainMetrics,
    /// Present when held-out data was supplied and evaluated at least once.
    pub best: Option<BestSnapshot>,
}

fn shifted_targets(ids: &[TokenId]) -> Vec<TokenId> {
    let mut t: Vec<TokenId> = ids[1..].to_vec();
    t.push(PAD_ID);
    t
}

/// Mean cross-entropy of a packed chunk set, in double precision.
fn packed_mean_ce(
    cfg: &ModelConfig,
    params: &ParamSet<f32>,
    chunks: &[Vec<TokenId>],
) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in chunks {
        let fwd = forward(cfg, params, chunk)?;
        let (s, c, _) = lm_loss_grad(&fwd.logits, &shifted_targets(chunk));
        sum += s;
        count += c;
    }
    if count == 0 {
        return Err(TrainError::EmptyData);
    }
    Ok(sum / count as f64)
}

/// Runs one stage over tokenized examples. Returns updated parameters, the
/// step-by-step metrics, and (when held-out data was given) the snapshot
/// with the best held-out perplexity. Only the stage's trainable groups are
/// modified; every other group comes back bit-identical.
pub fn train_stage(
    cfg: &ModelConfig,
    initial: &ParamSet<f32>,
    data: &[Vec<TokenId>],
    held_out: Option<&[Vec<TokenId>]>,
    stage_cfg: &StageConfig,
    mut on_event: impl FnMut(&TrainEvent),
) -> Result<TrainOutcome, TrainError> {
    stage_cfg.validate()?;
    let stage = stage_cfg.stage;
    if stage == Stage::LoraAdapt && (cfg.lora.is_none() || !initial.has_group(ParamGroup::Lora)) {
        return Err(TrainError::MissingLora { stage: stage.name().to_string() });
    }
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    // Chunks whose shifted targets are all PAD cannot carry loss; drop them.
    let mut chunks = pack_examples(data, stage_cfg.pack_len)?;
    chunks.retain(|c| c.iter().filter(|&&id| id != PAD_ID).count() >= 2);
    if chunks.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let held_chunks = match held_out {
        Some(examples) => {
            let mut h = pack_examples(examples, stage_cfg.pack_len)?;
            h.retain(|c| c.iter().filter(|&&id| id != PAD_ID).count() >= 2);
            Some(h)
        }
        None => None,
    };

    let mut params = initial.clone();
    let trainable: Vec<String> = stage
        .trainable_groups()
        .iter()
        .flat_map(|&g| params.group_names(g))
        .collect();
    let mut opt = AdamState::new(&params, trainable.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(stage_cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let warmup_steps = if stage == Stage::LoraAdapt {
        ((stage_cfg.max_steps as f64 * LORA_WARMUP_FRACTION).ceil() as usize).max(1)
    } else {
        0
    };

    let started = Instant::now();
    let mut events = Vec::with_capacity(stage_cfg.max_steps);
    let mut tokens_consumed = 0u64;
    let mut last_finite: Option<f64> = None;
    let mut best: Option<BestSnapshot> = None;

    for step in 1..=stage_cfg.max_steps {
        // Epoch-shuffled batch order, reshuffled whenever exhausted.
        let mut batch = Vec::with_capacity(stage_cfg.batch_size);
        for _ in 0..stage_cfg.batch_size {
            if order.is_empty() {
                order = (0..chunks.len()).collect();
                for i in (1..order.len()).rev() {
                    let j = rng.random_range(0..=i);
                    order.swap(i, j);
                }
            }
            batch.push(order.pop().expect("refilled above"));
        }

        // Forward everything first so the loss is averaged over the whole
        // batch before any gradient is scaled.
        let mut rows = Vec::with_capacity(batch.len());
        let mut sum_ce = 0.0;
        let mut count = 0usize;
        for &ci in &batch {
            let chunk = &chunks[ci];
            tokens_consumed += chunk.iter().filter(|&&id| id != PAD_ID).count() as u64;
            let fwd = forward(cfg, &params, chunk)?;
            let targets = shifted_targets(chunk);
            let (s, c, dlogits) = lm_loss_grad(&fwd.logits, &targets);
            sum_ce += s;
            count += c;
            rows.push((fwd, dlogits));
        }
        if count == 0 {
            continue;
        }
        let loss = sum_ce / count as f64;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                stage: stage.name().to_string(),
                step,
                last_finite,
            });
        }
        last_finite = Some(loss);

        let mut grads = params.zeros_like();
        let scale = 1.0 / count as f32;
        for (fwd, mut dlogits) in rows {
            dlogits.mapv_inplace(|x| x * scale);
            backward(cfg, &params, &fwd, &dlogits, &mut grads);
        }

        // Global-norm clip over the trainable tensors only.
        let mut sq = 0.0f64;
        for name in &trainable {
            sq += grads.get(name).iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>();
        }
        let norm = sq.sqrt();
        if norm > GRAD_CLIP {
            let factor = (GRAD_CLIP / norm) as f32;
            for name in &trainable {
                grads.get_mut(name).mapv_inplace(|g| g * factor);
            }
        }

        let lr = if warmup_steps > 0 && step <= warmup_steps {
            stage_cfg.learning_rate * step as f64 / warmup_steps as f64
        } else {
            stage_cfg.learning_rate
        };
        adam_step(&mut params, &grads, &mut opt, &AdamHyper {
            lr,
            beta1: stage_cfg.beta1,
            beta2: stage_cfg.beta2,
            eps: stage_cfg.adam_eps,
        });

        let mut held_out_ppl = None;
        let due = stage_cfg.eval_every > 0 && step % stage_cfg.eval_every == 0;
        if let Some(h) = held_chunks.as_ref().filter(|h| !h.is_empty()) {
            if due || step == stage_cfg.max_steps {
                let ppl = packed_mean_ce(cfg, &params, h)?.exp();
                held_out_ppl = Some(ppl);
                if best.as_ref().is_none_or(|b| ppl < b.held_out_ppl) {
                    best = Some(BestSnapshot { step, held_out_ppl: ppl, params: params.clone() });
                }
            }
        }

        let event = TrainEvent {
            step,
            loss,
            lr,
            tokens_consumed,
            wall_ms: started.elapsed().as_millis() as u64,
            held_out_ppl,
        };
        on_event(&event);
        events.push(event);
    }

    let final_loss = events.last().map(|e| e.loss).unwrap_or(f64::NAN);
    Ok(TrainOutcome {
        params,
        metrics: TrainMetrics {
            stage,
            events,
            total_tokens: tokens_consumed,
            wall_ms: started.elapsed().as_millis() as u64,
            final_loss,
        },
        best,
    })
}

/// Where the analytic and numeric gradients disagreed the most.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub per_group: Vec<(ParamGroup, f64)>,
}

/// Central-difference check of the analytic gradient in double precision:
/// samples at least `samples` coordinates spread over every parameter group
/// and compares (f(x+eps) − f(x−eps)) / 2eps against the backward pass.
pub fn grad_check(
    cfg: &ModelConfig,
    params: &ParamSet<f64>,
    batch: &[Vec<TokenId>],
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let batch_loss = |p: &ParamSet<f64>| -> Result<f64, TrainError> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for ids in batch {
            let fwd = forward(cfg, p, ids)?;
            let (s, c, _) = lm_loss_grad(&fwd.logits, &shifted_targets(ids));
            sum += s;
            count += c;
        }
        if count == 0 {
            return Err(TrainError::EmptyData);
        }
        Ok(sum / count as f64)
    };

    // Analytic gradient of the same scalar.
    let mut grads = params.zeros_like();
    let mut total_count = 0usize;
    let mut forwards = Vec::new();
    for ids in batch {
        let fwd = forward(cfg, params, ids)?;
        let (_, c, dlogits) = lm_loss_grad(&fwd.logits, &shifted_targets(ids));
        total_count += c;
        forwards.push((fwd, dlogits));
    }
    if total_count == 0 {
        return Err(TrainError::EmptyData);
    }
    for (fwd, mut dlogits) in forwards {
        dlogits.mapv_inplace(|x| x / total_count as f64);
        backward(cfg, params, &fwd, &dlogits, &mut grads);
    }

    let groups: Vec<ParamGroup> = ParamGroup::ALL
        .into_iter()
        .filter(|&g| params.has_group(g))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    let mut per_group: Vec<(ParamGroup, f64)> = groups.iter().map(|&g| (g, 0.0)).collect();
    let mut checked = 0usize;
    while checked < samples {
        for (gi, &group) in groups.iter().enumerate() {
            let names = params.group_names(group);
            let name = &names[rng.random_range(0..names.len())];
            let tensor = params.get(name);
            let (r, c) = tensor.dim();
            let coord = (rng.random_range(0..r), rng.random_range(0..c));
            let original = tensor[coord];

            work.get_mut(name)[coord] = original + eps;
            let plus = batch_loss(&work)?;
            work.get_mut(name)[coord] = original - eps;
            let minus = batch_loss(&work)?;
            work.get_mut(name)[coord] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.get(name)[coord];
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
            if rel > per_group[gi].1 {
                per_group[gi].1 = rel;
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err: max_rel, coords_checked: checked, per_group })
}
