//! Stage-1 self-supervised training: masked-token prediction (MLM) plus
//! jump-target prediction (JTP), summed with equal weight.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{save_model, Encoder, EncoderError, EncoderModel, ModelManifest};
use crate::numeric::{Adam, AdamConfig, AdamState, Float, Graph, NumericError, Tensor, Var};
use crate::tokenizer::{TokenSequence, Vocab, MASK_ID, PAD_ID};

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("rate {0} outside [0, 1]")]
    InvalidRate(f64),
    #[error("pre-training corpus is empty")]
    EmptyCorpus,
    #[error("invalid pre-training config: {0}")]
    Config(String),
    #[error("checkpoint I/O: {0}")]
    CheckpointIo(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// What an MLM position shows the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Replacement {
    Mask,
    Random(u32),
    Keep,
}

/// Positions to predict in one sequence. `mlm_positions` and
/// `jtp_positions` are disjoint; JTP positions hold jump symbols and MLM
/// positions never do.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskingPlan {
    pub mlm_positions: Vec<usize>,
    pub mlm_replacements: Vec<Replacement>,
    /// Original token ids at `mlm_positions`.
    pub mlm_targets: Vec<u32>,
    pub jtp_positions: Vec<usize>,
    /// Target instruction index of each masked jump symbol.
    pub jtp_targets: Vec<usize>,
}

impl MaskingPlan {
    pub fn is_empty(&self) -> bool {
        self.mlm_positions.is_empty() && self.jtp_positions.is_empty()
    }

    /// Copy of `seq` with planned token ids replaced; the instruction and
    /// position streams are untouched.
    pub fn apply(&self, seq: &TokenSequence) -> TokenSequence {
        let mut out = seq.clone();
        for (&p, r) in self.mlm_positions.iter().zip(&self.mlm_replacements) {
            match *r {
                Replacement::Mask => out.token_ids[p] = MASK_ID,
                Replacement::Random(id) => out.token_ids[p] = id,
                Replacement::Keep => {}
            }
        }
        for &p in &self.jtp_positions {
            out.token_ids[p] = MASK_ID;
        }
        out
    }
}

/// Bernoulli selection: each maskable ordinary token with probability
/// `mlm_rate`, each jump symbol with probability `jtp_rate`. Selected MLM
/// tokens become `<mask>` 80%, a random learned token 10%, unchanged 10%.
pub fn plan_masking(
    seq: &TokenSequence,
    vocab: &Vocab,
    mlm_rate: f64,
    jtp_rate: f64,
    seed: u64,
) -> Result<MaskingPlan, PretrainError> {
    for r in [mlm_rate, jtp_rate] {
        if !(0.0..=1.0).contains(&r) {
            return Err(PretrainError::InvalidRate(r));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let learned = vocab.learned_ids();
    let mut plan = MaskingPlan::default();
    for (i, &id) in seq.token_ids.iter().enumerate() {
        if id == PAD_ID || id == MASK_ID {
            continue;
        }
        if let Some(k) = vocab.jump_index(id) {
            if rng.random_bool(jtp_rate) {
                plan.jtp_positions.push(i);
                plan.jtp_targets.push(k);
            }
        } else if rng.random_bool(mlm_rate) {
            let u: f64 = rng.random();
            let r = if u < 0.8 || learned.is_empty() {
                Replacement::Mask
            } else if u < 0.9 {
                Replacement::Random(rng.random_range(learned.clone()))
            } else {
                Replacement::Keep
            };
            plan.mlm_positions.push(i);
            plan.mlm_replacements.push(r);
            plan.mlm_targets.push(id);
        }
    }
    Ok(plan)
}

/// Loss nodes of one planned sequence.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub mlm: Option<Var>,
    pub jtp: Option<Var>,
    pub total: Var,
}

/// `Σ_{m_x} -log P(x_i | mlm) + Σ_{l_x} -log P(k_i | jtp)` for one sequence.
/// An empty plan gives a constant zero.
pub fn pretrain_loss<T: Float>(
    g: &mut Graph<'_, T>,
    encoder: &Encoder,
    seq: &TokenSequence,
    plan: &MaskingPlan,
) -> Result<LossParts, PretrainError> {
    if plan.is_empty() {
        let zero = g.input(Tensor::scalar(T::zero()));
        return Ok(LossParts {
            mlm: None,
            jtp: None,
            total: zero,
        });
    }
    let masked = plan.apply(seq);
    let h = encoder.hidden(g, &masked)?;
    let mlm = if plan.mlm_positions.is_empty() {
        None
    } else {
        let logits = encoder.mlm_logits(g, h, &plan.mlm_positions)?;
        let targets: Vec<usize> = plan.mlm_targets.iter().map(|&t| t as usize).collect();
        Some(g.cross_entropy(logits, &targets)?)
    };
    let jtp = if plan.jtp_positions.is_empty() {
        None
    } else {
        let logits = encoder.jtp_logits(g, h, &plan.jtp_positions)?;
        Some(g.cross_entropy(logits, &plan.jtp_targets)?)
    };
    let total = match (mlm, jtp) {
        (Some(a), Some(b)) => g.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => unreachable!("plan is not empty"),
    };
    Ok(LossParts { mlm, jtp, total })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub mlm_rate: f64,
    pub jtp_rate: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 16,
            mlm_rate: 0.15,
            jtp_rate: 0.15,
            adam: AdamConfig {
                lr: 1e-3,
                clip_norm: Some(1.0),
                ..Default::default()
            },
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

/// Mean per-sequence losses of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub mlm_loss: f64,
    pub jtp_loss: f64,
    pub total: f64,
}

pub fn write_loss_curve<W: Write>(mut w: W, records: &[LossRecord]) -> std::io::Result<()> {
    writeln!(w, "step,mlm_loss,jtp_loss,total")?;
    for r in records {
        writeln!(w, "{},{},{},{}", r.step, r.mlm_loss, r.jtp_loss, r.total)?;
    }
    Ok(())
}

/// Where and how to write periodic checkpoints.
#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub manifest: ModelManifest,
}

impl CheckpointSink {
    pub fn path_for(&self, step: usize) -> PathBuf {
        self.dir.join(format!("step-{step:06}.ckpt"))
    }
}

/// Resumable training state.
#[derive(Debug, Clone)]
pub struct Pretrainer {
    pub config: PretrainConfig,
    pub optimizer: Adam<f32>,
    /// Number of completed steps.
    pub step: usize,
}

pub(crate) fn step_seed(seed: u64, step: usize) -> u64 {
    // SplitMix64 finalizer over (seed, step).
    let mut z = seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Pretrainer {
    pub fn new(config: PretrainConfig, model: &EncoderModel<f32>) -> Result<Self, PretrainError> {
        if config.batch_size == 0 {
            return Err(PretrainError::Config("batch_size must be positive".into()));
        }
        for r in [config.mlm_rate, config.jtp_rate] {
            if !(0.0..=1.0).contains(&r) {
                return Err(PretrainError::InvalidRate(r));
            }
        }
        let optimizer = Adam::new(config.adam, &model.params);
        Ok(Self {
            config,
            optimizer,
            step: 0,
        })
    }

    /// Continue from a checkpoint's optimizer state, `state.step` steps in.
    pub fn resume(
        config: PretrainConfig,
        model: &EncoderModel<f32>,
        state: AdamState<f32>,
    ) -> Result<Self, PretrainError> {
        let mut t = Self::new(config, model)?;
        if state.m.len() != model.params.len() {
            return Err(PretrainError::Config("optimizer state does not match model".into()));
        }
        t.step = state.step as usize;
        t.optimizer.state = state;
        Ok(t)
    }

    /// One optimization step on a batch drawn from `corpus`. The batch and
    /// masks depend only on the seed and the step number.
    pub fn train_step(
        &mut self,
        model: &mut EncoderModel<f32>,
        corpus: &[TokenSequence],
        vocab: &Vocab,
    ) -> Result<LossRecord, PretrainError> {
        if corpus.is_empty() {
            return Err(PretrainError::EmptyCorpus);
        }
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(c.seed, self.step));
        let batch: Vec<usize> = if c.batch_size >= corpus.len() {
            (0..corpus.len()).collect()
        } else {
            rand::seq::index::sample(&mut rng, corpus.len(), c.batch_size).into_vec()
        };
        let plans = batch
            .iter()
            .map(|&i| plan_masking(&corpus[i], vocab, c.mlm_rate, c.jtp_rate, rng.next_u64()))
            .collect::<Result<Vec<_>, _>>()?;

        let inv = 1.0 / batch.len() as f32;
        let (record, grads) = {
            let mut g = Graph::new(&model.params);
            let mut totals = Vec::with_capacity(batch.len());
            let (mut mlm, mut jtp) = (0.0f64, 0.0f64);
            for (&i, plan) in batch.iter().zip(&plans) {
                let parts = pretrain_loss(&mut g, &model.encoder, &corpus[i], plan)?;
                mlm += parts.mlm.map_or(0.0, |v| g.value(v).item() as f64);
                jtp += parts.jtp.map_or(0.0, |v| g.value(v).item() as f64);
                totals.push(parts.total);
            }
            let stacked = g.concat_rows(&totals)?;
            let sum = g.sum(stacked);
            let loss = g.scale(sum, inv);
            let n = batch.len() as f64;
            let record = LossRecord {
                step: self.step + 1,
                mlm_loss: mlm / n,
                jtp_loss: jtp / n,
                total: g.value(loss).item() as f64,
            };
            (record, g.backward(loss)?)
        };
        self.optimizer.step(&mut model.params, &grads)?;
        self.step += 1;
        Ok(record)
    }

    /// Train until `config.steps` steps are complete, writing checkpoints
    /// (with optimizer state) at the configured interval.
    pub fn run(
        &mut self,
        model: &mut EncoderModel<f32>,
        corpus: &[TokenSequence],
        vocab: &Vocab,
        sink: Option<&CheckpointSink>,
        mut on_step: impl FnMut(&LossRecord),
    ) -> Result<Vec<LossRecord>, PretrainError> {
        let mut curve = Vec::new();
        while self.step < self.config.steps {
            let r = self.train_step(model, corpus, vocab)?;
            on_step(&r);
            curve.push(r);
            let every = self.config.checkpoint_every;
            if let Some(sink) = sink {
                if every > 0 && self.step % every == 0 {
                    self.save(model, sink, &sink.path_for(self.step))?;
                }
            }
        }
        Ok(curve)
    }

    pub fn save(
        &self,
        model: &EncoderModel<f32>,
        sink: &CheckpointSink,
        path: &Path,
    ) -> Result<(), PretrainError> {
        std::fs::create_dir_all(&sink.dir).map_err(|e| PretrainError::CheckpointIo(e.to_string()))?;
        save_model(path, &sink.manifest, &model.params, Some(&self.optimizer.state)).map_err(
            |e| match e {
                EncoderError::Checkpoint(c) => PretrainError::CheckpointIo(c.to_string()),
                other => PretrainError::Encoder(other),
            },
        )
    }
}

/// Train from scratch for `config.steps` steps.
pub fn run_pretraining(
    corpus: &[TokenSequence],
    vocab: &Vocab,
    model: &mut EncoderModel<f32>,
    config: PretrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<Vec<LossRecord>, PretrainError> {
    let mut t = Pretrainer::new(config, model)?;
    t.run(model, corpus, vocab, sink, |_| {})
}

#[cfg(test)]
mod tests;
