use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    in_batch_recall_at_1, infonce_scaled, AlignError, AlignExample, BuiltinText, GroupIndex,
    LogitScale, TextEncoder, TextRef, TextSpec,
};
use crate::encoder::{load_model, save_model, Encoder, EncoderModel, ModelManifest};
use crate::numeric::{Adam, AdamConfig, AdamState, Float, Graph, ParamId, ParamStore, Tensor, Var};
use crate::pretrain::step_seed;
use crate::tokenizer::TokenSequence;

pub const PROJECTION: &str = "align.text_proj.weight";
pub const LOG_SCALE: &str = "align.log_scale";

/// Shape of the contrastive head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignSettings {
    /// Logits are similarities divided by this. Initial value when learnable.
    pub temperature: f64,
    pub learnable_temperature: bool,
    /// L2-normalize both sides before the dot product.
    pub normalize: bool,
    /// Average in the text-to-assembly direction.
    pub symmetric: bool,
    /// Linear map from text width to encoder width. Required when they differ.
    pub projection: bool,
}

impl Default for AlignSettings {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            learnable_temperature: false,
            normalize: true,
            symmetric: false,
            projection: true,
        }
    }
}

impl AlignSettings {
    pub fn validate(&self) -> Result<(), AlignError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(AlignError::NonPositiveTemperature(self.temperature));
        }
        Ok(())
    }
}

/// Encoder, text encoder, projection and temperature over one store.
#[derive(Debug, Clone)]
pub struct AlignModel<T, E> {
    pub encoder: Encoder,
    pub text: E,
    pub settings: AlignSettings,
    pub params: ParamStore<T>,
    projection: Option<ParamId>,
    log_scale: Option<ParamId>,
}

impl<T: Float, E: TextEncoder> AlignModel<T, E> {
    /// Add the projection and temperature tensors to `base`. Trainable
    /// text-encoder tensors must already be in `base.params`.
    pub fn init<R: Rng + ?Sized>(
        base: EncoderModel<T>,
        text: E,
        settings: AlignSettings,
        rng: &mut R,
    ) -> Result<Self, AlignError> {
        settings.validate()?;
        let EncoderModel {
            encoder,
            mut params,
        } = base;
        let d = encoder.config().hidden_dim;
        let dt = text.dim();
        if settings.projection || dt != d {
            let std = 1.0 / (dt as f64).sqrt();
            params.insert(PROJECTION, Tensor::randn(&[dt, d], std, rng));
        }
        if settings.learnable_temperature {
            params.insert(LOG_SCALE, Tensor::scalar(T::of(-settings.temperature.ln())));
        }
        Self::bind(encoder, params, text, settings)
    }

    pub fn bind(
        encoder: Encoder,
        params: ParamStore<T>,
        text: E,
        settings: AlignSettings,
    ) -> Result<Self, AlignError> {
        settings.validate()?;
        let d = encoder.config().hidden_dim;
        let dt = text.dim();
        let projection = if settings.projection || dt != d {
            let id = params
                .id(PROJECTION)
                .ok_or_else(|| AlignError::Config(format!("missing tensor {PROJECTION}")))?;
            if params.get(id).shape() != [dt, d] {
                return Err(AlignError::DimensionMismatch {
                    expected: vec![dt, d],
                    found: params.get(id).shape().to_vec(),
                });
            }
            Some(id)
        } else {
            None
        };
        let log_scale = if settings.learnable_temperature {
            Some(
                params
                    .id(LOG_SCALE)
                    .ok_or_else(|| AlignError::Config(format!("missing tensor {LOG_SCALE}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            encoder,
            text,
            settings,
            params,
            projection,
            log_scale,
        })
    }

    pub fn projection(&self) -> Option<&Tensor<T>> {
        self.projection.map(|id| self.params.get(id))
    }

    /// Current temperature.
    pub fn temperature(&self) -> f64 {
        match self.log_scale {
            Some(id) => (-self.params.get(id).item().as_f64()).exp(),
            None => self.settings.temperature,
        }
    }

    /// `[N × d]` function embeddings, normalized if configured.
    pub fn asm_batch(&self, g: &mut Graph<'_, T>, seqs: &[&TokenSequence]) -> Result<Var, AlignError> {
        let rows = seqs
            .iter()
            .map(|s| self.encoder.embed(g, s))
            .collect::<Result<Vec<_>, _>>()?;
        let x = if rows.len() == 1 {
            rows[0]
        } else {
            g.concat_rows(&rows)?
        };
        Ok(if self.settings.normalize {
            g.l2_normalize(x)?
        } else {
            x
        })
    }

    /// `[N × d]` text embeddings in the shared space.
    pub fn text_batch(&self, g: &mut Graph<'_, T>, items: &[TextRef<'_>]) -> Result<Var, AlignError> {
        let mut x = self.text.embed_batch(g, items)?;
        if let Some(p) = self.projection {
            let w = g.param(p)?;
            x = g.matmul(x, w, false)?;
        }
        Ok(if self.settings.normalize {
            g.l2_normalize(x)?
        } else {
            x
        })
    }

    /// InfoNCE over a batch of aligned pairs; returns loss and logits.
    pub fn batch_loss(
        &self,
        g: &mut Graph<'_, T>,
        seqs: &[&TokenSequence],
        items: &[TextRef<'_>],
    ) -> Result<(Var, Var), AlignError> {
        let ea = self.asm_batch(g, seqs)?;
        let et = self.text_batch(g, items)?;
        let scale = match self.log_scale {
            Some(id) => {
                let s = g.param(id)?;
                LogitScale::Learned(g.exp(s))
            }
            None => LogitScale::Fixed(self.settings.temperature),
        };
        infonce_scaled(g, ea, et, scale, self.settings.symmetric)
    }

    pub fn embed_functions(&self, seqs: &[&TokenSequence]) -> Result<Vec<Vec<T>>, AlignError> {
        seqs.iter()
            .map(|s| {
                let mut g = Graph::new(&self.params);
                let v = self.asm_batch(&mut g, &[s])?;
                Ok(g.value(v).data().to_vec())
            })
            .collect()
    }

    pub fn embed_texts(&self, items: &[TextRef<'_>]) -> Result<Vec<Vec<T>>, AlignError> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new(&self.params);
        let v = self.text_batch(&mut g, items)?;
        let t = g.value(v);
        Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 32,
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

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignRecord {
    pub step: usize,
    pub loss: f64,
    /// Recall@1 of this step's batch, measured before the update.
    pub in_batch_recall_at_1: f64,
}

/// Resumable stage-2 training state.
#[derive(Debug, Clone)]
pub struct Aligner {
    pub config: AlignConfig,
    pub optimizer: Adam<f32>,
    pub step: usize,
    groups: Option<GroupIndex>,
}

impl Aligner {
    pub fn new<E: TextEncoder>(config: AlignConfig, model: &AlignModel<f32, E>) -> Self {
        let optimizer = Adam::new(config.adam, &model.params);
        Self {
            config,
            optimizer,
            step: 0,
            groups: None,
        }
    }

    pub fn resume<E: TextEncoder>(
        config: AlignConfig,
        model: &AlignModel<f32, E>,
        state: AdamState<f32>,
    ) -> Result<Self, AlignError> {
        if state.m.len() != model.params.len() {
            return Err(AlignError::Config("optimizer state does not match model".into()));
        }
        let mut a = Self::new(config, model);
        a.step = state.step as usize;
        a.optimizer.state = state;
        Ok(a)
    }

    /// One update on a group-distinct batch chosen by `(seed, step)`.
    pub fn train_step<E: TextEncoder>(
        &mut self,
        model: &mut AlignModel<f32, E>,
        examples: &[AlignExample],
    ) -> Result<AlignRecord, AlignError> {
        if self.groups.is_none() {
            self.groups = Some(GroupIndex::new(examples));
        }
        let groups = self.groups.as_ref().expect("set above");
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(self.config.seed, self.step));
        let batch = groups.sample_batch(examples, self.config.batch_size, &mut rng)?;
        let seqs: Vec<&TokenSequence> = batch.iter().map(|&i| &examples[i].seq).collect();
        let items: Vec<TextRef<'_>> = batch.iter().map(|&i| examples[i].text_ref()).collect();
        let (record, grads) = {
            let mut g = Graph::new(&model.params);
            let (loss, logits) = model.batch_loss(&mut g, &seqs, &items)?;
            let record = AlignRecord {
                step: self.step + 1,
                loss: g.value(loss).item() as f64,
                in_batch_recall_at_1: in_batch_recall_at_1(g.value(logits)),
            };
            (record, g.backward(loss)?)
        };
        self.optimizer.step(&mut model.params, &grads)?;
        self.step += 1;
        Ok(record)
    }

    pub fn run<E: TextEncoder>(
        &mut self,
        model: &mut AlignModel<f32, E>,
        examples: &[AlignExample],
        mut checkpoint: impl FnMut(&AlignModel<f32, E>, &AdamState<f32>) -> Result<(), AlignError>,
        mut on_step: impl FnMut(&AlignRecord),
    ) -> Result<Vec<AlignRecord>, AlignError> {
        let mut curve = Vec::new();
        while self.step < self.config.steps {
            let r = self.train_step(model, examples)?;
            on_step(&r);
            curve.push(r);
            let every = self.config.checkpoint_every;
            if every > 0 && self.step % every == 0 {
                checkpoint(model, &self.optimizer.state)?;
            }
        }
        Ok(curve)
    }
}

/// Save an aligned model. The manifest gains `stage`, `align` and `text`.
pub fn save_aligned<E: TextEncoder>(
    path: &Path,
    manifest: &ModelManifest,
    model: &AlignModel<f32, E>,
    text: &TextSpec,
    optimizer: Option<&AdamState<f32>>,
) -> Result<(), AlignError> {
    let mut m = manifest.clone();
    m.extra.insert("stage".into(), "align".into());
    m.extra.insert(
        "align".into(),
        serde_json::to_value(model.settings).expect("settings serialize"),
    );
    m.extra.insert(
        "text".into(),
        serde_json::to_value(text).expect("text spec serializes"),
    );
    save_model(path, &m, &model.params, optimizer)?;
    Ok(())
}

/// Load a model written by [`save_aligned`].
#[allow(clippy::type_complexity)]
pub fn load_aligned(
    path: &Path,
) -> Result<(AlignModel<f32, BuiltinText>, ModelManifest, Option<AdamState<f32>>), AlignError> {
    let (manifest, encoder, ck) = load_model(path, None)?;
    let field = |k: &str| {
        manifest
            .extra
            .get(k)
            .cloned()
            .ok_or_else(|| AlignError::Config(format!("checkpoint has no {k:?} entry; not an aligned model")))
    };
    let settings: AlignSettings = serde_json::from_value(field("align")?)
        .map_err(|e| AlignError::Config(format!("align settings: {e}")))?;
    let spec: TextSpec = serde_json::from_value(field("text")?)
        .map_err(|e| AlignError::Config(format!("text spec: {e}")))?;
    let text = BuiltinText::from_spec(&spec, &ck.params)?;
    let model = AlignModel::bind(encoder, ck.params, text, settings)?;
    Ok((model, manifest, ck.optimizer))
}
