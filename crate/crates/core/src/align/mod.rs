//! Stage-2 contrastive alignment of function embeddings with explanation
//! embeddings.

mod model;
mod text;

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::asm::{parse_disassembly, AsmError, AssemblyFunction, CorpusRecord};
use crate::encoder::EncoderError;
use crate::numeric::{Float, Graph, NumericError, Tensor, Var};
use crate::tokenizer::{encode, rebase, TokenSequence, Vocab};

pub use model::{
    load_aligned, save_aligned, AlignConfig, AlignModel, AlignRecord, AlignSettings, Aligner,
};
pub use text::{
    text_words, BagOfWords, BuiltinText, PrecomputedEmbeddings, TextEncoder, TextRef, TextSpec,
    BOW_TABLE, UNKNOWN_WORD,
};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("invalid alignment config: {0}")]
    Config(String),
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("cannot normalize a zero vector")]
    ZeroNorm,
    #[error("no embedding for id {0:?}")]
    MissingEmbedding(String),
    #[error("group {0:?} appears twice in one batch")]
    DuplicateGroupInBatch(String),
    #[error("explanation shared by two groups in one batch: {0:?}")]
    DuplicateExplanation(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("record {id:?} has no {field}")]
    MissingField { id: String, field: &'static str },
    #[error("embedding file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("record {id:?}: {source}")]
    Asm { id: String, source: AsmError },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numeric(NumericError),
}

impl From<NumericError> for AlignError {
    fn from(e: NumericError) -> Self {
        match e {
            NumericError::ZeroNorm => Self::ZeroNorm,
            other => Self::Numeric(other),
        }
    }
}

/// A function with its explanation. `group` identifies the source function
/// across perturbed variants.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedExample {
    pub id: String,
    pub function: AssemblyFunction,
    pub explanation: String,
    pub labels: Vec<String>,
    pub group: String,
}

impl PairedExample {
    pub fn from_record(rec: &CorpusRecord) -> Result<Self, AlignError> {
        let missing = |field| AlignError::MissingField {
            id: rec.id.clone(),
            field,
        };
        let explanation = rec
            .explanation
            .clone()
            .filter(|s| !s.trim().is_empty())
            .ok_or_else(|| missing("explanation"))?;
        let group = rec
            .group
            .clone()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| missing("group"))?;
        let function = parse_disassembly(&rec.asm_text).map_err(|source| AlignError::Asm {
            id: rec.id.clone(),
            source,
        })?;
        Ok(Self {
            id: rec.id.clone(),
            function,
            explanation,
            labels: rec.labels.clone().unwrap_or_default(),
            group,
        })
    }

    /// Rebase and tokenize.
    pub fn prepare(&self, vocab: &Vocab, max_seq_len: usize) -> AlignExample {
        AlignExample {
            id: self.id.clone(),
            group: self.group.clone(),
            explanation: self.explanation.clone(),
            labels: self.labels.clone(),
            seq: encode(&rebase(&self.function), vocab, max_seq_len),
        }
    }
}

/// A tokenized training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignExample {
    pub id: String,
    pub group: String,
    pub explanation: String,
    pub labels: Vec<String>,
    pub seq: TokenSequence,
}

impl AlignExample {
    pub fn text_ref(&self) -> TextRef<'_> {
        TextRef {
            id: &self.id,
            text: &self.explanation,
        }
    }
}

pub(crate) enum LogitScale {
    Fixed(f64),
    Learned(Var),
}

fn check_pair<T: Float>(g: &Graph<'_, T>, ea: Var, et: Var) -> Result<(), AlignError> {
    let (a, t) = (g.value(ea), g.value(et));
    if a.shape().len() != 2 || a.shape() != t.shape() || a.rows() == 0 {
        return Err(AlignError::DimensionMismatch {
            expected: a.shape().to_vec(),
            found: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// Shared body of the InfoNCE variants. Returns the loss and the
/// assembly-to-text logits.
pub(crate) fn infonce_scaled<T: Float>(
    g: &mut Graph<'_, T>,
    ea: Var,
    et: Var,
    scale: LogitScale,
    symmetric: bool,
) -> Result<(Var, Var), AlignError> {
    check_pair(g, ea, et)?;
    let n = g.value(ea).rows();
    let targets: Vec<usize> = (0..n).collect();
    let apply = |g: &mut Graph<'_, T>, x: Var| -> Result<Var, AlignError> {
        Ok(match scale {
            LogitScale::Fixed(t) => g.scale(x, T::of(1.0 / t)),
            LogitScale::Learned(s) => g.scale_by(x, s)?,
        })
    };
    let raw = g.matmul(ea, et, true)?;
    let logits = apply(g, raw)?;
    let ce = g.cross_entropy(logits, &targets)?;
    let loss = if symmetric {
        let raw_t = g.matmul(et, ea, true)?;
        let logits_t = apply(g, raw_t)?;
        let ce_t = g.cross_entropy(logits_t, &targets)?;
        let both = g.add(ce, ce_t)?;
        g.scale(both, T::of(0.5 / n as f64))
    } else {
        g.scale(ce, T::of(1.0 / n as f64))
    };
    Ok((loss, logits))
}

/// Mean over rows of the cross-entropy of `(EA · ETᵀ) / temperature` with
/// the diagonal as target. With `symmetric`, the text-to-assembly direction
/// is averaged in.
pub fn infonce_loss<T: Float>(
    g: &mut Graph<'_, T>,
    ea: Var,
    et: Var,
    temperature: f64,
    symmetric: bool,
) -> Result<Var, AlignError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(AlignError::NonPositiveTemperature(temperature));
    }
    Ok(infonce_scaled(g, ea, et, LogitScale::Fixed(temperature), symmetric)?.0)
}

/// [`infonce_loss`] on plain matrices.
pub fn infonce_value(
    ea: &Tensor<f64>,
    et: &Tensor<f64>,
    temperature: f64,
    symmetric: bool,
) -> Result<f64, AlignError> {
    let mut g = Graph::without_params();
    let a = g.input(ea.clone());
    let t = g.input(et.clone());
    let loss = infonce_loss(&mut g, a, t, temperature, symmetric)?;
    Ok(g.value(loss).item())
}

/// `emb · projection` (identity when `projection` is `None`), optionally
/// scaled to unit length.
pub fn project_and_normalize<T: Float>(
    emb: &[T],
    projection: Option<&Tensor<T>>,
    normalize: bool,
) -> Result<Vec<T>, AlignError> {
    let mut out = match projection {
        None => emb.to_vec(),
        Some(p) => {
            if p.shape().len() != 2 || p.rows() != emb.len() {
                return Err(AlignError::DimensionMismatch {
                    expected: vec![emb.len()],
                    found: p.shape().to_vec(),
                });
            }
            let mut out = vec![T::zero(); p.cols()];
            for (i, &e) in emb.iter().enumerate() {
                for (o, &w) in out.iter_mut().zip(p.row(i)) {
                    *o += e * w;
                }
            }
            out
        }
    };
    if normalize {
        let n = out.iter().map(|&v| v * v).sum::<T>().sqrt();
        if n == T::zero() {
            return Err(AlignError::ZeroNorm);
        }
        for v in &mut out {
            *v = *v / n;
        }
    }
    Ok(out)
}

/// Fraction of rows whose diagonal logit is strictly larger than every other
/// logit in the row. Ties count as misses.
pub fn in_batch_recall_at_1<T: Float>(logits: &Tensor<T>) -> f64 {
    let n = logits.rows();
    if n == 0 {
        return 0.0;
    }
    let hits = (0..n)
        .filter(|&i| {
            let row = logits.row(i);
            row.iter().enumerate().all(|(j, &v)| j == i || v < row[i])
        })
        .count();
    hits as f64 / n as f64
}

/// Reject batches that repeat a group or an explanation.
pub fn validate_batch(examples: &[AlignExample], batch: &[usize]) -> Result<(), AlignError> {
    let mut groups = HashSet::new();
    let mut texts = HashSet::new();
    for &i in batch {
        let e = &examples[i];
        if !groups.insert(e.group.as_str()) {
            return Err(AlignError::DuplicateGroupInBatch(e.group.clone()));
        }
        if !texts.insert(e.explanation.as_str()) {
            return Err(AlignError::DuplicateExplanation(e.explanation.clone()));
        }
    }
    Ok(())
}

/// Example indices by group, in group-name order.
#[derive(Debug, Clone)]
pub struct GroupIndex {
    groups: Vec<(String, Vec<usize>)>,
}

impl GroupIndex {
    pub fn new(examples: &[AlignExample]) -> Self {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, e) in examples.iter().enumerate() {
            map.entry(&e.group).or_default().push(i);
        }
        Self {
            groups: map.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// `n` examples from `n` distinct groups, one uniformly chosen variant
    /// each. A variant whose explanation is already in the batch is
    /// re-sampled; a group with no usable variant is replaced by another.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        examples: &[AlignExample],
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>, AlignError> {
        if n == 0 || n > self.groups.len() {
            return Err(AlignError::Config(format!(
                "batch size {n} needs between 1 and {} distinct groups",
                self.groups.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.groups.len()).collect();
        order.shuffle(rng);
        let mut batch = Vec::with_capacity(n);
        let mut texts = HashSet::new();
        for g in order {
            let mut members = self.groups[g].1.clone();
            members.shuffle(rng);
            if let Some(&i) = members
                .iter()
                .find(|&&i| !texts.contains(examples[i].explanation.as_str()))
            {
                texts.insert(examples[i].explanation.as_str());
                batch.push(i);
                if batch.len() == n {
                    return Ok(batch);
                }
            }
        }
        Err(AlignError::DuplicateExplanation(format!(
            "only {} groups have distinct explanations, batch needs {n}",
            batch.len()
        )))
    }
}
