//! Zero-shot classification, retrieval metrics, linear probing and the
//! few-shot protocol. Everything here reads embeddings; nothing mutates a
//! model.

mod probe;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{AlignError, AlignModel, PrecomputedEmbeddings, TextEncoder, TextRef};
use crate::numeric::Float;
use crate::pretrain::step_seed;

pub use probe::{
    few_shot_harness, few_shot_split, linear_probe, FewShotReport, FewShotRow, ProbeConfig,
    ProbeResult,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("prompt set is empty")]
    EmptyPromptSet,
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("query {0} has no positive candidate")]
    MissingPositive(usize),
    #[error("query {0} has more than one positive candidate")]
    AmbiguousPositive(usize),
    #[error("pool size {pool} needs {needed} negatives, only {available} available for query {query}")]
    PoolTooLarge {
        query: usize,
        pool: usize,
        needed: usize,
        available: usize,
    },
    #[error("class {0} has no training examples")]
    EmptyClass(usize),
    #[error("class {class} has {have} examples, {need} required")]
    InsufficientClassExamples { class: usize, have: usize, need: usize },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("prompt file line {line}: {reason}")]
    PromptFormat { line: usize, reason: String },
    #[error("invalid evaluation input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn dot<A: Float, B: Float>(a: &[A], b: &[B]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.as_f64() * y.as_f64()).sum()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Labels with one rendered prompt and one embedding each.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub labels: Vec<String>,
    pub prompts: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
}

/// `label<TAB>template` lines; `{label}` in a template is replaced by the
/// label. Blank lines and lines starting with `#` are skipped.
pub fn parse_prompt_tsv(text: &str) -> Result<Vec<(String, String)>, EvalError> {
    let mut out: Vec<(String, String)> = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: &str| EvalError::PromptFormat {
            line: i + 1,
            reason: reason.into(),
        };
        let (label, template) = line.split_once('\t').ok_or_else(|| err("missing tab"))?;
        let label = label.trim();
        if label.is_empty() || template.trim().is_empty() {
            return Err(err("empty label or template"));
        }
        if !seen.insert(label.to_string()) {
            return Err(EvalError::DuplicateLabel(label.into()));
        }
        out.push((label.to_string(), template.replace("{label}", label)));
    }
    if out.is_empty() {
        return Err(EvalError::EmptyPromptSet);
    }
    Ok(out)
}

impl PromptSet {
    pub fn new(labels: Vec<String>, prompts: Vec<String>, embeddings: Vec<Vec<f64>>) -> Result<Self, EvalError> {
        if labels.is_empty() {
            return Err(EvalError::EmptyPromptSet);
        }
        if prompts.len() != labels.len() || embeddings.len() != labels.len() {
            return Err(EvalError::Invalid("labels, prompts and embeddings differ in count".into()));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l) {
                return Err(EvalError::DuplicateLabel(l.clone()));
            }
        }
        let d = embeddings[0].len();
        if let Some(e) = embeddings.iter().find(|e| e.len() != d) {
            return Err(EvalError::DimensionMismatch {
                expected: d,
                found: e.len(),
            });
        }
        Ok(Self {
            labels,
            prompts,
            embeddings,
        })
    }

    /// Embed rendered prompts with an aligned model's text side. Precomputed
    /// text encoders look prompts up under the id `prompt:<label>`.
    pub fn embed<E: TextEncoder>(
        model: &AlignModel<f32, E>,
        prompts: Vec<(String, String)>,
    ) -> Result<Self, EvalError> {
        let ids: Vec<String> = prompts.iter().map(|(l, _)| format!("prompt:{l}")).collect();
        let items: Vec<TextRef<'_>> = prompts
            .iter()
            .zip(&ids)
            .map(|((_, p), id)| TextRef { id, text: p })
            .collect();
        let emb = model.embed_texts(&items)?;
        let (labels, texts) = prompts.into_iter().unzip();
        Self::new(
            labels,
            texts,
            emb.into_iter()
                .map(|r| r.into_iter().map(f64::from).collect())
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZeroShot {
    pub index: usize,
    pub label: String,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// Dot product of the function embedding with each prompt embedding,
/// softmax, argmax (lowest index on ties).
pub fn zero_shot_classify<T: Float>(a: &[T], prompts: &PromptSet) -> Result<ZeroShot, EvalError> {
    if a.len() != prompts.dim() {
        return Err(EvalError::DimensionMismatch {
            expected: prompts.dim(),
            found: a.len(),
        });
    }
    let logits: Vec<f64> = prompts.embeddings.iter().map(|t| dot(a, t)).collect();
    let index = argmax(&logits);
    Ok(ZeroShot {
        index,
        label: prompts.labels[index].clone(),
        probabilities: softmax(&logits),
        logits,
    })
}

/// Embeddings tagged with the group that defines positives.
#[derive(Debug, Clone, Copy)]
pub struct Tagged<'a, T> {
    pub embeddings: &'a [Vec<T>],
    pub groups: &'a [String],
}

/// Scalar metrics plus free-form configuration details.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mrr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall_at_1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default)]
    pub breakdown: BTreeMap<String, serde_json::Value>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// The positive and the sampled negatives of every (query, trial), as
/// candidate indices with the positive first.
pub fn retrieval_pools<T>(
    queries: Tagged<'_, T>,
    candidates: Tagged<'_, T>,
    pool_size: usize,
    seed: u64,
    trials: usize,
) -> Result<Vec<Vec<Vec<usize>>>, EvalError> {
    if pool_size == 0 || trials == 0 {
        return Err(EvalError::Invalid("pool size and trials must be positive".into()));
    }
    if queries.embeddings.len() != queries.groups.len()
        || candidates.embeddings.len() != candidates.groups.len()
    {
        return Err(EvalError::Invalid("embeddings and groups differ in count".into()));
    }
    let mut out = Vec::with_capacity(queries.groups.len());
    for (q, group) in queries.groups.iter().enumerate() {
        let mut positives = candidates.groups.iter().enumerate().filter(|(_, g)| *g == group);
        let pos = positives.next().ok_or(EvalError::MissingPositive(q))?.0;
        if positives.next().is_some() {
            return Err(EvalError::AmbiguousPositive(q));
        }
        let negatives: Vec<usize> = (0..candidates.groups.len())
            .filter(|&c| &candidates.groups[c] != group)
            .collect();
        let needed = pool_size - 1;
        if needed > negatives.len() {
            return Err(EvalError::PoolTooLarge {
                query: q,
                pool: pool_size,
                needed,
                available: negatives.len(),
            });
        }
        let per_query = (0..trials)
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(step_seed(seed ^ q as u64, t));
                let mut pool = Vec::with_capacity(pool_size);
                pool.push(pos);
                pool.extend(index::sample(&mut rng, negatives.len(), needed).iter().map(|i| negatives[i]));
                pool
            })
            .collect();
        out.push(per_query);
    }
    Ok(out)
}

/// Rank the positive among `pool_size - 1` sampled negatives by dot
/// product; a negative scoring equal to the positive ranks above it. Each
/// query is evaluated `trials` times with independent pools.
pub fn retrieval_eval<T: Float>(
    queries: Tagged<'_, T>,
    candidates: Tagged<'_, T>,
    pool_size: usize,
    seed: u64,
    trials: usize,
) -> Result<MetricsReport, EvalError> {
    let d = queries.embeddings.first().map_or(0, Vec::len);
    for e in queries.embeddings.iter().chain(candidates.embeddings) {
        if e.len() != d {
            return Err(EvalError::DimensionMismatch {
                expected: d,
                found: e.len(),
            });
        }
    }
    if queries.embeddings.is_empty() {
        return Err(EvalError::Invalid("no queries".into()));
    }
    let pools = retrieval_pools(queries, candidates, pool_size, seed, trials)?;
    let (mut rr, mut hits, mut n) = (0.0f64, 0usize, 0usize);
    for (q, per_query) in pools.iter().enumerate() {
        let query = &queries.embeddings[q];
        for pool in per_query {
            let sims: Vec<f64> = pool.iter().map(|&c| dot(query, &candidates.embeddings[c])).collect();
            let rank = 1 + sims[1..].iter().filter(|&&s| s >= sims[0]).count();
            rr += 1.0 / rank as f64;
            hits += (rank == 1) as usize;
            n += 1;
        }
    }
    let mut report = MetricsReport {
        mrr: Some(rr / n as f64),
        recall_at_1: Some(hits as f64 / n as f64),
        ..Default::default()
    };
    report.breakdown.insert("pool_size".into(), pool_size.into());
    report.breakdown.insert("trials".into(), trials.into());
    report.breakdown.insert("queries".into(), queries.embeddings.len().into());
    report.breakdown.insert("seed".into(), seed.into());
    Ok(report)
}

/// Write embeddings keyed by id in the precomputed-embedding file format.
pub fn export_embeddings<T: Float>(
    ids: &[String],
    embeddings: &[Vec<T>],
    path: &Path,
) -> Result<PrecomputedEmbeddings, EvalError> {
    if ids.len() != embeddings.len() {
        return Err(EvalError::Invalid("ids and embeddings differ in count".into()));
    }
    let d = embeddings.first().map_or(0, Vec::len);
    if d == 0 {
        return Err(EvalError::Invalid("nothing to export".into()));
    }
    let mut out = PrecomputedEmbeddings::new(d);
    for (id, e) in ids.iter().zip(embeddings) {
        let row = e.iter().map(|v| v.as_f64() as f32).collect();
        out.insert(id.clone(), row).map_err(|err| match err {
            AlignError::DuplicateId(id) => EvalError::DuplicateId(id),
            AlignError::DimensionMismatch { found, .. } => EvalError::DimensionMismatch {
                expected: d,
                found: found[0],
            },
            other => EvalError::Align(other),
        })?;
    }
    out.write(path)?;
    Ok(out)
}
