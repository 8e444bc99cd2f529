//! Text encoders: a trainable bag-of-words mean encoder and a frozen table
//! of precomputed embeddings keyed by example id.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AlignError;
use crate::numeric::{Float, Graph, ParamId, ParamStore, Tensor, Var};

/// A text to embed. Precomputed encoders look up `id`; trainable encoders
/// read `text`.
#[derive(Debug, Clone, Copy)]
pub struct TextRef<'a> {
    pub id: &'a str,
    pub text: &'a str,
}

pub trait TextEncoder {
    /// Output width `d_t`.
    fn dim(&self) -> usize;

    /// `[items × dim]` embeddings. Trainable encoders read their weights
    /// through the graph's parameter store.
    fn embed_batch<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        items: &[TextRef<'_>],
    ) -> Result<Var, AlignError>;
}

pub const BOW_TABLE: &str = "align.text.embedding";
pub const UNKNOWN_WORD: &str = "<unk>";

/// Lowercased alphanumeric runs.
pub fn text_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Mean of learned word vectors. Row 0 is the unknown word, which also
/// stands in for texts without any words.
#[derive(Debug, Clone)]
pub struct BagOfWords {
    words: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    table: ParamId,
}

impl BagOfWords {
    /// Sorted word list of `texts`, with the unknown word first.
    pub fn build_vocab<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        let set: BTreeSet<String> = texts.into_iter().flat_map(text_words).collect();
        std::iter::once(UNKNOWN_WORD.to_string())
            .chain(set.into_iter().filter(|w| w != UNKNOWN_WORD))
            .collect()
    }

    pub fn init<T: Float, R: Rng + ?Sized>(
        words: Vec<String>,
        dim: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self, AlignError> {
        if dim == 0 {
            return Err(AlignError::Config("text dimension must be positive".into()));
        }
        store.insert(BOW_TABLE, Tensor::randn(&[words.len(), dim], 1.0, rng));
        Self::bind(words, dim, store)
    }

    pub fn bind<T: Float>(words: Vec<String>, dim: usize, store: &ParamStore<T>) -> Result<Self, AlignError> {
        if words.first().map(String::as_str) != Some(UNKNOWN_WORD) {
            return Err(AlignError::Config(format!("word list must start with {UNKNOWN_WORD}")));
        }
        let table = store
            .id(BOW_TABLE)
            .ok_or_else(|| AlignError::Config(format!("missing tensor {BOW_TABLE}")))?;
        if store.get(table).shape() != [words.len(), dim] {
            return Err(AlignError::DimensionMismatch {
                expected: vec![words.len(), dim],
                found: store.get(table).shape().to_vec(),
            });
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(AlignError::Config(format!("duplicate word {w:?}")));
            }
        }
        Ok(Self {
            words,
            index,
            dim,
            table,
        })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    fn word_ids(&self, text: &str) -> Vec<usize> {
        let ids: Vec<usize> = text_words(text)
            .map(|w| self.index.get(&w).copied().unwrap_or(0))
            .collect();
        if ids.is_empty() {
            vec![0]
        } else {
            ids
        }
    }
}

impl TextEncoder for BagOfWords {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        items: &[TextRef<'_>],
    ) -> Result<Var, AlignError> {
        // Averaging matrix A [items × words]; embeddings = A · table.
        let w = self.words.len();
        let mut a = Tensor::zeros(&[items.len(), w]);
        for (r, item) in items.iter().enumerate() {
            let ids = self.word_ids(item.text);
            let share = T::of(1.0 / ids.len() as f64);
            let row = a.row_mut(r);
            for id in ids {
                row[id] += share;
            }
        }
        let a = g.input(a);
        let table = g.param(self.table)?;
        Ok(g.matmul(a, table, false)?)
    }
}

/// Frozen embeddings loaded from a file.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedEmbeddings {
    dim: usize,
    ids: Vec<String>,
    rows: HashMap<String, Vec<f32>>,
}

impl PrecomputedEmbeddings {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            rows: HashMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, row: Vec<f32>) -> Result<(), AlignError> {
        let id = id.into();
        if row.len() != self.dim {
            return Err(AlignError::DimensionMismatch {
                expected: vec![self.dim],
                found: vec![row.len()],
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(AlignError::Format(format!("non-finite value in row {id:?}")));
        }
        if self.rows.contains_key(&id) {
            return Err(AlignError::DuplicateId(id));
        }
        self.ids.push(id.clone());
        self.rows.insert(id, row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids in file order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Result<&[f32], AlignError> {
        self.rows
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| AlignError::MissingEmbedding(id.to_string()))
    }

    /// `u32 count | u32 dim | count × (u32 len, id bytes, dim × f32)`,
    /// little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.len() * (8 + self.dim * 4));
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for v in &self.rows[id] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AlignError> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], AlignError> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| AlignError::Format(format!("truncated at byte {pos}")))?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        let count = u32_at(take(4)?);
        let dim = u32_at(take(4)?);
        if dim == 0 {
            return Err(AlignError::Format("zero dimension".into()));
        }
        let mut out = Self::new(dim);
        for _ in 0..count {
            let n = u32_at(take(4)?);
            let id = std::str::from_utf8(take(n)?)
                .map_err(|_| AlignError::Format("id is not UTF-8".into()))?
                .to_string();
            let raw = take(
                dim.checked_mul(4)
                    .ok_or_else(|| AlignError::Format("dimension overflow".into()))?,
            )?;
            let row = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            out.insert(id, row)?;
        }
        if pos != bytes.len() {
            return Err(AlignError::Format("trailing bytes".into()));
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<(), AlignError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, AlignError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl TextEncoder for PrecomputedEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        items: &[TextRef<'_>],
    ) -> Result<Var, AlignError> {
        let mut data = Vec::with_capacity(items.len() * self.dim);
        for item in items {
            data.extend(self.get(item.id)?.iter().map(|&v| T::of(v as f64)));
        }
        Ok(g.input(Tensor::new(vec![items.len(), self.dim], data)?))
    }
}

/// Either built-in encoder, chosen at run time.
#[derive(Debug, Clone)]
pub enum BuiltinText {
    BagOfWords(BagOfWords),
    Precomputed(PrecomputedEmbeddings),
}

impl TextEncoder for BuiltinText {
    fn dim(&self) -> usize {
        match self {
            Self::BagOfWords(e) => e.dim(),
            Self::Precomputed(e) => e.dim(),
        }
    }

    fn embed_batch<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        items: &[TextRef<'_>],
    ) -> Result<Var, AlignError> {
        match self {
            Self::BagOfWords(e) => e.embed_batch(g, items),
            Self::Precomputed(e) => e.embed_batch(g, items),
        }
    }
}

/// What a checkpoint records about its text encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TextSpec {
    BagOfWords { dim: usize, words: Vec<String> },
    Precomputed { dim: usize, path: String },
}

impl BuiltinText {
    pub fn spec(&self, precomputed_path: Option<&str>) -> TextSpec {
        match self {
            Self::BagOfWords(e) => TextSpec::BagOfWords {
                dim: e.dim,
                words: e.words.clone(),
            },
            Self::Precomputed(e) => TextSpec::Precomputed {
                dim: e.dim,
                path: precomputed_path.unwrap_or_default().to_string(),
            },
        }
    }

    /// Rebuild from a stored spec and the parameters it was trained with.
    pub fn from_spec<T: Float>(spec: &TextSpec, store: &ParamStore<T>) -> Result<Self, AlignError> {
        match spec {
            TextSpec::BagOfWords { dim, words } => {
                Ok(Self::BagOfWords(BagOfWords::bind(words.clone(), *dim, store)?))
            }
            TextSpec::Precomputed { dim, path } => {
                let e = PrecomputedEmbeddings::read(Path::new(path))?;
                if e.dim() != *dim {
                    return Err(AlignError::DimensionMismatch {
                        expected: vec![*dim],
                        found: vec![e.dim()],
                    });
                }
                Ok(Self::Precomputed(e))
            }
        }
    }
}
