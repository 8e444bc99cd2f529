//! Synthetic paired corpora: template functions, semantics-preserving
//! perturbations and tagged explanations.
//!
//! Template text format:
//!
//! ```text
//! @template <id> <class>
//! = <explanation>
//! .label:
//!     mnemonic operands
//! ```
//!
//! Jump operands name labels. Blank lines and lines starting with `#` are
//! ignored.

mod perturb;

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::PairedExample;
use crate::asm::{count_basic_blocks, parse_disassembly, AsmError, AssemblyFunction, CorpusRecord};
use crate::pretrain::step_seed;

pub use perturb::{perturb, PerturbationConfig};

/// Fewest basic blocks a template may have.
pub const MIN_TEMPLATE_BLOCKS: usize = 3;

const BUILTIN: &str = include_str!("builtin.asm");
const TEMPLATE_BASE: u64 = 0x401000;

#[derive(Debug, Error)]
pub enum TemplateParseError {
    #[error("template line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("template {id:?}: {source}")]
    Body {
        id: String,
        #[source]
        source: AsmError,
    },
    #[error("template {id:?} has {blocks} basic blocks, need at least {MIN_TEMPLATE_BLOCKS}")]
    TooFewBlocks { id: String, blocks: usize },
    #[error("template {id:?}: {reason}")]
    Invalid { id: String, reason: String },
    #[error("duplicate template id {0:?}")]
    DuplicateId(String),
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Template(#[from] TemplateParseError),
    #[error("variants per template must be at least 1")]
    NoVariants,
    #[error("no templates")]
    NoTemplates,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub template_id: String,
    pub class_label: String,
    /// Instruction and label lines; jump operands name labels.
    pub body: Vec<String>,
    pub explanation_templates: Vec<String>,
}

impl TemplateSpec {
    /// Assemble the body at a fixed base address and check the block count.
    pub fn instantiate(&self) -> Result<AssemblyFunction, TemplateParseError> {
        let mut listing = format!("{}:\n", self.template_id);
        let mut addr = TEMPLATE_BASE;
        for line in &self.body {
            if line.ends_with(':') {
                listing.push_str(line);
            } else {
                listing.push_str(&format!("{addr:#x}: {line}"));
                addr += 4;
            }
            listing.push('\n');
        }
        let f = parse_disassembly(&listing).map_err(|source| TemplateParseError::Body {
            id: self.template_id.clone(),
            source,
        })?;
        // Re-address with plausible instruction lengths.
        let f = perturb::readdress(&f);
        let blocks = count_basic_blocks(&f);
        if blocks < MIN_TEMPLATE_BLOCKS {
            return Err(TemplateParseError::TooFewBlocks {
                id: self.template_id.clone(),
                blocks,
            });
        }
        Ok(f)
    }

    fn check(&self) -> Result<(), TemplateParseError> {
        let invalid = |reason: &str| TemplateParseError::Invalid {
            id: self.template_id.clone(),
            reason: reason.to_string(),
        };
        if self.explanation_templates.is_empty() {
            return Err(invalid("no explanation"));
        }
        let distinct: HashSet<&String> = self.explanation_templates.iter().collect();
        if distinct.len() != self.explanation_templates.len() {
            return Err(invalid("repeated explanation"));
        }
        if !self.body.iter().any(|l| !l.ends_with(':')) {
            return Err(invalid("empty body"));
        }
        self.instantiate().map(|_| ())
    }
}

/// Parse template text; every template is instantiated once to validate it.
pub fn parse_templates(text: &str) -> Result<Vec<TemplateSpec>, TemplateParseError> {
    let mut out: Vec<TemplateSpec> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let syntax = |reason: &str| TemplateParseError::Syntax {
            line: line_no,
            reason: reason.to_string(),
        };
        if let Some(rest) = line.strip_prefix("@template") {
            let fields: Vec<&str> = rest.split_whitespace().collect();
            let [id, class] = fields[..] else {
                return Err(syntax("expected `@template <id> <class>`"));
            };
            if !is_template_id(id) {
                return Err(syntax("template id must be an identifier"));
            }
            out.push(TemplateSpec {
                template_id: id.to_string(),
                class_label: class.to_string(),
                body: Vec::new(),
                explanation_templates: Vec::new(),
            });
            continue;
        }
        let Some(current) = out.last_mut() else {
            return Err(syntax("content before the first @template"));
        };
        if let Some(expl) = line.strip_prefix('=') {
            let expl = expl.trim();
            if expl.is_empty() {
                return Err(syntax("empty explanation"));
            }
            current.explanation_templates.push(expl.to_string());
        } else {
            current.body.push(line.to_string());
        }
    }
    let mut seen = HashSet::new();
    for t in &out {
        if !seen.insert(t.template_id.as_str()) {
            return Err(TemplateParseError::DuplicateId(t.template_id.clone()));
        }
        t.check()?;
    }
    Ok(out)
}

fn is_template_id(s: &str) -> bool {
    s.starts_with(|c: char| c.is_ascii_alphabetic())
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// The templates shipped with the library.
pub fn builtin_templates() -> Vec<TemplateSpec> {
    parse_templates(BUILTIN).expect("built-in templates are valid")
}

/// Sorted, de-duplicated class labels of a template set.
pub fn template_classes(templates: &[TemplateSpec]) -> Vec<String> {
    let mut classes: Vec<String> = templates.iter().map(|t| t.class_label.clone()).collect();
    classes.sort();
    classes.dedup();
    classes
}

/// Generator settings and seed; enough to regenerate the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub templates: Vec<String>,
    pub variants_per_template: usize,
    pub perturbation: PerturbationConfig,
    pub seed: u64,
    pub examples: usize,
    /// Per-example perturbation seeds, in corpus order.
    pub variant_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub examples: Vec<PairedExample>,
    pub manifest: SynthManifest,
}

impl SynthCorpus {
    pub fn records(&self) -> Vec<CorpusRecord> {
        self.examples.iter().map(to_record).collect()
    }
}

pub fn to_record(ex: &PairedExample) -> CorpusRecord {
    CorpusRecord {
        id: ex.id.clone(),
        name: ex.function.name.clone(),
        asm_text: ex.function.to_listing(),
        explanation: Some(ex.explanation.clone()),
        labels: Some(ex.labels.clone()),
        group: Some(ex.group.clone()),
    }
}

fn id_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// `variants` perturbed copies of every template, ordered by template id
/// then variant index. Copies of one template share its id as group and its
/// class as label.
pub fn generate_corpus(
    templates: &[TemplateSpec],
    variants: usize,
    config: &PerturbationConfig,
    seed: u64,
) -> Result<SynthCorpus, SynthError> {
    if variants == 0 {
        return Err(SynthError::NoVariants);
    }
    if templates.is_empty() {
        return Err(SynthError::NoTemplates);
    }
    let mut sorted: Vec<&TemplateSpec> = templates.iter().collect();
    sorted.sort_by(|a, b| a.template_id.cmp(&b.template_id));
    let mut seen = HashSet::new();
    let mut examples = Vec::with_capacity(sorted.len() * variants);
    let mut variant_seeds = Vec::with_capacity(sorted.len() * variants);
    for t in sorted {
        if !seen.insert(t.template_id.as_str()) {
            return Err(TemplateParseError::DuplicateId(t.template_id.clone()).into());
        }
        let base = t.instantiate()?;
        let template_seed = seed ^ id_hash(&t.template_id);
        for v in 0..variants {
            let vseed = step_seed(template_seed, v);
            let mut rng = ChaCha8Rng::seed_from_u64(vseed);
            let mut cfg = *config;
            cfg.variant_seed = config.variant_seed ^ vseed;
            let mut function = perturb(&base, &cfg, rng.random());
            if !config.is_identity() {
                let shift = TEMPLATE_BASE + 0x10 * rng.random_range(0..4096u64);
                function = perturb::readdress_at(&function, shift);
            }
            let explanation = t
                .explanation_templates
                .choose(&mut rng)
                .expect("checked non-empty")
                .clone();
            variant_seeds.push(vseed);
            examples.push(PairedExample {
                id: format!("{}/v{v}", t.template_id),
                function,
                explanation,
                labels: vec![t.class_label.clone()],
                group: t.template_id.clone(),
            });
        }
    }
    let mut ids: Vec<String> = templates.iter().map(|t| t.template_id.clone()).collect();
    ids.sort();
    let manifest = SynthManifest {
        templates: ids,
        variants_per_template: variants,
        perturbation: *config,
        seed,
        examples: examples.len(),
        variant_seeds,
    };
    Ok(SynthCorpus { examples, manifest })
}
