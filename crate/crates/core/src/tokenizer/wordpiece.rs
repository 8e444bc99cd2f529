use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};

use super::vocab::reserved_tokens;
use super::{pretokenize_line, TokenizerError, Vocab, DEFAULT_MAX_INSTRUCTIONS};

const CONTINUATION: &str = "##";

/// Likelihood-style WordPiece trainer. Each round merges the adjacent pair
/// maximizing `count(ab) / (count(a) * count(b))`; ties go to the more
/// frequent pair, then to the lexicographically smaller one.
#[derive(Debug, Clone)]
pub struct WordPieceTrainer {
    pub vocab_size: usize,
    pub min_freq: u64,
    pub max_instructions: usize,
}

pub fn train_wordpiece(
    corpus: &[String],
    vocab_size: usize,
    min_freq: u64,
) -> Result<Vocab, TokenizerError> {
    WordPieceTrainer::new(vocab_size, min_freq).train(corpus)
}

struct Symbols {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Symbols {
    fn intern(&mut self, name: String) -> u32 {
        if let Some(&id) = self.index.get(&name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.index.insert(name.clone(), id);
        self.names.push(name);
        id
    }

    fn merged_name(&self, a: u32, b: u32) -> String {
        let right = &self.names[b as usize];
        let right = right.strip_prefix(CONTINUATION).unwrap_or(right);
        format!("{}{right}", self.names[a as usize])
    }
}

impl WordPieceTrainer {
    pub fn new(vocab_size: usize, min_freq: u64) -> Self {
        Self {
            vocab_size,
            min_freq: min_freq.max(1),
            max_instructions: DEFAULT_MAX_INSTRUCTIONS,
        }
    }

    pub fn with_max_instructions(mut self, m: usize) -> Self {
        self.max_instructions = m;
        self
    }

    /// Train on rebased function bodies (one instruction per line). Jump
    /// symbols are reserved and never learned.
    pub fn train(&self, corpus: &[String]) -> Result<Vocab, TokenizerError> {
        let mut word_counts: BTreeMap<&str, u64> = BTreeMap::new();
        for text in corpus {
            for line in text.lines() {
                for piece in pretokenize_line(line) {
                    if let super::Piece::Word(w) = piece {
                        *word_counts.entry(w).or_default() += 1;
                    }
                }
            }
        }
        if word_counts.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }

        let mut symbols = Symbols {
            names: Vec::new(),
            index: HashMap::new(),
        };
        let mut words: Vec<(Vec<u32>, u64)> = Vec::with_capacity(word_counts.len());
        let mut alphabet: Vec<String> = Vec::new();
        {
            let mut seen = HashSet::new();
            for w in word_counts.keys() {
                for (i, c) in w.char_indices() {
                    let name = if i == 0 {
                        c.to_string()
                    } else {
                        format!("{CONTINUATION}{c}")
                    };
                    if seen.insert(name.clone()) {
                        alphabet.push(name);
                    }
                }
            }
            alphabet.sort();
            for name in &alphabet {
                symbols.intern(name.clone());
            }
            for (w, &count) in &word_counts {
                let ids = w
                    .char_indices()
                    .map(|(i, c)| {
                        let name = if i == 0 {
                            c.to_string()
                        } else {
                            format!("{CONTINUATION}{c}")
                        };
                        symbols.index[&name]
                    })
                    .collect();
                words.push((ids, count));
            }
        }

        let reserved = reserved_tokens(self.max_instructions);
        let required = reserved.len() + alphabet.len();
        if self.vocab_size < required {
            return Err(TokenizerError::VocabTooSmall {
                requested: self.vocab_size,
                required,
            });
        }
        let reserved: HashSet<String> = reserved.into_iter().collect();

        let mut learned = alphabet;
        let mut in_vocab: HashSet<String> = learned.iter().cloned().collect();
        let budget = self.vocab_size - reserved.len();
        let mut blocked: HashSet<(u32, u32)> = HashSet::new();

        while learned.len() < budget {
            let mut sym_counts: HashMap<u32, u64> = HashMap::new();
            let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
            for (ids, count) in &words {
                for &s in ids {
                    *sym_counts.entry(s).or_default() += count;
                }
                for p in ids.windows(2) {
                    *pair_counts.entry((p[0], p[1])).or_default() += count;
                }
            }
            let mut best: Option<((u32, u32), u64)> = None;
            for (&pair, &count) in &pair_counts {
                if count < self.min_freq || blocked.contains(&pair) {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bp, bc)) => {
                        let lhs = count as u128
                            * sym_counts[&bp.0] as u128
                            * sym_counts[&bp.1] as u128;
                        let rhs =
                            bc as u128 * sym_counts[&pair.0] as u128 * sym_counts[&pair.1] as u128;
                        match lhs.cmp(&rhs).then(count.cmp(&bc)) {
                            Ordering::Greater => true,
                            Ordering::Less => false,
                            Ordering::Equal => {
                                let key = |p: (u32, u32)| {
                                    (
                                        symbols.names[p.0 as usize].clone(),
                                        symbols.names[p.1 as usize].clone(),
                                    )
                                };
                                key(pair) < key(bp)
                            }
                        }
                    }
                };
                if better {
                    best = Some((pair, count));
                }
            }
            let Some(((a, b), _)) = best else {
                break;
            };
            let name = symbols.merged_name(a, b);
            if reserved.contains(&name) || (!symbols.names[a as usize].starts_with(CONTINUATION)
                && name.starts_with(CONTINUATION))
            {
                blocked.insert((a, b));
                continue;
            }
            if in_vocab.insert(name.clone()) {
                learned.push(name.clone());
            }
            let merged = symbols.intern(name);
            for (ids, _) in &mut words {
                if ids.len() < 2 {
                    continue;
                }
                let mut out = Vec::with_capacity(ids.len());
                let mut i = 0;
                while i < ids.len() {
                    if i + 1 < ids.len() && ids[i] == a && ids[i + 1] == b {
                        out.push(merged);
                        i += 2;
                    } else {
                        out.push(ids[i]);
                        i += 1;
                    }
                }
                *ids = out;
            }
        }

        Vocab::from_learned(self.max_instructions, learned, self.vocab_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::BYTE_TOKENS;

    #[test]
    fn too_small_vocab_is_rejected() {
        let corpus = vec!["mov eax, 1".to_string()];
        let err = WordPieceTrainer::new(10, 1).train(&corpus).unwrap_err();
        assert!(matches!(err, TokenizerError::VocabTooSmall { requested: 10, .. }));
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(
            WordPieceTrainer::new(1000, 1).train(&[]),
            Err(TokenizerError::EmptyCorpus)
        ));
    }

    #[test]
    fn exact_size_and_deterministic() {
        let corpus: Vec<String> = (0..20)
            .map(|i| format!("mov eax, {i}\nadd ebx, eax\njle INSTR{}", i % 3))
            .collect();
        let a = WordPieceTrainer::new(400, 1).train(&corpus).unwrap();
        let b = WordPieceTrainer::new(400, 1).train(&corpus).unwrap();
        assert_eq!(a.len(), 400);
        assert_eq!(a.to_text(), b.to_text());
        // Jump symbols live only in their reserved slots.
        let learned: Vec<&str> = a.learned_ids().map(|i| a.token(i).unwrap()).collect();
        assert!(learned.iter().all(|t| !t.contains("INSTR")));
        assert!(learned.contains(&"mov"));
    }

    #[test]
    fn min_freq_limits_merges() {
        let corpus = vec!["abc".to_string(), "xyz".to_string()];
        let v = WordPieceTrainer::new(600, 2).train(&corpus).unwrap();
        let learned: Vec<&str> = v.learned_ids().map(|i| v.token(i).unwrap()).collect();
        assert_eq!(learned, vec!["##b", "##c", "##y", "##z", "a", "x"]);
        assert_eq!(v.len(), 600);
    }

    #[test]
    fn reserved_names_are_never_learned() {
        let corpus = vec!["<0x41> <pad> INSTR0".to_string(); 5];
        let v = WordPieceTrainer::new(2 + 64 + BYTE_TOKENS + 60, 1)
            .train(&corpus)
            .unwrap();
        let text = v.to_text();
        assert!(Vocab::from_text(&text).is_ok());
        let mut ids = Vec::new();
        assert_eq!(v.encode_text("<0x41> <pad>", &mut ids), 0);
    }

    #[test]
    fn merge_order_follows_score_then_count_then_lexicon() {
        // q and z never occur apart, so `qz` wins despite its low count.
        // `ac` and `db` tie on score and count; `ac` is lexically first.
        // After that merge `a` is rarer, so `ab` ties with `db` and wins.
        let mut corpus = vec!["qz".to_string(); 2];
        corpus.extend(std::iter::repeat("ab".to_string()).take(10));
        corpus.extend(std::iter::repeat("ac".to_string()).take(10));
        corpus.extend(std::iter::repeat("db".to_string()).take(10));
        let v = WordPieceTrainer::new(2 + 64 + BYTE_TOKENS + 9, 1)
            .train(&corpus)
            .unwrap();
        let learned: Vec<&str> = v.learned_ids().map(|i| v.token(i).unwrap()).collect();
        assert_eq!(
            learned,
            vec!["##b", "##c", "##z", "a", "d", "q", "qz", "ac", "ab"]
        );
    }
}
