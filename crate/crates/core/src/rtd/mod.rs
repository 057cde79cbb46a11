//! Replaced-token-detection pre-training on a synthetic corpus.

mod generator;
mod pretrain;

pub use generator::{Generator, GeneratorConfig};
pub use pretrain::{
    evaluate_rtd, init_models, pretrain, Discriminator, PretrainConfig, PretrainResult,
    PretrainStep, RtdEval, RTD_HEAD_PREFIX,
};

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ConfigError;
use crate::data::synth::{Grammar, GRAMMAR_ID};
use crate::data::{Vocabulary, MASK};
use crate::rng::{stream, StreamRng};
use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusConfig {
    pub n_sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub grammar: String,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        SyntheticCorpusConfig {
            n_sentences: 6000,
            min_len: 9,
            max_len: 24,
            vocab_size: 512,
            seed: 13,
            grammar: GRAMMAR_ID.to_string(),
        }
    }
}

impl SyntheticCorpusConfig {
    pub fn validate(&self, max_seq_len: usize) -> Result<(), ConfigError> {
        let bad = |key: &str, detail: String| {
            Err(ConfigError::Invalid {
                key: format!("corpus.{key}"),
                detail,
            })
        };
        if self.grammar != GRAMMAR_ID {
            return bad("grammar", format!("unknown grammar {:?}", self.grammar));
        }
        if self.n_sentences == 0 {
            return bad("n_sentences", "must be positive".into());
        }
        if self.max_len < Grammar::SHORT_CLAUSE_LEN {
            return bad(
                "max_len",
                format!(
                    "{} is shorter than one clause ({})",
                    self.max_len,
                    Grammar::SHORT_CLAUSE_LEN
                ),
            );
        }
        if self.min_len > self.max_len {
            return bad(
                "min_len",
                format!("{} > max_len {}", self.min_len, self.max_len),
            );
        }
        if self.max_len > max_seq_len {
            return bad(
                "max_len",
                format!("{} > max_seq_len {max_seq_len}", self.max_len),
            );
        }
        Ok(())
    }
}

/// Token-id sentences plus the vocabulary they index.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<Vec<usize>>,
    pub vocab: Vocabulary,
}

impl Corpus {
    /// One sentence per line, space-separated ids.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            let line: Vec<String> = s.iter().map(usize::to_string).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> crate::Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| crate::Error::io(path, e))
    }

    pub fn parse(text: &str, vocab: Vocabulary) -> Result<Self, crate::data::DataError> {
        let mut sentences = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let ids = line
                .split_whitespace()
                .map(|t| t.parse::<usize>().ok().filter(|&id| id < vocab.len()))
                .collect::<Option<Vec<usize>>>()
                .ok_or_else(|| crate::data::DataError::Example {
                    id: format!("corpus line {}", i + 1),
                    detail: "expected in-vocabulary token ids".into(),
                })?;
            sentences.push(ids);
        }
        Ok(Corpus { sentences, vocab })
    }
}

fn sentences(
    cfg: &SyntheticCorpusConfig,
    stream_name: &str,
    n: usize,
) -> Result<Corpus, ConfigError> {
    let grammar = Grammar::new();
    let vocab = grammar.vocabulary();
    if vocab.len() > cfg.vocab_size {
        return Err(ConfigError::Invalid {
            key: "model.vocab_size".into(),
            detail: format!(
                "grammar {} needs {} ids, vocab_size is {}",
                cfg.grammar,
                vocab.len(),
                cfg.vocab_size
            ),
        });
    }
    let sentences = (0..n)
        .map(|i| {
            let mut rng = stream(cfg.seed, stream_name, i as u64);
            let words = grammar.sentence(&mut rng, cfg.min_len, cfg.max_len);
            words.iter().map(|w| vocab.id(w)).collect()
        })
        .collect();
    Ok(Corpus { sentences, vocab })
}

/// `n_sentences` grammar sentences, each from its own seeded stream.
pub fn generate_corpus(cfg: &SyntheticCorpusConfig) -> Result<Corpus, ConfigError> {
    sentences(cfg, "corpus", cfg.n_sentences)
}

/// Sentences from a stream disjoint from [`generate_corpus`].
pub fn heldout_corpus(cfg: &SyntheticCorpusConfig, n: usize) -> Result<Corpus, ConfigError> {
    sentences(cfg, "corpus-heldout", n)
}

/// Original and corrupted sequences with per-token "is original" flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptionResult {
    pub corrupted_ids: Vec<usize>,
    pub original_ids: Vec<usize>,
    /// `corrupted_ids[i] == original_ids[i]`
    pub original_flags: Vec<bool>,
    /// Sorted selected positions.
    pub mask_positions: Vec<usize>,
}

/// Proposes replacement tokens for masked positions.
pub trait TokenSampler {
    fn sample(
        &mut self,
        ids: &[usize],
        positions: &[usize],
        rng: &mut StreamRng,
    ) -> crate::Result<Vec<usize>>;
}

/// Uniform draws over `0..vocab_size`.
#[derive(Debug, Clone, Copy)]
pub struct UniformSampler {
    pub vocab_size: usize,
}

impl TokenSampler for UniformSampler {
    fn sample(
        &mut self,
        _ids: &[usize],
        positions: &[usize],
        rng: &mut StreamRng,
    ) -> crate::Result<Vec<usize>> {
        Ok(positions
            .iter()
            .map(|_| rng.random_range(0..self.vocab_size))
            .collect())
    }
}

/// `⌈mask_rate · n⌉`, ignoring rounding noise in the product.
pub fn mask_count(n: usize, mask_rate: f64) -> usize {
    let x = mask_rate * n as f64;
    ((x - 1e-9 * x.max(1.0)).ceil().max(0.0) as usize).min(n)
}

fn check_rate(mask_rate: f64) -> Result<(), TensorError> {
    if !(0.0..1.0).contains(&mask_rate) {
        return Err(TensorError::Invalid {
            op: "corrupt",
            detail: format!("mask_rate {mask_rate} outside [0, 1)"),
        });
    }
    Ok(())
}

/// Sorted random positions, `⌈mask_rate · n⌉` of them.
pub fn select_positions(
    n: usize,
    mask_rate: f64,
    rng: &mut StreamRng,
) -> Result<Vec<usize>, TensorError> {
    check_rate(mask_rate)?;
    let mut pos = rand::seq::index::sample(rng, n, mask_count(n, mask_rate)).into_vec();
    pos.sort_unstable();
    Ok(pos)
}

/// `ids` with [`MASK`] at `positions`.
pub fn masked(ids: &[usize], positions: &[usize]) -> Vec<usize> {
    let mut out = ids.to_vec();
    for &p in positions {
        out[p] = MASK;
    }
    out
}

/// Writes `replacements` at `positions` and derives the flags.
pub fn apply_replacements(
    ids: &[usize],
    positions: &[usize],
    replacements: &[usize],
) -> CorruptionResult {
    let mut corrupted = ids.to_vec();
    for (&p, &r) in positions.iter().zip(replacements) {
        corrupted[p] = r;
    }
    let flags = corrupted.iter().zip(ids).map(|(a, b)| a == b).collect();
    CorruptionResult {
        corrupted_ids: corrupted,
        original_ids: ids.to_vec(),
        original_flags: flags,
        mask_positions: positions.to_vec(),
    }
}

/// Replaces `⌈mask_rate · n⌉` random positions with sampler proposals.
pub fn corrupt<S: TokenSampler + ?Sized>(
    ids: &[usize],
    mask_rate: f64,
    sampler: &mut S,
    rng: &mut StreamRng,
) -> crate::Result<CorruptionResult> {
    let positions = select_positions(ids.len(), mask_rate, rng)?;
    let replacements = if positions.is_empty() {
        Vec::new()
    } else {
        sampler.sample(ids, &positions, rng)?
    };
    Ok(apply_replacements(ids, &positions, &replacements))
}

/// `−Σ log p(flag_i)` where `probs[i]` is the probability token `i` is original.
pub fn rtd_loss(probs: &[f64], flags: &[bool]) -> Result<f64, TensorError> {
    if probs.len() != flags.len() {
        return Err(TensorError::Shape {
            op: "rtd_loss",
            detail: format!("{} probabilities for {} flags", probs.len(), flags.len()),
        });
    }
    let mut loss = 0.0;
    for (i, (&p, &f)) in probs.iter().zip(flags).enumerate() {
        if !(p > 0.0 && p < 1.0) {
            return Err(TensorError::Domain {
                op: "rtd_loss",
                detail: format!("probability {p} at token {i} outside (0, 1)"),
            });
        }
        loss -= if f { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(loss)
}

/// Per-token loss of the best constant predictor for flags with original
/// rate `rate`: the binary entropy of `rate`.
pub fn majority_bound(rate: f64) -> f64 {
    let h = |p: f64| if p <= 0.0 { 0.0 } else { -p * p.ln() };
    h(rate) + h(1.0 - rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_count_is_ceiling() {
        assert_eq!(mask_count(20, 0.15), 3);
        assert_eq!(mask_count(10, 0.15), 2);
        assert_eq!(mask_count(7, 0.0), 0);
        assert_eq!(mask_count(1, 0.15), 1);
    }

    #[test]
    fn zero_rate_keeps_everything() {
        let ids = vec![5, 6, 7, 8];
        let mut s = UniformSampler { vocab_size: 10 };
        let r = corrupt(&ids, 0.0, &mut s, &mut stream(1, "t", 0)).unwrap();
        assert_eq!(r.corrupted_ids, ids);
        assert!(r.original_flags.iter().all(|&f| f));
        assert!(r.mask_positions.is_empty());
    }

    #[test]
    fn flags_false_only_at_selected_changed_positions() {
        let ids: Vec<usize> = (0..40).map(|i| i % 7).collect();
        let mut s = UniformSampler { vocab_size: 7 };
        for k in 0..50 {
            let r = corrupt(&ids, 0.3, &mut s, &mut stream(2, "t", k)).unwrap();
            assert_eq!(r.mask_positions.len(), 12);
            for i in 0..ids.len() {
                assert_eq!(r.original_flags[i], r.corrupted_ids[i] == ids[i]);
                if !r.original_flags[i] {
                    assert!(r.mask_positions.contains(&i));
                }
            }
        }
    }

    #[test]
    fn rate_one_is_rejected() {
        let mut s = UniformSampler { vocab_size: 7 };
        assert!(corrupt(&[1, 2], 1.0, &mut s, &mut stream(0, "t", 0)).is_err());
    }

    #[test]
    fn rtd_loss_half_is_ln2() {
        let l = rtd_loss(&[0.5; 6], &[true, false, true, true, false, true]).unwrap();
        assert!((l - 6.0 * 2f64.ln()).abs() < 1e-12);
        let near = 1.0 - 1e-12;
        let l = rtd_loss(&[near, 1.0 - near], &[true, false]).unwrap();
        assert!(l / 2.0 < 1e-6);
        assert!(matches!(
            rtd_loss(&[1.0], &[true]),
            Err(TensorError::Domain { .. })
        ));
    }

    #[test]
    fn corpus_is_deterministic_and_in_range() {
        let cfg = SyntheticCorpusConfig {
            n_sentences: 50,
            ..Default::default()
        };
        let a = generate_corpus(&cfg).unwrap();
        assert_eq!(a, generate_corpus(&cfg).unwrap());
        assert_eq!(a.sentences.len(), 50);
        assert!(a.sentences.iter().flatten().all(|&id| id < cfg.vocab_size));
        let back = Corpus::parse(&a.to_text(), a.vocab.clone()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn small_vocab_is_config_error() {
        let cfg = SyntheticCorpusConfig {
            vocab_size: 20,
            ..Default::default()
        };
        assert!(matches!(
            generate_corpus(&cfg),
            Err(ConfigError::Invalid { .. })
        ));
    }

    #[test]
    fn entropy_bound() {
        assert!((majority_bound(0.5) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(majority_bound(1.0), 0.0);
    }
}
