//! Filler insertion, field joining, truncation and the 5× expansion.

use std::collections::BTreeMap;
use std::ops::Range;

use super::vocab::{split_tokens, Vocabulary, SEP_MARKER, UNK};
use super::{DataError, Instance, Label, LabelMap, Pattern, ScoreMap, FILLERS_PER_INSTANCE};
use crate::heads::SpanIndex;

/// Joined input text with byte ranges of the inserted filler and of the
/// filled target sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputSequence {
    pub text: String,
    pub filler: Range<usize>,
    pub target: Range<usize>,
}

/// Joins pattern, title, section header, previous sentence, filled target
/// sentence and follow-up, in that order, separated by `[SEP]`.
///
/// `filler_index` is 1-based.
pub fn build_input_sequence(
    instance: &Instance,
    filler_index: usize,
    placeholder: &str,
) -> Result<InputSequence, DataError> {
    if !(1..=FILLERS_PER_INSTANCE).contains(&filler_index) {
        return Err(DataError::Example {
            id: instance.id.clone(),
            detail: format!("filler index {filler_index} outside 1..=5"),
        });
    }
    let filler = instance.fillers[filler_index - 1].trim();
    let at = instance
        .target_with_placeholder
        .find(placeholder)
        .ok_or_else(|| DataError::Example {
            id: instance.id.clone(),
            detail: "target sentence has no placeholder".into(),
        })?;
    let before = &instance.target_with_placeholder[..at];
    let after = &instance.target_with_placeholder[at + placeholder.len()..];

    let sep = format!(" {SEP_MARKER} ");
    let mut text = String::new();
    for field in [
        instance.pattern.name(),
        &instance.title,
        &instance.section_header,
        &instance.previous,
    ] {
        text.push_str(field);
        text.push_str(&sep);
    }
    let target_start = text.len();
    text.push_str(before);
    let filler_start = text.len();
    text.push_str(filler);
    let filler_end = text.len();
    text.push_str(after);
    let target_end = text.len();
    text.push_str(&sep);
    text.push_str(&instance.followup);
    Ok(InputSequence {
        text,
        filler: filler_start..filler_end,
        target: target_start..target_end,
    })
}

/// Token ids for one filled input and the filler's token span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub span: SpanIndex,
    /// Tokens dropped from the left and right by truncation.
    pub truncated: (usize, usize),
}

/// Tokenises `seq`, locates the filler span and truncates to `max_len`.
///
/// Truncation removes context before the target sentence first (leftmost
/// first), then context after it, then target tokens outside the filler.
/// Filler tokens are never dropped.
pub fn tokenize(
    seq: &InputSequence,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Encoded, String> {
    let tokens = split_tokens(&seq.text);
    let overlaps = |r: &Range<usize>, s: &Range<usize>| r.start < s.end && r.end > s.start;
    let in_span: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| overlaps(&t.range, &seq.filler))
        .map(|(i, _)| i)
        .collect();
    let (Some(&first), Some(&last)) = (in_span.first(), in_span.last()) else {
        return Err("filler produced no tokens".into());
    };
    let span_len = last + 1 - first;
    if span_len > max_len {
        return Err(format!(
            "filler spans {span_len} tokens, more than max_seq_len {max_len}"
        ));
    }
    let n = tokens.len();
    let target_first = tokens
        .iter()
        .position(|t| t.range.end > seq.target.start)
        .unwrap_or(first)
        .min(first);
    let target_last = tokens
        .iter()
        .rposition(|t| t.range.start < seq.target.end)
        .unwrap_or(last)
        .max(last);

    let mut lo = 0;
    let mut hi = n;
    let mut excess = n.saturating_sub(max_len);
    for (limit_lo, limit_hi) in [
        (target_first, n),
        (target_first, target_last + 1),
        (first, target_last + 1),
        (first, last + 1),
    ] {
        let take = excess.min(limit_lo.saturating_sub(lo));
        lo += take;
        excess -= take;
        let take = excess.min(hi.saturating_sub(limit_hi));
        hi -= take;
        excess -= take;
    }
    debug_assert_eq!(excess, 0);
    let ids = tokens[lo..hi].iter().map(|t| vocab.id(&t.text)).collect();
    Ok(Encoded {
        ids,
        span: SpanIndex {
            start: first - lo,
            end: last + 1 - lo,
        },
        truncated: (lo, n - hi),
    })
}

/// One (instance, filler) row ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct FilledExample {
    pub example_id: String,
    pub instance_id: String,
    /// 1-based filler index.
    pub filler_index: usize,
    pub filler: String,
    pub pattern: Pattern,
    pub token_ids: Vec<usize>,
    pub span: SpanIndex,
    pub label: Option<Label>,
    pub score: Option<f64>,
}

impl FilledExample {
    /// True when any filler token mapped to the unknown id.
    pub fn span_has_unk(&self) -> bool {
        self.token_ids[self.span.start..self.span.end].contains(&UNK)
    }
}

/// Five examples per instance, with labels/scores attached by example id.
/// A map that is supplied must cover every example.
pub fn expand(
    instances: &[Instance],
    vocab: &Vocabulary,
    max_len: usize,
    placeholder: &str,
    labels: Option<&LabelMap>,
    scores: Option<&ScoreMap>,
) -> Result<Vec<FilledExample>, DataError> {
    let mut out = Vec::with_capacity(instances.len() * FILLERS_PER_INSTANCE);
    for inst in instances {
        for k in 1..=FILLERS_PER_INSTANCE {
            let example_id = inst.example_id(k);
            let seq = build_input_sequence(inst, k, placeholder)?;
            let enc = tokenize(&seq, vocab, max_len).map_err(|detail| DataError::Example {
                id: example_id.clone(),
                detail,
            })?;
            let label = match labels {
                Some(m) => Some(*m.get(&example_id).ok_or_else(|| DataError::MissingTarget {
                    what: "label",
                    id: example_id.clone(),
                })?),
                None => None,
            };
            let score = match scores {
                Some(m) => Some(*m.get(&example_id).ok_or_else(|| DataError::MissingTarget {
                    what: "score",
                    id: example_id.clone(),
                })?),
                None => None,
            };
            out.push(FilledExample {
                example_id,
                instance_id: inst.id.clone(),
                filler_index: k,
                filler: inst.fillers[k - 1].clone(),
                pattern: inst.pattern,
                token_ids: enc.ids,
                span: enc.span,
                label,
                score,
            });
        }
    }
    Ok(out)
}

/// Partition by pattern; every pattern key is present, possibly empty.
pub fn split_by_pattern(examples: &[FilledExample]) -> BTreeMap<Pattern, Vec<&FilledExample>> {
    let mut out: BTreeMap<Pattern, Vec<&FilledExample>> =
        Pattern::ALL.iter().map(|&p| (p, Vec::new())).collect();
    for ex in examples {
        out.entry(ex.pattern).or_default().push(ex);
    }
    out
}
