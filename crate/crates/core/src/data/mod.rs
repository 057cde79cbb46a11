//! Task data: instances, labels, scores, input construction and tokenisation.

mod sequence;
pub mod synth;
mod tsv;
mod vocab;

pub use sequence::{
    build_input_sequence, expand, split_by_pattern, tokenize, Encoded, FilledExample, InputSequence,
};
pub use tsv::{
    load_instances, load_labels, load_scores, parse_instances, parse_labels, parse_scores,
    write_instances, write_labels, write_scores, LabelMap, ScoreMap,
};
pub use vocab::{split_tokens, Token, Vocabulary, MASK, PAD, SEP, SEP_MARKER, UNK};

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Marker for the filler position inside the target sentence.
pub const DEFAULT_PLACEHOLDER: &str = "______";

pub const FILLERS_PER_INSTANCE: usize = 5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: missing column {column:?}")]
    MissingColumn { path: String, column: String },
    #[error("{path}:{line}: unknown pattern {value:?}")]
    UnknownPattern {
        path: String,
        line: usize,
        value: String,
    },
    #[error("{path}:{line}: row {id:?}: {detail}")]
    Row {
        path: String,
        line: usize,
        id: String,
        detail: String,
    },
    #[error("{path}:{line}: unknown label {value:?}")]
    UnknownLabel {
        path: String,
        line: usize,
        value: String,
    },
    #[error("{path}:{line}: score {value} for {id:?} outside [1, 5]")]
    ScoreRange {
        path: String,
        line: usize,
        id: String,
        value: String,
    },
    #[error("{path}:{line}: duplicate id {id:?}")]
    DuplicateId {
        path: String,
        line: usize,
        id: String,
    },
    #[error("no {what} for example {id:?}")]
    MissingTarget { what: &'static str, id: String },
    #[error("example {id:?}: {detail}")]
    Example { id: String, detail: String },
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
}

/// Linguistic category of the omission being clarified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pattern {
    AddedCompound,
    FusedHead,
    ImplicitReference,
    MetonymicReference,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [
        Pattern::AddedCompound,
        Pattern::FusedHead,
        Pattern::ImplicitReference,
        Pattern::MetonymicReference,
    ];

    /// Display form with a space, e.g. `ADDED COMPOUND`.
    pub fn name(self) -> &'static str {
        match self {
            Pattern::AddedCompound => "ADDED COMPOUND",
            Pattern::FusedHead => "FUSED HEAD",
            Pattern::ImplicitReference => "IMPLICIT REFERENCE",
            Pattern::MetonymicReference => "METONYMIC REFERENCE",
        }
    }

    /// Accepts either `ADDED COMPOUND` or `ADDED_COMPOUND`, any case.
    pub fn parse(s: &str) -> Option<Self> {
        let norm: String = s
            .trim()
            .chars()
            .map(|c| {
                if c == '_' || c == '-' {
                    ' '
                } else {
                    c.to_ascii_uppercase()
                }
            })
            .collect();
        let norm = norm.split_whitespace().collect::<Vec<_>>().join(" ");
        Pattern::ALL.into_iter().find(|p| p.name() == norm)
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Sub-task A class, with the fixed integer mapping used by the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Implausible = 0,
    Neutral = 1,
    Plausible = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Implausible, Label::Neutral, Label::Plausible];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Label::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Implausible => "IMPLAUSIBLE",
            Label::Neutral => "NEUTRAL",
            Label::Plausible => "PLAUSIBLE",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Label::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s.trim()))
    }

    /// Score thresholds: below 2.5 implausible, above 3.5 plausible.
    pub fn from_score(score: f64) -> Self {
        if score < 2.5 {
            Label::Implausible
        } else if score > 3.5 {
            Label::Plausible
        } else {
            Label::Neutral
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One task item: context fields and five candidate fillers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub id: String,
    pub pattern: Pattern,
    pub title: String,
    pub section_header: String,
    pub previous: String,
    pub target_with_placeholder: String,
    pub followup: String,
    pub fillers: [String; FILLERS_PER_INSTANCE],
}

impl Instance {
    /// Example id for filler `k` (1-based).
    pub fn example_id(&self, k: usize) -> String {
        example_id(&self.id, k)
    }
}

pub fn example_id(instance_id: &str, k: usize) -> String {
    format!("{instance_id}_{k}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pattern_spellings() {
        assert_eq!(
            Pattern::parse("ADDED_COMPOUND"),
            Some(Pattern::AddedCompound)
        );
        assert_eq!(Pattern::parse("fused head"), Some(Pattern::FusedHead));
        assert_eq!(
            Pattern::parse(" Implicit  Reference "),
            Some(Pattern::ImplicitReference)
        );
        assert_eq!(Pattern::parse("METONYMIC"), None);
    }

    #[test]
    fn label_thresholds() {
        assert_eq!(Label::from_score(2.49), Label::Implausible);
        assert_eq!(Label::from_score(2.5), Label::Neutral);
        assert_eq!(Label::from_score(3.5), Label::Neutral);
        assert_eq!(Label::from_score(3.51), Label::Plausible);
        assert_eq!(Label::parse("plausible"), Some(Label::Plausible));
        assert_eq!(Label::Neutral.index(), 1);
    }
}
