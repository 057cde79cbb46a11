//! Desk-scale synthetic language and plausibility task.
//!
//! The lexicon is fixed: noun and verb classes over pseudo-words, each noun
//! paired with one adjective and each verb with one adverb that always
//! precede it. A class-level compatibility table decides whether a verb's
//! object is plausible, neutral or implausible. Pre-training sentences use
//! plausible objects most of the time and neutral ones otherwise, never
//! implausible ones; task fillers are labelled directly from the table.
//! Every verb in a sentence or task instance comes from one class, the way a
//! how-to article sticks to one activity.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{example_id, Instance, Label, LabelMap, Pattern, ScoreMap, Vocabulary};
use crate::config::ConfigError;
use crate::rng::{stream, StreamRng};

pub const NOUN_CLASSES: usize = 3;
pub const NOUNS_PER_CLASS: usize = 6;
pub const VERB_CLASSES: usize = 3;
pub const VERBS_PER_CLASS: usize = 4;

/// Name of the only rule set implemented.
pub const GRAMMAR_ID: &str = "svo-v1";

const FUNCTION_WORDS: [&str; 10] = [
    "the", ".", "then", "and", "how", "to", "step", "tips", "first", "finally",
];
const NUMBER_WORDS: [&str; 9] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

/// Share of pre-training objects drawn from plausible (vs neutral) classes.
const CORPUS_PLAUSIBLE_SHARE: f64 = 0.8;

fn pseudo_word(j: usize) -> String {
    const CONS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let n_syl = CONS.len() * VOWELS.len();
    let k = (j * 1031 + 17) % (n_syl * n_syl);
    let syl = |s: usize| {
        let c = CONS[s / VOWELS.len()] as char;
        let v = VOWELS[s % VOWELS.len()] as char;
        format!("{c}{v}")
    };
    format!("{}{}", syl(k / n_syl), syl(k % n_syl))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Noun {
    pub class: usize,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Verb {
    pub class: usize,
    pub index: usize,
}

/// The fixed lexicon and its agreement rules.
#[derive(Debug, Clone)]
pub struct Grammar {
    nouns: Vec<Vec<String>>,
    adjectives: Vec<Vec<String>>,
    verbs: Vec<Vec<String>>,
    adverbs: Vec<Vec<String>>,
    prepositions: Vec<String>,
}

impl Default for Grammar {
    fn default() -> Self {
        Self::new()
    }
}

impl Grammar {
    pub fn new() -> Self {
        let mut next = 0usize;
        let mut take = |classes: usize, per: usize| -> Vec<Vec<String>> {
            (0..classes)
                .map(|_| {
                    (0..per)
                        .map(|_| {
                            next += 1;
                            pseudo_word(next)
                        })
                        .collect()
                })
                .collect()
        };
        let nouns = take(NOUN_CLASSES, NOUNS_PER_CLASS);
        let adjectives = take(NOUN_CLASSES, NOUNS_PER_CLASS);
        let verbs = take(VERB_CLASSES, VERBS_PER_CLASS);
        let adverbs = take(VERB_CLASSES, VERBS_PER_CLASS);
        let prepositions = take(1, VERB_CLASSES).remove(0);
        Grammar {
            nouns,
            adjectives,
            verbs,
            adverbs,
            prepositions,
        }
    }

    /// Every word the grammar can emit, in a fixed order.
    pub fn words(&self) -> Vec<String> {
        let mut w: Vec<String> = FUNCTION_WORDS.iter().map(|s| s.to_string()).collect();
        w.extend(NUMBER_WORDS.iter().map(|s| s.to_string()));
        for p in Pattern::ALL {
            w.extend(p.name().split(' ').map(str::to_lowercase));
        }
        for group in [&self.nouns, &self.adjectives, &self.verbs, &self.adverbs] {
            w.extend(group.iter().flatten().cloned());
        }
        w.extend(self.prepositions.iter().cloned());
        let mut seen = std::collections::HashSet::new();
        w.retain(|x| seen.insert(x.clone()));
        w
    }

    /// Reserved tokens followed by [`Grammar::words`].
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_words(self.words())
    }

    pub fn noun(&self, n: Noun) -> &str {
        &self.nouns[n.class][n.index]
    }

    pub fn adjective(&self, n: Noun) -> &str {
        &self.adjectives[n.class][n.index]
    }

    pub fn verb(&self, v: Verb) -> &str {
        &self.verbs[v.class][v.index]
    }

    pub fn adverb(&self, v: Verb) -> &str {
        &self.adverbs[v.class][v.index]
    }

    pub fn preposition(&self, verb_class: usize) -> &str {
        &self.prepositions[verb_class]
    }

    /// Class-level plausibility of `noun_class` as object of `verb_class`.
    ///
    /// Each row is a permutation, but the columns are not: a noun class leans
    /// towards one label on its own. A fully symmetric table leaves no signal
    /// in either word alone and small models stall on it.
    pub fn compatibility(verb_class: usize, noun_class: usize) -> Label {
        use Label::{Implausible as I, Neutral as N, Plausible as P};
        const TABLE: [[Label; NOUN_CLASSES]; VERB_CLASSES] = [[P, N, I], [P, I, N], [N, P, I]];
        TABLE[verb_class][noun_class]
    }

    /// Noun classes with the given compatibility for `verb_class`.
    pub fn classes_with(verb_class: usize, label: Label) -> Vec<usize> {
        (0..NOUN_CLASSES)
            .filter(|&c| Self::compatibility(verb_class, c) == label)
            .collect()
    }

    pub fn random_noun<R: Rng + ?Sized>(&self, rng: &mut R) -> Noun {
        Noun {
            class: rng.random_range(0..NOUN_CLASSES),
            index: rng.random_range(0..NOUNS_PER_CLASS),
        }
    }

    pub fn random_verb<R: Rng + ?Sized>(&self, rng: &mut R) -> Verb {
        Verb {
            class: rng.random_range(0..VERB_CLASSES),
            index: rng.random_range(0..VERBS_PER_CLASS),
        }
    }

    /// A verb from the given class.
    pub fn verb_in<R: Rng + ?Sized>(&self, rng: &mut R, class: usize) -> Verb {
        Verb {
            class,
            index: rng.random_range(0..VERBS_PER_CLASS),
        }
    }

    /// A noun whose class has compatibility `label` with `verb_class`.
    pub fn noun_with<R: Rng + ?Sized>(&self, rng: &mut R, verb_class: usize, label: Label) -> Noun {
        let classes = Self::classes_with(verb_class, label);
        Noun {
            class: classes[rng.random_range(0..classes.len())],
            index: rng.random_range(0..NOUNS_PER_CLASS),
        }
    }

    /// Object for pre-training text: plausible most of the time, else neutral.
    pub fn corpus_object<R: Rng + ?Sized>(&self, rng: &mut R, verb_class: usize) -> Noun {
        let label = if rng.random::<f64>() < CORPUS_PLAUSIBLE_SHARE {
            Label::Plausible
        } else {
            Label::Neutral
        };
        self.noun_with(rng, verb_class, label)
    }

    fn push_np(&self, out: &mut Vec<String>, n: Noun) {
        out.push("the".into());
        out.push(self.adjective(n).into());
        out.push(self.noun(n).into());
    }

    fn push_vp(&self, out: &mut Vec<String>, v: Verb) {
        out.push(self.adverb(v).into());
        out.push(self.verb(v).into());
    }

    /// `the ADJ S ADV V the ADJ O .` (9 words), verb drawn from `topic`.
    pub fn clause_short<R: Rng + ?Sized>(&self, rng: &mut R, topic: usize) -> Vec<String> {
        let mut w = Vec::with_capacity(9);
        let (s, v) = (self.random_noun(rng), self.verb_in(rng, topic));
        let o = self.corpus_object(rng, v.class);
        self.push_np(&mut w, s);
        self.push_vp(&mut w, v);
        self.push_np(&mut w, o);
        w.push(".".into());
        w
    }

    /// `then ADV V the ADJ O PREP the ADJ T .` (12 words), verb drawn from `topic`.
    pub fn clause_long<R: Rng + ?Sized>(&self, rng: &mut R, topic: usize) -> Vec<String> {
        let mut w = Vec::with_capacity(12);
        let v = self.verb_in(rng, topic);
        let o = self.corpus_object(rng, v.class);
        let t = self.random_noun(rng);
        w.push("then".into());
        self.push_vp(&mut w, v);
        self.push_np(&mut w, o);
        w.push(self.preposition(v.class).into());
        self.push_np(&mut w, t);
        w.push(".".into());
        w
    }

    pub const SHORT_CLAUSE_LEN: usize = 9;
    pub const LONG_CLAUSE_LEN: usize = 12;

    /// A sentence of clauses joined by `and`, with length in `min_len..=max_len`.
    /// All verbs share one class, so a sentence stays on one activity.
    pub fn sentence<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        min_len: usize,
        max_len: usize,
    ) -> Vec<String> {
        let mut words: Vec<String> = Vec::new();
        let topic = rng.random_range(0..VERB_CLASSES);
        loop {
            let room = max_len.saturating_sub(words.len());
            let fits: Vec<bool> = [Self::SHORT_CLAUSE_LEN, Self::LONG_CLAUSE_LEN]
                .iter()
                .map(|&l| l <= room)
                .collect();
            let done = words.len() >= min_len;
            if !fits.iter().any(|&f| f) || (done && rng.random::<f64>() < 0.5) {
                break;
            }
            let long = match (fits[0], fits[1]) {
                (true, true) => rng.random::<bool>(),
                (_, l) => l,
            };
            let clause = if long {
                self.clause_long(rng, topic)
            } else {
                self.clause_short(rng, topic)
            };
            if let Some(last) = words.last_mut() {
                *last = "and".into();
            }
            words.extend(clause);
        }
        words
    }
}

/// Settings for [`generate_synthetic_task`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTaskConfig {
    pub train_instances: usize,
    pub dev_instances: usize,
    pub test_instances: usize,
    /// 0 gives balanced labels within every pattern; 1 gives the full
    /// per-pattern skew of [`skewed_profile`].
    pub skew: f64,
    /// Half-width of the uniform score jitter.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthTaskConfig {
    fn default() -> Self {
        SynthTaskConfig {
            train_instances: 480,
            dev_instances: 160,
            test_instances: 160,
            skew: 0.5,
            jitter: 0.3,
            seed: 17,
        }
    }
}

impl SynthTaskConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.skew) {
            return Err(ConfigError::Invalid {
                key: "task.skew".into(),
                detail: format!("{} outside [0, 1]", self.skew),
            });
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(ConfigError::Invalid {
                key: "task.jitter".into(),
                detail: format!("{} outside [0, 1)", self.jitter),
            });
        }
        Ok(())
    }
}

/// Label shares (implausible, neutral, plausible) at full skew: plausible
/// dominates ADDED COMPOUND and IMPLICIT REFERENCE, neutral is rarest in
/// FUSED HEAD.
pub fn skewed_profile(pattern: Pattern) -> [f64; 3] {
    match pattern {
        Pattern::AddedCompound => [0.15, 0.2, 0.65],
        Pattern::FusedHead => [0.4, 0.1, 0.5],
        Pattern::ImplicitReference => [0.15, 0.25, 0.6],
        Pattern::MetonymicReference => [0.3, 0.3, 0.4],
    }
}

/// Largest-remainder apportionment of `total` items over `shares`.
fn apportion(total: usize, shares: [f64; 3]) -> [usize; 3] {
    let sum: f64 = shares.iter().sum();
    let exact: Vec<f64> = shares.iter().map(|s| s / sum * total as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = exact[i].floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = total - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Instances with gold labels and scores.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplit {
    pub instances: Vec<Instance>,
    pub labels: LabelMap,
    pub scores: ScoreMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub train: TaskSplit,
    pub dev: TaskSplit,
    pub test: TaskSplit,
}

impl SynthDataset {
    pub fn splits(&self) -> [(&'static str, &TaskSplit); 3] {
        [
            ("train", &self.train),
            ("dev", &self.dev),
            ("test", &self.test),
        ]
    }
}

fn base_score(label: Label) -> f64 {
    match label {
        Label::Implausible => 1.0,
        Label::Neutral => 3.0,
        Label::Plausible => 5.0,
    }
}

fn render(words: &[String]) -> String {
    words.join(" ")
}

fn generate_split(
    grammar: &Grammar,
    cfg: &SynthTaskConfig,
    name: &str,
    n: usize,
    rng: &mut StreamRng,
) -> TaskSplit {
    // Instance i gets pattern i mod 4.
    let mut per_pattern: BTreeMap<Pattern, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        per_pattern
            .entry(Pattern::ALL[i % Pattern::ALL.len()])
            .or_default()
            .push(i);
    }
    // Pre-draw filler labels per pattern so counts follow the target shares.
    let mut label_pool: BTreeMap<Pattern, Vec<Label>> = BTreeMap::new();
    for (&p, idx) in &per_pattern {
        let uniform = [1.0 / 3.0; 3];
        let skewed = skewed_profile(p);
        let shares: [f64; 3] =
            std::array::from_fn(|k| (1.0 - cfg.skew) * uniform[k] + cfg.skew * skewed[k]);
        let counts = apportion(idx.len() * 5, shares);
        let mut pool: Vec<Label> = Label::ALL
            .iter()
            .zip(counts)
            .flat_map(|(&l, c)| std::iter::repeat_n(l, c))
            .collect();
        pool.shuffle(rng);
        label_pool.insert(p, pool);
    }

    let mut split = TaskSplit {
        instances: Vec::with_capacity(n),
        labels: LabelMap::new(),
        scores: ScoreMap::new(),
    };
    for i in 0..n {
        let pattern = Pattern::ALL[i % Pattern::ALL.len()];
        let id = format!("{name}{i}");
        let v = grammar.random_verb(rng);
        let labels: Vec<Label> = label_pool
            .get_mut(&pattern)
            .expect("pattern pool")
            .split_off_last(5);
        let mut used: Vec<Noun> = Vec::new();
        let mut fillers = Vec::with_capacity(5);
        for &label in &labels {
            let noun = loop {
                let n = grammar.noun_with(rng, v.class, label);
                if !used.contains(&n) {
                    break n;
                }
            };
            used.push(noun);
            fillers.push(format!(
                "{} {}",
                grammar.adjective(noun),
                grammar.noun(noun)
            ));
        }
        for (k, &label) in labels.iter().enumerate() {
            let jitter = (rng.random::<f64>() * 2.0 - 1.0) * cfg.jitter;
            let score = (base_score(label) + jitter).clamp(1.0, 5.0);
            debug_assert_eq!(Label::from_score(score), label);
            let eid = example_id(&id, k + 1);
            split.labels.insert(eid.clone(), Label::from_score(score));
            split.scores.insert(eid, score);
        }

        let adv = grammar.adverb(v).to_string();
        let verb = grammar.verb(v).to_string();
        let s = grammar.random_noun(rng);
        let t = grammar.random_noun(rng);
        let np = |n: Noun| format!("the {} {}", grammar.adjective(n), grammar.noun(n));
        let prep = grammar.preposition(v.class);
        let target = match pattern {
            Pattern::AddedCompound => format!("{} {adv} {verb} the ______ .", np(s)),
            Pattern::FusedHead => format!("then {adv} {verb} the ______ {prep} {} .", np(t)),
            Pattern::ImplicitReference => format!("{adv} {verb} the ______ ."),
            Pattern::MetonymicReference => {
                format!("{} {adv} {verb} the ______ {prep} {} .", np(s), np(t))
            }
        };
        // Context verbs share the target verb's class.
        let title_verb = grammar.verb_in(rng, v.class);
        let title_noun = grammar.random_noun(rng);
        let title = format!(
            "how to {} the {}",
            grammar.verb(title_verb),
            grammar.noun(title_noun)
        );
        let section = format!(
            "step {}",
            NUMBER_WORDS[rng.random_range(0..NUMBER_WORDS.len())]
        );
        let previous = render(&grammar.clause_short(rng, v.class));
        let followup = render(&grammar.clause_short(rng, v.class));
        split.instances.push(Instance {
            id,
            pattern,
            title,
            section_header: section,
            previous,
            target_with_placeholder: target,
            followup,
            fillers: fillers.try_into().expect("five fillers"),
        });
    }
    split
}

trait SplitOffLast<T> {
    fn split_off_last(&mut self, n: usize) -> Vec<T>;
}

impl<T> SplitOffLast<T> for Vec<T> {
    fn split_off_last(&mut self, n: usize) -> Vec<T> {
        let at = self.len() - n;
        self.split_off(at)
    }
}

/// Train/dev/test splits drawn from independent seeded streams.
pub fn generate_synthetic_task(
    cfg: &SynthTaskConfig,
    grammar: &Grammar,
) -> Result<SynthDataset, ConfigError> {
    cfg.validate()?;
    let mk = |name: &str, idx: u64, n: usize| {
        let mut rng = stream(cfg.seed, "synth-task", idx);
        generate_split(grammar, cfg, name, n, &mut rng)
    };
    Ok(SynthDataset {
        train: mk("train", 0, cfg.train_instances),
        dev: mk("dev", 1, cfg.dev_instances),
        test: mk("test", 2, cfg.test_instances),
    })
}
