//! Standard and pattern-aware ensembling of per-model predictions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::config::ConfigError;
use crate::data::{LabelMap, Pattern, ScoreMap};
use crate::evaluation::{per_pattern_report, MetricError, Targets};
use crate::heads::Task;
use crate::model::Prediction;

/// Model id given to the standard ensemble when it competes as a candidate.
pub const STANDARD_ENSEMBLE_ID: &str = "standard-ensemble";

const PROB_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("no prediction sets given")]
    Empty,
    #[error("prediction sets disagree: {0}")]
    Mismatch(String),
    #[error("model id {0:?} appears more than once")]
    DuplicateModel(String),
    #[error("{model}: {detail}")]
    Invalid { model: String, detail: String },
    #[error("{path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },
}

/// One model's predictions over a fixed set of examples.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub model_id: String,
    pub task: Task,
    pub predictions: BTreeMap<String, Prediction>,
    pub patterns: BTreeMap<String, Pattern>,
}

impl PredictionSet {
    pub fn new(
        model_id: impl Into<String>,
        task: Task,
        predictions: BTreeMap<String, Prediction>,
        patterns: &BTreeMap<String, Pattern>,
    ) -> Result<Self, EnsembleError> {
        let model_id = model_id.into();
        let mut own = BTreeMap::new();
        for (id, p) in &predictions {
            let ok = match (task, p) {
                (Task::Classification, Prediction::Probs(q)) => {
                    q.iter().all(|x| x.is_finite() && *x >= 0.0)
                        && (q.iter().sum::<f64>() - 1.0).abs() <= PROB_SUM_TOL
                }
                (Task::Regression, Prediction::Score(s)) => s.is_finite(),
                _ => false,
            };
            if !ok {
                return Err(EnsembleError::Invalid {
                    model: model_id,
                    detail: format!("bad {} prediction for {id:?}: {p:?}", task.name()),
                });
            }
            let pat = patterns.get(id).ok_or_else(|| EnsembleError::Invalid {
                model: model_id.clone(),
                detail: format!("no pattern for {id:?}"),
            })?;
            own.insert(id.clone(), *pat);
        }
        Ok(PredictionSet {
            model_id,
            task,
            predictions,
            patterns: own,
        })
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    /// Argmax labels or scores, keyed by example id.
    pub fn to_targets(&self) -> Targets {
        match self.task {
            Task::Classification => Targets::Labels(
                self.predictions
                    .iter()
                    .map(|(id, p)| {
                        let k = p.argmax().expect("classification prediction");
                        (
                            id.clone(),
                            crate::data::Label::from_index(k).expect("3 classes"),
                        )
                    })
                    .collect::<LabelMap>(),
            ),
            Task::Regression => Targets::Scores(
                self.predictions
                    .iter()
                    .map(|(id, p)| match p {
                        Prediction::Score(s) => (id.clone(), *s),
                        Prediction::Probs(_) => unreachable!("checked at construction"),
                    })
                    .collect::<ScoreMap>(),
            ),
        }
    }

    /// Keeps only the examples of `pattern`.
    pub fn restrict(&self, pattern: Pattern) -> BTreeMap<String, Prediction> {
        self.predictions
            .iter()
            .filter(|(id, _)| self.patterns[*id] == pattern)
            .map(|(id, p)| (id.clone(), *p))
            .collect()
    }

    /// TSV with a header row; probabilities or scores in shortest round-trip form.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        match self.task {
            Task::Classification => {
                out.push_str("example_id\tp_implausible\tp_neutral\tp_plausible\n")
            }
            Task::Regression => out.push_str("example_id\tscore\n"),
        }
        for (id, p) in &self.predictions {
            match p {
                Prediction::Probs(q) => {
                    let _ = writeln!(out, "{id}\t{:?}\t{:?}\t{:?}", q[0], q[1], q[2]);
                }
                Prediction::Score(s) => {
                    let _ = writeln!(out, "{id}\t{s:?}");
                }
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> crate::Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| crate::Error::io(path, e))
    }

    /// Parses [`PredictionSet::to_tsv`] output; the task follows the column count.
    pub fn parse(
        text: &str,
        origin: &str,
        model_id: &str,
        patterns: &BTreeMap<String, Pattern>,
    ) -> Result<Self, EnsembleError> {
        let err = |line: usize, detail: String| EnsembleError::Parse {
            path: origin.to_string(),
            line,
            detail,
        };
        let mut task = None;
        let mut preds = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let raw = raw.trim_end_matches('\r');
            if raw.trim().is_empty() || raw.starts_with("example_id\t") {
                continue;
            }
            let cells: Vec<&str> = raw.split('\t').collect();
            let nums = cells[1..]
                .iter()
                .map(|c| c.trim().parse::<f64>())
                .collect::<Result<Vec<f64>, _>>()
                .map_err(|e| err(line, e.to_string()))?;
            let (t, p) = match nums.as_slice() {
                [a, b, c] => (Task::Classification, Prediction::Probs([*a, *b, *c])),
                [s] => (Task::Regression, Prediction::Score(*s)),
                _ => {
                    return Err(err(
                        line,
                        format!("expected 2 or 4 columns, got {}", cells.len()),
                    ))
                }
            };
            if *task.get_or_insert(t) != t {
                return Err(err(line, "mixed classification and regression rows".into()));
            }
            if preds.insert(cells[0].to_string(), p).is_some() {
                return Err(err(line, format!("duplicate id {:?}", cells[0])));
            }
        }
        let task = task.ok_or_else(|| err(0, "no predictions".into()))?;
        PredictionSet::new(model_id, task, preds, patterns)
    }

    pub fn load(
        path: impl AsRef<Path>,
        model_id: &str,
        patterns: &BTreeMap<String, Pattern>,
    ) -> crate::Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        Ok(Self::parse(
            &text,
            &path.display().to_string(),
            model_id,
            patterns,
        )?)
    }
}

fn check_compatible(sets: &[&PredictionSet]) -> Result<(), EnsembleError> {
    let first = sets.first().ok_or(EnsembleError::Empty)?;
    for s in &sets[1..] {
        if s.task != first.task {
            return Err(EnsembleError::Mismatch(format!(
                "{} is {}, {} is {}",
                first.model_id,
                first.task.name(),
                s.model_id,
                s.task.name()
            )));
        }
        if s.predictions.len() != first.predictions.len()
            || s.predictions.keys().ne(first.predictions.keys())
        {
            return Err(EnsembleError::Mismatch(format!(
                "{} and {} cover different example ids",
                first.model_id, s.model_id
            )));
        }
    }
    Ok(())
}

/// Mean of the members' predictions for each example.
fn average(
    sets: &[&PredictionSet],
    ids: impl Iterator<Item = String>,
) -> BTreeMap<String, Prediction> {
    if let [only] = sets {
        return ids
            .map(|id| {
                let p = only.predictions[&id];
                (id, p)
            })
            .collect();
    }
    let k = sets.len() as f64;
    ids.map(|id| {
        let p = match sets[0].task {
            Task::Classification => {
                let mut acc = [0.0; 3];
                for s in sets {
                    if let Prediction::Probs(q) = s.predictions[&id] {
                        for c in 0..3 {
                            acc[c] += q[c];
                        }
                    }
                }
                let mean = acc.map(|x| x / k);
                let total: f64 = mean.iter().sum();
                // Rescaling an already normalised mean would only perturb the last bits.
                if (total - 1.0).abs() <= 1e-12 {
                    Prediction::Probs(mean)
                } else {
                    Prediction::Probs(mean.map(|x| x / total))
                }
            }
            Task::Regression => {
                let sum: f64 = sets
                    .iter()
                    .map(|s| match s.predictions[&id] {
                        Prediction::Score(v) => v,
                        Prediction::Probs(_) => unreachable!("task checked"),
                    })
                    .sum();
                Prediction::Score(sum / k)
            }
        };
        (id, p)
    })
    .collect()
}

/// Element-wise mean of probability vectors (renormalised) or scores.
pub fn standard_ensemble(sets: &[PredictionSet]) -> Result<PredictionSet, EnsembleError> {
    let refs: Vec<&PredictionSet> = sets.iter().collect();
    standard_ensemble_of(&refs, STANDARD_ENSEMBLE_ID)
}

fn standard_ensemble_of(sets: &[&PredictionSet], id: &str) -> Result<PredictionSet, EnsembleError> {
    check_compatible(sets)?;
    if sets.len() == 1 {
        let mut only = sets[0].clone();
        only.model_id = id.to_string();
        return Ok(only);
    }
    let predictions = average(sets, sets[0].predictions.keys().cloned());
    Ok(PredictionSet {
        model_id: id.to_string(),
        task: sets[0].task,
        predictions,
        patterns: sets[0].patterns.clone(),
    })
}

/// Metric of `set` on each pattern present in `gold`.
pub fn score_per_pattern(
    set: &PredictionSet,
    gold: &Targets,
) -> Result<BTreeMap<Pattern, f64>, MetricError> {
    let report = per_pattern_report(&set.to_targets(), gold, &set.patterns)?;
    Ok(report
        .per_pattern
        .into_iter()
        .map(|(p, v)| (p, v.value))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AggregationMode {
    SelectTop1,
    MeanTopK(usize),
}

impl AggregationMode {
    pub fn name(&self) -> String {
        match self {
            AggregationMode::SelectTop1 => "select_top1".into(),
            AggregationMode::MeanTopK(k) => format!("mean_topk({k})"),
        }
    }

    /// `select_top1`, `mean_topk(k)` or `mean_topk:k`.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if s == "select_top1" {
            return Some(AggregationMode::SelectTop1);
        }
        let k = s
            .strip_prefix("mean_topk(")
            .and_then(|r| r.strip_suffix(')'))
            .or_else(|| s.strip_prefix("mean_topk:"))?;
        k.parse()
            .ok()
            .filter(|&k| k > 0)
            .map(AggregationMode::MeanTopK)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatternChoice {
    /// Candidates best first, with their dev metric on this pattern.
    pub ranked: Vec<(String, f64)>,
    pub chosen: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatternEnsembleSpec {
    pub mode: AggregationMode,
    pub metric: &'static str,
    pub per_pattern: BTreeMap<Pattern, PatternChoice>,
    /// Test patterns absent from dev; these fall back to the standard ensemble.
    pub fallback: Vec<Pattern>,
}

impl PatternEnsembleSpec {
    /// Human-readable audit text.
    pub fn render(&self) -> String {
        let mut out = format!(
            "mode\t{}\nmetric\t{}\ntie_break\tmodel_id ascending\n",
            self.mode.name(),
            self.metric
        );
        for (p, c) in &self.per_pattern {
            let _ = writeln!(out, "\n[{}]", p.name());
            for (rank, (id, v)) in c.ranked.iter().enumerate() {
                let mark = if c.chosen.contains(id) { "*" } else { " " };
                let _ = writeln!(out, "{mark} {}\t{id}\t{v:?}", rank + 1);
            }
            let _ = writeln!(out, "chosen\t{}", c.chosen.join(","));
        }
        for p in &self.fallback {
            let _ = writeln!(
                out,
                "\n[{}]\nchosen\t{STANDARD_ENSEMBLE_ID} (no dev examples)",
                p.name()
            );
        }
        out
    }
}

/// Ranks candidates per pattern on dev and assembles test predictions from
/// the winners. The standard ensemble of all models is always a candidate.
pub fn pattern_aware_ensemble(
    dev_sets: &[PredictionSet],
    dev_gold: &Targets,
    test_sets: &[PredictionSet],
    mode: AggregationMode,
) -> crate::Result<(PredictionSet, PatternEnsembleSpec)> {
    if dev_sets.is_empty() {
        return Err(EnsembleError::Empty.into());
    }
    let mut seen = std::collections::BTreeSet::new();
    for s in dev_sets {
        if s.model_id == STANDARD_ENSEMBLE_ID || !seen.insert(s.model_id.as_str()) {
            return Err(EnsembleError::DuplicateModel(s.model_id.clone()).into());
        }
    }
    let dev_ids: Vec<&str> = dev_sets.iter().map(|s| s.model_id.as_str()).collect();
    let mut test_ids: Vec<&str> = test_sets.iter().map(|s| s.model_id.as_str()).collect();
    test_ids.sort_unstable();
    let mut sorted_dev = dev_ids.clone();
    sorted_dev.sort_unstable();
    if sorted_dev != test_ids {
        return Err(EnsembleError::Mismatch("dev and test model ids differ".into()).into());
    }
    let n_candidates = dev_sets.len() + 1;
    if let AggregationMode::MeanTopK(k) = mode {
        if k == 0 || k > n_candidates {
            return Err(ConfigError::Invalid {
                key: "mode".into(),
                detail: format!("k = {k} but there are {n_candidates} candidates"),
            }
            .into());
        }
    }

    let dev_refs: Vec<&PredictionSet> = dev_sets.iter().collect();
    let dev_std = standard_ensemble_of(&dev_refs, STANDARD_ENSEMBLE_ID)?;
    let test_by_id: BTreeMap<&str, &PredictionSet> =
        test_sets.iter().map(|s| (s.model_id.as_str(), s)).collect();
    let test_refs: Vec<&PredictionSet> = dev_ids.iter().map(|id| test_by_id[id]).collect();
    let test_std = standard_ensemble_of(&test_refs, STANDARD_ENSEMBLE_ID)?;

    let mut candidates: Vec<(&str, &PredictionSet, &PredictionSet)> = dev_sets
        .iter()
        .map(|d| (d.model_id.as_str(), d, test_by_id[d.model_id.as_str()]))
        .collect();
    candidates.push((STANDARD_ENSEMBLE_ID, &dev_std, &test_std));
    candidates.sort_by(|a, b| a.0.cmp(b.0));

    let mut metrics: Vec<BTreeMap<Pattern, f64>> = Vec::with_capacity(candidates.len());
    for (_, d, _) in &candidates {
        metrics.push(score_per_pattern(d, dev_gold)?);
    }

    let mut per_pattern = BTreeMap::new();
    let mut fallback = Vec::new();
    let mut predictions = BTreeMap::new();
    let test_patterns: std::collections::BTreeSet<Pattern> =
        test_std.patterns.values().copied().collect();
    for pattern in test_patterns {
        if !metrics[0].contains_key(&pattern) {
            fallback.push(pattern);
            predictions.extend(test_std.restrict(pattern));
            continue;
        }
        let mut ranked: Vec<(usize, f64)> = (0..candidates.len())
            .map(|i| (i, metrics[i][&pattern]))
            .collect();
        // Stable sort keeps model_id order among equal metrics.
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        let k = match mode {
            AggregationMode::SelectTop1 => 1,
            AggregationMode::MeanTopK(k) => k,
        };
        let members: Vec<&PredictionSet> =
            ranked[..k].iter().map(|&(i, _)| candidates[i].2).collect();
        let ids = test_std
            .patterns
            .iter()
            .filter(|(_, p)| **p == pattern)
            .map(|(id, _)| id.clone());
        predictions.extend(average(&members, ids));
        per_pattern.insert(
            pattern,
            PatternChoice {
                ranked: ranked
                    .iter()
                    .map(|&(i, v)| (candidates[i].0.to_string(), v))
                    .collect(),
                chosen: ranked[..k]
                    .iter()
                    .map(|&(i, _)| candidates[i].0.to_string())
                    .collect(),
            },
        );
    }
    let out = PredictionSet {
        model_id: "pattern-aware-ensemble".into(),
        task: test_std.task,
        predictions,
        patterns: test_std.patterns.clone(),
    };
    let spec = PatternEnsembleSpec {
        mode,
        metric: dev_gold.metric().name(),
        per_pattern,
        fallback,
    };
    Ok((out, spec))
}
