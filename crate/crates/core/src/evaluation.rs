//! Accuracy, Spearman correlation, per-pattern reports and label counts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::data::{Label, LabelMap, Pattern, ScoreMap};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("prediction and gold ids differ: {0}")]
    IdMismatch(String),
    #[error("{what} needs at least {need} items, got {n}")]
    TooFew {
        what: &'static str,
        need: usize,
        n: usize,
    },
    #[error("spearman correlation undefined: {side} ranks have zero variance over {n} items")]
    UndefinedCorrelation { side: &'static str, n: usize },
    #[error("prediction kind does not match gold kind")]
    KindMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    Spearman,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Spearman => "spearman",
        }
    }
}

/// Fraction of positions where `pred` equals `gold`.
pub fn accuracy<T: PartialEq>(pred: &[T], gold: &[T]) -> Result<f64, MetricError> {
    if pred.len() != gold.len() {
        return Err(MetricError::IdMismatch(format!(
            "{} predictions for {} gold items",
            pred.len(),
            gold.len()
        )));
    }
    if pred.is_empty() {
        return Err(MetricError::TooFew {
            what: "accuracy",
            need: 1,
            n: 0,
        });
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Number of items that share their value with at least one other item.
pub fn tied_items(x: &[f64]) -> usize {
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut n = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        if j - i > 1 {
            n += j - i;
        }
        i = j;
    }
    n
}

/// Pearson correlation of the average-rank vectors.
pub fn spearman(pred: &[f64], gold: &[f64]) -> Result<f64, MetricError> {
    if pred.len() != gold.len() {
        return Err(MetricError::IdMismatch(format!(
            "{} predictions for {} gold items",
            pred.len(),
            gold.len()
        )));
    }
    let n = pred.len();
    if n < 2 {
        return Err(MetricError::TooFew {
            what: "spearman",
            need: 2,
            n,
        });
    }
    let rp = average_ranks(pred);
    let rg = average_ranks(gold);
    let mean = (n as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rp.iter().zip(&rg) {
        let (dx, dy) = (a - mean, b - mean);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(MetricError::UndefinedCorrelation {
            side: "predicted",
            n,
        });
    }
    if syy == 0.0 {
        return Err(MetricError::UndefinedCorrelation { side: "gold", n });
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Id-keyed predictions or gold values for one task.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(LabelMap),
    Scores(ScoreMap),
}

impl Targets {
    pub fn metric(&self) -> Metric {
        match self {
            Targets::Labels(_) => Metric::Accuracy,
            Targets::Scores(_) => Metric::Spearman,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(m) => m.len(),
            Targets::Scores(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> Vec<&str> {
        match self {
            Targets::Labels(m) => m.keys().map(String::as_str).collect(),
            Targets::Scores(m) => m.keys().map(String::as_str).collect(),
        }
    }
}

fn check_ids(pred: &Targets, gold: &Targets) -> Result<(), MetricError> {
    let (p, g) = (pred.ids(), gold.ids());
    if p != g {
        let missing = g.iter().find(|id| !p.contains(id));
        let extra = p.iter().find(|id| !g.contains(id));
        return Err(MetricError::IdMismatch(match (missing, extra) {
            (Some(m), _) => format!("no prediction for {m:?}"),
            (_, Some(e)) => format!("prediction for unknown id {e:?}"),
            _ => "id sets differ".into(),
        }));
    }
    Ok(())
}

/// Metric over the ids in `subset` (all ids when `None`), plus tie count.
fn metric_over(
    pred: &Targets,
    gold: &Targets,
    subset: Option<&[&str]>,
) -> Result<(f64, usize, usize), MetricError> {
    let keep = |id: &str| subset.is_none_or(|s| s.binary_search(&id).is_ok());
    match (pred, gold) {
        (Targets::Labels(p), Targets::Labels(g)) => {
            let (a, b): (Vec<Label>, Vec<Label>) = g
                .iter()
                .filter(|(id, _)| keep(id))
                .map(|(id, &gl)| (p[id], gl))
                .unzip();
            Ok((accuracy(&a, &b)?, a.len(), 0))
        }
        (Targets::Scores(p), Targets::Scores(g)) => {
            let (a, b): (Vec<f64>, Vec<f64>) = g
                .iter()
                .filter(|(id, _)| keep(id))
                .map(|(id, &gs)| (p[id], gs))
                .unzip();
            Ok((spearman(&a, &b)?, a.len(), tied_items(&a)))
        }
        _ => Err(MetricError::KindMismatch),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsetValue {
    pub value: f64,
    pub n: usize,
    /// Predicted values sharing a rank with another item (Spearman only).
    pub ties: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub metric: Metric,
    pub overall: SubsetValue,
    /// Only patterns that occur in the gold ids.
    pub per_pattern: BTreeMap<Pattern, SubsetValue>,
}

impl MetricReport {
    /// Tab-separated `scope, n, value, ties` lines with a header.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("scope\tn\t{}\tties\n", self.metric.name());
        let mut row = |scope: &str, v: &SubsetValue| {
            let _ = writeln!(out, "{scope}\t{}\t{:?}\t{}", v.n, v.value, v.ties);
        };
        row("OVERALL", &self.overall);
        for (p, v) in &self.per_pattern {
            row(p.name(), v);
        }
        out
    }
}

/// Overall and per-pattern metric; the metric follows the target kind.
pub fn per_pattern_report(
    pred: &Targets,
    gold: &Targets,
    patterns: &BTreeMap<String, Pattern>,
) -> Result<MetricReport, MetricError> {
    check_ids(pred, gold)?;
    let (value, n, ties) = metric_over(pred, gold, None)?;
    let mut groups: BTreeMap<Pattern, Vec<&str>> = BTreeMap::new();
    for id in gold.ids() {
        let p = patterns
            .get(id)
            .ok_or_else(|| MetricError::IdMismatch(format!("no pattern for {id:?}")))?;
        groups.entry(*p).or_default().push(id);
    }
    let mut per_pattern = BTreeMap::new();
    for (p, ids) in groups {
        let (value, n, ties) = metric_over(pred, gold, Some(&ids))?;
        per_pattern.insert(p, SubsetValue { value, n, ties });
    }
    Ok(MetricReport {
        metric: gold.metric(),
        overall: SubsetValue { value, n, ties },
        per_pattern,
    })
}

/// Aligned text table: one row per model, one column per pattern plus overall.
pub fn render_table(rows: &[(String, MetricReport)]) -> String {
    let mut header = vec!["Model".to_string()];
    header.extend(Pattern::ALL.iter().map(|p| p.name().to_string()));
    header.push("OVERALL".into());
    let fmt = |m: Metric, v: f64| match m {
        Metric::Accuracy => format!("{:.2}", v * 100.0),
        Metric::Spearman => format!("{v:.4}"),
    };
    let mut table = vec![header];
    for (id, r) in rows {
        let mut line = vec![id.clone()];
        for p in Pattern::ALL {
            line.push(
                r.per_pattern
                    .get(&p)
                    .map_or_else(|| "-".into(), |v| fmt(r.metric, v.value)),
            );
        }
        line.push(fmt(r.metric, r.overall.value));
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| {
            table
                .iter()
                .map(|r| r[c].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for (i, r) in table.iter().enumerate() {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, &w))| {
                if c == 0 {
                    format!("{s:<w$}")
                } else {
                    format!("{s:>w$}")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(
                out,
                "{}",
                "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))
            );
        }
    }
    if rows.iter().any(|(_, r)| r.metric == Metric::Spearman) {
        out.push_str("\nSpearman uses average ranks for ties.\n");
    }
    out
}

/// Label counts per pattern, indexed by [`Label::index`].
pub fn label_distribution(
    items: impl IntoIterator<Item = (Pattern, Label)>,
) -> BTreeMap<Pattern, [usize; 3]> {
    let mut out: BTreeMap<Pattern, [usize; 3]> = BTreeMap::new();
    for (p, l) in items {
        out.entry(p).or_default()[l.index()] += 1;
    }
    out
}

/// `pattern, IMPLAUSIBLE, NEUTRAL, PLAUSIBLE` counts as TSV.
pub fn label_distribution_tsv(dist: &BTreeMap<Pattern, [usize; 3]>) -> String {
    let mut out = String::from("pattern");
    for l in Label::ALL {
        out.push('\t');
        out.push_str(l.name());
    }
    out.push('\n');
    for (p, c) in dist {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", p.name(), c[0], c[1], c[2]);
    }
    out
}
