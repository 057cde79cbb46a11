//! Tab-separated task files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{DataError, Instance, Label, Pattern, FILLERS_PER_INSTANCE};

pub type LabelMap = BTreeMap<String, Label>;
pub type ScoreMap = BTreeMap<String, f64>;

/// Canonical column name followed by accepted aliases (matched case-insensitively).
const COLUMNS: [&[&str]; 7] = [
    &["Id"],
    &["Pattern", "Resolved pattern"],
    &["Title", "Article title"],
    &["Section", "Section header"],
    &["Previous", "Previous context"],
    &["Sentence"],
    &["Follow-up", "Follow-up context"],
];

fn read(path: &Path) -> crate::Result<String> {
    std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))
}

pub fn load_instances(path: impl AsRef<Path>, placeholder: &str) -> crate::Result<Vec<Instance>> {
    let path = path.as_ref();
    Ok(parse_instances(
        &read(path)?,
        &path.display().to_string(),
        placeholder,
    )?)
}

/// Parses an instances file; `origin` names the source in error messages.
pub fn parse_instances(
    text: &str,
    origin: &str,
    placeholder: &str,
) -> Result<Vec<Instance>, DataError> {
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(DataError::MissingColumn {
            path: origin.to_string(),
            column: "Id".into(),
        });
    };
    let header: Vec<&str> = header.trim_end_matches('\r').split('\t').collect();
    let find = |names: &[&str]| {
        header
            .iter()
            .position(|h| names.iter().any(|n| h.trim().eq_ignore_ascii_case(n)))
    };
    let mut idx = Vec::with_capacity(COLUMNS.len() + FILLERS_PER_INSTANCE);
    for names in COLUMNS {
        idx.push(find(names).ok_or_else(|| DataError::MissingColumn {
            path: origin.to_string(),
            column: names[0].to_string(),
        })?);
    }
    for k in 1..=FILLERS_PER_INSTANCE {
        let name = format!("Filler{k}");
        idx.push(
            find(&[name.as_str()]).ok_or_else(|| DataError::MissingColumn {
                path: origin.to_string(),
                column: name.clone(),
            })?,
        );
    }

    let mut out = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = raw.split('\t').collect();
        let cell = |c: usize| cells.get(idx[c]).map(|s| s.trim()).unwrap_or("");
        let id = cell(0).to_string();
        let row_err = |detail: String| DataError::Row {
            path: origin.to_string(),
            line,
            id: id.clone(),
            detail,
        };
        if id.is_empty() {
            return Err(row_err("empty id".into()));
        }
        let pattern = Pattern::parse(cell(1)).ok_or_else(|| DataError::UnknownPattern {
            path: origin.to_string(),
            line,
            value: cell(1).to_string(),
        })?;
        let target = cell(5).to_string();
        let marks = target.matches(placeholder).count();
        if marks != 1 {
            return Err(row_err(format!(
                "sentence must contain exactly one placeholder {placeholder:?}, found {marks}"
            )));
        }
        let fillers: Vec<String> = (0..FILLERS_PER_INSTANCE)
            .map(|k| cell(7 + k).to_string())
            .collect();
        let present = fillers.iter().filter(|f| !f.is_empty()).count();
        if present != FILLERS_PER_INSTANCE {
            return Err(row_err(format!(
                "expected {FILLERS_PER_INSTANCE} fillers, found {present}"
            )));
        }
        out.push(Instance {
            id: id.clone(),
            pattern,
            title: cell(2).to_string(),
            section_header: cell(3).to_string(),
            previous: cell(4).to_string(),
            target_with_placeholder: target,
            followup: cell(6).to_string(),
            fillers: fillers.try_into().expect("five fillers"),
        });
    }
    Ok(out)
}

fn parse_pairs<'a>(
    text: &'a str,
    origin: &str,
) -> impl Iterator<Item = Result<(usize, &'a str, &'a str), DataError>> + 'a {
    let origin = origin.to_string();
    text.lines().enumerate().filter_map(move |(i, raw)| {
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            return None;
        }
        let mut parts = raw.split('\t');
        let id = parts.next().unwrap_or("").trim();
        match parts.next() {
            Some(v) => Some(Ok((i + 1, id, v.trim()))),
            None => Some(Err(DataError::Row {
                path: origin.clone(),
                line: i + 1,
                id: id.to_string(),
                detail: "expected two tab-separated columns".into(),
            })),
        }
    })
}

pub fn load_labels(path: impl AsRef<Path>) -> crate::Result<LabelMap> {
    let path = path.as_ref();
    Ok(parse_labels(&read(path)?, &path.display().to_string())?)
}

pub fn parse_labels(text: &str, origin: &str) -> Result<LabelMap, DataError> {
    let mut out = LabelMap::new();
    for row in parse_pairs(text, origin) {
        let (line, id, value) = row?;
        let label = Label::parse(value).ok_or_else(|| DataError::UnknownLabel {
            path: origin.to_string(),
            line,
            value: value.to_string(),
        })?;
        if out.insert(id.to_string(), label).is_some() {
            return Err(DataError::DuplicateId {
                path: origin.to_string(),
                line,
                id: id.to_string(),
            });
        }
    }
    Ok(out)
}

pub fn load_scores(path: impl AsRef<Path>) -> crate::Result<ScoreMap> {
    let path = path.as_ref();
    Ok(parse_scores(&read(path)?, &path.display().to_string())?)
}

pub fn parse_scores(text: &str, origin: &str) -> Result<ScoreMap, DataError> {
    let mut out = ScoreMap::new();
    for row in parse_pairs(text, origin) {
        let (line, id, value) = row?;
        let range_err = || DataError::ScoreRange {
            path: origin.to_string(),
            line,
            id: id.to_string(),
            value: value.to_string(),
        };
        let score: f64 = value.parse().map_err(|_| range_err())?;
        if !(1.0..=5.0).contains(&score) {
            return Err(range_err());
        }
        if out.insert(id.to_string(), score).is_some() {
            return Err(DataError::DuplicateId {
                path: origin.to_string(),
                line,
                id: id.to_string(),
            });
        }
    }
    Ok(out)
}

fn clean(field: &str) -> String {
    field.replace(['\t', '\n', '\r'], " ")
}

fn write(path: &Path, text: String) -> crate::Result<()> {
    std::fs::write(path, text).map_err(|e| crate::Error::io(path, e))
}

pub fn write_instances(path: impl AsRef<Path>, instances: &[Instance]) -> crate::Result<()> {
    let mut s = String::from("Id\tPattern\tTitle\tSection\tPrevious\tSentence\tFollow-up");
    for k in 1..=FILLERS_PER_INSTANCE {
        let _ = write!(s, "\tFiller{k}");
    }
    s.push('\n');
    for inst in instances {
        let fields = [
            inst.id.as_str(),
            inst.pattern.name(),
            &inst.title,
            &inst.section_header,
            &inst.previous,
            &inst.target_with_placeholder,
            &inst.followup,
        ];
        let row: Vec<String> = fields
            .iter()
            .map(|f| clean(f))
            .chain(inst.fillers.iter().map(|f| clean(f)))
            .collect();
        s.push_str(&row.join("\t"));
        s.push('\n');
    }
    write(path.as_ref(), s)
}

/// `example_id<TAB>label` lines.
pub fn write_labels<'a>(
    path: impl AsRef<Path>,
    rows: impl IntoIterator<Item = (&'a str, Label)>,
) -> crate::Result<()> {
    let mut s = String::new();
    for (id, label) in rows {
        let _ = writeln!(s, "{id}\t{label}");
    }
    write(path.as_ref(), s)
}

/// `example_id<TAB>score` lines; scores use the shortest round-trip decimal form.
pub fn write_scores<'a>(
    path: impl AsRef<Path>,
    rows: impl IntoIterator<Item = (&'a str, f64)>,
) -> crate::Result<()> {
    let mut s = String::new();
    for (id, score) in rows {
        let _ = writeln!(s, "{id}\t{score:?}");
    }
    write(path.as_ref(), s)
}
