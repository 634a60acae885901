use std::path::Path;
use std::str::FromStr;

use super::{DataError, Interaction, InteractionLog};

/// How to read an interaction file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InputFormat {
    /// Delimited text with a header row. `delimiter: None` picks tab when the header
    /// contains one, comma otherwise.
    Delimited { delimiter: Option<char>, user: String, item: String, time: String },
    /// One JSON object per line, e.g. the public Amazon review dumps.
    JsonLines { user: String, item: String, time: String },
}

impl Default for InputFormat {
    fn default() -> Self {
        Self::Delimited { delimiter: None, user: "user".into(), item: "item".into(), time: "timestamp".into() }
    }
}

impl FromStr for InputFormat {
    type Err = DataError;

    /// `csv`, `tsv`, `auto` or `jsonl`, optionally followed by
    /// `:user=COL,item=COL,time=COL`.
    fn from_str(s: &str) -> Result<Self, DataError> {
        let (kind, cols) = s.split_once(':').unwrap_or((s, ""));
        let (mut user, mut item, mut time) = match kind {
            "jsonl" => ("reviewerID".to_string(), "asin".to_string(), "unixReviewTime".to_string()),
            _ => ("user".to_string(), "item".to_string(), "timestamp".to_string()),
        };
        for part in cols.split(',').filter(|p| !p.is_empty()) {
            let (key, value) = part.split_once('=').ok_or_else(|| DataError::Format(format!("expected key=value, got `{part}`")))?;
            let slot = match key {
                "user" => &mut user,
                "item" => &mut item,
                "time" | "timestamp" => &mut time,
                other => return Err(DataError::Format(format!("unknown column key `{other}`"))),
            };
            *slot = value.to_string();
        }
        let delimiter = match kind {
            "csv" => Some(','),
            "tsv" => Some('\t'),
            "auto" => None,
            "jsonl" => return Ok(Self::JsonLines { user, item, time }),
            other => return Err(DataError::Format(format!("unknown format `{other}`"))),
        };
        Ok(Self::Delimited { delimiter, user, item, time })
    }
}

/// Reads, deduplicates and sorts an interaction file.
pub fn ingest(path: &Path, format: &InputFormat) -> Result<InteractionLog, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    ingest_str(&text, format)
}

pub fn ingest_str(text: &str, format: &InputFormat) -> Result<InteractionLog, DataError> {
    let records = match format {
        InputFormat::Delimited { delimiter, user, item, time } => parse_delimited(text, *delimiter, [user, item, time])?,
        InputFormat::JsonLines { user, item, time } => parse_json_lines(text, [user, item, time])?,
    };
    if records.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(InteractionLog::from_records(records))
}

fn parse_delimited(text: &str, delimiter: Option<char>, names: [&String; 3]) -> Result<Vec<Interaction>, DataError> {
    let header = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let delimiter = delimiter.unwrap_or(if header.contains('\t') { '\t' } else { ',' });
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter as u8)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let columns = reader.headers().map_err(|e| DataError::Parse { line: 1, message: e.to_string() })?.clone();
    if columns.is_empty() {
        return Ok(Vec::new());
    }
    let mut index = [0usize; 3];
    for (slot, name) in index.iter_mut().zip(names) {
        *slot = columns
            .iter()
            .position(|c| c == name.as_str())
            .ok_or_else(|| DataError::Parse { line: 1, message: format!("header lacks column `{name}`") })?;
    }

    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| DataError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line_no = row.position().map_or(0, |p| p.line() as usize);
        if row.iter().all(str::is_empty) {
            continue;
        }
        let field = |k: usize| -> Result<&str, DataError> {
            match row.get(index[k]) {
                Some(f) if !f.is_empty() => Ok(f),
                _ => Err(DataError::Parse { line: line_no, message: format!("missing field `{}`", names[k]) }),
            }
        };
        let timestamp = field(2)?
            .parse::<i64>()
            .map_err(|e| DataError::Parse { line: line_no, message: format!("timestamp: {e}") })?;
        out.push(Interaction { user: field(0)?.to_string(), item: field(1)?.to_string(), timestamp });
    }
    Ok(out)
}

fn parse_json_lines(text: &str, names: [&String; 3]) -> Result<Vec<Interaction>, DataError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let line_no = i + 1;
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| DataError::Parse { line: line_no, message: e.to_string() })?;
        let get = |k: usize| -> Result<String, DataError> {
            match value.get(names[k]) {
                Some(serde_json::Value::String(s)) => Ok(s.clone()),
                Some(serde_json::Value::Number(n)) => Ok(n.to_string()),
                _ => Err(DataError::Parse { line: line_no, message: format!("missing field `{}`", names[k]) }),
            }
        };
        let timestamp = get(2)?
            .parse::<i64>()
            .map_err(|e| DataError::Parse { line: line_no, message: format!("timestamp: {e}") })?;
        out.push(Interaction { user: get(0)?, item: get(1)?, timestamp });
    }
    Ok(out)
}
