//! Sentence feature files for `hman query`.
//!
//! Accepted layouts: a JSON array of numbers (one query), a JSON array of
//! arrays (several queries), or plain text with one query per line and
//! values separated by whitespace or commas. Blank lines and lines starting
//! with `#` are ignored.

use crate::error::{CliError, CliResult};

pub fn parse_vectors(text: &str, dim: usize) -> CliResult<Vec<Vec<f32>>> {
    let trimmed = text.trim_start();
    let queries = if trimmed.starts_with('[') {
        parse_json(trimmed)?
    } else {
        parse_text(text)?
    };
    if queries.is_empty() {
        return Err(CliError::Format("vector file holds no queries".into()));
    }
    for (i, q) in queries.iter().enumerate() {
        if q.len() != dim {
            return Err(CliError::Format(format!(
                "query {i} has {} values, the checkpoint expects {dim}",
                q.len()
            )));
        }
        if let Some(v) = q.iter().find(|v| !v.is_finite()) {
            return Err(CliError::Format(format!("query {i} holds non-finite value {v}")));
        }
    }
    Ok(queries)
}

fn parse_json(text: &str) -> CliResult<Vec<Vec<f32>>> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CliError::Format(format!("vector file: {e}")))?;
    let bad = || CliError::Format("vector file must be a number array or an array of number arrays".into());
    let row = |v: &serde_json::Value| -> CliResult<Vec<f32>> {
        v.as_array()
            .ok_or_else(bad)?
            .iter()
            .map(|x| x.as_f64().map(|x| x as f32).ok_or_else(bad))
            .collect()
    };
    let items = value.as_array().ok_or_else(bad)?;
    if items.iter().all(|v| v.is_number()) {
        Ok(vec![row(&value)?])
    } else {
        items.iter().map(row).collect()
    }
}

fn parse_text(text: &str) -> CliResult<Vec<Vec<f32>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(n, line)| {
            line.split(|c: char| c.is_whitespace() || c == ',')
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse::<f32>()
                        .map_err(|_| CliError::Format(format!("line {}: `{t}` is not a number", n + 1)))
                })
                .collect()
        })
        .collect()
}
