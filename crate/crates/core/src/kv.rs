//! `key = value` text files shared by the simulator and experiment configs.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Splits `text` into entries. Blank lines and `#` comments are skipped;
/// a later duplicate key is an error.
pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`",
                i + 1
            )));
        };
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out.iter().any(|e| e.key == key) {
            return Err(Error::Config(format!(
                "line {}: duplicate key `{key}`",
                i + 1
            )));
        }
        out.push(Entry {
            key,
            value: v.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

pub fn parse_f64(e: &Entry) -> Result<f64> {
    let v: f64 = e
        .value
        .parse()
        .map_err(|_| Error::Config(format!("line {}: `{}` is not a number", e.line, e.value)))?;
    if !v.is_finite() {
        return Err(Error::Config(format!(
            "line {}: `{}` must be finite",
            e.line, e.key
        )));
    }
    Ok(v)
}

pub fn parse_usize(e: &Entry) -> Result<usize> {
    e.value.parse().map_err(|_| {
        Error::Config(format!(
            "line {}: `{}` is not a non-negative integer",
            e.line, e.value
        ))
    })
}

pub fn parse_u64(e: &Entry) -> Result<u64> {
    e.value.parse().map_err(|_| {
        Error::Config(format!(
            "line {}: `{}` is not a non-negative integer",
            e.line, e.value
        ))
    })
}

pub fn parse_bool(e: &Entry) -> Result<bool> {
    match e.value.as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!(
            "line {}: `{other}` is not a boolean",
            e.line
        ))),
    }
}

pub fn parse_f64_list(e: &Entry) -> Result<Vec<f64>> {
    e.value
        .split(',')
        .map(|s| {
            s.trim().parse::<f64>().map_err(|_| {
                Error::Config(format!(
                    "line {}: `{}` is not a number list",
                    e.line, e.value
                ))
            })
        })
        .collect()
}

pub fn parse_usize_list(e: &Entry) -> Result<Vec<usize>> {
    e.value
        .split(',')
        .map(|s| {
            s.trim().parse::<usize>().map_err(|_| {
                Error::Config(format!(
                    "line {}: `{}` is not an integer list",
                    e.line, e.value
                ))
            })
        })
        .collect()
}

/// Renders a float so that parsing it back yields the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
