//! Flat `key = value` configuration text with `#` comments.

use crate::error::{Error, Result};

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
/// Entries are returned in file order.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    parse_lines(text, true)
}

/// Like [`parse_kv`] but without comment handling, so values may contain `#`.
pub fn parse_kv_exact(text: &str) -> Result<Vec<(String, String)>> {
    parse_lines(text, false)
}

fn parse_lines(text: &str, comments: bool) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) if comments => &raw[..i],
            _ => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((key.to_owned(), value.trim().to_owned()));
    }
    Ok(out)
}

pub fn format_kv<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    let mut out = String::new();
    for (k, v) in entries {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out
}

pub(crate) fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}
