use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const END_SENTINEL: &str = "###END###";

/// One sentence mentioning an entity pair, as read from a Riedel file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentenceRecord {
    pub head_id: String,
    pub tail_id: String,
    pub head_name: String,
    pub tail_name: String,
    pub relation: String,
    pub tokens: Vec<String>,
    /// Inclusive token span of the head entity.
    pub head_span: (usize, usize),
    /// Inclusive token span of the tail entity.
    pub tail_span: (usize, usize),
}

impl SentenceRecord {
    /// Builds a record, locating both entity names in the tokens. Returns
    /// `None` when either name is not a contiguous token span.
    pub fn new(
        head_id: impl Into<String>,
        tail_id: impl Into<String>,
        head_name: impl Into<String>,
        tail_name: impl Into<String>,
        relation: impl Into<String>,
        tokens: Vec<String>,
    ) -> Option<Self> {
        let head_name = head_name.into();
        let tail_name = tail_name.into();
        let head_span = find_span(&tokens, &head_name)?;
        let tail_span = find_span(&tokens, &tail_name)?;
        Some(SentenceRecord {
            head_id: head_id.into(),
            tail_id: tail_id.into(),
            head_name,
            tail_name,
            relation: relation.into(),
            tokens,
            head_span,
            tail_span,
        })
    }

    pub fn pair(&self) -> (&str, &str) {
        (&self.head_id, &self.tail_id)
    }
}

/// First occurrence of `name` as a contiguous token span. Multi-word names
/// match either word by word or as a single underscore-joined token.
fn find_span(tokens: &[String], name: &str) -> Option<(usize, usize)> {
    let words: Vec<&str> = name.split_whitespace().collect();
    if words.is_empty() {
        return None;
    }
    if let Some(start) = tokens
        .windows(words.len())
        .position(|w| w.iter().zip(&words).all(|(t, n)| t == n))
    {
        return Some((start, start + words.len() - 1));
    }
    if words.len() > 1 {
        let joined = words.join("_");
        if let Some(i) = tokens.iter().position(|t| *t == joined) {
            return Some((i, i));
        }
    }
    None
}

/// Parses one tab-separated line. `None` for malformed lines.
pub fn parse_riedel_line(line: &str) -> Option<SentenceRecord> {
    let fields: Vec<&str> = line.trim_end_matches(['\r', '\n']).split('\t').collect();
    if fields.len() < 6 {
        return None;
    }
    let mut tokens: Vec<String> = fields[5].split_whitespace().map(str::to_owned).collect();
    if tokens.last().map(String::as_str) == Some(END_SENTINEL) {
        tokens.pop();
    }
    match fields.get(6).map(|f| f.trim()) {
        None | Some("") | Some(END_SENTINEL) => {}
        Some(_) => return None,
    }
    if tokens.is_empty() || fields[..5].iter().any(|f| f.trim().is_empty()) {
        return None;
    }
    SentenceRecord::new(
        fields[0].trim(),
        fields[1].trim(),
        fields[2].trim(),
        fields[3].trim(),
        fields[4].trim(),
        tokens,
    )
}

/// Records parsed from a Riedel file together with the skipped-line count.
#[derive(Clone, Debug, Default)]
pub struct RiedelFile {
    pub records: Vec<SentenceRecord>,
    pub skipped: usize,
}

/// Parses Riedel-format text. Blank lines are ignored; other malformed
/// lines are counted in `skipped`.
pub fn parse_riedel_str(text: &str) -> RiedelFile {
    let mut out = RiedelFile::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match parse_riedel_line(line) {
            Some(r) => out.records.push(r),
            None => out.skipped += 1,
        }
    }
    out
}

pub fn load_riedel_file(path: impl AsRef<Path>) -> Result<RiedelFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed = parse_riedel_str(&text);
    if parsed.records.is_empty() {
        return Err(Error::format(
            path,
            format!("no well-formed lines ({} skipped)", parsed.skipped),
        ));
    }
    Ok(parsed)
}

pub fn write_riedel_file(path: impl AsRef<Path>, records: &[SentenceRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in records {
        let _ = writeln!(
            text,
            "{}\t{}\t{}\t{}\t{}\t{} {END_SENTINEL}",
            r.head_id,
            r.tail_id,
            r.head_name,
            r.tail_name,
            r.relation,
            r.tokens.join(" ")
        );
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
