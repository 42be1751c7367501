//! Line-oriented, self-describing text format shared by tokenizer specs,
//! vocabulary mapping tables and alignment paths.
//!
//! Every document starts with `<doc-type> v<version>`, followed by
//! `key value` lines and counted sections (`key <n>` then `n` item lines).
//! Token strings are escaped so that one token always occupies exactly one
//! whitespace-free field.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct FormatError {
    pub line: usize,
    pub msg: String,
}

/// Escapes a token so it contains no whitespace and no bare backslash.
pub fn escape(token: &str) -> String {
    let mut out = String::with_capacity(token.len());
    for c in token.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            ' ' => out.push_str("\\s"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape(field: &str) -> Result<String, String> {
    let mut out = String::with_capacity(field.len());
    let mut chars = field.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('s') => out.push(' '),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(other) => return Err(format!("unknown escape '\\{other}'")),
            None => return Err("dangling backslash".into()),
        }
    }
    Ok(out)
}

/// Accumulates a document; every `line` call terminates with `\n`.
#[derive(Debug, Default)]
pub struct Writer {
    buf: String,
}

impl Writer {
    pub fn new(doc_type: &str, version: u32) -> Self {
        let mut w = Writer::default();
        w.line(format_args!("{doc_type} v{version}"));
        w
    }

    pub fn line(&mut self, args: std::fmt::Arguments<'_>) {
        self.buf.write_fmt(args).expect("writing to a String cannot fail");
        self.buf.push('\n');
    }

    pub fn field(&mut self, key: &str, value: impl std::fmt::Display) {
        self.line(format_args!("{key} {value}"));
    }

    pub fn finish(self) -> String {
        self.buf
    }
}

pub struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Reader<'a> {
    /// Checks the leading `<doc_type> v<version>` line.
    pub fn open(text: &'a str, doc_type: &str, version: u32) -> Result<Self, FormatError> {
        let mut r = Reader { lines: text.lines().enumerate(), last: 0 };
        let header = r.next_line()?;
        if header != format!("{doc_type} v{version}") {
            return Err(r.err(format!("expected header '{doc_type} v{version}', found '{header}'")));
        }
        Ok(r)
    }

    pub fn err(&self, msg: impl Into<String>) -> FormatError {
        FormatError { line: self.last, msg: msg.into() }
    }

    pub fn next_line(&mut self) -> Result<&'a str, FormatError> {
        match self.lines.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok(l)
            }
            None => Err(FormatError { line: self.last + 1, msg: "unexpected end of document".into() }),
        }
    }

    /// Reads a `key value` line and returns the raw value.
    pub fn raw_field(&mut self, key: &str) -> Result<&'a str, FormatError> {
        let line = self.next_line()?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v),
            _ => Err(self.err(format!("expected field '{key}', found '{line}'"))),
        }
    }

    pub fn field<T: FromStr>(&mut self, key: &str) -> Result<T, FormatError> {
        let raw = self.raw_field(key)?;
        raw.parse().map_err(|_| self.err(format!("cannot parse value '{raw}' of field '{key}'")))
    }

    pub fn token(&self, field: &str) -> Result<String, FormatError> {
        if field.is_empty() {
            return Err(self.err("empty token"));
        }
        unescape(field).map_err(|m| self.err(m))
    }

    /// Ensures nothing but trailing blank lines remain.
    pub fn finish(mut self) -> Result<(), FormatError> {
        for (i, l) in self.lines.by_ref() {
            if !l.is_empty() {
                return Err(FormatError { line: i + 1, msg: "trailing content".into() });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escape_round_trip() {
        for s in ["plain", "a b", "back\\slash", "\t\n\r", "\\s"] {
            assert_eq!(unescape(&escape(s)).unwrap(), s);
            assert!(!escape(s).contains(char::is_whitespace));
        }
    }

    #[test]
    fn bad_escape() {
        assert!(unescape("a\\q").is_err());
        assert!(unescape("a\\").is_err());
    }

    #[test]
    fn header_mismatch() {
        let e = Reader::open("other v1\n", "tokenizer", 1).err().unwrap();
        assert_eq!(e.line, 1);
    }
}
