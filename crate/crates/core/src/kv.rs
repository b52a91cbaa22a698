//! Flat `key=value` text files: one pair per line, `#` starts a comment,
//! blank lines are ignored.

use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    /// 1-based source line, 0 for entries that did not come from a file.
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
            line,
            msg: format!("expected key=value, found `{content}`"),
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config {
                line,
                msg: "empty key".into(),
            });
        }
        if out.iter().any(|e: &Entry| e.key == key) {
            return Err(Error::Config {
                line,
                msg: format!("duplicate key `{key}`"),
            });
        }
        out.push(Entry {
            line,
            key: key.to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

/// Parses `entry.value`, reporting failures against the entry's line.
pub fn value<T: FromStr>(entry: &Entry) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    entry.value.parse().map_err(|e| Error::Config {
        line: entry.line,
        msg: format!("bad value for `{}`: {e}", entry.key),
    })
}

/// Parses `0/1/true/false`.
pub fn flag(entry: &Entry) -> Result<bool> {
    match entry.value.as_str() {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        other => Err(Error::Config {
            line: entry.line,
            msg: format!("bad boolean for `{}`: {other}", entry.key),
        }),
    }
}

pub fn unknown_key(entry: &Entry) -> Error {
    Error::Config {
        line: entry.line,
        msg: format!("unknown key `{}`", entry.key),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_comments_and_blanks() {
        let e = parse("# header\n a = 1 \n\nb=x # trailing\n").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].line, e[0].key.as_str(), e[0].value.as_str()), (2, "a", "1"));
        assert_eq!((e[1].line, e[1].key.as_str(), e[1].value.as_str()), (4, "b", "x"));
        assert_eq!(value::<u32>(&e[0]).unwrap(), 1);
    }

    #[test]
    fn reports_line_numbers() {
        match parse("a=1\nbroken\n") {
            Err(Error::Config { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse("a=1\na=2\n") {
            Err(Error::Config { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let e = parse("\n\nn=abc").unwrap();
        match value::<usize>(&e[0]) {
            Err(Error::Config { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn flags() {
        let e = parse("a=true\nb=0\nc=yes").unwrap();
        assert!(flag(&e[0]).unwrap());
        assert!(!flag(&e[1]).unwrap());
        assert!(flag(&e[2]).is_err());
    }
}
