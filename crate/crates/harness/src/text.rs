//! Line records shared by the track file and the clip manifest:
//!
//! ```text
//! record := tag (' ' key '=' value)*
//! ```
//!
//! Values contain no whitespace. Blank lines and lines starting with `#`
//! are ignored. Every tag has a fixed key order.

use crate::error::{parse_err, Result};

#[derive(Debug)]
pub(crate) struct Record<'a> {
    pub tag: &'a str,
    pub fields: Vec<(&'a str, &'a str)>,
    pub line: usize,
    what: &'static str,
}

pub(crate) fn records<'a>(text: &'a str, what: &'static str) -> Result<Vec<Record<'a>>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let body = raw.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let mut tokens = body.split_whitespace();
        let tag = tokens.next().expect("non-empty line");
        let fields = tokens
            .map(|tok| {
                tok.split_once('=')
                    .filter(|(k, v)| !k.is_empty() && !v.is_empty())
                    .ok_or_else(|| parse_err(what, i + 1, format!("expected key=value, got {tok:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Record {
            tag,
            fields,
            line: i + 1,
            what,
        });
    }
    Ok(out)
}

impl<'a> Record<'a> {
    pub fn err(&self, msg: impl Into<String>) -> crate::error::HarnessError {
        parse_err(self.what, self.line, msg)
    }

    /// Values of `keys`, which must be exactly this record's keys in order.
    pub fn expect(&self, tag: &str, keys: &[&str]) -> Result<Vec<&'a str>> {
        if self.tag != tag {
            return Err(self.err(format!("expected `{tag}`, got `{}`", self.tag)));
        }
        let got: Vec<&str> = self.fields.iter().map(|f| f.0).collect();
        if got != keys {
            return Err(self.err(format!("`{tag}` needs fields {keys:?}, got {got:?}")));
        }
        Ok(self.fields.iter().map(|f| f.1).collect())
    }

    pub fn usize(&self, v: &str) -> Result<usize> {
        v.parse().map_err(|_| self.err(format!("bad integer {v:?}")))
    }

    pub fn f64(&self, v: &str) -> Result<f64> {
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            _ => Err(self.err(format!("bad number {v:?}"))),
        }
    }

    pub fn list(&self, v: &str) -> Result<Vec<f64>> {
        v.split(',').map(|s| self.f64(s)).collect()
    }

    pub fn bbox(&self, v: &str) -> Result<[f64; 4]> {
        let l = self.list(v)?;
        l.try_into().map_err(|_| self.err(format!("box needs 4 values: {v:?}")))
    }

    pub fn bool(&self, v: &str) -> Result<bool> {
        match v {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(self.err(format!("bad boolean {v:?}"))),
        }
    }

    /// A file name without path separators.
    pub fn file_name(&self, v: &'a str) -> Result<&'a str> {
        if v.contains(['/', '\\']) || v.starts_with('.') {
            return Err(self.err(format!("{v:?} is not a plain file name")));
        }
        Ok(v)
    }
}

pub(crate) fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Checks the leading `format name=... version=1` record.
pub(crate) fn expect_format(recs: &[Record<'_>], name: &str, what: &'static str) -> Result<()> {
    let first = recs.first().ok_or_else(|| parse_err(what, 0, "empty file"))?;
    let v = first.expect("format", &["name", "version"])?;
    if v != [name, "1"] {
        return Err(first.err(format!("expected {name} version 1, got {} version {}", v[0], v[1])));
    }
    Ok(())
}
