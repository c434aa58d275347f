use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpanKind {
    Same,
    /// Present only in the first text.
    Deleted,
    /// Present only in the second text.
    Inserted,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Span {
    pub kind: SpanKind,
    pub text: String,
}

/// Character-level LCS alignment of two strings as merged spans.
pub fn diff_pair(a: &str, b: &str) -> Vec<Span> {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let (n, m) = (a.len(), b.len());
    let mut dp = vec![0u32; (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in 1..=n {
        for j in 1..=m {
            dp[at(i, j)] = if a[i - 1] == b[j - 1] {
                dp[at(i - 1, j - 1)] + 1
            } else {
                dp[at(i - 1, j)].max(dp[at(i, j - 1)])
            };
        }
    }
    let mut ops = Vec::with_capacity(n + m);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && a[i - 1] == b[j - 1] && dp[at(i, j)] == dp[at(i - 1, j - 1)] + 1 {
            ops.push((SpanKind::Same, a[i - 1]));
            i -= 1;
            j -= 1;
        } else if i > 0 && (j == 0 || dp[at(i - 1, j)] >= dp[at(i, j - 1)]) {
            ops.push((SpanKind::Deleted, a[i - 1]));
            i -= 1;
        } else {
            ops.push((SpanKind::Inserted, b[j - 1]));
            j -= 1;
        }
    }
    ops.reverse();
    let mut spans: Vec<Span> = Vec::new();
    for (kind, c) in ops {
        match spans.last_mut() {
            Some(s) if s.kind == kind => s.text.push(c),
            _ => spans.push(Span {
                kind,
                text: c.to_string(),
            }),
        }
    }
    spans
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiffReport {
    pub pairs: Vec<Vec<Span>>,
}

impl DiffReport {
    /// Characters inside deletion or insertion spans, per utterance.
    pub fn highlighted_chars(&self) -> Vec<usize> {
        self.pairs
            .iter()
            .map(|spans| {
                spans
                    .iter()
                    .filter(|s| s.kind != SpanKind::Same)
                    .map(|s| s.text.chars().count())
                    .sum()
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, spans) in self.pairs.iter().enumerate() {
            let _ = write!(out, "{}\t", i + 1);
            for s in spans {
                match s.kind {
                    SpanKind::Same => out.push_str(&s.text),
                    SpanKind::Deleted => {
                        let _ = write!(out, "[-{}-]", s.text);
                    }
                    SpanKind::Inserted => {
                        let _ = write!(out, "{{+{}+}}", s.text);
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_html(&self) -> String {
        let mut out = String::from(
            "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>diff report</title>\n<style>\n\
             body{font-family:monospace}td{padding:2px 8px;vertical-align:top}\n\
             del{background:#fbb;text-decoration:none}ins{background:#bfb;text-decoration:none}\n\
             </style></head><body>\n<table>\n",
        );
        for (i, spans) in self.pairs.iter().enumerate() {
            let mut left = String::new();
            let mut right = String::new();
            for s in spans {
                let t = escape(&s.text);
                match s.kind {
                    SpanKind::Same => {
                        left.push_str(&t);
                        right.push_str(&t);
                    }
                    SpanKind::Deleted => {
                        let _ = write!(left, "<del>{t}</del>");
                    }
                    SpanKind::Inserted => {
                        let _ = write!(right, "<ins>{t}</ins>");
                    }
                }
            }
            let _ = writeln!(out, "<tr><td>{}</td><td>{left}</td><td>{right}</td></tr>", i + 1);
        }
        out.push_str("</table>\n</body></html>\n");
        out
    }
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

pub fn diff_report<S: AsRef<str>, U: AsRef<str>>(a: &[S], b: &[U]) -> Result<DiffReport> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "output sets are not aligned: {} vs {} utterances",
            a.len(),
            b.len()
        )));
    }
    Ok(DiffReport {
        pairs: a.iter().zip(b).map(|(x, y)| diff_pair(x.as_ref(), y.as_ref())).collect(),
    })
}

/// Writes the HTML report to `out_path` and the plain-text variant next to
/// it with a `.txt` extension. Returns the text path.
pub fn write_diff_report<S: AsRef<str>, U: AsRef<str>>(a: &[S], b: &[U], out_path: &Path) -> Result<PathBuf> {
    let report = diff_report(a, b)?;
    std::fs::write(out_path, report.to_html()).map_err(|e| Error::io(out_path, e))?;
    let text_path = out_path.with_extension("txt");
    std::fs::write(&text_path, report.to_text()).map_err(|e| Error::io(&text_path, e))?;
    Ok(text_path)
}
