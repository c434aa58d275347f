use crate::error::{Error, Result};

use super::tokens;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LengthReport {
    /// `mean(len_a) / mean(len_b)` in tokens.
    pub ratio: f64,
    /// `mean(len_b − len_a)` in tokens per utterance.
    pub token_diff: f64,
    pub utterances: usize,
}

/// Compares two line-aligned output sets.
pub fn length_report<S: AsRef<str>, U: AsRef<str>>(a: &[S], b: &[U]) -> Result<LengthReport> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "output sets are not aligned: {} vs {} utterances",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::InvalidInput("no utterances to compare".into()));
    }
    let la: usize = a.iter().map(|s| tokens(s.as_ref()).len()).sum();
    let lb: usize = b.iter().map(|s| tokens(s.as_ref()).len()).sum();
    let n = a.len() as f64;
    let ratio = if lb == 0 {
        if la == 0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        la as f64 / lb as f64
    };
    Ok(LengthReport {
        ratio,
        token_diff: (lb as f64 - la as f64) / n,
        utterances: a.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sets() {
        let a = ["a b c", "d e"];
        let r = length_report(&a, &a).unwrap();
        assert_eq!((r.ratio, r.token_diff), (1.0, 0.0));
    }

    #[test]
    fn one_token_removed_each() {
        let b = ["um a b c", "d uh e"];
        let a = ["a b c", "d e"];
        let r = length_report(&a, &b).unwrap();
        assert_eq!(r.token_diff, 1.0);
        assert!((r.ratio - 5.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn misaligned_sets_rejected() {
        assert!(length_report(&["a"], &["a", "b"]).is_err());
    }
}
