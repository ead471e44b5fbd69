//! Flat `key = value` text files.

use crate::error::{Result, UdacError};

/// `(line number, key, value)` for every non-blank, non-comment line.
pub fn parse(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| UdacError::Parse {
            line: i + 1,
            msg: format!("expected `key = value`, got {line:?}"),
        })?;
        out.push((i + 1, k.trim().to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skips_comments_and_blanks() {
        let p = parse("a = 1\n\n# x\nb=2 # trailing\n").unwrap();
        assert_eq!(p, vec![(1, "a".into(), "1".into()), (4, "b".into(), "2".into())]);
        assert!(parse("novalue").is_err());
    }
}
