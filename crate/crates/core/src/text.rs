//! Tokenization shared by phrase extraction, the answerer and the encoder.

/// A token with half-open character offsets into its source string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token<'a> {
    pub text: &'a str,
    pub start: usize,
    pub end: usize,
}

impl Token<'_> {
    pub fn is_punct(&self) -> bool {
        !self.text.chars().any(char::is_alphanumeric)
    }

    pub fn is_capitalized(&self) -> bool {
        self.text.chars().next().is_some_and(char::is_uppercase)
    }

    pub fn lower(&self) -> String {
        self.text.to_lowercase()
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '[' || c == ']'
}

/// Splits on whitespace and isolates punctuation; apostrophes and hyphens
/// inside a word stay attached. `[MASK]` survives as a single token.
pub fn tokenize(s: &str) -> Vec<Token<'_>> {
    let chars: Vec<(usize, char)> = s.char_indices().collect();
    let byte_at = |ci: usize| chars.get(ci).map_or(s.len(), |(b, _)| *b);
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i].1;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if is_word_char(c) {
            i += 1;
            while i < chars.len() {
                let c = chars[i].1;
                let joiner = (c == '\'' || c == '-')
                    && chars.get(i + 1).is_some_and(|(_, n)| n.is_alphanumeric());
                if is_word_char(c) || joiner {
                    i += 1;
                } else {
                    break;
                }
            }
        } else {
            i += 1;
        }
        out.push(Token {
            text: &s[byte_at(start)..byte_at(i)],
            start,
            end: i,
        });
    }
    out
}

/// Character-offset slice; `None` when out of bounds.
pub fn char_slice(s: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut idx = s.char_indices().map(|(b, _)| b).chain(std::iter::once(s.len()));
    let b0 = idx.nth(start)?;
    let b1 = if end == start {
        b0
    } else {
        idx.nth(end - start - 1)?
    };
    Some(&s[b0..b1])
}

/// Replaces the character range `[start, end)` of `s` with `with`.
pub fn splice_chars(s: &str, start: usize, end: usize, with: &str) -> String {
    let mut out = String::with_capacity(s.len() + with.len());
    out.extend(s.chars().take(start));
    out.push_str(with);
    out.extend(s.chars().skip(end));
    out
}

pub fn char_len(s: &str) -> usize {
    s.chars().count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_and_offsets() {
        let toks = tokenize("Donald Trump won the 2020 election.");
        let words: Vec<_> = toks.iter().map(|t| t.text).collect();
        assert_eq!(words, ["Donald", "Trump", "won", "the", "2020", "election", "."]);
        assert_eq!((toks[6].start, toks[6].end), (34, 35));
        assert!(toks[6].is_punct());
    }

    #[test]
    fn mask_and_joiners() {
        let toks = tokenize("[MASK] won O'Neil's well-known prize.");
        let words: Vec<_> = toks.iter().map(|t| t.text).collect();
        assert_eq!(words, ["[MASK]", "won", "O'Neil's", "well-known", "prize", "."]);
    }

    #[test]
    fn char_offsets_on_unicode() {
        let s = "Zoë won.";
        let toks = tokenize(s);
        assert_eq!((toks[0].start, toks[0].end), (0, 3));
        assert_eq!(char_slice(s, 0, 3), Some("Zoë"));
        assert_eq!(char_slice(s, 4, 7), Some("won"));
        assert_eq!(char_slice(s, 7, 8), Some("."));
        assert_eq!(char_slice(s, 8, 8), Some(""));
        assert_eq!(char_slice(s, 7, 9), None);
        assert_eq!(splice_chars(s, 4, 7, "lost"), "Zoë lost.");
    }
}
