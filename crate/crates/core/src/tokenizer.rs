//! Greedy longest-match subword tokenizer with byte fallback.
//!
//! Only two things are needed from it: how many tokens a word splits into and
//! which id comes first. The vocabulary file is `token<TAB>id` per line; byte
//! tokens are written `<0xNN>`. When the file lists no byte tokens they are
//! appended after the largest id.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Vocabulary {
    entries: Vec<(String, u32)>,
    by_bytes: HashMap<Vec<u8>, u32>,
    by_id: HashMap<u32, Vec<u8>>,
    byte_fallback_base: u32,
    max_entry_len: usize,
}

fn parse_byte_token(token: &str) -> Option<u8> {
    let hex = token.strip_prefix("<0x")?.strip_suffix('>')?;
    if hex.len() != 2 {
        return None;
    }
    u8::from_str_radix(hex, 16).ok()
}

impl Vocabulary {
    /// Vocabulary holding only the 256 byte tokens, ids `base..base + 256`.
    pub fn bytes_only(base: u32) -> Self {
        Self::from_entries(Vec::new(), Some(base)).expect("byte vocabulary is valid")
    }

    /// Regular entries plus byte tokens at `base` (or after the largest id).
    pub fn from_entries(entries: Vec<(String, u32)>, byte_base: Option<u32>) -> Result<Self> {
        let mut by_bytes = HashMap::new();
        let mut by_id = HashMap::new();
        for (tok, id) in &entries {
            if tok.is_empty() {
                return Err(Error::Vocab("empty token".into()));
            }
            if by_id.insert(*id, tok.as_bytes().to_vec()).is_some() {
                return Err(Error::Vocab(format!("duplicate id {id}")));
            }
            by_bytes.entry(tok.as_bytes().to_vec()).or_insert(*id);
        }
        let base = match byte_base {
            Some(b) => b,
            None => entries.iter().map(|e| e.1 + 1).max().unwrap_or(0),
        };
        for b in 0..=255u8 {
            let id = base
                .checked_add(u32::from(b))
                .ok_or_else(|| Error::Vocab("byte ids overflow u32".into()))?;
            if by_id.insert(id, vec![b]).is_some() {
                return Err(Error::Vocab(format!("byte token id {id} collides")));
            }
        }
        let max_entry_len = entries.iter().map(|e| e.0.len()).max().unwrap_or(0);
        Ok(Vocabulary {
            entries,
            by_bytes,
            by_id,
            byte_fallback_base: base,
            max_entry_len,
        })
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::VocabParse {
            path: origin.to_string(),
            line,
            message,
        };
        let mut entries = Vec::new();
        let mut bytes: Vec<(u8, u32, usize)> = Vec::new();
        let mut seen_ids: HashMap<u32, usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            if raw.is_empty() {
                continue;
            }
            let (tok, id) = raw
                .rsplit_once('\t')
                .ok_or_else(|| err(lineno, "expected token<TAB>id".into()))?;
            let id: u32 = id
                .trim_end_matches('\r')
                .parse()
                .map_err(|_| err(lineno, format!("bad id {id:?}")))?;
            if tok.is_empty() {
                return Err(err(lineno, "empty token".into()));
            }
            if let Some(prev) = seen_ids.insert(id, lineno) {
                return Err(err(lineno, format!("duplicate id {id} (first on line {prev})")));
            }
            match parse_byte_token(tok) {
                Some(b) => bytes.push((b, id, lineno)),
                None => entries.push((tok.to_string(), id)),
            }
        }
        if entries.is_empty() && bytes.is_empty() {
            return Err(err(0, "vocabulary is empty".into()));
        }
        let base = if bytes.is_empty() {
            None
        } else {
            let base = bytes.iter().find(|b| b.0 == 0).map(|b| b.1).ok_or_else(|| {
                err(bytes[0].2, "byte tokens present but <0x00> missing".into())
            })?;
            let mut present = [false; 256];
            for &(b, id, lineno) in &bytes {
                if id != base + u32::from(b) {
                    return Err(err(
                        lineno,
                        format!("byte token <0x{b:02X}> must have id {}", base + u32::from(b)),
                    ));
                }
                present[b as usize] = true;
            }
            if let Some(missing) = present.iter().position(|p| !p) {
                return Err(err(0, format!("byte token <0x{missing:02X}> missing")));
            }
            Some(base)
        };
        Self::from_entries(entries, base).map_err(|e| err(0, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Number of distinct ids, byte tokens included.
    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn byte_fallback_base(&self) -> u32 {
        self.byte_fallback_base
    }

    pub fn entries(&self) -> &[(String, u32)] {
        &self.entries
    }

    pub fn lookup(&self, token: &str) -> Option<u32> {
        self.by_bytes.get(token.as_bytes()).copied()
    }

    pub fn byte_id(&self, b: u8) -> u32 {
        self.byte_fallback_base + u32::from(b)
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.by_id.get(&id).map(Vec::as_slice)
    }

    /// Greedy longest match, left to right, falling back to single bytes.
    pub fn encode(&self, word: &str) -> Vec<u32> {
        let bytes = word.as_bytes();
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < bytes.len() {
            let longest = self.max_entry_len.min(bytes.len() - pos);
            let hit = (1..=longest)
                .rev()
                .find_map(|n| self.by_bytes.get(&bytes[pos..pos + n]).map(|&id| (id, n)));
            match hit {
                Some((id, n)) => {
                    out.push(id);
                    pos += n;
                }
                None => {
                    out.push(self.byte_id(bytes[pos]));
                    pos += 1;
                }
            }
        }
        out
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<u8> {
        ids.iter()
            .filter_map(|id| self.token_bytes(*id))
            .flatten()
            .copied()
            .collect()
    }

    pub fn token_len(&self, word: &str) -> usize {
        self.encode(word).len()
    }

    /// Id of the first token of `word`; `None` only for the empty string.
    pub fn first_token(&self, word: &str) -> Option<u32> {
        self.encode(word).first().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn byte_lines(base: u32) -> String {
        (0..=255u32)
            .map(|b| format!("<0x{b:02X}>\t{}\n", base + b))
            .collect()
    }

    fn vocab(words: &[(&str, u32)]) -> Vocabulary {
        let entries = words.iter().map(|(w, i)| (w.to_string(), *i)).collect();
        Vocabulary::from_entries(entries, Some(1000)).unwrap()
    }

    #[test]
    fn bytes_only_file() {
        let v = Vocabulary::parse(&byte_lines(0), "t").unwrap();
        assert_eq!(v.len(), 256);
        assert_eq!(v.byte_fallback_base(), 0);
        assert_eq!(v.encode("ab"), vec![0x61, 0x62]);
    }

    #[test]
    fn lookup_from_file() {
        let text = format!("model\t500\n{}", byte_lines(1000));
        let v = Vocabulary::parse(&text, "t").unwrap();
        assert_eq!(v.lookup("model"), Some(500));
        assert_eq!(v.len(), 257);
    }

    #[test]
    fn byte_tokens_appended_when_absent() {
        let v = Vocabulary::parse("a\t3\nbc\t7\n", "t").unwrap();
        assert_eq!(v.byte_fallback_base(), 8);
        assert_eq!(v.encode("bcz"), vec![7, 8 + u32::from(b'z')]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let e = Vocabulary::parse("", "v.txt").unwrap_err();
        assert!(e.to_string().contains("empty"));
        let e = Vocabulary::parse("a\t1\nb\t1\n", "v.txt").unwrap_err();
        assert!(e.to_string().contains("v.txt:2"), "{e}");
        let e = Vocabulary::parse("a\t1\nnotab\n", "v.txt").unwrap_err();
        assert!(e.to_string().contains("v.txt:2"), "{e}");
        let e = Vocabulary::parse("a\tx\n", "v.txt").unwrap_err();
        assert!(e.to_string().contains("v.txt:1"), "{e}");
        let e = Vocabulary::parse("<0x00>\t5\n<0x01>\t9\n", "v.txt").unwrap_err();
        assert!(e.to_string().contains("v.txt:2"), "{e}");
    }

    #[test]
    fn greedy_longest_match() {
        let v = vocab(&[("mod", 1), ("el", 2), ("m", 3)]);
        assert_eq!(v.encode("model"), vec![1, 2]);
        assert_eq!(v.token_len("model"), 2);
        assert_eq!(v.first_token("model"), Some(1));

        let v = vocab(&[("model", 9)]);
        assert_eq!(v.encode("model"), vec![9]);
        assert_eq!(v.first_token("model"), Some(9));

        let v = Vocabulary::bytes_only(0);
        assert_eq!(v.token_len("ab"), 2);
        assert_eq!(v.first_token("x"), Some(u32::from(b'x')));
    }

    #[test]
    fn matching_is_case_and_space_sensitive() {
        let v = vocab(&[("the", 1), (" the", 2)]);
        assert_eq!(v.encode("the"), vec![1]);
        assert_eq!(v.encode(" the"), vec![2]);
        assert_eq!(v.first_token("The"), Some(1000 + u32::from(b'T')));
    }

    #[test]
    fn greedy_is_not_optimal() {
        // "abcd" greedy takes "abc" then d; the 2-token split "ab"+"cd" is never tried
        let v = vocab(&[("abc", 1), ("ab", 2), ("cd", 3)]);
        assert_eq!(v.encode("abcd"), vec![1, 1000 + u32::from(b'd')]);
    }

    proptest! {
        #[test]
        fn round_trip_and_consistency(bytes in proptest::collection::vec(any::<u8>(), 1..40)) {
            let v = vocab(&[("ab", 1), ("abc", 2), ("é", 3), ("xyz", 4), ("\u{0}", 5)]);
            let s = String::from_utf8_lossy(&bytes).into_owned();
            let ids = v.encode(&s);
            prop_assert_eq!(v.decode(&ids), s.as_bytes().to_vec());
            prop_assert_eq!(v.token_len(&s), ids.len());
            prop_assert_eq!(v.first_token(&s), ids.first().copied());
        }
    }
}
