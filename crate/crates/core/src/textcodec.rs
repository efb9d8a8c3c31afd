//! Word-level tokenizer with character-level digits and box punctuation.
//!
//! Coordinates are spelled one character per token, so `[0.250,` becomes
//! `[`, `0`, `.`, `2`, `5`, `0`, `,`. The `<region>` placeholder always maps to
//! the reserved [`PLACEHOLDER`] id.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const PLACEHOLDER: TokenId = 4;

pub const PLACEHOLDER_TEXT: &str = "<region>";
const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", PLACEHOLDER_TEXT];
const CHAR_TOKENS: [&str; 15] = [
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", ".", ",", "[", "]", "-",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() + CHAR_TOKENS.len()
            || tokens.iter().zip(RESERVED.iter().chain(CHAR_TOKENS.iter())).any(|(a, b)| a != b)
        {
            return Err(Error::Config("vocab does not start with the reserved and character tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate vocab entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyInput("vocabulary corpus"));
        }
        let mut tokens: Vec<String> = RESERVED.iter().chain(CHAR_TOKENS.iter()).map(|s| s.to_string()).collect();
        let mut index: HashMap<String, TokenId> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();
        for text in corpus {
            for piece in split_pieces(text.as_ref()) {
                if !index.contains_key(piece) {
                    index.insert(piece.to_string(), tokens.len() as TokenId);
                    tokens.push(piece.to_string());
                }
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.tokens).expect("string list serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Token ids plus a per-position flag saying whether the position is scored
/// by the loss.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub mask: Vec<bool>,
}

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>, scored: bool) -> Self {
        let mask = vec![scored; ids.len()];
        Self { ids, mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn placeholder_count(&self) -> usize {
        self.ids.iter().filter(|&&t| t == PLACEHOLDER).count()
    }
}

/// Splits text into vocabulary pieces: letter runs, the placeholder literal,
/// and single characters for everything else.
fn split_pieces(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut i = 0;
    let bytes = text.as_bytes();
    while i < text.len() {
        let rest = &text[i..];
        let c = rest.chars().next().expect("non-empty");
        if c.is_whitespace() {
            i += c.len_utf8();
        } else if rest.starts_with(PLACEHOLDER_TEXT) {
            out.push(&rest[..PLACEHOLDER_TEXT.len()]);
            i += PLACEHOLDER_TEXT.len();
        } else if c.is_alphabetic() {
            let end = rest
                .char_indices()
                .find(|(_, ch)| !ch.is_alphabetic())
                .map_or(rest.len(), |(j, _)| j);
            out.push(&rest[..end]);
            i += end;
        } else {
            let n = c.len_utf8();
            out.push(&text[i..i + n]);
            i += n;
        }
        debug_assert!(i <= bytes.len());
    }
    out
}

pub fn tokenize(text: &str, v: &Vocab) -> TokenSeq {
    let ids = split_pieces(text).into_iter().map(|p| v.id(p).unwrap_or(UNK)).collect();
    TokenSeq::new(ids, false)
}

/// Characters that never take a space on their left.
fn glue_left(t: &str) -> bool {
    matches!(t, "]" | "," | "." | "-")
}

/// Characters that never take a space on their right.
fn glue_right(t: &str) -> bool {
    matches!(t, "[" | "," | "." | "-")
}

fn is_digit_token(t: &str) -> bool {
    t.len() == 1 && t.as_bytes()[0].is_ascii_digit()
}

/// Inverse of [`tokenize`] up to whitespace normalization. Control tokens
/// (pad, bos, eos) are dropped.
pub fn detokenize(ids: &[TokenId], v: &Vocab) -> String {
    let mut out = String::new();
    let mut prev: Option<&str> = None;
    for &id in ids {
        if matches!(id, PAD | BOS | EOS) {
            continue;
        }
        let tok = v.token(id).unwrap_or(RESERVED[UNK as usize]);
        if let Some(p) = prev {
            let tight = glue_right(p) || glue_left(tok) || (is_digit_token(p) && is_digit_token(tok));
            if !tight {
                out.push(' ');
            }
        }
        out.push_str(tok);
        prev = Some(tok);
    }
    out
}

pub fn count_tokens(text: &str, v: &Vocab) -> usize {
    tokenize(text, v).len()
}

/// True for tokens that make up serialized coordinates.
pub fn is_coordinate_token(id: TokenId) -> bool {
    (RESERVED.len() as TokenId..(RESERVED.len() + CHAR_TOKENS.len()) as TokenId).contains(&id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(&["locate the cat", "locate all cat <region> count"]).unwrap()
    }

    #[test]
    fn build_contains_words_and_reserved() {
        let v = Vocab::build(&["locate the cat"]).unwrap();
        for w in ["locate", "the", "cat", "0", "9", ".", ",", "[", "]", "-"] {
            assert!(v.id(w).is_some(), "{w}");
        }
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<region>"), Some(PLACEHOLDER));
        assert_eq!(v.len(), 5 + 15 + 3);
        assert_eq!(Vocab::build(&["locate the cat"]).unwrap(), v);
    }

    #[test]
    fn placeholder_is_reserved() {
        let v = Vocab::build(&["count <region> now"]).unwrap();
        assert_eq!(v.len(), 5 + 15 + 2);
        assert_eq!(tokenize("<region>", &v).ids, vec![PLACEHOLDER]);
    }

    #[test]
    fn coordinates_split_per_character() {
        let v = vocab();
        let seq = tokenize("[0.250,", &v);
        let toks: Vec<&str> = seq.ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(toks, ["[", "0", ".", "2", "5", "0", ","]);
    }

    #[test]
    fn round_trips() {
        let v = vocab();
        assert_eq!(detokenize(&tokenize("locate all cat", &v).ids, &v), "locate all cat");
        let t = "cat-[0.100,0.200,0.300,0.400] cat-[0.500,0.500,0.600,0.600]";
        assert_eq!(detokenize(&tokenize(t, &v).ids, &v), t);
        assert_eq!(detokenize(&tokenize("count <region>", &v).ids, &v), "count <region>");
        assert_eq!(detokenize(&tokenize("  locate   the\ncat ", &v).ids, &v), "locate the cat");
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = vocab();
        assert_eq!(tokenize("locate dog", &v).ids[1], UNK);
    }

    #[test]
    fn count_cases() {
        let v = vocab();
        assert_eq!(count_tokens("", &v), 0);
        let coord = "[0.250,0.250,0.750,0.750]";
        // Every character is its own token.
        assert_eq!(count_tokens(coord, &v), coord.chars().count());
        assert_eq!(count_tokens(coord, &v), 25);
        let (a, b) = ("locate the cat", "cat [0.1,0.2,0.3,0.4]");
        assert_eq!(count_tokens(&format!("{a} {b}"), &v), count_tokens(a, &v) + count_tokens(b, &v));
    }

    #[test]
    fn json_round_trip() {
        let v = vocab();
        let back = Vocab::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
        assert!(Vocab::from_json(r#"["a","b"]"#).is_err());
    }

    mod props {
        use super::*;
        use crate::geometry::{encode_box, BoxNorm};
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn coord_text_round_trips(x in 0.0..0.5f64, y in 0.0..0.5f64, w in 0.01..0.5f64, h in 0.01..0.5f64) {
                let v = vocab();
                let b = BoxNorm::new(x, y, x + w, y + h).unwrap();
                let text = encode_box(&b, 3).0;
                let seq = tokenize(&text, &v);
                prop_assert!(seq.ids.iter().all(|&i| i != UNK));
                prop_assert_eq!(detokenize(&seq.ids, &v), text);
            }

            #[test]
            fn detokenize_is_a_normal_form(words in proptest::collection::vec("[a-z]{1,5}|[0-9]|\\[|\\]|,|-|\\.", 0..20)) {
                let v = Vocab::build(&[words.join(" ")]).unwrap();
                let text = words.join(" ");
                let once = detokenize(&tokenize(&text, &v).ids, &v);
                let twice = detokenize(&tokenize(&once, &v).ids, &v);
                prop_assert_eq!(once, twice);
            }
        }
    }
}
