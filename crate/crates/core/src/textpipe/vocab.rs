use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::ops::Range;

use super::TextError;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const MASK: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["[PAD]", "[CLS]", "[MASK]", "[UNK]"];
const MAX_PIECE: usize = 4;
const CONTINUATION: &str = "##";

/// Lowercases `text` and splits it on every non-alphanumeric character.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Token table with the four reserved ids first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self, TextError> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(TextError::Format(format!(
                "first lines must be {}",
                SPECIALS.join(", ")
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(TextError::Format(format!("empty token on line {}", i + 1)));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(TextError::Format(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Builds a vocabulary from captions: at most `max_words` whole words by
    /// descending frequency (ties lexicographic), then every character seen,
    /// as a leading piece and as a `##` continuation, so any word made of
    /// known characters can still be spelled out.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, max_words: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for w in normalize_words(line) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut chars: Vec<char> = words.iter().flat_map(|(w, _)| w.chars()).collect();
        chars.sort_unstable();
        chars.dedup();

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().take(max_words).map(|(w, _)| w));
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for c in &chars {
            for piece in [c.to_string(), format!("{CONTINUATION}{c}")] {
                if seen.insert(piece.clone()) {
                    tokens.push(piece);
                }
            }
        }
        Self::from_tokens(tokens).expect("built tokens are unique and start with the specials")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Pieces for one normalized word: the word itself when known, else a
    /// greedy longest-match split into pieces of at most four characters,
    /// else `[UNK]`.
    fn pieces(&self, word: &str) -> Vec<u32> {
        if let Some(id) = self.id(word) {
            return vec![id];
        }
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let longest = (1..=MAX_PIECE.min(chars.len() - start)).rev().find_map(|len| {
                let body: String = chars[start..start + len].iter().collect();
                let piece = if start == 0 {
                    body
                } else {
                    format!("{CONTINUATION}{body}")
                };
                self.id(&piece).map(|id| (id, len))
            });
            match longest {
                Some((id, len)) => {
                    out.push(id);
                    start += len;
                }
                None => return vec![UNK],
            }
        }
        out
    }

    /// Human-readable rendering, used for logs and debugging.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == PAD || id == CLS {
                continue;
            }
            let tok = self.token(id).unwrap_or("[UNK]");
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) => out.push_str(rest),
                None => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        out
    }

    /// One token per line; the line number is the id.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), TextError> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self, TextError> {
        let tokens = r.lines().collect::<Result<Vec<_>, _>>()?;
        Self::from_tokens(tokens)
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("tokens are utf-8")
    }

    pub fn from_text(text: &str) -> Result<Self, TextError> {
        Self::read_from(text.as_bytes())
    }
}

/// `[CLS]` followed by word pieces and `[PAD]` up to `L_max`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextSequence {
    pub ids: Vec<u32>,
    /// Token span of every whole word, in order.
    pub word_groups: Vec<Range<usize>>,
    /// `[CLS]` plus real tokens; everything after is padding.
    pub length: usize,
}

impl TextSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_pad(&self, position: usize) -> bool {
        position >= self.length
    }
}

/// Tokenizes `text`, truncating at word boundaries to fit `max_len`.
/// A first word longer than the budget keeps its leading pieces.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TextSequence, TextError> {
    if max_len < 2 {
        return Err(TextError::Config(format!(
            "max_len {max_len} leaves no room after [CLS]"
        )));
    }
    let mut ids = vec![CLS];
    let mut word_groups = Vec::new();
    for word in normalize_words(text) {
        let mut pieces = vocab.pieces(&word);
        let room = max_len - ids.len();
        if pieces.len() > room {
            if !word_groups.is_empty() {
                break;
            }
            pieces.truncate(room);
        }
        let start = ids.len();
        ids.extend(pieces);
        word_groups.push(start..ids.len());
        if ids.len() == max_len {
            break;
        }
    }
    if word_groups.is_empty() {
        ids.push(UNK);
        word_groups.push(1..2);
    }
    let length = ids.len();
    ids.resize(max_len, PAD);
    Ok(TextSequence {
        ids,
        word_groups,
        length,
    })
}
