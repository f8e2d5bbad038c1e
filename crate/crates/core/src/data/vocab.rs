use std::collections::HashMap;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const SEP_ID: usize = 4;

const RESERVED: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<sep>"];

/// Lowercases and splits text into word tokens. Runs of letters form one
/// token; every digit and every punctuation mark is a token of its own.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphabetic() || (ch.is_alphanumeric() && !ch.is_ascii_digit()) {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Keeps the `max_size - 5` most frequent tokens of `corpus` (ties broken
    /// lexicographically) after the reserved ids.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for tok in split_tokens(text.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let keep = max_size.saturating_sub(RESERVED.len());
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(keep).map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens).expect("built vocabularies are well-formed")
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Option<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return None;
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) || index.insert(t.clone(), i).is_some() {
                return None;
            }
        }
        Some(Self { index, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_tokens(text).iter().map(|t| self.id(t)).collect()
    }

    /// Space-joined tokens; reserved ids other than unk are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= RESERVED.len() || i == UNK_ID)
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
