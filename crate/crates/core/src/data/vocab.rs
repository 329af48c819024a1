use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const PERSONA_SEP: &str = "<p>";
pub const CONTEXT_START: &str = "<ctx>";
pub const UTTERANCE_SEP: &str = "<utt>";
pub const RESPONSE_START: &str = "<res>";
pub const UNK: &str = "<unk>";

/// Reserved tokens; they always occupy ids `0..8` in this order.
pub const SPECIAL_TOKENS: [&str; 8] = [PAD, BOS, EOS, PERSONA_SEP, CONTEXT_START, UTTERANCE_SEP, RESPONSE_START, UNK];

pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const EOS_ID: TokenId = 2;
pub const PERSONA_SEP_ID: TokenId = 3;
pub const CONTEXT_START_ID: TokenId = 4;
pub const UTTERANCE_SEP_ID: TokenId = 5;
pub const RESPONSE_START_ID: TokenId = 6;
pub const UNK_ID: TokenId = 7;

/// Bijective token ↔ id map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Specials followed by `words` in the given order; duplicates and words
    /// that collide with specials are skipped.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for t in SPECIAL_TOKENS {
            vocab.insert(t);
        }
        for w in words {
            vocab.insert(w.as_ref());
        }
        vocab
    }

    fn insert(&mut self, token: &str) {
        if !self.ids.contains_key(token) {
            self.ids.insert(token.to_string(), self.tokens.len());
            self.tokens.push(token.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(UNK)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Tokenizes then encodes.
    pub fn encode_text(&self, text: &str) -> Vec<TokenId> {
        self.encode(&super::tokenize(text))
    }

    pub fn decode_text(&self, ids: &[TokenId]) -> String {
        super::detokenize(&self.decode(ids))
    }

    /// Writes the vocabulary file: a JSON array of tokens in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string(&self.tokens)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = serde_json::from_str(&text)?;
        Self::from_tokens(tokens)
    }

    /// Rebuilds from an id-ordered token list, validating the special prefix.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len() || tokens[..SPECIAL_TOKENS.len()].iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b) {
            return Err(Error::Schema {
                line: 1,
                msg: format!("vocabulary must start with the special tokens {SPECIAL_TOKENS:?}"),
            });
        }
        let n = tokens.len();
        let vocab = Vocabulary::new(&tokens[SPECIAL_TOKENS.len()..]);
        if vocab.len() != n {
            return Err(Error::Schema {
                line: 1,
                msg: "vocabulary contains duplicate tokens".into(),
            });
        }
        Ok(vocab)
    }
}
