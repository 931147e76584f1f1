use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::layers::{PAD_ID, UNK_ID};

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token ↔ id mapping. Ids are dense; `0` is padding and `1` unknown.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
    counts: Vec<usize>,
}

impl Vocab {
    /// Ranks tokens by descending frequency, ties broken by first occurrence,
    /// and keeps at most `max_size` entries including the two specials.
    pub fn build<'c, I, S>(sequences: I, max_size: Option<usize>) -> Result<Self>
    where
        I: IntoIterator<Item = &'c [S]>,
        S: AsRef<str> + 'c,
    {
        if let Some(cap) = max_size {
            if cap < 3 {
                return Err(Error::Config(format!(
                    "vocabulary cap must be at least 3, got {cap}"
                )));
            }
        }
        let mut stats: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut order = 0usize;
        let mut seen_any = false;
        for seq in sequences {
            seen_any = true;
            for tok in seq {
                let tok = tok.as_ref();
                let entry = stats.entry(tok).or_insert((0, order));
                entry.0 += 1;
                order += 1;
            }
        }
        if !seen_any {
            return Err(Error::Contract(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut ranked: Vec<_> = stats
            .into_iter()
            .filter(|(t, _)| *t != PAD_TOKEN && *t != UNK_TOKEN)
            .collect();
        ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
        if let Some(cap) = max_size {
            ranked.truncate(cap - 2);
        }

        let mut vocab = Vocab::specials_only();
        for (tok, (count, _)) in ranked {
            vocab.index.insert(tok.to_string(), vocab.tokens.len());
            vocab.tokens.push(tok.to_string());
            vocab.counts.push(count);
        }
        Ok(vocab)
    }

    fn specials_only() -> Self {
        let tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let index = tokens
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, t)| (t, i))
            .collect();
        debug_assert_eq!((PAD_ID, UNK_ID), (0, 1));
        Vocab {
            index,
            tokens,
            counts: vec![0, 0],
        }
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err(Error::Contract(
                "token list must start with the padding and unknown tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate token `{t}`")));
            }
        }
        let counts = vec![0; tokens.len()];
        Ok(Vocab {
            index,
            tokens,
            counts,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn count(&self, id: usize) -> usize {
        self.counts.get(id).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }
}
