//! CoNLL-style corpora, vocabularies and deterministic splits.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{PAD_ID, UNK_ID};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

impl Sentence {
    pub fn new(tokens: Vec<String>, tags: Vec<String>) -> Result<Self> {
        if tokens.len() != tags.len() {
            return Err(Error::Contract(format!(
                "{} tokens but {} tags",
                tokens.len(),
                tags.len()
            )));
        }
        Ok(Sentence { tokens, tags })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// One `token tag` pair per line (tab or spaces), blank line between
/// sentences.
pub fn parse_conll<R: BufRead>(reader: R) -> Result<Vec<Sentence>> {
    let mut out = Vec::new();
    let (mut tokens, mut tags) = (Vec::new(), Vec::new());
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            source_name: None,
            line: i + 1,
            msg: e.to_string(),
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !tokens.is_empty() {
                out.push(Sentence {
                    tokens: std::mem::take(&mut tokens),
                    tags: std::mem::take(&mut tags),
                });
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                source_name: None,
                line: i + 1,
                msg: format!("expected \"token tag\", found {} field(s) in {line:?}", fields.len()),
            });
        }
        tokens.push(fields[0].to_string());
        tags.push(fields[1].to_string());
    }
    if !tokens.is_empty() {
        out.push(Sentence { tokens, tags });
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("corpus contains no sentences".into()));
    }
    Ok(out)
}

pub fn read_conll(path: &Path) -> Result<Vec<Sentence>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_conll(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::EmptyInput(msg) => Error::EmptyInput(format!("{}: {msg}", path.display())),
        other => other.with_source_name(&path.display().to_string()),
    })
}

pub fn write_conll<W: Write>(mut w: W, sentences: &[Sentence]) -> std::io::Result<()> {
    for s in sentences {
        for (tok, tag) in s.tokens.iter().zip(&s.tags) {
            writeln!(w, "{tok} {tag}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Entity type of a tag such as `B-PER` or `I-LOC`; `None` for `O` and
/// anything without a one-letter prefix.
pub fn entity_type(tag: &str) -> Option<&str> {
    let (prefix, ty) = tag.split_once('-')?;
    (prefix.len() == 1 && !ty.is_empty()).then_some(ty)
}

/// Train split plus optional validation and test splits.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<Sentence>,
    pub valid: Vec<Sentence>,
    pub test: Vec<Sentence>,
}

impl Corpus {
    pub fn splits(&self) -> [(&'static str, &[Sentence]); 3] {
        [("train", &self.train), ("valid", &self.valid), ("test", &self.test)]
    }

    pub fn all(&self) -> impl Iterator<Item = &Sentence> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }
}

/// Token and tag indices. Ids 0 and 1 are padding and unknown; the rest
/// follow first occurrence. Tags start with `O`, then `B-X`, `I-X` per
/// entity type in first-occurrence order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    tags: Vec<String>,
    tag_index: HashMap<String, usize>,
}

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

impl Vocab {
    pub const RESERVED: usize = 2;

    /// Tokens from `token_source`, tags from every sentence in `tag_source`.
    pub fn build<'a>(
        token_source: impl IntoIterator<Item = &'a Sentence>,
        tag_source: impl IntoIterator<Item = &'a Sentence>,
    ) -> Self {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut index: HashMap<String, usize> = HashMap::new();
        index.insert(PAD_TOKEN.into(), PAD_ID);
        index.insert(UNK_TOKEN.into(), UNK_ID);
        for s in token_source {
            for t in &s.tokens {
                if !index.contains_key(t) {
                    index.insert(t.clone(), tokens.len());
                    tokens.push(t.clone());
                }
            }
        }
        let mut types: Vec<String> = Vec::new();
        let mut extra: Vec<String> = Vec::new();
        for s in tag_source {
            for tag in &s.tags {
                match entity_type(tag) {
                    Some(ty) if tag.starts_with("B-") || tag.starts_with("I-") => {
                        if !types.iter().any(|t| t == ty) {
                            types.push(ty.to_string());
                        }
                    }
                    _ if tag == "O" => {}
                    _ => {
                        if !extra.contains(tag) {
                            extra.push(tag.clone());
                        }
                    }
                }
            }
        }
        let mut tags = vec!["O".to_string()];
        for ty in &types {
            tags.push(format!("B-{ty}"));
            tags.push(format!("I-{ty}"));
        }
        tags.extend(extra);
        Vocab::from_lists(tokens, tags).expect("built lists are unique")
    }

    /// Rebuild from stored id-ordered lists.
    pub fn from_lists(tokens: Vec<String>, tags: Vec<String>) -> Result<Self> {
        if tokens.len() < Self::RESERVED || tokens[PAD_ID] != PAD_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err(Error::Checkpoint("vocabulary does not start with the reserved tokens".into()));
        }
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let tag_index: HashMap<String, usize> = tags.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() || tag_index.len() != tags.len() {
            return Err(Error::Checkpoint("duplicate vocabulary entries".into()));
        }
        Ok(Vocab {
            tokens,
            index,
            tags,
            tag_index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= Self::RESERVED
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn n_tags(&self) -> usize {
        self.tags.len()
    }

    pub fn token_id(&self, tok: &str) -> usize {
        self.index.get(tok).copied().unwrap_or(UNK_ID)
    }

    pub fn encode_tokens(&self, toks: &[String]) -> Vec<usize> {
        toks.iter().map(|t| self.token_id(t)).collect()
    }

    pub fn encode_tags(&self, tags: &[String]) -> Result<Vec<usize>> {
        tags.iter()
            .map(|t| {
                self.tag_index
                    .get(t)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("tag {t:?} is not in the tag set {:?}", self.tags)))
            })
            .collect()
    }

    pub fn decode_tags(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tags[i].clone()).collect()
    }
}

/// Sentence indices for each split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    /// Seeded shuffle of `0..n` cut at the given train and valid fractions
    /// (the remainder is test).
    pub fn random(n: usize, train_frac: f64, valid_frac: f64, seed: u64) -> Result<Self> {
        if !(train_frac > 0.0 && valid_frac >= 0.0 && train_frac + valid_frac <= 1.0) {
            return Err(Error::Config(format!(
                "invalid split fractions {train_frac} / {valid_frac}"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (n as f64 * train_frac).round() as usize;
        let n_valid = ((n as f64 * valid_frac).round() as usize).min(n - n_train);
        let valid = idx.split_off(n_train);
        let (valid, test) = valid.split_at(n_valid);
        Ok(SplitIndices {
            train: idx,
            valid: valid.to_vec(),
            test: test.to_vec(),
        })
    }

    /// 7 : 1.5 : 1.5.
    pub fn standard(n: usize, seed: u64) -> Result<Self> {
        Self::random(n, 0.7, 0.15, seed)
    }

    pub fn apply(&self, sentences: &[Sentence]) -> Result<Corpus> {
        let pick = |ids: &[usize]| -> Result<Vec<Sentence>> {
            ids.iter()
                .map(|&i| {
                    sentences
                        .get(i)
                        .cloned()
                        .ok_or_else(|| Error::Contract(format!("split index {i} out of range")))
                })
                .collect()
        };
        Ok(Corpus {
            train: pick(&self.train)?,
            valid: pick(&self.valid)?,
            test: pick(&self.test)?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            source_name: None,
            line: e.line(),
            msg: e.to_string(),
        })
    }
}
