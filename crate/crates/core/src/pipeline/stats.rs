//! Corpus statistics in the dataset-properties table layout.

use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use super::corpus::{entity_type, Corpus, Sentence};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub name: String,
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    pub valid: usize,
    /// True when the validation split is the test split reused.
    pub valid_is_test: bool,
    pub avg_len: f64,
    pub max_len: usize,
    pub min_len: usize,
}

/// Entity types, split sizes and token-length summary.
///
/// Lengths are pooled over every distinct sentence list, so an aliased
/// validation split is not counted twice.
pub fn corpus_stats(name: &str, corpus: &Corpus, valid_is_test: bool) -> CorpusStats {
    let pooled: Vec<&Sentence> = if valid_is_test {
        corpus.train.iter().chain(&corpus.test).collect()
    } else {
        corpus.all().collect()
    };
    let classes: BTreeSet<&str> = pooled
        .iter()
        .flat_map(|s| s.tags.iter().filter_map(|t| entity_type(t)))
        .collect();
    let lens: Vec<usize> = pooled.iter().map(|s| s.len()).collect();
    let avg_len = if lens.is_empty() {
        0.0
    } else {
        lens.iter().sum::<usize>() as f64 / lens.len() as f64
    };
    CorpusStats {
        name: name.to_string(),
        classes: classes.len(),
        train: corpus.train.len(),
        test: corpus.test.len(),
        valid: if valid_is_test { corpus.test.len() } else { corpus.valid.len() },
        valid_is_test,
        avg_len,
        max_len: lens.iter().copied().max().unwrap_or(0),
        min_len: lens.iter().copied().min().unwrap_or(0),
    }
}

/// Datasets as columns, properties as rows.
pub struct StatsTable<'a>(pub &'a [CorpusStats]);

impl fmt::Display for StatsTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let row = |f: &mut fmt::Formatter<'_>, label: &str, cell: &dyn Fn(&CorpusStats) -> String| {
            write!(f, "{label:<12}")?;
            for s in self.0 {
                write!(f, " {:>12}", cell(s))?;
            }
            writeln!(f)
        };
        row(f, "datasets", &|s| s.name.clone())?;
        row(f, "class", &|s| s.classes.to_string())?;
        row(f, "train", &|s| s.train.to_string())?;
        row(f, "test", &|s| s.test.to_string())?;
        row(f, "valid", &|s| s.valid.to_string())?;
        row(f, "avg length", &|s| format!("{:.2}", s.avg_len))?;
        row(f, "max length", &|s| s.max_len.to_string())?;
        row(f, "min length", &|s| s.min_len.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sent(n: usize, tag: &str) -> Sentence {
        Sentence {
            tokens: vec!["x".into(); n],
            tags: vec![tag.into(); n],
        }
    }

    #[test]
    fn single_sentence() {
        let c = Corpus {
            train: vec![sent(3, "O")],
            ..Default::default()
        };
        let s = corpus_stats("one", &c, false);
        assert_eq!((s.avg_len, s.max_len, s.min_len, s.classes), (3.0, 3, 3, 0));
    }

    #[test]
    fn pooled_and_aliased() {
        let c = Corpus {
            train: vec![sent(2, "B-PER"), sent(4, "I-LOC")],
            valid: vec![],
            test: vec![sent(9, "B-ORG")],
        };
        let s = corpus_stats("c", &c, true);
        assert_eq!((s.train, s.valid, s.test, s.classes), (2, 1, 1, 3));
        assert_eq!((s.min_len, s.max_len), (2, 9));
        assert!((s.avg_len - 5.0).abs() < 1e-12);
        let text = StatsTable(&[s]).to_string();
        assert!(text.contains("avg length") && text.contains("5.00"), "{text}");
    }
}
