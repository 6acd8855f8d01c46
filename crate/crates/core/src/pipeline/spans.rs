//! BIO span decoding and exact-match span scoring.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};

/// Half-open token range `[start, end)` with an entity type.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl Span {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        Span {
            start,
            end,
            label: label.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    /// A stray `I-X` is an error.
    Strict,
    /// A stray `I-X` opens a new span, as conlleval does.
    Lenient,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(DecodeMode::Strict),
            "lenient" => Ok(DecodeMode::Lenient),
            _ => Err(Error::Config(format!("decode mode {s:?} (expected strict or lenient)"))),
        }
    }
}

/// Maximal `B-X (I-X)*` runs.
///
/// Lenient mode also reads the `S-`/`E-`/`M-` prefixes of BIOES-style
/// files as single-token starts and continuations.
pub fn decode_spans(tags: &[String], mode: DecodeMode) -> Result<Vec<Span>> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    let close = |open: &mut Option<(usize, &str)>, end: usize, spans: &mut Vec<Span>| {
        if let Some((s, ty)) = open.take() {
            spans.push(Span::new(s, end, ty));
        }
    };
    for (i, tag) in tags.iter().enumerate() {
        if tag == "O" {
            close(&mut open, i, &mut spans);
            continue;
        }
        let bad = || Error::TaggingScheme {
            position: i,
            tag: tag.clone(),
        };
        let (prefix, ty) = tag.split_once('-').filter(|(_, t)| !t.is_empty()).ok_or_else(bad)?;
        let prefix = match (mode, prefix) {
            (_, "B") | (_, "I") => prefix,
            (DecodeMode::Lenient, "S") => "B",
            (DecodeMode::Lenient, "M") | (DecodeMode::Lenient, "E") => "I",
            _ => return Err(bad()),
        };
        match prefix {
            "B" => {
                close(&mut open, i, &mut spans);
                open = Some((i, ty));
            }
            _ => match open {
                Some((_, t)) if t == ty => {}
                _ => {
                    if mode == DecodeMode::Strict {
                        return Err(bad());
                    }
                    close(&mut open, i, &mut spans);
                    open = Some((i, ty));
                }
            },
        }
    }
    close(&mut open, tags.len(), &mut spans);
    Ok(spans)
}

/// Precision, recall and F1 with their counts; 0/0 is 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl Prf {
    pub fn from_counts(gold: usize, predicted: usize, correct: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
            gold,
            predicted,
            correct,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub micro: Prf,
    pub per_type: BTreeMap<String, Prf>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>8} {:>8} {:>8} {:>6} {:>6} {:>6}", "type", "P", "R", "F1", "gold", "pred", "corr")?;
        let row = |f: &mut fmt::Formatter<'_>, name: &str, p: &Prf| {
            writeln!(
                f,
                "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>6} {:>6} {:>6}",
                name, p.precision, p.recall, p.f1, p.gold, p.predicted, p.correct
            )
        };
        for (name, p) in &self.per_type {
            row(f, name, p)?;
        }
        row(f, "micro", &self.micro)
    }
}

/// Exact-match span scoring, micro-averaged over the corpus.
pub fn span_prf(gold: &[Vec<Span>], pred: &[Vec<Span>]) -> Result<EvalReport> {
    if gold.len() != pred.len() {
        return Err(Error::Contract(format!(
            "{} gold sentences but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let mut counts: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        for s in g {
            counts.entry(s.label.clone()).or_default().0 += 1;
        }
        for s in p {
            let e = counts.entry(s.label.clone()).or_default();
            e.1 += 1;
            if g.contains(s) {
                e.2 += 1;
            }
        }
    }
    let (mut tg, mut tp, mut tc) = (0, 0, 0);
    let per_type = counts
        .into_iter()
        .map(|(k, (g, p, c))| {
            tg += g;
            tp += p;
            tc += c;
            (k, Prf::from_counts(g, p, c))
        })
        .collect();
    Ok(EvalReport {
        micro: Prf::from_counts(tg, tp, tc),
        per_type,
    })
}
