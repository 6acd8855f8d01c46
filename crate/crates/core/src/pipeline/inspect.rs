//! Line-delimited text dump of one sentence's attention traces.
//!
//! Every line is tab-separated. Header lines are `tokens`, `tags` and one
//! `span` line per decoded span (`start end label`, end exclusive). Tensor
//! lines are `<stage> <tensor> <row> <values>` where values are
//! space-separated and printed in shortest round-trip form.

use std::fmt::Write;

use super::spans::{decode_spans, DecodeMode};
use crate::error::Result;
use crate::model::Model;
use crate::numerics::Tensor;

pub const STAGE_NAMES: [&str; 2] = ["local", "global"];

fn rows(out: &mut String, stage: &str, name: &str, t: &Tensor) {
    let cols = t.shape().last().copied().unwrap_or(1).max(1);
    for (i, row) in t.data().chunks(cols).enumerate() {
        let values: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{stage}\t{name}\t{i}\t{}", values.join(" "));
    }
}

pub fn trace_dump(model: &Model, tokens: &[String]) -> Result<String> {
    let trace = model.trace(tokens)?;
    let tags = model.vocab.decode_tags(&trace.tags);
    let mut out = String::new();
    let _ = writeln!(out, "tokens\t{}", tokens.join(" "));
    let _ = writeln!(out, "tags\t{}", tags.join(" "));
    for s in decode_spans(&tags, DecodeMode::Lenient)? {
        let _ = writeln!(out, "span\t{} {} {}", s.start, s.end, s.label);
    }
    for (stage, t) in STAGE_NAMES.iter().zip(&trace.stages) {
        rows(&mut out, stage, "scores", &t.scores);
        rows(&mut out, stage, "weights", &t.weights);
        if let Some(phi) = &t.phi {
            rows(&mut out, stage, "phi", phi);
        }
        if let Some(gamma) = &t.gamma {
            rows(&mut out, stage, "gamma", gamma);
        }
    }
    rows(&mut out, "output", "emissions", &trace.emissions);
    Ok(out)
}

/// Parsed tensor lines: `(stage, tensor) -> rows`.
pub fn parse_trace_rows(dump: &str) -> std::collections::BTreeMap<(String, String), Vec<Vec<f64>>> {
    let mut map = std::collections::BTreeMap::<_, Vec<Vec<f64>>>::new();
    for line in dump.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            continue;
        }
        let values = f[3].split(' ').filter_map(|v| v.parse().ok()).collect();
        map.entry((f[0].to_string(), f[1].to_string())).or_default().push(values);
    }
    map
}
