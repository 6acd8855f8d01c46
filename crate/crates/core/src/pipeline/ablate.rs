//! Ablation harness: one training run per switch combination, same seed
//! and budget, reported in the module-ablation table layout.

use std::fmt;

use serde::Serialize;

use super::corpus::Corpus;
use super::run::run_training;
use super::spans::EvalReport;
use super::train::evaluate;
use crate::config::{EmbeddingSource, RunConfig};
use crate::error::{Error, Result};
use crate::reduced_bias::ResidualMode;
use crate::rhema::AttentionKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationRow {
    pub attention: AttentionKind,
    pub reduced_bias: ResidualMode,
    pub embeddings: EmbeddingSource,
}

impl AblationRow {
    /// `base` with this row's switches applied and nothing else changed.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.model.encoder.attention = self.attention;
        cfg.model.encoder.residual = self.reduced_bias;
        cfg.data.embeddings = self.embeddings;
        cfg
    }
}

/// `{naive, hema} × {off, dynamic}` with scratch embeddings.
pub fn standard_matrix() -> Vec<AblationRow> {
    let mut rows = Vec::new();
    for attention in [AttentionKind::Naive, AttentionKind::Hema] {
        for reduced_bias in [ResidualMode::Classic, ResidualMode::Dynamic] {
            rows.push(AblationRow {
                attention,
                reduced_bias,
                embeddings: EmbeddingSource::Scratch,
            });
        }
    }
    rows
}

/// Cross product of `switch=v1,v2;switch=v1` clauses. Switches not named
/// keep the value in `base`.
pub fn parse_switch_matrix(spec: &str, base: &RunConfig) -> Result<Vec<AblationRow>> {
    let mut attention = vec![base.model.encoder.attention];
    let mut reduced_bias = vec![base.model.encoder.residual];
    let mut embeddings = vec![base.data.embeddings];
    for clause in spec.split(';').map(str::trim).filter(|c| !c.is_empty()) {
        let (key, values) = clause
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("switch clause {clause:?} is not key=values")))?;
        let values: Vec<&str> = values.split(',').map(str::trim).collect();
        match key.trim() {
            "attention" => attention = values.iter().map(|v| v.parse()).collect::<Result<_>>()?,
            "reduced_bias" => reduced_bias = values.iter().map(|v| v.parse()).collect::<Result<_>>()?,
            "embeddings" => embeddings = values.iter().map(|v| v.parse()).collect::<Result<_>>()?,
            other => {
                return Err(Error::Config(format!(
                    "unknown switch {other:?} (expected attention, reduced_bias or embeddings)"
                )))
            }
        }
    }
    let mut rows = Vec::new();
    for &a in &attention {
        for &r in &reduced_bias {
            for &e in &embeddings {
                rows.push(AblationRow {
                    attention: a,
                    reduced_bias: r,
                    embeddings: e,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationEntry {
    pub serial: usize,
    pub attention: String,
    pub reduced_bias: String,
    pub embeddings: String,
    /// `(key, base value, row value)` for every key the row changed.
    pub config_diff: Vec<(String, String, String)>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_valid_f1: f64,
    pub diverged: Option<String>,
    /// Scored on the test split, or validation when there is no test split.
    pub report: EvalReport,
    pub parameters: usize,
}

/// Train every row. Rows run on separate threads and are returned in
/// input order.
pub fn ablate(base: &RunConfig, corpus: &Corpus, rows: &[AblationRow]) -> Result<Vec<AblationEntry>> {
    if rows.is_empty() {
        return Err(Error::Config("ablation needs at least one row".into()));
    }
    let held_out = if corpus.test.is_empty() { &corpus.valid } else { &corpus.test };
    let run_row = |serial: usize, row: &AblationRow| -> Result<AblationEntry> {
        let cfg = row.apply(base);
        let out = run_training(&cfg, corpus, |_| {})?;
        let report = if held_out.is_empty() {
            EvalReport::default()
        } else {
            evaluate(&out.best, held_out, cfg.train.decode_mode)?
        };
        Ok(AblationEntry {
            serial,
            attention: row.attention.to_string(),
            reduced_bias: cfg.get("reduced_bias_mode").expect("known key"),
            embeddings: row.embeddings.to_string(),
            config_diff: base.diff(&cfg),
            epochs_run: out.log.len(),
            best_epoch: out.best_epoch,
            best_valid_f1: out.best_f1,
            diverged: out.diverged.clone(),
            parameters: out.best.store.numel(),
            report,
        })
    };
    std::thread::scope(|scope| {
        let handles: Vec<_> = rows
            .iter()
            .enumerate()
            .map(|(i, row)| scope.spawn(move || run_row(i + 1, row)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation worker panicked"))
            .collect()
    })
}

/// Module columns (A: plain attention, H: EMA attention, R: reduced
/// bias, Emb: embedding source) followed by P, R and F1 in percent.
pub struct AblationTable<'a>(pub &'a [AblationEntry]);

impl fmt::Display for AblationTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>4} | {:^3} {:^3} {:^7} {:^7} | {:>7} {:>7} {:>7}",
            "S.N.", "A", "H", "R", "Emb", "P", "R", "F1"
        )?;
        writeln!(f, "{}", "-".repeat(58))?;
        for e in self.0 {
            let mark = |b: bool| if b { "√" } else { "" };
            let rb = match e.reduced_bias.as_str() {
                "dynamic" => "√",
                "static" => "static",
                _ => "",
            };
            let emb = if e.embeddings == "file" { "file" } else { "" };
            let m = &e.report.micro;
            writeln!(
                f,
                "{:>4} | {:^3} {:^3} {:^7} {:^7} | {:>7.2} {:>7.2} {:>7.2}{}",
                e.serial,
                mark(e.attention == "naive"),
                mark(e.attention == "hema"),
                rb,
                emb,
                100.0 * m.precision,
                100.0 * m.recall,
                100.0 * m.f1,
                if e.diverged.is_some() { "  (diverged)" } else { "" }
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::run::{build_model, run_training};
    use crate::pipeline::synth::synth_corpus;

    fn base() -> RunConfig {
        let mut cfg = RunConfig::parse(
            "d_model = 8\nz_dim = 8\nv_dim = 8\nn_ema_head = 2\nchunk_size = 2\nh_lstm = 4\nmax_epochs = 2\nbatch_size = 4\nlr = 0.01\n",
        )
        .unwrap();
        cfg.train.seed = 5;
        cfg
    }

    #[test]
    fn matrix_parsing() {
        let b = base();
        assert_eq!(parse_switch_matrix("", &b).unwrap().len(), 1);
        let rows = parse_switch_matrix("attention=naive,hema; reduced_bias=off,static,dynamic", &b).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(parse_switch_matrix("attention=fancy", &b).is_err());
        assert!(parse_switch_matrix("dropout=0.1", &b).is_err());
        assert_eq!(standard_matrix().len(), 4);
    }

    #[test]
    fn rows_differ_only_in_declared_switches() {
        let b = base();
        for row in standard_matrix() {
            let diff = b.diff(&row.apply(&b));
            assert!(diff.iter().all(|(k, _, _)| k == "attention" || k == "reduced_bias_mode"), "{diff:?}");
        }
    }

    #[test]
    fn single_default_row_equals_plain_training() {
        let b = base();
        let c = synth_corpus(2, 6, 2).unwrap();
        let rows = parse_switch_matrix("", &b).unwrap();
        let table = ablate(&b, &c, &rows).unwrap();
        assert!(table[0].config_diff.is_empty());
        let plain = run_training(&b, &c, |_| {}).unwrap();
        let direct = evaluate(&plain.best, &c.test, b.train.decode_mode).unwrap();
        assert_eq!(table[0].report, direct);
        assert_eq!(table[0].parameters, build_model(&b, &c).unwrap().store.numel());
    }

    #[test]
    fn standard_matrix_runs_and_renders() {
        let b = base();
        let c = synth_corpus(2, 6, 2).unwrap();
        let table = ablate(&b, &c, &standard_matrix()).unwrap();
        assert_eq!(table.len(), 4);
        let text = AblationTable(&table).to_string();
        assert!(text.contains("S.N.") && text.lines().count() == 6, "{text}");
        assert!(table[0].parameters != table[2].parameters);
    }
}
