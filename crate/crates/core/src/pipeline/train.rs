//! Epoch loop with Adam, gate-cache updates and early stopping on
//! validation span F1.

use serde::Serialize;

use super::batching::{make_batches, Encoded};
use super::corpus::Sentence;
use super::spans::{decode_spans, span_prf, DecodeMode, EvalReport, Span};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{adam_step, AdamConfig, AdamState, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub max_epochs: usize,
    /// Epochs without a validation F1 gain before stopping.
    pub patience: usize,
    pub gate_momentum: f64,
    pub decode_mode: DecodeMode,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        AdamState::new(self.adam, &[])?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size: must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs: must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.gate_momentum) {
            return Err(Error::Config("gate_momentum: must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One line of the metric log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub loss: f64,
}

impl EpochRecord {
    /// `epoch P R F1 loss`, with enough digits to compare runs exactly.
    pub fn line(&self) -> String {
        format!(
            "{} {:.6} {:.6} {:.6} {:.17e}",
            self.epoch, self.precision, self.recall, self.f1, self.loss
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model of the epoch with the highest validation F1 (earliest on ties).
    pub best: Model,
    pub last: Model,
    pub best_epoch: usize,
    pub best_f1: f64,
    pub log: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// Set when a step produced a non-finite value; training stopped there.
    pub diverged: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_valid_f1: f64,
    pub final_loss: Option<f64>,
    pub stopped_early: bool,
    pub diverged: Option<String>,
    pub parameters: usize,
}

impl TrainOutcome {
    pub fn summary(&self) -> TrainSummary {
        TrainSummary {
            epochs_run: self.log.len(),
            best_epoch: self.best_epoch,
            best_valid_f1: self.best_f1,
            final_loss: self.log.last().map(|r| r.loss),
            stopped_early: self.stopped_early,
            diverged: self.diverged.clone(),
            parameters: self.best.store.numel(),
        }
    }
}

/// Gold spans of each sentence.
pub fn gold_spans(sentences: &[Sentence], mode: DecodeMode) -> Result<Vec<Vec<Span>>> {
    sentences.iter().map(|s| decode_spans(&s.tags, mode)).collect()
}

/// Predicted tag strings for every sentence. Work is split across threads
/// and gathered in input order, so results do not depend on scheduling.
pub fn predict_all(model: &Model, sentences: &[Sentence]) -> Result<Vec<Vec<String>>> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(sentences.len().max(1));
    let per = sentences.len().div_ceil(threads).max(1);
    std::thread::scope(|scope| {
        let handles: Vec<_> = sentences
            .chunks(per)
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|s| model.predict_tokens(&s.tokens))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(sentences.len());
        for h in handles {
            out.extend(h.join().expect("prediction worker panicked")?);
        }
        Ok(out)
    })
}

/// Span P/R/F1 of the model's predictions against gold tags.
pub fn evaluate(model: &Model, sentences: &[Sentence], mode: DecodeMode) -> Result<EvalReport> {
    let gold = gold_spans(sentences, mode)?;
    let pred = predict_all(model, sentences)?
        .iter()
        .map(|tags| decode_spans(tags, DecodeMode::Lenient))
        .collect::<Result<Vec<_>>>()?;
    span_prf(&gold, &pred)
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::Divergence(_))
}

/// One pass over `data`; returns the mean per-sentence loss.
fn run_epoch(model: &mut Model, cfg: &TrainConfig, adam: &mut AdamState, data: &[Encoded], epoch: usize) -> Result<f64> {
    let mut total = 0.0;
    for batch in make_batches(data, cfg.batch_size, cfg.seed, epoch)? {
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape)?;
        let mut losses = Vec::with_capacity(batch.indices.len());
        let mut encoders = Vec::with_capacity(batch.indices.len());
        for &i in &batch.indices {
            let (loss, fwd) = model.sentence_loss(&mut tape, &p, &data[i].ids, &data[i].tags)?;
            losses.push(loss);
            encoders.push(fwd.encoder);
        }
        let sum = tape.add_all(&losses)?;
        let mean = tape.scale(sum, 1.0 / losses.len() as f64)?;
        let value = tape.value(mean).item();
        if !value.is_finite() {
            return Err(Error::Divergence(format!("loss became {value} in epoch {epoch}")));
        }
        tape.backward(mean)?;
        let grads = p.grads(&tape);
        adam_step(&mut model.store.values_mut(), &grads, adam)?;
        model.encoder.update_gate_caches(&tape, &encoders, cfg.gate_momentum)?;
        total += value * losses.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Train until the epoch budget runs out or validation F1 stops improving
/// for `patience` epochs. `valid` falls back to the training sentences
/// when empty. `on_epoch` sees each record as it is produced.
pub fn train(
    mut model: Model,
    cfg: &TrainConfig,
    train: &[Sentence],
    valid: &[Sentence],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training split has no sentences".into()));
    }
    let data = super::batching::encode_all(&model.vocab, train)?;
    let valid = if valid.is_empty() {
        log::warn!("no validation sentences; early stopping uses the training split");
        train
    } else {
        valid
    };
    let params: Vec<_> = model.store.iter().map(|(_, t)| t).collect();
    let mut adam = AdamState::new(cfg.adam, &params)?;
    let mut log = Vec::new();
    let mut best = model.clone();
    let (mut best_epoch, mut best_f1) = (0, f64::NEG_INFINITY);
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut diverged = None;

    for epoch in 1..=cfg.max_epochs {
        let step = run_epoch(&mut model, cfg, &mut adam, &data, epoch)
            .and_then(|loss| Ok((loss, evaluate(&model, valid, cfg.decode_mode)?)));
        let (loss, report) = match step {
            Ok(r) => r,
            Err(e) if is_divergence(&e) => {
                diverged = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let rec = EpochRecord {
            epoch,
            precision: report.micro.precision,
            recall: report.micro.recall,
            f1: report.micro.f1,
            loss,
        };
        log::info!("{}", rec.line());
        on_epoch(&rec);
        log.push(rec);
        if rec.f1 > best_f1 {
            best_f1 = rec.f1;
            best_epoch = epoch;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        last: model,
        best_epoch,
        best_f1: best_f1.max(0.0),
        log,
        stopped_early,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_cfg;
    use crate::model::ModelConfig;
    use crate::pipeline::corpus::Vocab;
    use crate::pipeline::synth::synth_corpus;
    use crate::reduced_bias::ResidualMode;
    use crate::rhema::AttnFn;

    fn setup(cfg: ModelConfig, n: usize) -> (Model, crate::pipeline::corpus::Corpus) {
        let corpus = synth_corpus(7, n, 2).unwrap();
        let vocab = Vocab::build(&corpus.train, corpus.all());
        (Model::new(cfg, vocab, 1, None).unwrap(), corpus)
    }

    fn quick(lr: f64, epochs: usize) -> TrainConfig {
        TrainConfig {
            adam: AdamConfig { lr, ..Default::default() },
            batch_size: 4,
            seed: 3,
            max_epochs: epochs,
            patience: 100,
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let (m, c) = setup(tiny_cfg(AttnFn::ReducedLaplace, ResidualMode::Dynamic), 6);
        let before = m.store.clone();
        let out = train(m, &quick(0.0, 3), &c.train, &c.valid, |_| {}).unwrap();
        assert_eq!(out.last.store, before);
        let l0 = out.log[0].loss;
        assert!(out.log.iter().all(|r| (r.loss - l0).abs() <= 1e-12), "{:?}", out.log);
    }

    #[test]
    fn seeded_runs_repeat_exactly() {
        let run = || {
            let (m, c) = setup(tiny_cfg(AttnFn::Softmax, ResidualMode::Dynamic), 6);
            let out = train(m, &quick(0.01, 3), &c.train, &c.valid, |_| {}).unwrap();
            out.log.iter().map(EpochRecord::line).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_decreases_and_best_is_retained() {
        let (m, c) = setup(tiny_cfg(AttnFn::ReducedLaplace, ResidualMode::Dynamic), 8);
        let mut seen = 0;
        let out = train(m, &quick(0.02, 12), &c.train, &c.valid, |_| seen += 1).unwrap();
        assert_eq!(seen, out.log.len());
        assert!(out.log.last().unwrap().loss < out.log[0].loss);
        let max_f1 = out.log.iter().map(|r| r.f1).fold(0.0, f64::max);
        assert_eq!(out.best_f1, max_f1);
        let again = evaluate(&out.best, &c.valid, DecodeMode::Lenient).unwrap();
        assert_eq!(again.micro.f1, out.best_f1);
    }

    #[test]
    fn patience_stops_early() {
        let (m, c) = setup(tiny_cfg(AttnFn::Softmax, ResidualMode::Classic), 4);
        let cfg = TrainConfig {
            patience: 2,
            ..quick(0.0, 50)
        };
        let out = train(m, &cfg, &c.train, &c.valid, |_| {}).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.log.len(), 3);
        assert_eq!(out.best_epoch, 1);
    }

    #[test]
    fn divergence_keeps_the_last_good_model() {
        let (m, c) = setup(tiny_cfg(AttnFn::Softmax, ResidualMode::Classic), 4);
        let cfg = TrainConfig {
            adam: AdamConfig { lr: 1e300, ..Default::default() },
            ..quick(0.0, 5)
        };
        let out = train(m, &cfg, &c.train, &c.valid, |_| {}).unwrap();
        assert!(out.diverged.is_some(), "{:?}", out.log);
        assert!(out.best.store.iter().all(|(_, t)| t.data().iter().all(|v| v.is_finite())));
    }

    #[test]
    fn untrained_all_o_model_scores_zero() {
        let (mut m, c) = setup(tiny_cfg(AttnFn::Softmax, ResidualMode::Classic), 4);
        let b = m.store.get_mut("proj.b").unwrap();
        b.data_mut()[0] = 1e3;
        let r = evaluate(&m, &c.test, DecodeMode::Lenient).unwrap();
        assert_eq!((r.micro.predicted, r.micro.f1), (0, 0.0));
    }

    #[test]
    fn empty_train_split_is_rejected() {
        let (m, c) = setup(tiny_cfg(AttnFn::Softmax, ResidualMode::Classic), 2);
        assert!(matches!(train(m, &quick(0.0, 1), &[], &c.valid, |_| {}), Err(Error::EmptyInput(_))));
    }
}
