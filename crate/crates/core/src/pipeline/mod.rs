//! Data handling, metrics, training and ablation.

pub mod ablate;
pub mod batching;
pub mod corpus;
pub mod inspect;
pub mod run;
pub mod spans;
pub mod stats;
pub mod synth;
pub mod train;

pub use batching::{encode_all, make_batches, Batch, Encoded};
pub use corpus::{parse_conll, read_conll, write_conll, Corpus, Sentence, SplitIndices, Vocab};
pub use spans::{decode_spans, span_prf, DecodeMode, EvalReport, Prf, Span};
pub use stats::{corpus_stats, CorpusStats, StatsTable};
pub use synth::{synth_corpus, synth_corpus_with, SynthConfig};
pub use train::{evaluate, gold_spans, predict_all, train, EpochRecord, TrainConfig, TrainOutcome, TrainSummary};
pub use ablate::{ablate, parse_switch_matrix, standard_matrix, AblationEntry, AblationRow, AblationTable};
pub use inspect::{parse_trace_rows, trace_dump};
pub use run::{build_model, build_vocab, load_corpus, run_training};
