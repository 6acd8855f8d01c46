//! Config-driven corpus loading, model construction and training.

use super::corpus::{read_conll, Corpus, Vocab};
use super::train::{train, EpochRecord, TrainOutcome};
use crate::config::{DataConfig, EmbeddingSource, RunConfig};
use crate::encoders::load_embedding_file;
use crate::error::{Error, Result};
use crate::model::Model;

/// Read the splits named in `data`. Only the training path is required.
pub fn load_corpus(data: &DataConfig) -> Result<Corpus> {
    let train_path = data
        .train_path
        .as_ref()
        .ok_or_else(|| Error::Config("train_path: no training corpus configured".into()))?;
    let train = read_conll(train_path)?;
    let test = match &data.test_path {
        Some(p) => read_conll(p)?,
        None => Vec::new(),
    };
    let valid = if data.valid_from_test {
        if data.test_path.is_none() {
            return Err(Error::Config("valid_from_test: requires test_path".into()));
        }
        test.clone()
    } else {
        match &data.valid_path {
            Some(p) => read_conll(p)?,
            None => Vec::new(),
        }
    };
    Ok(Corpus { train, valid, test })
}

/// Tokens from the training split, tags from every split.
pub fn build_vocab(corpus: &Corpus) -> Vocab {
    Vocab::build(&corpus.train, corpus.all())
}

/// Fresh seeded model for `corpus`, with file embeddings when configured.
pub fn build_model(cfg: &RunConfig, corpus: &Corpus) -> Result<Model> {
    let vocab = build_vocab(corpus);
    let table = match cfg.data.embeddings {
        EmbeddingSource::Scratch => None,
        EmbeddingSource::File => {
            let path = cfg
                .data
                .embedding_path
                .as_ref()
                .ok_or_else(|| Error::Config("embedding_path: required when embeddings = file".into()))?;
            let loaded = load_embedding_file(
                path,
                vocab.tokens(),
                Vocab::RESERVED,
                cfg.model.encoder.d_model,
                cfg.train.seed,
            )?;
            log::info!(
                "loaded {} of {} vectors ({:.1}% coverage)",
                loaded.hits,
                vocab.len() - Vocab::RESERVED,
                100.0 * loaded.coverage
            );
            Some(loaded.table)
        }
    };
    Model::new(cfg.model.clone(), vocab, cfg.train.seed, table)
}

pub fn run_training(cfg: &RunConfig, corpus: &Corpus, on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = build_model(cfg, corpus)?;
    train(model, &cfg.train, &corpus.train, &corpus.valid, on_epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::corpus::write_conll;
    use crate::pipeline::synth::synth_corpus;
    use std::io::Write;

    #[test]
    fn missing_train_path_names_the_key() {
        let e = load_corpus(&DataConfig::default()).unwrap_err();
        assert!(matches!(e, Error::Config(_)) && e.to_string().contains("train_path"), "{e}");
    }

    #[test]
    fn valid_alias_and_file_embeddings() {
        let dir = tempfile::tempdir().unwrap();
        let c = synth_corpus(3, 4, 2).unwrap();
        let write = |name: &str, s: &[_]| {
            let p = dir.path().join(name);
            write_conll(std::fs::File::create(&p).unwrap(), s).unwrap();
            p
        };
        let data = DataConfig {
            train_path: Some(write("train.txt", &c.train)),
            test_path: Some(write("test.txt", &c.test)),
            valid_from_test: true,
            ..Default::default()
        };
        let loaded = load_corpus(&data).unwrap();
        assert_eq!(loaded.valid, loaded.test);
        assert_eq!(loaded.train, c.train);

        let vocab = build_vocab(&loaded);
        let emb = dir.path().join("vec.txt");
        let mut f = std::fs::File::create(&emb).unwrap();
        writeln!(f, "1 8").unwrap();
        writeln!(f, "{} 1 1 1 1 1 1 1 1", vocab.tokens()[2]).unwrap();
        let mut cfg = RunConfig::parse("d_model = 8\nz_dim = 8\nn_ema_head = 2\nv_dim = 8\nh_lstm = 3\n").unwrap();
        cfg.data = DataConfig {
            embeddings: EmbeddingSource::File,
            embedding_path: Some(emb),
            ..data
        };
        let m = build_model(&cfg, &loaded).unwrap();
        assert_eq!(m.store.get("embed").unwrap().row(2), &[1.0; 8]);
    }
}
