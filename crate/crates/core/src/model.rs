//! The full tagger: embedding, hierarchical encoder, BiLSTM, per-class
//! projection and a CRF (or per-token softmax) head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::crf::{token_nll_from_scores, Crf};
use crate::encoders::{BiLstm, Embedding};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};
use crate::pipeline::corpus::Vocab;
use crate::rhema::{glorot, linear, AttentionTrace, EncoderOutput, HierarchicalEncoder, RhemaConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Crf,
    /// Independent softmax per token; no transition structure.
    Token,
}

impl FromStr for Head {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crf" => Ok(Head::Crf),
            "token" | "softmax" => Ok(Head::Token),
            _ => Err(Error::Config(format!("head must be crf or token, got {s:?}"))),
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Head::Crf => "crf",
            Head::Token => "token",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: RhemaConfig,
    pub h_lstm: usize,
    pub head: Head,
    /// Forbid `O → I-X` and `B-X/I-X → I-Y` transitions in the CRF.
    pub strict_bio: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: RhemaConfig::default(),
            h_lstm: 64,
            head: Head::Crf,
            strict_bio: false,
        }
    }
}

const EMBED: &str = "embed";
const PROJ_W: &str = "proj.w";
const PROJ_B: &str = "proj.b";

/// Per-sentence forward results on one tape.
#[derive(Clone, Debug)]
pub struct Forward {
    pub emissions: Var,
    pub encoder: EncoderOutput,
}

/// Both stage traces and the decoded tag ids for one sentence.
#[derive(Clone, Debug)]
pub struct ModelTrace {
    pub stages: [AttentionTrace; 2],
    pub emissions: Tensor,
    pub tags: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub embedding: Embedding,
    pub encoder: HierarchicalEncoder,
    pub lstm: BiLstm,
    pub crf: Crf,
    pub store: ParamStore,
}

impl Model {
    /// Structure without parameters; `init` fills the store.
    pub fn skeleton(cfg: ModelConfig, vocab: Vocab) -> Result<Self> {
        cfg.encoder.validate()?;
        if cfg.h_lstm == 0 {
            return Err(Error::Config("h_lstm must be positive".into()));
        }
        if vocab.n_tags() < 2 {
            return Err(Error::Config("tag set needs at least two classes".into()));
        }
        let d = cfg.encoder.d_model;
        let mut crf = Crf::new("crf", vocab.n_tags());
        if cfg.strict_bio {
            crf = crf.with_strict_bio(vocab.tags());
        }
        Ok(Model {
            embedding: Embedding::new(EMBED, vocab.len(), d),
            encoder: HierarchicalEncoder::new("enc", &cfg.encoder)?,
            lstm: BiLstm::new("lstm", d, cfg.h_lstm),
            crf,
            store: ParamStore::new(),
            cfg,
            vocab,
        })
    }

    /// Seeded initialization; `embeddings` replaces the random table.
    pub fn new(cfg: ModelConfig, vocab: Vocab, seed: u64, embeddings: Option<Tensor>) -> Result<Self> {
        let mut m = Model::skeleton(cfg, vocab)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        m.embedding.init(&mut m.store, &mut rng);
        if let Some(table) = embeddings {
            m.store.set(EMBED, table)?;
        }
        m.encoder.init(&mut m.store, &mut rng);
        m.lstm.init(&mut m.store, &mut rng);
        let c = m.vocab.n_tags();
        m.store.insert(PROJ_W, glorot(2 * m.cfg.h_lstm, c, &mut rng));
        m.store.insert(PROJ_B, Tensor::zeros(&[c]));
        if m.cfg.head == Head::Crf {
            m.crf.init(&mut m.store);
        }
        Ok(m)
    }

    pub fn n_classes(&self) -> usize {
        self.vocab.n_tags()
    }

    /// Emissions `[n, C]` for `ids`, of which the first `len` are real.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, ids: &[usize], len: usize) -> Result<Forward> {
        if len == 0 || len > ids.len() {
            return Err(Error::Contract(format!("length {len} for {} ids", ids.len())));
        }
        let valid: Vec<bool> = (0..ids.len()).map(|t| t < len).collect();
        let x = self.embedding.forward(tape, p, ids)?;
        let encoder = self.encoder.forward(tape, p, x, &valid)?;
        let h = self.lstm.forward(tape, p, encoder.out, len)?;
        let emissions = linear(tape, p, h, PROJ_W, PROJ_B)?;
        Ok(Forward { emissions, encoder })
    }

    /// Training loss of one unpadded sentence.
    pub fn sentence_loss(&self, tape: &mut Tape, p: &Bound, ids: &[usize], tags: &[usize]) -> Result<(Var, Forward)> {
        if ids.len() != tags.len() {
            return Err(Error::Contract(format!("{} ids but {} tags", ids.len(), tags.len())));
        }
        let fwd = self.forward(tape, p, ids, ids.len())?;
        let loss = match self.cfg.head {
            Head::Crf => self.crf.nll(tape, p, fwd.emissions, tags)?,
            Head::Token => token_nll_from_scores(tape, fwd.emissions, tags)?,
        };
        Ok((loss, fwd))
    }

    /// Emission rows of the real tokens, computed without gradients.
    pub fn emissions(&self, ids: &[usize], len: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape)?;
        let fwd = self.forward(&mut tape, &p, ids, len)?;
        let e = tape.value(fwd.emissions);
        let c = e.cols();
        Tensor::matrix(len, c, e.data()[..len * c].to_vec())
    }

    fn decode(&self, emissions: &Tensor) -> Result<Vec<usize>> {
        match self.cfg.head {
            Head::Crf => Ok(self.crf.decode(&self.store, emissions)?.0),
            Head::Token => Ok((0..emissions.rows())
                .map(|r| {
                    let row = emissions.row(r);
                    (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
                })
                .collect()),
        }
    }

    /// Tag ids for the first `len` of `ids`; trailing ids are padding.
    pub fn predict_padded(&self, ids: &[usize], len: usize) -> Result<Vec<usize>> {
        self.decode(&self.emissions(ids, len)?)
    }

    pub fn predict_ids(&self, ids: &[usize]) -> Result<Vec<usize>> {
        self.predict_padded(ids, ids.len())
    }

    pub fn predict_tokens(&self, tokens: &[String]) -> Result<Vec<String>> {
        let ids = self.vocab.encode_tokens(tokens);
        Ok(self.vocab.decode_tags(&self.predict_ids(&ids)?))
    }

    pub fn trace(&self, tokens: &[String]) -> Result<ModelTrace> {
        let ids = self.vocab.encode_tokens(tokens);
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape)?;
        let fwd = self.forward(&mut tape, &p, &ids, ids.len())?;
        let emissions = tape.value(fwd.emissions).clone();
        let stages = [
            AttentionTrace::capture(&tape, &fwd.encoder.stages[0].trace),
            AttentionTrace::capture(&tape, &fwd.encoder.stages[1].trace),
        ];
        Ok(ModelTrace {
            stages,
            tags: self.decode(&emissions)?,
            emissions,
        })
    }

    /// Gate caches in a fixed order, for persistence.
    pub fn gate_caches(&self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        self.encoder
            .gates()
            .map(|g| (g.prefix.clone(), g.g_f.clone(), g.g_x.clone()))
            .collect()
    }

    pub fn set_gate_caches(&mut self, caches: &[(String, Vec<f64>, Vec<f64>)]) -> Result<()> {
        let gates: Vec<_> = self.encoder.stages.iter_mut().flat_map(|s| s.gates_mut().iter_mut()).collect();
        if gates.len() != caches.len() {
            return Err(Error::Checkpoint(format!("{} gate caches for {} gates", caches.len(), gates.len())));
        }
        for (g, (name, f, x)) in gates.into_iter().zip(caches) {
            if &g.prefix != name || g.g_f.len() != f.len() || g.g_x.len() != x.len() {
                return Err(Error::Checkpoint(format!("gate cache {name} does not match gate {}", g.prefix)));
            }
            g.g_f = f.clone();
            g.g_x = x.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check_many, GradCheckOptions};
    use crate::pipeline::corpus::Sentence;
    use crate::reduced_bias::ResidualMode;
    use crate::rhema::{AttentionKind, AttnFn};

    pub(crate) fn tiny_vocab() -> Vocab {
        let s = Sentence {
            tokens: ["a", "b", "c", "d"].iter().map(|t| t.to_string()).collect(),
            tags: ["B-X", "I-X", "O", "O"].iter().map(|t| t.to_string()).collect(),
        };
        Vocab::build([&s], [&s])
    }

    pub(crate) fn tiny_cfg(attn_fn: AttnFn, residual: ResidualMode) -> ModelConfig {
        ModelConfig {
            encoder: RhemaConfig {
                d_model: 8,
                z_dim: 8,
                v_dim: 16,
                n_ema_head: 2,
                chunk_size: 2,
                attn_fn,
                residual,
                ..Default::default()
            },
            h_lstm: 5,
            head: Head::Crf,
            strict_bio: false,
        }
    }

    #[test]
    fn census_and_shapes() {
        let m = Model::new(tiny_cfg(AttnFn::ReducedLaplace, ResidualMode::Dynamic), tiny_vocab(), 1, None).unwrap();
        assert_eq!(m.n_classes(), 3);
        for name in ["embed", "proj.w", "proj.b", "crf.trans", "lstm.fwd.w_ih", "enc.local.w_z", "enc.global.w_z"] {
            assert!(m.store.get(name).is_some(), "{name}");
        }
        assert_eq!(m.store.get("proj.w").unwrap().shape(), &[10, 3]);
        let tags = m.predict_ids(&[2, 3, 4, 5, 1]).unwrap();
        assert_eq!(tags.len(), 5);
        let naive = ModelConfig {
            encoder: RhemaConfig {
                attention: AttentionKind::Naive,
                ..tiny_cfg(AttnFn::Softmax, ResidualMode::Classic).encoder
            },
            ..tiny_cfg(AttnFn::Softmax, ResidualMode::Classic)
        };
        let m = Model::new(naive, tiny_vocab(), 1, None).unwrap();
        assert!(m.store.get("enc.local.w_q").is_some());
        assert!(m.store.get("enc.local.w_z").is_none());
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = Model::new(tiny_cfg(AttnFn::Softmax, ResidualMode::Static), tiny_vocab(), 5, None).unwrap();
        let b = Model::new(tiny_cfg(AttnFn::Softmax, ResidualMode::Static), tiny_vocab(), 5, None).unwrap();
        assert_eq!(a.store, b.store);
        let c = Model::new(tiny_cfg(AttnFn::Softmax, ResidualMode::Static), tiny_vocab(), 6, None).unwrap();
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn padding_does_not_change_predictions() {
        let m = Model::new(tiny_cfg(AttnFn::ReducedLaplace, ResidualMode::Dynamic), tiny_vocab(), 3, None).unwrap();
        let ids = [2, 3, 4, 5, 2, 3];
        let plain = m.emissions(&ids, 6).unwrap();
        let mut padded = ids.to_vec();
        padded.extend([0, 0, 0]);
        let with_pad = m.emissions(&padded, 6).unwrap();
        assert!(plain.max_abs_diff(&with_pad) <= 1e-9);
        assert_eq!(m.predict_ids(&ids).unwrap(), m.predict_padded(&padded, 6).unwrap());
    }

    #[test]
    fn token_head_loss_and_decode() {
        let cfg = ModelConfig {
            head: Head::Token,
            ..tiny_cfg(AttnFn::Softmax, ResidualMode::Classic)
        };
        let m = Model::new(cfg, tiny_vocab(), 2, None).unwrap();
        assert!(m.store.get("crf.trans").is_none());
        let mut tape = Tape::new();
        let p = m.store.bind(&mut tape).unwrap();
        let (loss, _) = m.sentence_loss(&mut tape, &p, &[2, 3, 4], &[1, 2, 0]).unwrap();
        assert!(tape.value(loss).item() > 0.0);
        assert_eq!(m.predict_ids(&[2, 3, 4]).unwrap().len(), 3);
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let mut m = Model::new(tiny_cfg(AttnFn::ReducedLaplace, ResidualMode::Dynamic), tiny_vocab(), 4, None).unwrap();
        let caches: Vec<_> = m
            .gate_caches()
            .into_iter()
            .enumerate()
            .map(|(i, (n, f, x))| {
                let f = f.iter().enumerate().map(|(j, _)| 0.1 * ((i + j) as f64).sin()).collect();
                let x = x.iter().enumerate().map(|(j, _)| 0.1 * ((i * 3 + j) as f64).cos()).collect();
                (n, f, x)
            })
            .collect();
        m.set_gate_caches(&caches).unwrap();
        let names: Vec<String> = m.store.names().map(String::from).collect();
        let inputs: Vec<Tensor> = m.store.iter().map(|(_, t)| t.clone()).collect();
        let ids = [2, 3, 4, 5, 1];
        let tags = [1, 2, 0, 1, 0];
        let r = finite_diff_check_many(
            |t, v| {
                let p = Bound::from_pairs(names.iter().cloned().zip(v.iter().copied()));
                Ok(m.sentence_loss(t, &p, &ids, &tags)?.0)
            },
            &inputs,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }
}
