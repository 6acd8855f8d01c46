//! Template-grammar synthetic NER corpus with exact gold tags.
//!
//! A sentence alternates filler runs and entities. Each entity type owns a
//! disjoint character inventory and a few two-character trigger words that
//! usually precede it. Filler occasionally contains a single inventory
//! character (a homograph confuser) which is tagged `O`. Untriggered
//! entities are at least two characters long, so every tag is recoverable
//! from local context.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::{Corpus, Sentence};
use crate::error::{Error, Result};

pub const TYPE_NAMES: [&str; 8] = ["PER", "LOC", "ORG", "TIME", "PROD", "EVENT", "TITLE", "WORK"];

const FILLER_BASE: u32 = 0x4E00;
const FILLER_COUNT: u32 = 150;
const INVENTORY_BASE: u32 = 0x5200;
const INVENTORY_STRIDE: u32 = 0x80;
const TRIGGER_BASE: u32 = 0x6200;
const TRIGGER_STRIDE: u32 = 0x20;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_sentences: usize,
    pub n_types: usize,
    pub inventory_size: u32,
    pub triggers_per_type: u32,
    pub min_entity_len: usize,
    pub max_entity_len: usize,
    pub max_entities: usize,
    pub max_filler_len: usize,
    pub trigger_prob: f64,
    pub confuser_prob: f64,
}

impl SynthConfig {
    pub fn new(n_sentences: usize, n_types: usize) -> Self {
        SynthConfig {
            n_sentences,
            n_types,
            inventory_size: 40,
            triggers_per_type: 3,
            min_entity_len: 2,
            max_entity_len: 4,
            max_entities: 3,
            max_filler_len: 5,
            trigger_prob: 0.85,
            confuser_prob: 0.15,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic corpus: {m}")));
        if self.n_types == 0 || self.n_types > TYPE_NAMES.len() {
            return bad(&format!("entity types must be in 1..={}", TYPE_NAMES.len()));
        }
        if self.min_entity_len < 2 || self.max_entity_len < self.min_entity_len {
            return bad("entity lengths must satisfy 2 <= min <= max");
        }
        if self.max_entities == 0 || self.max_filler_len == 0 {
            return bad("max_entities and max_filler_len must be positive");
        }
        if !(0.0..=1.0).contains(&self.trigger_prob) || !(0.0..=1.0).contains(&self.confuser_prob) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.inventory_size == 0 || self.inventory_size > INVENTORY_STRIDE || self.triggers_per_type == 0 {
            return bad("inventory and trigger counts out of range");
        }
        if self.triggers_per_type * 2 > TRIGGER_STRIDE {
            return bad("too many triggers per type");
        }
        Ok(())
    }
}

fn ch(code: u32) -> String {
    char::from_u32(code).expect("CJK code point").to_string()
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn inventory_char(&mut self, ty: usize) -> String {
        let i = self.rng.gen_range(0..self.cfg.inventory_size);
        ch(INVENTORY_BASE + ty as u32 * INVENTORY_STRIDE + i)
    }

    fn filler(&mut self, toks: &mut Vec<String>, tags: &mut Vec<String>) {
        let n = self.rng.gen_range(1..=self.cfg.max_filler_len);
        let mut last_confuser = true;
        for j in 0..n {
            let interior = j > 0 && j + 1 < n;
            if interior && !last_confuser && self.rng.gen_bool(self.cfg.confuser_prob) {
                let ty = self.rng.gen_range(0..self.cfg.n_types);
                toks.push(self.inventory_char(ty));
                last_confuser = true;
            } else {
                toks.push(ch(FILLER_BASE + self.rng.gen_range(0..FILLER_COUNT)));
                last_confuser = false;
            }
            tags.push("O".into());
        }
    }

    fn sentence(&mut self) -> Sentence {
        let (mut toks, mut tags) = (Vec::new(), Vec::new());
        self.filler(&mut toks, &mut tags);
        for _ in 0..self.rng.gen_range(1..=self.cfg.max_entities) {
            let ty = self.rng.gen_range(0..self.cfg.n_types);
            if self.rng.gen_bool(self.cfg.trigger_prob) {
                let w = self.rng.gen_range(0..self.cfg.triggers_per_type);
                let base = TRIGGER_BASE + ty as u32 * TRIGGER_STRIDE + 2 * w;
                toks.push(ch(base));
                toks.push(ch(base + 1));
                tags.extend(["O".to_string(), "O".to_string()]);
            }
            let len = self.rng.gen_range(self.cfg.min_entity_len..=self.cfg.max_entity_len);
            for k in 0..len {
                toks.push(self.inventory_char(ty));
                let prefix = if k == 0 { "B" } else { "I" };
                tags.push(format!("{prefix}-{}", TYPE_NAMES[ty]));
            }
            self.filler(&mut toks, &mut tags);
        }
        Sentence { tokens: toks, tags }
    }
}

/// Train, valid and test splits of `n_sentences` each, from one seeded
/// stream.
pub fn synth_corpus(seed: u64, n_sentences: usize, entity_types: usize) -> Result<Corpus> {
    synth_corpus_with(&SynthConfig::new(n_sentences, entity_types), seed)
}

pub fn synth_corpus_with(cfg: &SynthConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut g = Generator {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut split = || (0..cfg.n_sentences).map(|_| g.sentence()).collect::<Vec<_>>();
    let train = split();
    let valid = split();
    let test = split();
    Ok(Corpus { train, valid, test })
}
