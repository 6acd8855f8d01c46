//! Encoded sentences and seeded, padded mini-batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::{Sentence, Vocab};
use crate::encoders::PAD_ID;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub tags: Vec<usize>,
}

pub fn encode_all(vocab: &Vocab, sentences: &[Sentence]) -> Result<Vec<Encoded>> {
    sentences
        .iter()
        .map(|s| {
            Ok(Encoded {
                ids: vocab.encode_tokens(&s.tokens),
                tags: vocab.encode_tags(&s.tags)?,
            })
        })
        .collect()
}

/// Rows padded to the longest member; `mask[r][t]` marks real tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub ids: Vec<Vec<usize>>,
    pub tags: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
}

/// Shuffle with a stream derived from `(seed, epoch)`, then chunk and pad.
pub fn make_batches(data: &[Encoded], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let width = chunk.iter().map(|&i| data[i].ids.len()).max().unwrap_or(0);
            let pad = |v: &[usize]| {
                let mut v = v.to_vec();
                v.resize(width, PAD_ID);
                v
            };
            Batch {
                indices: chunk.to_vec(),
                ids: chunk.iter().map(|&i| pad(&data[i].ids)).collect(),
                tags: chunk.iter().map(|&i| pad(&data[i].tags)).collect(),
                mask: chunk
                    .iter()
                    .map(|&i| (0..width).map(|t| t < data[i].ids.len()).collect())
                    .collect(),
                lengths: chunk.iter().map(|&i| data[i].ids.len()).collect(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn data(lens: &[usize]) -> Vec<Encoded> {
        lens.iter()
            .map(|&n| Encoded {
                ids: vec![5; n],
                tags: vec![1; n],
            })
            .collect()
    }

    #[test]
    fn one_batch_when_large() {
        let b = make_batches(&data(&[2, 3, 1]), 10, 0, 0).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].ids[0].len(), 3);
        assert!(make_batches(&data(&[1]), 0, 0, 0).is_err());
    }

    #[test]
    fn seeded_order() {
        let d = data(&[1, 2, 3, 4, 5, 6, 7, 8]);
        let a = make_batches(&d, 3, 9, 2).unwrap();
        assert_eq!(a, make_batches(&d, 3, 9, 2).unwrap());
        let orders: Vec<Vec<usize>> = (0..4)
            .map(|e| make_batches(&d, 8, 9, e).unwrap()[0].indices.clone())
            .collect();
        assert!(orders.windows(2).any(|w| w[0] != w[1]));
    }

    proptest! {
        #[test]
        fn masks_match_lengths(lens in proptest::collection::vec(1usize..9, 1..20), bs in 1usize..6, seed in 0u64..50) {
            let d = data(&lens);
            let batches = make_batches(&d, bs, seed, 1).unwrap();
            let mut seen: Vec<usize> = Vec::new();
            for b in &batches {
                for (r, &i) in b.indices.iter().enumerate() {
                    prop_assert_eq!(b.mask[r].iter().filter(|&&m| m).count(), lens[i]);
                    prop_assert_eq!(b.lengths[r], lens[i]);
                    prop_assert!(b.ids[r][lens[i]..].iter().all(|&x| x == PAD_ID));
                }
                seen.extend(&b.indices);
            }
            seen.sort();
            prop_assert_eq!(seen, (0..lens.len()).collect::<Vec<_>>());
        }
    }
}
