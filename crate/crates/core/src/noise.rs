//! Seeded standard-normal noise streams.
//!
//! One root seed feeds several ChaCha8 streams. Stream ids are fixed:
//!
//! | id | use |
//! |----|-----|
//! | 0 | parameter initialization |
//! | 1 | attention noise ε |
//! | 2 | latent noise ϵ |
//! | 3 | mini-batch shuffling |
//! | 4 | augmentation |
//! | 5 | input modifications |
//!
//! The offset of a draw is the ChaCha word position at which it started, so
//! `(seed, stream, offset)` reproduces it exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum StreamId {
    Init = 0,
    Attention = 1,
    Latent = 2,
    Shuffle = 3,
    Augment = 4,
    Modification = 5,
}

/// Where a draw came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub stream: StreamId,
    pub offset: u128,
}

/// A tensor of standard-normal draws plus its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub epsilon: Tensor,
    pub provenance: Provenance,
}

#[derive(Clone, Copy, Debug)]
pub struct NoiseSource {
    seed: u64,
}

pub fn standard_normal_source(seed: u64) -> NoiseSource {
    NoiseSource::new(seed)
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        NoiseSource { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, id: StreamId) -> NoiseStream {
        self.stream_at(id, 0)
    }

    pub fn stream_at(&self, id: StreamId, offset: u128) -> NoiseStream {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id as u64);
        rng.set_word_pos(offset);
        NoiseStream {
            rng,
            seed: self.seed,
            id,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    seed: u64,
    id: StreamId,
}

impl NoiseStream {
    pub fn offset(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn draw(&mut self, shape: &[usize]) -> NoiseDraw {
        let provenance = Provenance {
            seed: self.seed,
            stream: self.id,
            offset: self.offset(),
        };
        let rng = &mut self.rng;
        let epsilon = Tensor::from_fn(shape, |_| StandardNormal.sample(rng));
        NoiseDraw { epsilon, provenance }
    }

    /// The underlying generator, for non-Gaussian draws (shuffles, offsets).
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
