use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::scorer::Scorer;
use crate::error::{Error, Result};

/// Reproducible scorer whose logits are a pseudo-random function of the
/// prefix. Useful for checking decoders against brute-force search.
#[derive(Debug, Clone)]
pub struct RandomScorer {
    pub vocab: usize,
    pub seed: u64,
    /// Standard deviation of the logits; larger values sharpen the
    /// distributions.
    pub scale: f64,
    pub bos: usize,
    pub eos: Option<usize>,
}

impl RandomScorer {
    pub fn new(vocab: usize, seed: u64) -> Self {
        RandomScorer {
            vocab,
            seed,
            scale: 2.0,
            bos: 0,
            eos: None,
        }
    }
}

impl Scorer for RandomScorer {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn bos(&self) -> usize {
        self.bos
    }

    fn eos(&self) -> Option<usize> {
        self.eos
    }

    fn logits(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        // FNV-1a over the prefix, keyed by the seed.
        let mut h = 0xcbf2_9ce4_8422_2325u64 ^ self.seed;
        for &t in prefix {
            h = (h ^ (t as u64 + 1)).wrapping_mul(0x0000_0100_0000_01b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let normal =
            Normal::new(0.0, self.scale).map_err(|e| Error::config("scale", e.to_string()))?;
        Ok((0..self.vocab).map(|_| normal.sample(&mut rng)).collect())
    }
}

/// Scorer returning the same logits after every prefix.
#[derive(Debug, Clone)]
pub struct FixedScorer {
    pub logits: Vec<f64>,
    pub bos: usize,
    pub eos: Option<usize>,
}

impl Scorer for FixedScorer {
    fn vocab_size(&self) -> usize {
        self.logits.len()
    }

    fn bos(&self) -> usize {
        self.bos
    }

    fn eos(&self) -> Option<usize> {
        self.eos
    }

    fn logits(&self, _prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(self.logits.clone())
    }
}
