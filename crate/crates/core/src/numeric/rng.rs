use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numeric::matrix::Matrix;
use crate::scalar::Scalar;

/// Reproducible random stream addressed by `(seed, stream id, counter)`.
///
/// The seed keys a ChaCha8 generator, the stream id selects the ChaCha
/// stream, and the counter is the word position. Draws for a given triple
/// never depend on thread scheduling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Generator positioned at the start of this stream.
    pub fn generator(&self) -> ChaCha8Rng {
        self.generator_at(0)
    }

    /// Generator positioned `counter` 32-bit words into this stream.
    pub fn generator_at(&self, counter: u128) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(counter);
        rng
    }

    /// Derived stream, e.g. one per trial or per training step. Mixing keeps
    /// nested derivations from colliding with sibling ids.
    pub fn substream(&self, id: u64) -> Self {
        let mixed = splitmix64(self.stream ^ splitmix64(id.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        Self {
            seed: self.seed,
            stream: mixed,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    T::lit(rng.sample::<f64, _>(StandardNormal))
}

/// Matrix with i.i.d. `N(0, std²)` entries.
pub fn normal_matrix<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, std: T, rng: &mut R) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| standard_normal::<T, R>(rng) * std)
}

/// Matrix with i.i.d. `U(-bound, bound)` entries.
pub fn uniform_matrix<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, bound: T, rng: &mut R) -> Matrix<T> {
    let b = bound.to_f64_lossy();
    Matrix::from_fn(rows, cols, |_, _| T::lit(rng.random_range(-b..=b)))
}
