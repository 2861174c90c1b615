//! Deterministic random-number streams.
//!
//! Every consumer derives its stream from `(master_seed, stream_index)`, so
//! results are identical under any execution order or thread count. Streams
//! never share mutable state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

/// One independent random stream.
pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    /// Stream `index` derived from `master_seed`; disjoint for distinct indices.
    pub fn new(master_seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(index);
        Stream { rng }
    }

    /// Uniform draw in the open interval (0, 1).
    pub fn uniform_open<T: Scalar>(&mut self) -> T {
        loop {
            let u: f64 = self.rng.gen();
            if u > 0.0 {
                return T::of(u);
            }
        }
    }

    /// Uniform draw in the half-open interval [0, 1).
    pub fn uniform<T: Scalar>(&mut self) -> T {
        T::of(self.rng.gen::<f64>())
    }

    /// Uniform draw in [lo, hi).
    pub fn range<T: Scalar>(&mut self, lo: T, hi: T) -> T {
        lo + (hi - lo) * self.uniform::<T>()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }
}
