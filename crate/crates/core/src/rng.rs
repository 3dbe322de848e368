//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit `seed`. Independent consumers of
//! the same seed draw from distinct ChaCha streams so that adding samples to
//! one stage never shifts another stage's draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use crate::measure::Measure;

pub type SimRng = ChaCha8Rng;

/// Stream identifiers, one per consumer.
pub mod stream {
    pub const TRAJECTORY: u64 = 1;
    pub const SYNTHESIS_SAMPLES: u64 = 2;
    pub const SYNTHESIS_POLICIES: u64 = 3;
    pub const AUDIT: u64 = 4;
    pub const IDENTITY_CHECK: u64 = 5;
    pub const LYAPUNOV: u64 = 6;
    pub const STABILITY: u64 = 7;
    pub const LEARNING: u64 = 8;
    pub const LIFT: u64 = 9;
    pub const INSTANCE: u64 = 10;
}

pub fn rng_for(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform draw from the probability simplex (flat Dirichlet).
pub fn random_measure<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Measure {
    loop {
        let draws: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 {
            // Exact unit mass is not guaranteed after division; renormalize
            // through the checked constructor.
            if let Ok(m) = Measure::normalized(draws) {
                return m;
            }
        }
    }
}

pub fn random_measures(seed: u64, stream: u64, n: usize, count: usize) -> Vec<Measure> {
    let mut rng = rng_for(seed, stream);
    (0..count).map(|_| random_measure(&mut rng, n)).collect()
}
