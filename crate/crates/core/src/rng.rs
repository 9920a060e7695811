//! Counter-based random streams.
//!
//! Every independent unit of work (a candidate simulation, a test case, a
//! chain) owns a ChaCha stream addressed by `(master seed, namespace, index)`,
//! so results do not depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream namespaces. Distinct namespaces never share a stream.
pub mod ns {
    pub const DATAGEN: u16 = 1;
    pub const TRAIN: u16 = 2;
    pub const INFER: u16 = 3;
    pub const EVAL_CASES: u16 = 4;
    pub const MCMC: u16 = 5;
    pub const MAP: u16 = 6;
    pub const EVAL_SBI: u16 = 7;
    pub const SERVICE: u16 = 8;
    pub const SIMULATE: u16 = 9;
}

pub fn stream(seed: u64, namespace: u16, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((namespace as u64) << 48) | (index & 0x0000_ffff_ffff_ffff));
    rng
}
