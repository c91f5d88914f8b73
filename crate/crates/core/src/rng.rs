//! Seeded generator streams.
//!
//! Every random decision in a run comes from a ChaCha8 generator keyed by the
//! run seed and, for per-client streams, the client index (`seed ^ client`).
//! Each consumer gets its own ChaCha stream number so draws for one purpose
//! never shift the sequence seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream numbers. Client streams and server streams never share a number.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Privacy = 2,
    LocalPool = 3,
    LocalNegatives = 4,
    SemiHard = 5,
    Selection = 16,
    Clustering = 17,
    Synthetic = 18,
}

pub fn server_rng(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

pub fn client_rng(seed: u64, client: usize, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ client as u64);
    rng.set_stream(stream as u64);
    rng
}
