//! Labeled splitting of a master seed into independent random streams.
//!
//! Every noise source in a run (arrivals, durations, gradients, client and server
//! quantizers, constant estimation) draws from its own stream, keyed by a label and
//! an index, so that one source can be held fixed while another varies.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Random generator used throughout the crate.
pub type StreamRng = ChaCha20Rng;

/// Names of the per-component substreams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Arrivals,
    Durations,
    Gradients,
    ClientQuantizer,
    ServerQuantizer,
    Constants,
    Task,
}

impl Stream {
    fn label(self) -> &'static str {
        match self {
            Stream::Arrivals => "arrivals",
            Stream::Durations => "durations",
            Stream::Gradients => "gradients",
            Stream::ClientQuantizer => "client-quantizer",
            Stream::ServerQuantizer => "server-quantizer",
            Stream::Constants => "constants",
            Stream::Task => "task",
        }
    }
}

/// Master seed with labeled derivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    master: u64,
}

impl SeedStreams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Generator for `(stream, index)`; identical inputs give identical streams.
    pub fn rng(&self, stream: Stream, index: u64) -> StreamRng {
        ChaCha20Rng::from_seed(derive_seed(self.master, stream.label(), index))
    }
}

/// SHA-256 of `(master, label, index)`, used as a 256-bit ChaCha seed.
pub fn derive_seed(master: u64, label: &str, index: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master.to_be_bytes());
    hasher.update((label.len() as u64).to_be_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_be_bytes());
    hasher.finalize().into()
}

/// Uniform index in `0..n` from exactly one 64-bit draw (multiply-shift, no rejection).
pub fn index_from_u64(draw: u64, n: usize) -> usize {
    ((u128::from(draw) * n as u128) >> 64) as usize
}
