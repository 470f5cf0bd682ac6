//! Content hashes used to tie results back to the exact frozen weights and
//! data they were produced from.

use sha2::{Digest, Sha256};

/// Incremental SHA-256 over little-endian encodings.
#[derive(Default)]
pub struct Fingerprinter(Sha256);

impl Fingerprinter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, bytes: &[u8]) -> &mut Self {
        self.0.update(bytes);
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64s(&mut self, values: &[f64]) -> &mut Self {
        for v in values {
            self.0.update(v.to_le_bytes());
        }
        self
    }

    /// First 16 bytes of the digest as lowercase hex.
    pub fn finish(self) -> String {
        self.0.finalize()[..16].iter().map(|b| format!("{b:02x}")).collect()
    }
}
