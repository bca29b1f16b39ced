use sha2::{Digest, Sha256};

/// Incremental SHA-256 over little-endian encodings of the values we hash.
pub(crate) struct Hasher(Sha256);

impl Hasher {
    pub(crate) fn new(tag: &[u8]) -> Self {
        let mut h = Sha256::new();
        h.update(tag);
        Self(h)
    }

    pub(crate) fn bytes(&mut self, b: &[u8]) {
        self.0.update(b);
    }

    pub(crate) fn u32(&mut self, v: u32) {
        self.0.update(v.to_le_bytes());
    }

    pub(crate) fn f32(&mut self, v: f32) {
        self.0.update(v.to_le_bytes());
    }

    pub(crate) fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.0.update(v.to_le_bytes());
        }
    }

    pub(crate) fn finish(self) -> [u8; 32] {
        self.0.finalize().into()
    }
}
