//! Fixed-size byte encoding for forwardable records.

/// A fixed-size, byte-copyable record that can be forwarded between ranks.
///
/// Every value of the type serializes to exactly `ITEM_SIZE` bytes with an
/// explicit little-endian layout, so the wire format is identical across
/// platforms and transports.
pub trait WorkItem: Copy + Send + Sync + 'static {
    const ITEM_SIZE: usize;

    /// Write the record into `dst`, which is exactly `ITEM_SIZE` bytes.
    fn store(&self, dst: &mut [u8]);

    /// Read a record back from `src`, which is exactly `ITEM_SIZE` bytes.
    fn load(src: &[u8]) -> Self;
}

impl WorkItem for u64 {
    const ITEM_SIZE: usize = 8;

    fn store(&self, dst: &mut [u8]) {
        dst.copy_from_slice(&self.to_le_bytes());
    }

    fn load(src: &[u8]) -> Self {
        u64::from_le_bytes(src.try_into().unwrap())
    }
}

impl<const N: usize> WorkItem for [u8; N] {
    const ITEM_SIZE: usize = N;

    fn store(&self, dst: &mut [u8]) {
        dst.copy_from_slice(self);
    }

    fn load(src: &[u8]) -> Self {
        src.try_into().unwrap()
    }
}

/// Cursor helpers for hand-written `WorkItem` impls.
pub(crate) mod wire {
    pub fn put_u32(dst: &mut [u8], at: &mut usize, v: u32) {
        dst[*at..*at + 4].copy_from_slice(&v.to_le_bytes());
        *at += 4;
    }

    pub fn put_f64(dst: &mut [u8], at: &mut usize, v: f64) {
        dst[*at..*at + 8].copy_from_slice(&v.to_le_bytes());
        *at += 8;
    }

    pub fn put_vec3(dst: &mut [u8], at: &mut usize, v: [f64; 3]) {
        for c in v {
            put_f64(dst, at, c);
        }
    }

    pub fn get_u32(src: &[u8], at: &mut usize) -> u32 {
        let v = u32::from_le_bytes(src[*at..*at + 4].try_into().unwrap());
        *at += 4;
        v
    }

    pub fn get_f64(src: &[u8], at: &mut usize) -> f64 {
        let v = f64::from_le_bytes(src[*at..*at + 8].try_into().unwrap());
        *at += 8;
        v
    }

    pub fn get_vec3(src: &[u8], at: &mut usize) -> [f64; 3] {
        [get_f64(src, at), get_f64(src, at), get_f64(src, at)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u64_roundtrip() {
        let mut buf = [0u8; 8];
        0xdead_beef_u64.store(&mut buf);
        assert_eq!(u64::load(&buf), 0xdead_beef);
    }

    #[test]
    fn array_roundtrip() {
        let item = [1u8, 2, 3, 4, 5];
        let mut buf = [0u8; 5];
        item.store(&mut buf);
        assert_eq!(<[u8; 5]>::load(&buf), item);
    }
}
