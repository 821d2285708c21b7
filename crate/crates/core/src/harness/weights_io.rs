//! Binary weights file.
//!
//! ```text
//! "GLDF" | version u32 | count u32 | { name_len u32 | name | rank u32 | dims u32… | f32… }* | crc32 u32
//! ```
//!
//! All integers and floats are little-endian; the CRC covers every byte
//! before it.

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::WeightStore;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"GLDF";
pub const VERSION: u32 = 1;

pub fn encode_weights(store: &WeightStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * store.scalar_count() + 64 * store.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&4u32.to_le_bytes());
        for d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a weights file. The header is checked before the checksum so a
/// foreign file is reported as such; a short file is reported as truncated.
pub fn decode_weights(bytes: &[u8]) -> Result<WeightStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch { found: version, expected: VERSION });
    }
    if bytes.len() < 16 {
        return Err(Error::Truncated("tensor count"));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        // a cut-off file usually fails the checksum too; say which it was
        let mut probe = Reader { buf: body, pos: 8 };
        if let Err(e @ Error::Truncated(_)) = walk(&mut probe) {
            return Err(e);
        }
        return Err(Error::CrcMismatch { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 8 };
    let store = walk(&mut r)?;
    if r.pos != body.len() {
        return Err(Error::Malformed(format!("{} trailing bytes after the last tensor", body.len() - r.pos)));
    }
    Ok(store)
}

fn walk(r: &mut Reader<'_>) -> Result<WeightStore> {
    let count = r.u32("tensor count")?;
    let mut store = WeightStore::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::Malformed(format!("tensor `{name}` has rank {rank}")));
        }
        let mut dims = [1usize; 4];
        for i in 0..rank {
            dims[4 - rank + i] = r.u32("dims")? as usize;
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or(Error::Truncated("data"))?, "data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if store.insert(name.clone(), Tensor::new(dims, data)?).is_some() {
            return Err(Error::Malformed(format!("duplicate tensor `{name}`")));
        }
    }
    Ok(store)
}

pub fn save_weights(store: &WeightStore, path: &Path) -> Result<()> {
    std::fs::write(path, encode_weights(store)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<WeightStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use proptest::prelude::*;

    #[test]
    fn empty_store_layout() {
        let bytes = encode_weights(&WeightStore::new());
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[..4], b"GLDF");
        assert_eq!(&bytes[8..12], &[0, 0, 0, 0]);
        assert!(decode_weights(&bytes).unwrap().is_empty());
    }

    #[test]
    fn network_round_trip() {
        let store = WeightStore::init(&NetworkConfig::tiny(3), 2).unwrap();
        let back = decode_weights(&encode_weights(&store)).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.infer_config().unwrap(), NetworkConfig::tiny(3));
    }

    #[test]
    fn corruption_classes() {
        let store = WeightStore::init(&NetworkConfig::tiny(2), 2).unwrap();
        let good = encode_weights(&store);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_weights(&bad), Err(Error::BadMagic(_))));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode_weights(&bad), Err(Error::VersionMismatch { found: 9, .. })));

        let mut bad = good.clone();
        let mid = good.len() / 2;
        bad[mid] ^= 0x40;
        assert!(matches!(decode_weights(&bad), Err(Error::CrcMismatch { .. })));

        assert!(matches!(decode_weights(&good[..good.len() - 100]), Err(Error::Truncated(_))));
        assert!(matches!(decode_weights(&good[..6]), Err(Error::Truncated(_))));
    }

    proptest! {
        #[test]
        fn random_stores_round_trip(values in proptest::collection::vec(any::<f32>(), 1..40), split in 1usize..40) {
            let mut store = WeightStore::new();
            let split = split.min(values.len());
            store.insert("first", Tensor::new([1, 1, 1, split], values[..split].to_vec()).unwrap());
            store.insert("second.b", Tensor::new([1, values.len() - split, 1, 1], values[split..].to_vec()).unwrap());
            let back = decode_weights(&encode_weights(&store)).unwrap();
            for ((n1, a), (n2, b)) in store.iter().zip(back.iter()) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(a.dims(), b.dims());
                let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }
}
