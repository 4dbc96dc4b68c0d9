//! Checkpoint file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "DTK1" | version u32 | count u32 | entry* | crc32 u32
//! entry := name_len u32 | name utf-8 | dtype u8 | rank u32
//!        | dims u64 * rank | frozen u8 | raw little-endian data
//! ```
//!
//! The trailing CRC32 covers the payload (count through the last entry).
//! Loading reproduces every tensor bit-exactly, including frozen flags.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{DtkError, Result};
use crate::store::ParameterStore;
use crate::tensor::{Dtype, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"DTK1";
pub const VERSION: u32 = 1;

pub fn save<F: Scalar>(store: &ParameterStore<F>, path: &Path) -> Result<()> {
    if !store.all_finite() {
        return Err(DtkError::numeric("checkpoint_save", "store contains non-finite values"));
    }
    let mut payload = Vec::new();
    payload.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, param) in store.iter() {
        let name_bytes = name.as_bytes();
        payload.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        payload.extend_from_slice(name_bytes);
        payload.push(F::DTYPE.tag());
        let shape = param.tensor.shape();
        payload.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            payload.extend_from_slice(&(d as u64).to_le_bytes());
        }
        payload.push(u8::from(param.frozen));
        for &v in param.tensor.data() {
            v.write_le(&mut payload);
        }
    }
    let crc = crc32fast::hash(&payload);

    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&payload)?;
    file.write_all(&crc.to_le_bytes())?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(DtkError::Format(format!(
                "truncated checkpoint: needed {n} bytes at offset {}, {} available",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn load<F: Scalar>(path: &Path) -> Result<ParameterStore<F>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(DtkError::Format("file shorter than header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(DtkError::Format(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[0..4],
            MAGIC
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(DtkError::Format(format!("unknown version {version}")));
    }
    let payload = &bytes[8..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let crc = crc32fast::hash(payload);
    if crc != stored_crc {
        return Err(DtkError::Format(format!(
            "checksum mismatch: stored {stored_crc:#010x}, computed {crc:#010x}"
        )));
    }

    let mut r = Reader { buf: payload, pos: 0 };
    let count = r.u32()? as usize;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| DtkError::Format(format!("non-UTF-8 parameter name: {e}")))?
            .to_string();
        let dtype = Dtype::from_tag(r.u8()?)?;
        if dtype != F::DTYPE {
            return Err(DtkError::Format(format!(
                "dtype mismatch for {name}: checkpoint has {dtype:?}, requested {:?}",
                F::DTYPE
            )));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let frozen = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(DtkError::Format(format!("bad frozen flag {other}"))),
        };
        let numel: usize = shape.iter().product();
        let elem = dtype.size();
        let raw = r.take(numel.checked_mul(elem).ok_or_else(|| {
            DtkError::Format(format!("dimension overflow in {name}: {shape:?}"))
        })?)?;
        let data: Vec<F> = raw.chunks_exact(elem).map(F::read_le).collect();
        store.insert(name, Tensor::from_vec(shape, data)?, frozen)?;
    }
    if r.pos != payload.len() {
        return Err(DtkError::Format(format!(
            "{} trailing bytes after last entry",
            payload.len() - r.pos
        )));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_store(seed: u64) -> ParameterStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        store.insert("backbone.w", Tensor::randn(vec![3, 4], 0.02, &mut rng), true).unwrap();
        store.insert("adapter.text.layer.1.gate", Tensor::zeros(vec![1]), false).unwrap();
        store
            .insert("adapter.text.layer.1.tokens", Tensor::randn(vec![2, 4], 0.02, &mut rng), false)
            .unwrap();
        store
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let store = sample_store(1);
        save(&store, &path).unwrap();
        let loaded = load::<f32>(&path).unwrap();
        assert_eq!(loaded.len(), store.len());
        for (name, p) in store.iter() {
            let l = loaded.get(name).unwrap();
            assert_eq!(l.frozen, p.frozen);
            assert_eq!(l.tensor.shape(), p.tensor.shape());
            // bit-exact comparison
            let bits_a: Vec<u32> = p.tensor.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = l.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn corrupted_length_header_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        save(&sample_store(2), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // first entry's name_len lives right after magic+version+count
        bytes[12] = 0xff;
        bytes[13] = 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load::<f32>(&path), Err(DtkError::Format(_))));
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save(&sample_store(3), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load::<f32>(&path), Err(DtkError::Format(_))));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        save(&sample_store(4), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load::<f32>(&path), Err(DtkError::Format(_))));
    }

    #[test]
    fn checksum_recorded_matches_independent_recompute() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ckpt");
        save(&sample_store(5), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let recomputed = crc32fast::hash(&bytes[8..bytes.len() - 4]);
        assert_eq!(stored, recomputed);
    }
}
