//! Versioned binary parameter container: magic "AMRPN1", then named
//! tensor records (length-prefixed UTF-8 name, u64-LE rank and dims,
//! f64-LE data). Layers serialize as a `.weights` / `.bias` record pair.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::conv::ConvLayer;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"AMRPN1";

const MAX_NAME: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: Tensor,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_records(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u64(&mut out, records.len() as u64);
    for r in records {
        put_u64(&mut out, r.name.len() as u64);
        out.extend_from_slice(r.name.as_bytes());
        put_u64(&mut out, r.tensor.rank() as u64);
        for &d in r.tensor.dims() {
            put_u64(&mut out, d as u64);
        }
        for &v in r.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated checkpoint".to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn usize_bounded(&mut self, bound: usize, what: &str) -> Result<usize> {
        let v = self.u64()?;
        if v > bound as u64 {
            return Err(Error::Checkpoint(format!("{what} {v} exceeds limit {bound}")));
        }
        Ok(v as usize)
    }
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a parameter checkpoint".to_string()));
    }
    let count = r.usize_bounded(1 << 20, "record count")?;
    let mut records = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.usize_bounded(MAX_NAME, "name length")?;
        let name = core::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".to_string()))?
            .to_string();
        let rank = r.usize_bounded(crate::tensor::MAX_RANK, "rank")?;
        if rank == 0 {
            return Err(Error::Checkpoint(format!("record {name:?} has rank 0")));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut len = 1usize;
        for _ in 0..rank {
            let d = r.usize_bounded(1 << 32, "extent")?;
            len = len
                .checked_mul(d)
                .filter(|&l| l <= (1 << 31))
                .ok_or_else(|| Error::Checkpoint(format!("record {name:?} too large")))?;
            dims.push(d);
        }
        let raw = r.take(len * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("record {name:?} holds non-finite values")));
        }
        let tensor = Tensor::new(&dims, data)
            .map_err(|e| Error::Checkpoint(format!("record {name:?}: {e}")))?;
        records.push(Record { name, tensor });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last record".to_string()));
    }
    Ok(records)
}

/// The two records a layer serializes to.
pub fn layer_records(name: &str, layer: &ConvLayer) -> [Record; 2] {
    [
        Record { name: format!("{name}.weights"), tensor: layer.weights.clone() },
        Record {
            name: format!("{name}.bias"),
            tensor: Tensor::new(&[layer.bias.len()], layer.bias.clone())
                .expect("bias is non-empty"),
        },
    ]
}

/// Copies `<name>.weights` / `<name>.bias` into an already constructed
/// layer, insisting the stored dims match the architecture.
pub fn load_layer(records: &[Record], name: &str, layer: &mut ConvLayer) -> Result<()> {
    let find = |suffix: &str| {
        let full = format!("{name}.{suffix}");
        records
            .iter()
            .find(|r| r.name == full)
            .ok_or_else(|| Error::Checkpoint(format!("missing record {full:?}")))
    };
    let w = find("weights")?;
    if w.tensor.dims() != layer.weights.dims() {
        return Err(Error::Checkpoint(format!(
            "record {:?} dims {:?} do not match layer dims {:?}",
            w.name,
            w.tensor.dims(),
            layer.weights.dims()
        )));
    }
    let b = find("bias")?;
    if b.tensor.dims() != [layer.bias.len()] {
        return Err(Error::Checkpoint(format!(
            "record {:?} holds {} biases, layer has {}",
            b.name,
            b.tensor.len(),
            layer.bias.len()
        )));
    }
    layer.weights.data_mut().copy_from_slice(w.tensor.data());
    layer.bias.copy_from_slice(b.tensor.data());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_preserves_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let layer = ConvLayer::new_2d(3, 5, 3, 1, 1, &mut rng);
        let records = layer_records("head.shared", &layer);
        let bytes = encode_records(&records);
        assert_eq!(&bytes[..6], MAGIC);
        let back = decode_records(&bytes).unwrap();
        assert_eq!(back, records);
        let mut fresh = ConvLayer::new_2d(3, 5, 3, 1, 1, &mut rng);
        assert_ne!(fresh.weights.data(), layer.weights.data());
        load_layer(&back, "head.shared", &mut fresh).unwrap();
        assert_eq!(fresh.weights, layer.weights);
        assert_eq!(fresh.bias, layer.bias);
    }

    #[test]
    fn corrupt_containers_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let layer = ConvLayer::new_2d(1, 1, 3, 1, 1, &mut rng);
        let bytes = encode_records(&layer_records("l", &layer));
        assert!(decode_records(&bytes[..bytes.len() - 1]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(decode_records(&bad_magic).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(decode_records(&trailing).is_err());
        // Non-finite payloads are refused at decode time.
        let mut records = layer_records("l", &layer).to_vec();
        records[0].tensor.data_mut()[0] = f64::NAN;
        let nan_bytes = encode_records(&records);
        assert!(decode_records(&nan_bytes).is_err());
    }

    #[test]
    fn load_rejects_wrong_architecture() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let saved = ConvLayer::new_2d(2, 4, 3, 1, 1, &mut rng);
        let records = decode_records(&encode_records(&layer_records("a", &saved))).unwrap();
        let mut other = ConvLayer::new_2d(2, 4, 1, 1, 0, &mut rng);
        assert!(load_layer(&records, "a", &mut other).is_err());
        let mut fine = ConvLayer::new_2d(2, 4, 3, 1, 1, &mut rng);
        assert!(load_layer(&records, "missing", &mut fine).is_err());
        assert!(load_layer(&records, "a", &mut fine).is_ok());
    }
}
