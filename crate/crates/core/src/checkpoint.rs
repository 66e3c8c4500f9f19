//! Binary parameter checkpoints.
//!
//! Layout: the magic `GEDCKPT1`, a little-endian `u32` version, then one record
//! per tensor until end of file: name length (`u16`), UTF-8 name, rank (`u8`),
//! each dimension (`u32`), and the values as little-endian `f64`.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{ensure, Error, Result};
use crate::models::GeneratorParams;
use crate::wav::write_atomic;

pub const MAGIC: &[u8; 8] = b"GEDCKPT1";
pub const VERSION: u32 = 1;

pub fn encode(params: &GeneratorParams) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + params.count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in params.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::invalid(format!("parameter name {name} is too long")))?;
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::invalid(format!("parameter {name} has too many dimensions")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::invalid(format!("dimension {d} of {name} is too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!("truncated checkpoint while reading {what} at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<GeneratorParams> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let mut params = GeneratorParams::new();
    while r.pos < bytes.len() {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(r.take(4, "dimension")?.try_into().expect("4 bytes")) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8, &format!("values of {name}"))?;
        let values = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, values).map_err(|e| Error::format(path, e.to_string()))?;
        if params.get(&name).is_some() {
            return Err(Error::format(path, format!("duplicate parameter {name}")));
        }
        params.insert(name, t);
    }
    Ok(params)
}

pub fn save(path: impl AsRef<Path>, params: &GeneratorParams) -> Result<()> {
    write_atomic(path.as_ref(), &encode(params)?)
}

pub fn load(path: impl AsRef<Path>) -> Result<GeneratorParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Loads a checkpoint and checks it has exactly the layout of `expected`.
pub fn load_matching(path: impl AsRef<Path>, expected: &GeneratorParams) -> Result<GeneratorParams> {
    let params = load(path)?;
    ensure!(
        params.same_layout(expected),
        "checkpoint parameters do not match the model layout"
    );
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Activation, MlpGenerator};

    #[test]
    fn round_trip_is_bit_exact() {
        let mut g = MlpGenerator::new(1, 3, &[5], 2, Activation::Tanh, 4).unwrap();
        g.params.get_mut("layer0.bias").unwrap().values_mut()[0] = f64::MIN_POSITIVE / 3.0;
        g.params.get_mut("layer1.bias").unwrap().values_mut()[1] = -0.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save(&path, &g.params).unwrap();
        let back = load_matching(&path, &g.params).unwrap();
        for ((na, a), (nb, b)) in g.params.iter().zip(back.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn header_and_corruption() {
        let mut p = GeneratorParams::new();
        p.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let bytes = encode(&p).unwrap();
        assert_eq!(&bytes[..8], b"GEDCKPT1");
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        // name len, "w", rank 1, dim 2, two values
        assert_eq!(bytes.len(), 12 + 2 + 1 + 1 + 4 + 16);
        let path = Path::new("c.ckpt");
        assert!(decode(&bytes[..bytes.len() - 1], path).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, path).is_err());
        assert_eq!(decode(&bytes[..12], path).unwrap().len(), 0);
    }
}
