//! `TPGT` tensor container: magic, `u32` version, `u32` rank, `u64` extents,
//! then the payload as little-endian `f64`. All integers little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"TPGT";
const VERSION: u32 = 1;
const MAX_RANK: u32 = 16;

pub fn write_tensor_to<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &n in t.shape() {
        w.write_all(&(n as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one tensor record; `origin` labels format errors.
pub fn read_tensor_from<R: Read>(r: &mut R, origin: &Path) -> Result<Tensor> {
    let bad = |msg: String| Error::Format {
        path: origin.to_path_buf(),
        msg,
    };
    let io = |e: std::io::Error| Error::io(origin, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != TENSOR_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r).map_err(io)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let rank = read_u32(r).map_err(io)?;
    if rank == 0 || rank > MAX_RANK {
        return Err(bad(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let n = read_u64(r).map_err(io)?;
        shape.push(usize::try_from(n).map_err(|_| bad(format!("extent {n} too large")))?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .ok_or_else(|| bad("element count overflows".into()))?;
    let mut bytes = vec![0u8; numel * 8];
    r.read_exact(&mut bytes).map_err(io)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&shape, data).map_err(|e| bad(e.to_string()))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor_to(&mut w, t)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let t = read_tensor_from(&mut r, path)?;
    let mut rest = [0u8; 1];
    match r.read(&mut rest) {
        Ok(0) => Ok(t),
        Ok(_) => Err(Error::Format {
            path: path.to_path_buf(),
            msg: "trailing bytes after tensor payload".into(),
        }),
        Err(e) => Err(Error::io(path, e)),
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new(&[1, 2], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        let mut want = b"TPGT".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(1u64.to_le_bytes());
        want.extend(2u64.to_le_bytes());
        want.extend(1.0f64.to_le_bytes());
        want.extend((-0.5f64).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &Tensor::ones(&[3])).unwrap();
        let origin = Path::new("mem");
        assert!(read_tensor_from(&mut &buf[..buf.len() - 1], origin).is_err());
        buf[0] = b'X';
        assert!(matches!(
            read_tensor_from(&mut &buf[..], origin),
            Err(Error::Format { .. })
        ));
    }

    proptest! {
        #[test]
        fn roundtrip(shape in prop::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::randn(&shape, 3.0, &mut rng);
            let mut buf = Vec::new();
            write_tensor_to(&mut buf, &t).unwrap();
            let back = read_tensor_from(&mut &buf[..], Path::new("mem")).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
