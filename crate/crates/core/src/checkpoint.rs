//! Unified checkpoint file.
//!
//! Layout (little-endian): magic `TPGC`, version `u32`, stage `u32`, step
//! `u64`, SHA-256 of the config text (32 bytes), config length `u64`, config
//! TOML, record count `u64`, then per record: name length `u32`, name,
//! trainable `u8`, and a TPGT tensor.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{read_tensor_from, write_tensor_to, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TPGC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: u32,
    pub step: u64,
    pub config: String,
    pub records: Vec<Record>,
}

pub fn config_hash(config: &str) -> [u8; 32] {
    Sha256::digest(config.as_bytes()).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    /// Snapshot of every parameter in `store`.
    pub fn from_store(store: &ParamStore, stage: u32, step: u64, config: &str) -> Self {
        Checkpoint {
            stage,
            step,
            config: config.to_string(),
            records: store
                .iter()
                .map(|(_, p)| Record {
                    name: p.name.clone(),
                    trainable: p.trainable,
                    value: p.value.clone(),
                })
                .collect(),
        }
    }

    pub fn hash(&self) -> [u8; 32] {
        config_hash(&self.config)
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Copies every store parameter accepted by `filter` from the
    /// checkpoint. Missing records and shape changes are errors.
    pub fn restore_into(&self, store: &mut ParamStore, filter: impl Fn(&str) -> bool) -> Result<usize> {
        let wanted: Vec<_> = store.ids().filter(|&id| filter(store.name(id))).collect();
        for &id in &wanted {
            let name = store.name(id).to_string();
            let rec = self.get(&name).ok_or_else(|| Error::Config(format!("checkpoint has no parameter '{name}'")))?;
            store.set(id, rec.value.clone())?;
        }
        Ok(wanted.len())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.stage.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.hash())?;
        w.write_all(&(self.config.len() as u64).to_le_bytes())?;
        w.write_all(self.config.as_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for r in &self.records {
            w.write_all(&(r.name.len() as u32).to_le_bytes())?;
            w.write_all(r.name.as_bytes())?;
            w.write_all(&[r.trainable as u8])?;
            write_tensor_to(w, &r.value)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut rd = Reader { r: &mut r, path };
        let magic: [u8; 4] = rd.array()?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(rd.bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(rd.array()?);
        if version != VERSION {
            return Err(rd.bad(&format!("unsupported version {version}")));
        }
        let stage = u32::from_le_bytes(rd.array()?);
        let step = u64::from_le_bytes(rd.array()?);
        let hash: [u8; 32] = rd.array()?;
        let len = u64::from_le_bytes(rd.array()?);
        let config = rd.string(len)?;
        if config_hash(&config) != hash {
            return Err(rd.bad("config hash does not match its text"));
        }
        let n = u64::from_le_bytes(rd.array()?);
        let mut records = Vec::new();
        for _ in 0..n {
            let len = u32::from_le_bytes(rd.array()?) as u64;
            let name = rd.string(len)?;
            let [flag] = rd.array()?;
            let value = read_tensor_from(rd.r, path)?;
            records.push(Record {
                name,
                trainable: flag != 0,
                value,
            });
        }
        let mut rest = [0u8; 1];
        if rd.r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
            return Err(rd.bad("trailing bytes"));
        }
        Ok(Checkpoint {
            stage,
            step,
            config,
            records,
        })
    }
}

struct Reader<'a, R> {
    r: &'a mut R,
    path: &'a Path,
}

impl<R: Read> Reader<'_, R> {
    fn bad(&self, msg: &str) -> Error {
        Error::Format {
            path: PathBuf::from(self.path),
            msg: msg.to_string(),
        }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.r.read_exact(&mut buf).map_err(|_| self.bad("truncated"))?;
        Ok(buf)
    }

    fn string(&mut self, len: u64) -> Result<String> {
        if len > 1 << 24 {
            return Err(self.bad("string length out of range"));
        }
        let mut buf = vec![0u8; len as usize];
        self.r.read_exact(&mut buf).map_err(|_| self.bad("truncated"))?;
        String::from_utf8(buf).map_err(|_| self.bad("invalid UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        let mut r = rng::stream(3, 0);
        s.add("a.w", Tensor::randn(&[3, 4], 1.0, &mut r), true);
        s.add("b.bias", Tensor::randn(&[2], 1.0, &mut r), false);
        s
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let ck = Checkpoint::from_store(&store(), 2, 77, "x = 1\n");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        let bits = |c: &Checkpoint| -> Vec<u64> { c.records.iter().flat_map(|r| r.value.data().iter().map(|v| v.to_bits())).collect() };
        assert_eq!(bits(&back), bits(&ck));
    }

    #[test]
    fn restore_respects_filter_and_reports_missing() {
        let src = store();
        let ck = Checkpoint::from_store(&src, 1, 0, "");
        let mut dst = ParamStore::new();
        dst.add("a.w", Tensor::zeros(&[3, 4]), true);
        dst.add("c.extra", Tensor::zeros(&[1]), true);
        assert_eq!(ck.restore_into(&mut dst, |n| n.starts_with("a.")).unwrap(), 1);
        assert_eq!(dst.get(dst.id("a.w").unwrap()), src.get(src.id("a.w").unwrap()));
        assert!(ck.restore_into(&mut dst, |_| true).is_err());
    }

    #[test]
    fn corruption_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        Checkpoint::from_store(&store(), 1, 0, "seed = 4\n").save(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        // Flip a byte inside the config text.
        let at = 4 + 4 + 4 + 8 + 32 + 8;
        bytes[at] ^= 1;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Format { .. })));
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(Checkpoint::load(&p).is_err());
        std::fs::write(&p, b"TPGT").unwrap();
        assert!(Checkpoint::load(&p).is_err());
    }
}
