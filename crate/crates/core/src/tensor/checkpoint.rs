//! `BLNS` parameter checkpoints.
//!
//! Layout (little-endian): magic `BLNS`, version `u32`, then until EOF one
//! record per parameter: name length `u32`, name bytes, rank `u32`, one `u32`
//! per dimension, and the `f64` payload in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::array::Tensor;
use super::params::ParamStore;
use crate::binio::{len_u32, Reader, Writer};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BLNS";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(store: &ParamStore, out: W) -> Result<()> {
    let mut w = Writer::new(out);
    w.bytes(CHECKPOINT_MAGIC)?;
    w.u32(CHECKPOINT_VERSION)?;
    for (name, p) in store.iter() {
        w.string(name)?;
        w.u32(len_u32(p.tensor.shape().len())?)?;
        for &d in p.tensor.shape() {
            w.u32(len_u32(d)?)?;
        }
        w.f64s(p.tensor.data())?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(BufReader::new(input), "checkpoint");
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let mut out = Vec::new();
    while !r.at_eof()? {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Malformed(format!("parameter `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f64s(numel)?;
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    write_checkpoint(store, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_checkpoint(File::open(path)?)
}

impl ParamStore {
    /// Overwrites every entry from a checkpoint; all names and shapes must match.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let mut other = ParamStore::new();
        for (name, t) in named {
            other.insert(name.clone(), t.clone(), true);
        }
        self.load_from(&other)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(
            "enc.weight",
            Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, -0.0]).unwrap(),
            true,
        );
        s.insert("enc.bn.running_var", Tensor::from_vec(vec![1.0, 2.0]), false);
        s.insert("scalar", Tensor::scalar(4.25), true);
        s
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let mut bytes = Vec::new();
        write_checkpoint(&store(), &mut bytes).unwrap();
        let named = read_checkpoint(&bytes[..]).unwrap();
        let mut again = ParamStore::new();
        for (n, t) in &named {
            again.insert(n.clone(), t.clone(), true);
        }
        let mut bytes2 = Vec::new();
        write_checkpoint(&again, &mut bytes2).unwrap();
        assert_eq!(bytes, bytes2);
        assert_eq!(named[0].1, store().tensor("enc.weight").unwrap().clone());
    }

    #[test]
    fn corruptions_rejected() {
        let mut bytes = Vec::new();
        write_checkpoint(&store(), &mut bytes).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&bad[..]), Err(Error::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            read_checkpoint(&bad[..]),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));

        let bad = &bytes[..bytes.len() - 3];
        assert!(matches!(read_checkpoint(bad), Err(Error::UnexpectedEof(_))));
    }

    #[test]
    fn load_named_checks_shapes() {
        let mut s = store();
        let mut named = read_checkpoint(
            &{
                let mut b = Vec::new();
                write_checkpoint(&store(), &mut b).unwrap();
                b
            }[..],
        )
        .unwrap();
        s.load_named(&named).unwrap();
        named[0].1 = Tensor::zeros(&[3, 2]);
        assert!(s.load_named(&named).is_err());
    }
}
