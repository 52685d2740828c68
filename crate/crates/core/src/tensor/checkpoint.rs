//! `BOFP` parameter files: magic, `u32` version, `u32` tensor count, then per
//! tensor `u32` rank, `u32` dims and little-endian `f64` data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BOFP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[Tensor]) -> Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
    record: u64,
}

impl<R: Read> Cursor<R> {
    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        let mut read = 0;
        while read < buf.len() {
            match self.inner.read(&mut buf[read..]) {
                Ok(0) => {
                    return Err(Error::Truncated {
                        record: self.record,
                        offset: self.offset + read as u64,
                    })
                }
                Ok(n) => read += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
}

pub fn read_tensors<R: Read>(r: R) -> Result<Vec<Tensor>> {
    let mut c = Cursor {
        inner: r,
        offset: 0,
        record: 0,
    };
    let mut magic = [0u8; 4];
    c.fill(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = c.u32()?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for i in 0..count as u64 {
        c.record = i;
        let rank = c.u32()? as usize;
        if rank > 8 {
            return Err(Error::Malformed(format!("tensor {i} claims rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        c.fill(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        out.push(Tensor::new(shape, data)?);
    }
    Ok(out)
}

pub fn write_checkpoint(path: impl AsRef<Path>, tensors: &[Tensor]) -> Result<()> {
    write_tensors(BufWriter::new(File::create(path)?), tensors)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    read_tensors(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            tensors in proptest::collection::vec(
                (1usize..4, 1usize..5).prop_flat_map(|(r, c)| {
                    proptest::collection::vec(proptest::num::f64::ANY, r * c)
                        .prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
                }),
                0..5,
            )
        ) {
            let mut buf = Vec::new();
            write_tensors(&mut buf, &tensors).unwrap();
            let back = read_tensors(buf.as_slice()).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for (a, b) in back.iter().zip(&tensors) {
                prop_assert_eq!(a.shape(), b.shape());
                prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[Tensor::new(vec![2], vec![1.0, -0.5]).unwrap()]).unwrap();
        assert_eq!(&buf[..4], b"BOFP");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 2);
        assert_eq!(buf.len(), 20 + 16);
    }

    #[test]
    fn errors_are_distinguished() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[Tensor::zeros(&[3, 3])]).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_tensors(bad.as_slice()),
            Err(Error::BadMagic { .. })
        ));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(
            read_tensors(bad.as_slice()),
            Err(Error::UnsupportedVersion(9))
        ));
        assert!(matches!(
            read_tensors(&buf[..buf.len() - 3]),
            Err(Error::Truncated { record: 0, .. })
        ));
    }
}
