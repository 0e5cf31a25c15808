//! `VVWT` parameter snapshots.
//!
//! Layout (little-endian): magic `VVWT`, version u32, count u32, then per
//! parameter: name length u16, name bytes, rank u8, dims u32 each, f32 data.

use std::io::{Read, Write};

use super::array::{Array, Element};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::io::{read_exact_array, read_u16, read_u32, read_u8};

pub const MAGIC: &[u8; 4] = b"VVWT";
pub const VERSION: u32 = 1;

pub fn write_params<T: Element>(store: &ParamStore<T>, mut w: impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, name, value) in store.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        let rank = u8::try_from(value.rank())
            .map_err(|_| Error::Format(format!("rank too large for {name}")))?;
        w.write_all(&[rank])?;
        for &d in value.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(value.len() * 4);
        for &x in value.data() {
            buf.extend_from_slice(&(x.to_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_params(mut r: impl Read) -> Result<ParamStore<f32>> {
    let magic: [u8; 4] = read_exact_array(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad snapshot magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported snapshot version {version}"
        )));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u16(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = read_u8(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.add(name, Array::from_vec(&shape, data)?);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trip() {
        let mut store = ParamStore::<f32>::new();
        store.add(
            "conv.w",
            Array::from_vec(&[2, 1, 1, 1], vec![1.5, -2.0]).unwrap(),
        );
        store.add("bias", Array::scalar(0.25));
        let mut buf = Vec::new();
        write_params(&store, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"VVWT");
        let back = read_params(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.name(back.find("bias").unwrap()), "bias");
        assert_eq!(
            back.get(back.find("conv.w").unwrap()),
            store.get(store.find("conv.w").unwrap())
        );
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = read_params(&b"XXXX\x01\0\0\0\0\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }
}
