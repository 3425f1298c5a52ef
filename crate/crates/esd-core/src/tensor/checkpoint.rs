//! Binary checkpoint format for named tensors.
//!
//! Layout, all little-endian: magic `ESDC`, version u32, count u32, then per
//! tensor: name length u16 + UTF-8 bytes, rank u8, extents u32 each, payload
//! as 32-bit IEEE-754. Values are held in 64-bit everywhere else; only this
//! format narrows to 32-bit.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::Tensor;

const MAGIC: &[u8; 4] = b"ESDC";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not an ESDC checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

pub fn save_checkpoint<W: Write>(
    mut w: W,
    tensors: &[(String, &Tensor)],
) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(CheckpointError::Malformed(format!(
                "tensor name too long: {} bytes",
                name_bytes.len()
            )));
        }
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        let shape = t.shape();
        if shape.len() > u8::MAX as usize {
            return Err(CheckpointError::Malformed(format!(
                "rank {} too large",
                shape.len()
            )));
        }
        w.write_all(&[shape.len() as u8])?;
        for &e in shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated
        } else {
            CheckpointError::Io(e)
        }
    })
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, CheckpointError> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| CheckpointError::Malformed(format!("tensor name not UTF-8: {e}")))?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 4];
        for _ in 0..numel {
            read_exact(&mut r, &mut b)?;
            data.push(f32::from_le_bytes(b) as f64);
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("bad tensor record: {e}")))?;
        out.push((name, tensor));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_tensors() -> Vec<(String, Tensor)> {
        vec![
            (
                "enc.w".into(),
                Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 0.0, 7.5, -0.125]).unwrap(),
            ),
            ("enc.b".into(), Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()),
            ("scalar".into(), Tensor::scalar(4.75)),
        ]
    }

    #[test]
    fn round_trip_preserves_f32_representable_values() {
        let tensors = sample_tensors();
        let refs: Vec<(String, &Tensor)> =
            tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &refs).unwrap();
        let loaded = load_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(loaded.len(), tensors.len());
        for ((n0, t0), (n1, t1)) in tensors.iter().zip(&loaded) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            assert_eq!(t0.data(), t1.data());
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let tensors = sample_tensors();
        let refs: Vec<(String, &Tensor)> =
            tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &refs).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            load_checkpoint(buf.as_slice()),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn truncation_is_rejected() {
        let tensors = sample_tensors();
        let refs: Vec<(String, &Tensor)> =
            tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &refs).unwrap();
        for cut in [buf.len() - 1, buf.len() / 2, 5] {
            assert!(matches!(
                load_checkpoint(&buf[..cut]),
                Err(CheckpointError::Truncated)
            ));
        }
    }
}
