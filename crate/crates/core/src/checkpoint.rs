//! Length-prefixed little-endian `f64` vectors, the binary half of the
//! checkpoint format.
//!
//! A vector is `[len: u64 LE][len x f64 LE]`. A gradient cache file is a
//! sequence of `[client_id: u64 LE]` followed by one such vector.

use std::io::{self, Read, Write};

use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

pub fn write_vector<W: Write, T: Scalar>(w: &mut W, values: &[T]) -> io::Result<()> {
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

pub fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_vector<R: Read, T: Scalar>(r: &mut R) -> io::Result<Vec<T>> {
    let len = read_u64(r)? as usize;
    let mut out = Vec::with_capacity(len.min(1 << 24));
    let mut buf = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        out.push(T::of(f64::from_le_bytes(buf)));
    }
    Ok(out)
}

/// Hex SHA-256 of the vector's little-endian `f64` payload.
pub fn digest<T: Scalar>(values: &[T]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.as_f64().to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
