//! Binary checkpoint blob for a network.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      4 bytes  b"CPNN"
//! version    u32      1
//! activation u8       0 = relu, 1 = tanh
//! n_widths   u32
//! widths     u32 x n_widths
//! n_params   u64
//! params     f64 x n_params
//! ```

use std::io::{Read, Write};

use super::mlp::{Activation, MlpSpec, ParamVector};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CPNN";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(w: &mut W, spec: &MlpSpec, params: &[f64]) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::shape("checkpoint params", spec.param_count(), params.len()));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[spec.activation().code()])?;
    w.write_all(&(spec.widths().len() as u32).to_le_bytes())?;
    for &width in spec.widths() {
        w.write_all(&(width as u32).to_le_bytes())?;
    }
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in params {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(MlpSpec, ParamVector)> {
    let bad = |message: String| Error::Format {
        what: "network checkpoint",
        message,
    };
    if &read_array::<4, _>(r)? != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_array(r)?);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let [code] = read_array::<1, _>(r)?;
    let activation =
        Activation::from_code(code).ok_or_else(|| bad(format!("unknown activation {code}")))?;
    let n_widths = u32::from_le_bytes(read_array(r)?) as usize;
    let widths = (0..n_widths)
        .map(|_| Ok(u32::from_le_bytes(read_array(r)?) as usize))
        .collect::<Result<Vec<_>>>()?;
    let spec = MlpSpec::new(widths, activation)?;
    let n_params = u64::from_le_bytes(read_array(r)?) as usize;
    if n_params != spec.param_count() {
        return Err(bad(format!(
            "parameter count {n_params} does not match widths ({})",
            spec.param_count()
        )));
    }
    let params = (0..n_params)
        .map(|_| Ok(f64::from_le_bytes(read_array(r)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((spec, ParamVector(params)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn roundtrip_preserves_bits() {
        let spec = MlpSpec::new(vec![3, 7, 2], Activation::Tanh).unwrap();
        let p = spec.init_params(&mut RngStream::new(1, 1));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &spec, &p).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 1 + 4 + 3 * 4 + 8 + 8 * spec.param_count());
        let (spec2, p2) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(p2, p);
    }

    #[test]
    fn truncated_blob_rejected() {
        let spec = MlpSpec::new(vec![1, 1], Activation::Relu).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &spec, &[0.5, 0.25]).unwrap();
        buf.pop();
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
