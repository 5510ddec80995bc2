//! Binary network segment:
//!
//! ```text
//! magic  b"TWNC"
//! u32    format version
//! u32    layer count
//! per layer: u8 kind (0 FC, 1 LSTM), u8 activation (0 tanh, 1 linear),
//!            u32 in_dim, u32 out_dim
//! u64    parameter count
//! f64 x parameter count
//! ```
//! All integers and floats little-endian.

use std::io::{Read, Write};

use super::{Activation, LayerKind, LayerSpec, NetError, Network};

pub const SEGMENT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"TWNC";

pub fn write_segment<W: Write>(net: &Network, out: &mut W) -> Result<(), NetError> {
    out.write_all(MAGIC)?;
    out.write_all(&SEGMENT_VERSION.to_le_bytes())?;
    out.write_all(&(net.specs().len() as u32).to_le_bytes())?;
    for s in net.specs() {
        let kind = match s.kind {
            LayerKind::FullyConnected => 0u8,
            LayerKind::Lstm => 1,
        };
        let act = match s.activation {
            Activation::Tanh => 0u8,
            Activation::Linear => 1,
        };
        out.write_all(&[kind, act])?;
        out.write_all(&(s.in_dim as u32).to_le_bytes())?;
        out.write_all(&(s.out_dim as u32).to_le_bytes())?;
    }
    out.write_all(&(net.weights().len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(net.weights().len() * 8);
    for w in net.weights() {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], NetError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| NetError::Checkpoint(format!("truncated segment: {e}")))?;
    Ok(b)
}

pub fn read_segment<R: Read>(r: &mut R) -> Result<Network, NetError> {
    if &read_array::<4, _>(r)? != MAGIC {
        return Err(NetError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_array(r)?);
    if version != SEGMENT_VERSION {
        return Err(NetError::Checkpoint(format!("unsupported segment version {version}")));
    }
    let n = u32::from_le_bytes(read_array(r)?) as usize;
    if n > 4096 {
        return Err(NetError::Checkpoint(format!("implausible layer count {n}")));
    }
    let mut specs = Vec::with_capacity(n);
    for _ in 0..n {
        let [kind, act] = read_array::<2, _>(r)?;
        let in_dim = u32::from_le_bytes(read_array(r)?) as usize;
        let out_dim = u32::from_le_bytes(read_array(r)?) as usize;
        let kind = match kind {
            0 => LayerKind::FullyConnected,
            1 => LayerKind::Lstm,
            k => return Err(NetError::Checkpoint(format!("unknown layer kind {k}"))),
        };
        let activation = match act {
            0 => Activation::Tanh,
            1 => Activation::Linear,
            a => return Err(NetError::Checkpoint(format!("unknown activation {a}"))),
        };
        specs.push(LayerSpec { kind, in_dim, out_dim, activation });
    }
    let count = u64::from_le_bytes(read_array(r)?) as usize;
    let expected = super::param_count(&specs);
    if count != expected {
        return Err(NetError::Checkpoint(format!(
            "header declares {count} parameters, layer stack needs {expected}"
        )));
    }
    let mut raw = vec![0u8; count * 8];
    r.read_exact(&mut raw)
        .map_err(|e| NetError::Checkpoint(format!("truncated parameters: {e}")))?;
    let weights = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Network::from_parts(specs, weights)
}
