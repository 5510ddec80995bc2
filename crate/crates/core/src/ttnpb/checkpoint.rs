//! Model checkpoint:
//!
//! ```text
//! magic   b"TWCK"
//! u32     checkpoint version
//! ...     network segment (see netcore)
//! f64 x9  scaling: force, torque, f_ref, pos_center[3], pos_half[3]
//! u32     PB entries; per entry: u32 name length, UTF-8 name, f64 p0, f64 p1
//! u32     config echo length, UTF-8 JSON
//! ```
//! Little-endian throughout.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ParametricBias, PbTable, Scaling, TtnpbError, TtnpbModel};
use crate::netcore::{read_segment, write_segment};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"TWCK";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: TtnpbModel,
    pub pbs: PbTable,
    /// Training configuration as JSON, kept for provenance.
    pub config_echo: String,
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(|_| std::io::Error::other("length exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], TtnpbError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| TtnpbError::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

fn take_f64<R: Read>(r: &mut R) -> Result<f64, TtnpbError> {
    Ok(f64::from_le_bytes(take(r)?))
}

fn take_string<R: Read>(r: &mut R, limit: usize) -> Result<String, TtnpbError> {
    let len = u32::from_le_bytes(take(r)?) as usize;
    if len > limit {
        return Err(TtnpbError::Checkpoint(format!("string of {len} bytes exceeds limit")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| TtnpbError::Checkpoint(format!("truncated checkpoint: {e}")))?;
    String::from_utf8(buf).map_err(|e| TtnpbError::Checkpoint(e.to_string()))
}

impl Checkpoint {
    pub fn write<W: Write>(&self, out: &mut W) -> Result<(), TtnpbError> {
        out.write_all(MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        write_segment(&self.model.net, out)?;
        let s = &self.model.scaling;
        let scal = [s.force, s.torque, s.f_ref]
            .into_iter()
            .chain(s.pos_center)
            .chain(s.pos_half);
        for v in scal {
            out.write_all(&v.to_le_bytes())?;
        }
        put_u32(out, self.pbs.len())?;
        for (name, p) in &self.pbs.0 {
            put_u32(out, name.len())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&p.0[0].to_le_bytes())?;
            out.write_all(&p.0[1].to_le_bytes())?;
        }
        put_u32(out, self.config_echo.len())?;
        out.write_all(self.config_echo.as_bytes())?;
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self, TtnpbError> {
        if &take::<4, _>(r)? != MAGIC {
            return Err(TtnpbError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(r)?);
        if version != CHECKPOINT_VERSION {
            return Err(TtnpbError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let net = read_segment(r)?;
        let mut v = [0.0; 9];
        for x in &mut v {
            *x = take_f64(r)?;
        }
        let scaling = Scaling {
            force: v[0],
            torque: v[1],
            f_ref: v[2],
            pos_center: [v[3], v[4], v[5]],
            pos_half: [v[6], v[7], v[8]],
        };
        let model = TtnpbModel::from_network(net, scaling)?;
        let n = u32::from_le_bytes(take(r)?) as usize;
        let mut pbs = PbTable::default();
        for _ in 0..n {
            let name = take_string(r, 1 << 12)?;
            let p = ParametricBias([take_f64(r)?, take_f64(r)?]);
            pbs.0.insert(name, p);
        }
        let config_echo = take_string(r, 1 << 20)?;
        Ok(Self { model, pbs, config_echo })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<String, TtnpbError> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    /// Loads a checkpoint and returns it with the SHA-256 of the file.
    pub fn load(path: &Path) -> Result<(Self, String), TtnpbError> {
        let bytes = std::fs::read(path)?;
        let ck = Self::read(&mut bytes.as_slice())?;
        Ok((ck, sha256_hex(&bytes)))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
