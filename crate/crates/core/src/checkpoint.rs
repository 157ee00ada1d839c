//! Binary map checkpoint: every primitive field as little-endian IEEE doubles.
//!
//! Layout: magic `DSPLMAP\0`, u32 version, u64 generation, u64 primitive count, then per
//! primitive mean(3) scale(3) quaternion ijkw(4) opacity color(3) as f64 and the object id as u32.

use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::scene::{GaussianMap, GaussianPrimitive};

const MAGIC: &[u8; 8] = b"DSPLMAP\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const RECORD_BYTES: usize = 14 * 8 + 4;

pub fn encode_map(map: &GaussianMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + map.len() * RECORD_BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&map.generation().to_le_bytes());
    out.extend_from_slice(&(map.len() as u64).to_le_bytes());
    for p in map.primitives() {
        let q = p.orientation.quaternion();
        let fields = [
            p.mean.x, p.mean.y, p.mean.z, p.scale.x, p.scale.y, p.scale.z, q.i, q.j, q.k, q.w,
            p.opacity, p.color.x, p.color.y, p.color.z,
        ];
        for f in fields {
            out.extend_from_slice(&f.to_le_bytes());
        }
        out.extend_from_slice(&p.object_id.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Input("checkpoint is truncated".into()))?;
        self.pos = end;
        Ok(slice.try_into().expect("slice has length N"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

pub fn decode_map(bytes: &[u8]) -> Result<GaussianMap> {
    let mut r = Reader { bytes, pos: 0 };
    if &r.take::<8>()? != MAGIC {
        return Err(Error::Input("not a map checkpoint".into()));
    }
    let version = u32::from_le_bytes(r.take()?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Input(format!("unsupported checkpoint version {version}")));
    }
    let generation = u64::from_le_bytes(r.take()?);
    let count = u64::from_le_bytes(r.take()?) as usize;
    if bytes.len() != 28 + count.saturating_mul(RECORD_BYTES) {
        return Err(Error::Input("checkpoint length does not match its primitive count".into()));
    }
    let mut prims = Vec::with_capacity(count);
    for _ in 0..count {
        let mut f = [0.0; 14];
        for x in &mut f {
            *x = r.f64()?;
        }
        let object_id = u32::from_le_bytes(r.take()?);
        prims.push(GaussianPrimitive {
            mean: Vector3::new(f[0], f[1], f[2]),
            scale: Vector3::new(f[3], f[4], f[5]),
            // stored unit quaternions are taken as-is so the round trip is bit-exact
            orientation: UnitQuaternion::new_unchecked(Quaternion::new(f[9], f[6], f[7], f[8])),
            opacity: f[10],
            color: Vector3::new(f[11], f[12], f[13]),
            object_id,
        });
    }
    Ok(GaussianMap::from_parts(prims, generation))
}

pub fn write_checkpoint(map: &GaussianMap, path: &Path) -> Result<()> {
    std::fs::write(path, encode_map(map)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<GaussianMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_map(&bytes)
}
