//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      b"LDCK"
//! version    u32 = 1
//! metadata   u32 count, then count x (str key, str value)
//! sets       u32 count, then count x set
//!   set      str name, u8 frozen, u32 entries, entries x param
//!   param    str path, u8 dtype (0 = f64, 1 = f32), u32 rank,
//!            rank x u64 extent, numel x value
//! optimizers u32 count, then count x opt
//!   opt      str name, f64 lr, f64 beta1, f64 beta2, f64 eps, f64 clip,
//!            u64 step, u32 entries, entries x (str path, u64 n, n x f64 m, n x f64 v)
//! digest     32-byte SHA-256 of every preceding byte
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::adam::{Adam, AdamConfig, Moments};
use crate::{ParameterSet, Result, Tensor, TensorError};

const MAGIC: &[u8; 4] = b"LDCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub sets: BTreeMap<String, ParameterSet>,
    pub optimizers: BTreeMap<String, Adam>,
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.write_u32::<LE>(s.len() as u32).unwrap();
    w.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut Cursor<&[u8]>) -> Result<String> {
    let n = r.read_u32::<LE>()? as usize;
    if n > r.get_ref().len() {
        return Err(TensorError::Format(format!("string length {n} past end")));
    }
    let mut buf = vec![0; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| TensorError::Format(e.to_string()))
}

impl Checkpoint {
    pub fn to_bytes(&self, dtype: Dtype) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.write_u32::<LE>(VERSION).unwrap();
        w.write_u32::<LE>(self.metadata.len() as u32).unwrap();
        for (k, v) in &self.metadata {
            put_str(&mut w, k);
            put_str(&mut w, v);
        }
        w.write_u32::<LE>(self.sets.len() as u32).unwrap();
        for (name, set) in &self.sets {
            put_str(&mut w, name);
            w.write_u8(set.is_frozen() as u8).unwrap();
            w.write_u32::<LE>(set.len() as u32).unwrap();
            for (path, t) in set.iter() {
                put_str(&mut w, path);
                w.write_u8(matches!(dtype, Dtype::F32) as u8).unwrap();
                w.write_u32::<LE>(t.shape().len() as u32).unwrap();
                for &d in t.shape() {
                    w.write_u64::<LE>(d as u64).unwrap();
                }
                for &v in t.data() {
                    match dtype {
                        Dtype::F64 => w.write_f64::<LE>(v).unwrap(),
                        Dtype::F32 => w.write_f32::<LE>(v as f32).unwrap(),
                    }
                }
            }
        }
        w.write_u32::<LE>(self.optimizers.len() as u32).unwrap();
        for (name, opt) in &self.optimizers {
            put_str(&mut w, name);
            let c = opt.config;
            for x in [c.lr, c.beta1, c.beta2, c.eps, c.clip_norm] {
                w.write_f64::<LE>(x).unwrap();
            }
            w.write_u64::<LE>(opt.step).unwrap();
            w.write_u32::<LE>(opt.moments.len() as u32).unwrap();
            for (path, m) in &opt.moments {
                put_str(&mut w, path);
                w.write_u64::<LE>(m.m.len() as u64).unwrap();
                for &x in m.m.iter().chain(&m.v) {
                    w.write_f64::<LE>(x).unwrap();
                }
            }
        }
        let digest = Sha256::digest(&w);
        w.extend_from_slice(&digest);
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 32 {
            return Err(TensorError::Format("checkpoint too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(TensorError::Format("checkpoint digest mismatch".into()));
        }
        let mut r = Cursor::new(body);
        let mut magic = [0; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::Format("bad checkpoint magic".into()));
        }
        let version = r.read_u32::<LE>()?;
        if version != VERSION {
            return Err(TensorError::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut ck = Checkpoint::default();
        for _ in 0..r.read_u32::<LE>()? {
            let k = get_str(&mut r)?;
            let v = get_str(&mut r)?;
            ck.metadata.insert(k, v);
        }
        for _ in 0..r.read_u32::<LE>()? {
            let name = get_str(&mut r)?;
            let frozen = r.read_u8()? != 0;
            let mut set = ParameterSet::new();
            for _ in 0..r.read_u32::<LE>()? {
                let path = get_str(&mut r)?;
                let dtype = r.read_u8()?;
                let rank = r.read_u32::<LE>()? as usize;
                let shape = (0..rank).map(|_| r.read_u64::<LE>().map(|d| d as usize)).collect::<std::io::Result<Vec<_>>>()?;
                let n: usize = shape.iter().product();
                let width = if dtype == 1 { 4 } else { 8 };
                if n.saturating_mul(width) > body.len() {
                    return Err(TensorError::Format(format!("`{path}` larger than file")));
                }
                let data = (0..n)
                    .map(|_| match dtype {
                        0 => r.read_f64::<LE>(),
                        _ => r.read_f32::<LE>().map(f64::from),
                    })
                    .collect::<std::io::Result<Vec<_>>>()?;
                set.insert(path, Tensor::new(shape, data)?);
            }
            if frozen {
                set.freeze();
            }
            ck.sets.insert(name, set);
        }
        for _ in 0..r.read_u32::<LE>()? {
            let name = get_str(&mut r)?;
            let mut h = [0.0; 5];
            for x in &mut h {
                *x = r.read_f64::<LE>()?;
            }
            let config = AdamConfig { lr: h[0], beta1: h[1], beta2: h[2], eps: h[3], clip_norm: h[4] };
            let mut opt = Adam::new(config);
            opt.step = r.read_u64::<LE>()?;
            for _ in 0..r.read_u32::<LE>()? {
                let path = get_str(&mut r)?;
                let n = r.read_u64::<LE>()? as usize;
                if n.saturating_mul(16) > body.len() {
                    return Err(TensorError::Format(format!("moments `{path}` larger than file")));
                }
                let mut read = || (0..n).map(|_| r.read_f64::<LE>()).collect::<std::io::Result<Vec<_>>>();
                let m = read()?;
                let v = read()?;
                opt.moments.insert(path, Moments { m, v });
            }
            ck.optimizers.insert(name, opt);
        }
        if (r.position() as usize) != body.len() {
            return Err(TensorError::Format("trailing bytes in checkpoint".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path, dtype: Dtype) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes(dtype))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn sample() -> Checkpoint {
        let mut rng = seeded(3);
        let mut set = ParameterSet::new();
        set.insert_glorot("enc.w", 4, 3, &mut rng);
        set.insert_zeros("enc.b", &[3]);
        let mut opt = Adam::new(AdamConfig::default());
        set.get_mut("enc.b").unwrap().accumulate_grad(&[1.0, -1.0, 0.5]);
        opt.step(&mut set).unwrap();
        let mut frozen = set.clone();
        frozen.freeze();
        let mut ck = Checkpoint::default();
        ck.metadata.insert("step".into(), "1".into());
        ck.sets.insert("wm".into(), set);
        ck.sets.insert("frozen".into(), frozen);
        ck.optimizers.insert("wm".into(), opt);
        ck
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes(Dtype::F64)).unwrap();
        assert_eq!(back.metadata, ck.metadata);
        assert_eq!(back.sets["wm"].checksum(), ck.sets["wm"].checksum());
        assert!(back.sets["frozen"].is_frozen());
        assert_eq!(back.optimizers["wm"], ck.optimizers["wm"]);
    }

    #[test]
    fn f32_round_trip_is_close() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes(Dtype::F32)).unwrap();
        for (name, t) in ck.sets["wm"].iter() {
            let u = back.sets["wm"].get(name).unwrap();
            for (a, b) in t.data().iter().zip(u.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes(Dtype::F64);
        bytes[12] ^= 0xff;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
    }
}
