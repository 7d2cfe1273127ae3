//! Binary model file.
//!
//! Little-endian throughout:
//!
//! ```text
//! "VPM1" | version u32 | L u32 | token_set_version u64
//! | preset (u32 length + UTF-8) | tensor count u32
//! | per tensor: name (u32 length + UTF-8), rank u32, dims u32 x rank, f32 values
//! | FNV-1a 64 of every preceding byte
//! ```
//!
//! Besides the parameter tensors the file carries three metadata tensors:
//! `meta.token_count`, `meta.epochs` and `meta.rng_seed` (four 16-bit limbs,
//! least significant first), all stored exactly as f32.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::arch::ArchitectureConfig;
use super::network::Network;
use super::train::Model;
use super::NetError;
use crate::hash::fnv1a64;

pub const MAGIC: &[u8; 4] = b"VPM1";
pub const FORMAT_VERSION: u32 = 1;

const META_TOKENS: &str = "meta.token_count";
const META_EPOCHS: &str = "meta.epochs";
const META_SEED: &str = "meta.rng_seed";

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], values: &[f32]) {
    put_str(out, name);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn exact_f32(v: u32) -> f32 {
    debug_assert!(v < (1 << 24));
    v as f32
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let net = &model.net;
    let mut out = Vec::with_capacity(64 + net.param_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(net.seq_len() as u32).to_le_bytes());
    out.extend_from_slice(&model.token_set_version.to_le_bytes());
    put_str(&mut out, &net.arch().name);
    out.extend_from_slice(&((net.tensors().len() + 3) as u32).to_le_bytes());
    put_tensor(&mut out, META_TOKENS, &[1], &[exact_f32(net.token_count() as u32)]);
    put_tensor(&mut out, META_EPOCHS, &[1], &[exact_f32(model.epochs)]);
    let limbs: Vec<f32> = (0..4)
        .map(|i| exact_f32(((model.rng_seed >> (16 * i)) & 0xffff) as u32))
        .collect();
    put_tensor(&mut out, META_SEED, &[4], &limbs);
    for t in net.tensors() {
        put_tensor(&mut out, &t.name, &t.dims, &net.params[t.offset..t.offset + t.len]);
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> NetError {
    NetError::CorruptModel(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, NetError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid UTF-8 name"))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f32>), NetError> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(corrupt(format!("tensor {name} has rank {rank}")));
        }
        let dims = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| corrupt("tensor size overflows"))?;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| corrupt("tensor size overflows"))?)?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, dims, values))
    }
}

fn meta_u32(v: &[f32], name: &str) -> Result<u32, NetError> {
    match v {
        [x] if x.fract() == 0.0 && *x >= 0.0 && *x < 16_777_216.0 => Ok(*x as u32),
        _ => Err(corrupt(format!("bad {name}"))),
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<Model, NetError> {
    if bytes.len() < 4 + 8 || &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if fnv1a64(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let seq_len = r.u32()? as usize;
    let token_set_version = r.u64()?;
    let preset = r.string()?;
    let arch = ArchitectureConfig::preset(&preset).map_err(|_| corrupt(format!("unknown preset {preset:?}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        tensors.push(r.tensor()?);
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes after tensors"));
    }
    let mut take_meta = |name: &str| -> Result<Vec<f32>, NetError> {
        let i = tensors
            .iter()
            .position(|t| t.0 == name)
            .ok_or_else(|| corrupt(format!("missing {name}")))?;
        Ok(tensors.remove(i).2)
    };
    let token_count = meta_u32(&take_meta(META_TOKENS)?, META_TOKENS)? as usize;
    let epochs = meta_u32(&take_meta(META_EPOCHS)?, META_EPOCHS)?;
    let limbs = take_meta(META_SEED)?;
    if limbs.len() != 4 {
        return Err(corrupt("bad seed"));
    }
    let mut rng_seed = 0u64;
    for (i, l) in limbs.iter().enumerate() {
        let v = meta_u32(std::slice::from_ref(l), META_SEED)?;
        if v > 0xffff {
            return Err(corrupt("bad seed"));
        }
        rng_seed |= u64::from(v) << (16 * i);
    }
    let mut net = Network::<f32>::zeros(&arch, seq_len, token_count)
        .map_err(|e| corrupt(format!("header does not describe a valid network: {e}")))?;
    if tensors.len() != net.tensors().len() {
        return Err(corrupt(format!(
            "expected {} parameter tensors, found {}",
            net.tensors().len(),
            tensors.len()
        )));
    }
    let layout = net.tensors().to_vec();
    for (info, (name, dims, values)) in layout.iter().zip(tensors) {
        if info.name != name || info.dims != dims {
            return Err(corrupt(format!("unexpected tensor {name} {dims:?}, wanted {} {:?}", info.name, info.dims)));
        }
        net.params[info.offset..info.offset + info.len].copy_from_slice(&values);
    }
    Ok(Model {
        net,
        token_set_version,
        epochs,
        rng_seed,
    })
}

/// Writes atomically: a temporary sibling file is renamed over `path`.
pub fn save_model(model: &Model, path: &Path) -> Result<(), NetError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&encode_model(model))?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| NetError::Io(e.error))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model, NetError> {
    decode_model(&fs::read(path)?)
}
