//! Binary checkpoint, little-endian throughout:
//!
//! ```text
//! "SMRN" | version u32 | config_len u32 | config text | height u32 | width u32
//! | count u32 | count x (name_len u32 | name | rank u32 | dims u32.. | data f32..)
//! | CRC-64/XZ u64 over every preceding byte
//! ```

use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use smrnet_core::detector::SmrNet;
use smrnet_core::ParamStore;

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SMRN";
pub const VERSION: u32 = 1;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

pub struct Checkpoint {
    pub config: RunConfig,
    pub image_size: (usize, usize),
    pub model: SmrNet,
    pub store: ParamStore<f32>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&u32::try_from(v).expect("field fits in u32").to_le_bytes());
}

pub fn encode(config: &RunConfig, image_size: (usize, usize), store: &ParamStore<f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION as usize);
    let text = config.to_text();
    put_u32(&mut buf, text.len());
    buf.extend_from_slice(text.as_bytes());
    put_u32(&mut buf, image_size.0);
    put_u32(&mut buf, image_size.1);
    put_u32(&mut buf, store.len());
    for id in store.ids() {
        let name = store.name(id);
        put_u32(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        let t = store.get(id);
        put_u32(&mut buf, t.shape().len());
        for &d in t.shape() {
            put_u32(&mut buf, d);
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = CRC64.checksum(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<usize> {
        Some(u32::from_le_bytes(self.bytes(4)?.try_into().ok()?) as usize)
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |msg: &str| Error::corrupt(path, msg);
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let (payload, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
    if CRC64.checksum(payload) != stored {
        return Err(bad("checksum mismatch"));
    }
    let mut r = Reader { buf: payload, pos: 4 };
    let truncated = || bad("truncated payload");
    let version = r.u32().ok_or_else(truncated)?;
    if version != VERSION as usize {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let len = r.u32().ok_or_else(truncated)?;
    let text = std::str::from_utf8(r.bytes(len).ok_or_else(truncated)?).map_err(|_| bad("config is not UTF-8"))?;
    let config = RunConfig::parse(text).map_err(|e| bad(&format!("embedded config: {e}")))?;
    let image_size = (r.u32().ok_or_else(truncated)?, r.u32().ok_or_else(truncated)?);
    let (model, mut store) = SmrNet::build::<f32>(&config.model_config(image_size), 0).map_err(|e| bad(&format!("model: {e}")))?;
    let count = r.u32().ok_or_else(truncated)?;
    if count != store.len() {
        return Err(bad(&format!("{count} parameters stored, model has {}", store.len())));
    }
    for _ in 0..count {
        let len = r.u32().ok_or_else(truncated)?;
        let name = std::str::from_utf8(r.bytes(len).ok_or_else(truncated)?).map_err(|_| bad("parameter name is not UTF-8"))?;
        let id = store.find(name).ok_or_else(|| bad(&format!("unknown parameter {name}")))?;
        let rank = r.u32().ok_or_else(truncated)?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Option<Vec<_>>>().ok_or_else(truncated)?;
        let target = store.get_mut(id);
        if dims != target.shape() {
            return Err(bad(&format!("parameter {name} has shape {dims:?}, expected {:?}", target.shape())));
        }
        let raw = r.bytes(4 * target.numel()).ok_or_else(truncated)?;
        for (dst, src) in target.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(src.try_into().expect("4 bytes"));
        }
    }
    if r.pos != payload.len() {
        return Err(bad("trailing bytes after the parameter table"));
    }
    Ok(Checkpoint {
        config,
        image_size,
        model,
        store,
    })
}

pub fn save(path: &Path, config: &RunConfig, image_size: (usize, usize), store: &ParamStore<f32>) -> Result<()> {
    std::fs::write(path, encode(config, image_size, store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
    decode(&bytes, path)
}

/// Bit patterns of every parameter, for exact comparisons.
pub fn fingerprint(store: &ParamStore<f32>) -> Vec<(String, Vec<u32>)> {
    store.ids().map(|id| (store.name(id).to_string(), store.get(id).data().iter().map(|v| v.to_bits()).collect())).collect()
}

