//! Binary checkpoints for codecs (`JHCK`) and feature extractors (`JHSW`).
//!
//! Layout: 4-byte magic, `u16` version, `u32` length plus `key=value` config
//! text, then named tensor sections until end of file. A section is a `u16`
//! name length, the name bytes, a `u8` rank, `u32` extents and little-endian
//! `f32` data. All integers are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::Real;
use crate::config::CodecConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::ssr::FeatureExtractor;
use crate::tensor::Tensor;
use crate::Codec;

pub const CODEC_MAGIC: [u8; 4] = *b"JHCK";
pub const EXTRACTOR_MAGIC: [u8; 4] = *b"JHSW";
pub const VERSION: u16 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Writes `store` under `magic` with `config` as the header text.
pub fn write_sections<W: Write>(w: &mut W, magic: [u8; 4], config: &str, store: &ParamStore) -> Result<()> {
    w.write_all(&magic)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let len = u32::try_from(config.len()).map_err(|_| bad("config text too long"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(config.as_bytes())?;
    for (_, name, t) in store.iter() {
        let nlen = u16::try_from(name.len()).map_err(|_| bad(format!("tensor name too long: {name}")))?;
        w.write_all(&nlen.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let rank = u8::try_from(t.rank()).map_err(|_| bad("rank above 255"))?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| bad("extent above u32"))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Cursor<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(bad(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a checkpoint into its config text and named tensors.
pub fn read_sections(bytes: &[u8], magic: [u8; 4]) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut c = Cursor { bytes, pos: 0 };
    let m = c.take(4, "magic")?;
    if m != magic {
        return Err(bad(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(m),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = c.u16("version")?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = c.u32("config length")? as usize;
    let config = std::str::from_utf8(c.take(len, "config")?)
        .map_err(|_| bad("config text is not UTF-8"))?
        .to_string();
    let mut tensors = Vec::new();
    while c.pos < bytes.len() {
        let nlen = c.u16("name length")? as usize;
        let name = std::str::from_utf8(c.take(nlen, "name")?)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_string();
        let rank = c.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| bad("tensor too large"))?, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as Real)
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok((config, tensors))
}

pub fn codec_to_bytes(codec: &Codec) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_sections(&mut out, CODEC_MAGIC, &codec.config.to_kv_string(), &codec.store)?;
    Ok(out)
}

pub fn codec_from_bytes(bytes: &[u8]) -> Result<Codec> {
    let (text, tensors) = read_sections(bytes, CODEC_MAGIC)?;
    let config: CodecConfig = text.parse()?;
    let mut codec = Codec::new(config, 0)?;
    codec.store.load_from(&tensors)?;
    Ok(codec)
}

pub fn save_codec(codec: &Codec, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, codec_to_bytes(codec)?)?;
    Ok(())
}

pub fn load_codec(path: impl AsRef<Path>) -> Result<Codec> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    codec_from_bytes(&bytes)
}

pub fn extractor_to_bytes(phi: &FeatureExtractor) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_sections(&mut out, EXTRACTOR_MAGIC, &phi.config.to_kv_string(), &phi.store)?;
    Ok(out)
}

/// Loads an extractor; the result is always frozen.
pub fn extractor_from_bytes(bytes: &[u8]) -> Result<FeatureExtractor> {
    let (text, tensors) = read_sections(bytes, EXTRACTOR_MAGIC)?;
    let config: CodecConfig = text.parse()?;
    let mut phi = FeatureExtractor::new(&config, 0)?;
    phi.store.load_from(&tensors)?;
    Ok(phi.freeze())
}

pub fn save_extractor(phi: &FeatureExtractor, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, extractor_to_bytes(phi)?)?;
    Ok(())
}

pub fn load_extractor(path: impl AsRef<Path>) -> Result<FeatureExtractor> {
    extractor_from_bytes(&std::fs::read(path)?)
}
