//! MVWM checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MVWM"  u32 version  u32 block_count
//! block:  u32 name_len  name (UTF-8)  u32 ndim  u64 dims[ndim]  f64 values[∏dims]
//! ```
//!
//! Two `meta.*` blocks carry the architecture hyperparameters that cannot be
//! recovered from parameter shapes; every other block is a model parameter in
//! store order.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use super::{Encoder, EncoderParams, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MVWM";
pub const CHECKPOINT_VERSION: u32 = 1;

const META_CONFIG: &str = "meta.config";
const META_CONV: &str = "meta.conv_channels";

fn config_block(c: &ModelConfig) -> Vec<(String, Tensor)> {
    let scalars = [
        c.in_channels,
        c.image_size,
        c.kernel,
        c.stride,
        c.dim,
        c.depth,
        c.heads,
        c.ff,
        c.num_classes,
    ];
    let to_f = |v: &[usize]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    vec![
        (META_CONFIG.into(), Tensor::vector(&to_f(&scalars))),
        (META_CONV.into(), Tensor::vector(&to_f(&c.conv_channels))),
    ]
}

/// Serializes an encoder to MVWM bytes.
pub fn encode_checkpoint(encoder: &Encoder) -> Vec<u8> {
    let meta = config_block(encoder.config());
    let blocks: Vec<(&str, &Tensor)> = meta
        .iter()
        .map(|(n, t)| (n.as_str(), t))
        .chain(encoder.params().iter())
        .collect();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, t) in blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses MVWM bytes; `path` is only used for error messages.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Encoder> {
    let fmt_err = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| fmt_err("truncated header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fmt_err(format!("bad magic {magic:?}")));
    }
    let u32_at = |cur: &mut Cursor<&[u8]>| -> Result<u32> {
        let mut b = [0u8; 4];
        cur.read_exact(&mut b).map_err(|_| fmt_err("unexpected end of file".into()))?;
        Ok(u32::from_le_bytes(b))
    };
    let version = u32_at(&mut cur)?;
    if version != CHECKPOINT_VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let count = u32_at(&mut cur)? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32_at(&mut cur)? as usize;
        let mut name = vec![0u8; name_len];
        cur.read_exact(&mut name).map_err(|_| fmt_err("truncated name".into()))?;
        let name = String::from_utf8(name).map_err(|_| fmt_err("parameter name is not UTF-8".into()))?;
        let ndim = u32_at(&mut cur)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            cur.read_exact(&mut b).map_err(|_| fmt_err("truncated shape".into()))?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut b = [0u8; 8];
            cur.read_exact(&mut b)
                .map_err(|_| fmt_err(format!("truncated payload for {name}")))?;
            data.push(f64::from_le_bytes(b));
        }
        let t = Tensor::new(shape, data).map_err(|e| fmt_err(format!("{name}: {e}")))?;
        named.push((name, t));
    }
    if (cur.position() as usize) != bytes.len() {
        return Err(fmt_err("trailing bytes after last block".into()));
    }

    let take = |named: &mut Vec<(String, Tensor)>, key: &str| -> Result<Vec<usize>> {
        let pos = named
            .iter()
            .position(|(n, _)| n == key)
            .ok_or_else(|| fmt_err(format!("missing {key} block")))?;
        let (_, t) = named.remove(pos);
        Ok(t.data().iter().map(|&v| v as usize).collect())
    };
    let scalars = take(&mut named, META_CONFIG)?;
    let conv_channels = take(&mut named, META_CONV)?;
    if scalars.len() != 9 {
        return Err(fmt_err(format!("{META_CONFIG} has {} entries, expected 9", scalars.len())));
    }
    let config = ModelConfig {
        in_channels: scalars[0],
        image_size: scalars[1],
        kernel: scalars[2],
        stride: scalars[3],
        dim: scalars[4],
        depth: scalars[5],
        heads: scalars[6],
        ff: scalars[7],
        num_classes: scalars[8],
        conv_channels,
    };
    Encoder::from_params(config, EncoderParams::from_named(named))
}

pub fn write_checkpoint(encoder: &Encoder, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(encoder)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Encoder> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let enc = Encoder::new(ModelConfig::default(), &mut rng::stream(9, "init")).unwrap();
        let bytes = encode_checkpoint(&enc);
        assert_eq!(&bytes[..4], b"MVWM");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        let back = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.config(), enc.config());
        assert_eq!(back.params(), enc.params());
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let enc = Encoder::new(ModelConfig::default(), &mut rng::stream(9, "init")).unwrap();
        let bytes = encode_checkpoint(&enc);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad, Path::new("m")), Err(Error::Format { .. })));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3], Path::new("m")).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra, Path::new("m")).is_err());
    }
}
