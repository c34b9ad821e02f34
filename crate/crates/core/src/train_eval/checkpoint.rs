//! Binary encoder checkpoints, all integers and floats little-endian:
//!
//! ```text
//! "DPAN"  u8 version (1)
//! u8 block kind (0 plain, 1 residual)  u32 input channels  u32 block count
//! per block: u32 conv count  u32 channels  u8 downsample
//! u32 tensor count
//! per tensor: u8 rank  u32 dims[rank]  f32 data[product(dims)]
//! ```
//!
//! Training context that is not needed to rebuild the encoder is stored next
//! to the checkpoint in `<checkpoint>.meta.json`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{BlockKind, BlockSpec, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DPAN";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Writes `encoder` in the checkpoint format.
pub fn write_checkpoint(encoder: &Encoder<f32>, out: &mut impl Write) -> std::io::Result<()> {
    let cfg = encoder.config();
    let mut buf = Vec::with_capacity(4 * encoder.parameter_count() + 64);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.push(CHECKPOINT_VERSION);
    buf.push(match cfg.block_kind {
        BlockKind::Plain => 0,
        BlockKind::Residual => 1,
    });
    let u32le = |buf: &mut Vec<u8>, v: usize| buf.extend_from_slice(&(v as u32).to_le_bytes());
    u32le(&mut buf, cfg.input_channels);
    u32le(&mut buf, cfg.blocks.len());
    for b in &cfg.blocks {
        u32le(&mut buf, b.conv_count);
        u32le(&mut buf, b.channels);
        buf.push(b.downsample_after as u8);
    }
    u32le(&mut buf, encoder.params().len());
    for p in encoder.params() {
        buf.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            u32le(&mut buf, d);
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() < n {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

/// Parses a checkpoint produced by [`write_checkpoint`].
pub fn read_checkpoint(input: &mut impl Read) -> Result<Encoder<f32>> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("cannot read checkpoint: {e}")))?;
    let mut c = Cursor { bytes: &bytes };
    if c.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = c.u8()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let block_kind = match c.u8()? {
        0 => BlockKind::Plain,
        1 => BlockKind::Residual,
        k => return Err(Error::Format(format!("unknown block kind {k}"))),
    };
    let input_channels = c.u32()?;
    let block_count = c.u32()?;
    let mut blocks = Vec::new();
    for _ in 0..block_count {
        let conv_count = c.u32()?;
        let channels = c.u32()?;
        let downsample = match c.u8()? {
            0 => false,
            1 => true,
            d => return Err(Error::Format(format!("bad downsample flag {d}"))),
        };
        blocks.push(BlockSpec::new(conv_count, channels, downsample));
    }
    let config = EncoderConfig {
        blocks,
        input_channels,
        block_kind,
    };
    config.validate().map_err(|e| Error::Format(e.to_string()))?;
    let tensor_count = c.u32()?;
    let mut values = Vec::new();
    for _ in 0..tensor_count {
        let rank = c.u8()? as usize;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = c
            .take(4 * len)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        values.push(Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?);
    }
    if !c.bytes.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            c.bytes.len()
        )));
    }
    Encoder::from_parameters(config, values)
}

pub fn save_checkpoint(encoder: &Encoder<f32>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(encoder, &mut buf).expect("writing to memory");
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Encoder<f32>> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut file)
}

/// Training context stored beside a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub preset: Option<String>,
    pub way: usize,
    pub shot: usize,
    pub iterations: usize,
    pub seed: u64,
    pub alpha: f64,
    pub par_enabled: bool,
    pub learning_time_seconds: f64,
}

impl CheckpointMeta {
    pub fn path_for(checkpoint: &Path) -> PathBuf {
        let mut name = checkpoint.as_os_str().to_owned();
        name.push(".meta.json");
        PathBuf::from(name)
    }

    pub fn save(&self, checkpoint: &Path) -> Result<()> {
        let path = Self::path_for(checkpoint);
        let json = serde_json::to_string_pretty(self).expect("plain struct serializes");
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    /// The sidecar of `checkpoint`, or `None` when there is none.
    pub fn load(checkpoint: &Path) -> Result<Option<Self>> {
        let path = Self::path_for(checkpoint);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder(preset: &str) -> Encoder<f32> {
        Encoder::build(EncoderConfig::preset(preset).unwrap(), 9).unwrap()
    }

    fn bytes(e: &Encoder<f32>) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(e, &mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for preset in ["tiny", "res18_like"] {
            let e = encoder(preset);
            let back = read_checkpoint(&mut bytes(&e).as_slice()).unwrap();
            assert_eq!(back.config(), e.config());
            for (a, b) in back.params().iter().zip(e.params()) {
                assert!(a
                    .value
                    .data()
                    .iter()
                    .zip(b.value.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn header_layout() {
        let b = bytes(&encoder("tiny"));
        assert_eq!(&b[..5], b"DPAN\x01");
        assert_eq!(b[5], 0);
        assert_eq!(&b[6..10], &1u32.to_le_bytes());
        assert_eq!(&b[10..14], &3u32.to_le_bytes());
    }

    #[test]
    fn damaged_files_are_format_errors() {
        let b = bytes(&encoder("tiny"));
        for cut in [0, 3, 5, 20, b.len() - 1] {
            assert!(
                matches!(read_checkpoint(&mut &b[..cut]), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(read_checkpoint(&mut extra.as_slice()), Err(Error::Format(_))));
        let mut magic = b.clone();
        magic[0] = b'X';
        assert!(matches!(read_checkpoint(&mut magic.as_slice()), Err(Error::Format(_))));
        let mut version = b;
        version[4] = 2;
        assert!(matches!(
            read_checkpoint(&mut version.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("m.ckpt");
        assert_eq!(CheckpointMeta::load(&ckpt).unwrap(), None);
        let meta = CheckpointMeta {
            preset: Some("tiny".into()),
            way: 2,
            shot: 1,
            iterations: 10,
            seed: 3,
            alpha: 20.0,
            par_enabled: true,
            learning_time_seconds: 1.5,
        };
        meta.save(&ckpt).unwrap();
        assert_eq!(CheckpointMeta::path_for(&ckpt), dir.path().join("m.ckpt.meta.json"));
        assert_eq!(CheckpointMeta::load(&ckpt).unwrap(), Some(meta));
    }
}
