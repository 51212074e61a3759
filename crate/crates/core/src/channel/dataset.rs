//! Binary dataset file.
//!
//! ```text
//! "MDFC" | version u16 | header_len u32 | SystemConfig text | count u64
//! then per sample: seed u64 | sub-6 CSI | mmWave CSI
//! ```
//!
//! CSI entries are little-endian `f32` pairs (re, im) in row-major order.
//! All integers are little-endian.

use std::fs;
use std::path::Path;

use num_complex::Complex64;

use super::{ComplexMatrix, DualBandSample, SystemConfig};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"MDFC";
pub const DATASET_VERSION: u16 = 1;

fn put_matrix(buf: &mut Vec<u8>, h: &ComplexMatrix) {
    for v in h.data() {
        buf.extend_from_slice(&(v.re as f32).to_le_bytes());
        buf.extend_from_slice(&(v.im as f32).to_le_bytes());
    }
}

/// Serializes `samples` under `cfg`.
pub fn encode_dataset(cfg: &SystemConfig, samples: &[DualBandSample]) -> Result<Vec<u8>> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot write an empty dataset".into()));
    }
    let sub6 = (cfg.sub6.bs_antennas, cfg.sub6.csi_cols());
    let mm = (cfg.mmwave.bs_antennas, cfg.mmwave.csi_cols());
    for s in samples {
        if s.h_sub6.shape() != sub6 || s.h_mmwave.shape() != mm {
            return Err(Error::shape(
                "encode_dataset",
                &[sub6.0, sub6.1, mm.0, mm.1],
                &[s.h_sub6.rows(), s.h_sub6.cols(), s.h_mmwave.rows(), s.h_mmwave.cols()],
            ));
        }
    }
    let header = cfg.to_text();
    let per_sample = 8 + 8 * (sub6.0 * sub6.1 + mm.0 * mm.1);
    let mut buf = Vec::with_capacity(18 + header.len() + per_sample * samples.len());
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::Contract("system config text exceeds 4 GiB".into()))?;
    buf.extend_from_slice(&header_len.to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    buf.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        buf.extend_from_slice(&s.seed.to_le_bytes());
        put_matrix(&mut buf, &s.h_sub6);
        put_matrix(&mut buf, &s.h_mmwave);
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                reason: format!("truncated while reading {what}"),
            });
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("exact length"))
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<ComplexMatrix> {
        let raw = self.take(rows * cols * 8, what)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| {
                let re = f32::from_le_bytes(c[..4].try_into().expect("4 bytes"));
                let im = f32::from_le_bytes(c[4..].try_into().expect("4 bytes"));
                Complex64::new(re as f64, im as f64)
            })
            .collect();
        ComplexMatrix::from_vec(rows, cols, data)
    }
}

/// Parses a whole dataset; nothing is returned unless every byte checks out.
pub fn decode_dataset(bytes: &[u8]) -> Result<(SystemConfig, Vec<DualBandSample>)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if &cur.array::<4>("magic")? != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic, not an MDFC dataset".into(),
        });
    }
    let version = u16::from_le_bytes(cur.array("version")?);
    if version != DATASET_VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported dataset version {version}, expected {DATASET_VERSION}"),
        });
    }
    let header_len = u32::from_le_bytes(cur.array("header length")?) as usize;
    let header_at = cur.pos as u64;
    let header = std::str::from_utf8(cur.take(header_len, "header")?).map_err(|_| Error::Format {
        offset: header_at,
        reason: "header is not UTF-8".into(),
    })?;
    let cfg = SystemConfig::from_text(header).map_err(|e| Error::Format {
        offset: header_at,
        reason: e.to_string(),
    })?;
    let count_at = cur.pos as u64;
    let count = u64::from_le_bytes(cur.array("sample count")?);
    let sub6 = (cfg.sub6.bs_antennas, cfg.sub6.csi_cols());
    let mm = (cfg.mmwave.bs_antennas, cfg.mmwave.csi_cols());
    let per_sample = 8 + 8 * (sub6.0 * sub6.1 + mm.0 * mm.1) as u64;
    let remaining = (bytes.len() - cur.pos) as u64;
    if count == 0 || count.checked_mul(per_sample) != Some(remaining) {
        return Err(Error::Format {
            offset: if count == 0 { count_at } else { bytes.len() as u64 },
            reason: format!(
                "sample count {count} does not match payload of {remaining} bytes ({per_sample} per sample)"
            ),
        });
    }
    let mut samples = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let seed = u64::from_le_bytes(cur.array("seed")?);
        let h_sub6 = cur.matrix(sub6.0, sub6.1, "sub-6 CSI")?;
        let h_mmwave = cur.matrix(mm.0, mm.1, "mmWave CSI")?;
        samples.push(DualBandSample { h_sub6, h_mmwave, seed });
    }
    Ok((cfg, samples))
}

pub fn write_dataset(path: &Path, cfg: &SystemConfig, samples: &[DualBandSample]) -> Result<()> {
    let bytes = encode_dataset(cfg, samples)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<(SystemConfig, Vec<DualBandSample>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}
