//! Native dataset container: a versioned little-endian binary layout that
//! round-trips datasets bit-identically, with a JSON provenance block and
//! an embedded config digest.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic "UBWDSET1" | u32 version | u32 K | u64 n | u32 C | u32 H | u32 W
//! labels: n x u32 | pixels: n*C*H*W x f64 (raw bits)
//! provenance: u64 len + JSON bytes | config digest: u64 len + UTF-8
//! ```

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use super::{LabeledDataset, Provenance};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"UBWDSET1";
const VERSION: u32 = 1;

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < self.pos + n {
            return Err(Error::Truncated {
                path: self.path.display().to_string(),
                needed: self.pos + n - self.bytes.len(),
                offset: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8)?))
    }
}

/// Serialize a dataset (with provenance and config digest) to bytes.
pub fn container_bytes(data: &LabeledDataset, config_digest: &str) -> Result<Vec<u8>> {
    let [c, h, w] = data.image_shape();
    let n = data.len();
    let mut out = Vec::with_capacity(32 + n * 4 + n * c * h * w * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(data.k() as u32).to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for v in [c, h, w] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &y in data.labels() {
        out.extend_from_slice(&y.to_le_bytes());
    }
    for &p in data.images().data() {
        out.extend_from_slice(&p.to_bits().to_le_bytes());
    }
    let prov = serde_json::to_vec(data.provenance())?;
    out.extend_from_slice(&(prov.len() as u64).to_le_bytes());
    out.extend_from_slice(&prov);
    out.extend_from_slice(&(config_digest.len() as u64).to_le_bytes());
    out.extend_from_slice(config_digest.as_bytes());
    Ok(out)
}

pub fn write_container(data: &LabeledDataset, config_digest: &str, path: &Path) -> Result<()> {
    let bytes = container_bytes(data, config_digest)?;
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a container back; returns the dataset and its embedded config digest.
pub fn read_container(path: &Path) -> Result<(LabeledDataset, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut cur = Cursor {
        path,
        bytes: &bytes,
        pos: 0,
    };
    let magic = cur.take(8)?;
    if magic != MAGIC {
        return Err(Error::BadContainer {
            path: path.display().to_string(),
            why: format!("bad magic {magic:02x?}"),
        });
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::BadContainer {
            path: path.display().to_string(),
            why: format!("unsupported version {version}"),
        });
    }
    let k = cur.u32()? as usize;
    let n = cur.u64()? as usize;
    let c = cur.u32()? as usize;
    let h = cur.u32()? as usize;
    let w = cur.u32()? as usize;

    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(cur.u32()?);
    }
    let numel = n * c * h * w;
    let mut pixels = Vec::with_capacity(numel);
    for _ in 0..numel {
        pixels.push(f64::from_bits(cur.u64()?));
    }
    let prov_len = cur.u64()? as usize;
    let provenance: Provenance = serde_json::from_slice(cur.take(prov_len)?)?;
    let digest_len = cur.u64()? as usize;
    let config_digest = String::from_utf8(cur.take(digest_len)?.to_vec()).map_err(|e| {
        Error::BadContainer {
            path: path.display().to_string(),
            why: format!("config digest not UTF-8: {e}"),
        }
    })?;

    let images = Tensor::new(vec![n, c, h, w], pixels)?;
    let data = LabeledDataset::new(images, labels, k)?.with_provenance(provenance);
    Ok((data, config_digest))
}
