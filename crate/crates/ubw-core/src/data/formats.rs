//! Standard binary formats: IDX image/label pairs and CIFAR-10 batches.

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(path: &Path, bytes: &[u8], offset: usize) -> Result<u32> {
    if bytes.len() < offset + 4 {
        return Err(Error::Truncated {
            path: path.display().to_string(),
            needed: 4,
            offset: offset as u64,
        });
    }
    Ok(BigEndian::read_u32(&bytes[offset..offset + 4]))
}

/// Load a paired IDX image/label file set (the MNIST layout): big-endian
/// magics, u8 pixels scaled by 1/255 into `[0,1]`, labels shifted to 1-based.
pub fn load_idx(images_path: &Path, labels_path: &Path, k: usize) -> Result<LabeledDataset> {
    let img_bytes =
        fs::read(images_path).map_err(|e| Error::io(images_path.display().to_string(), e))?;
    let lbl_bytes =
        fs::read(labels_path).map_err(|e| Error::io(labels_path.display().to_string(), e))?;

    let magic = read_u32(images_path, &img_bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: images_path.display().to_string(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
            offset: 0,
        });
    }
    let n = read_u32(images_path, &img_bytes, 4)? as usize;
    let h = read_u32(images_path, &img_bytes, 8)? as usize;
    let w = read_u32(images_path, &img_bytes, 12)? as usize;
    let payload = 16 + n * h * w;
    if img_bytes.len() < payload {
        return Err(Error::Truncated {
            path: images_path.display().to_string(),
            needed: payload - img_bytes.len(),
            offset: img_bytes.len() as u64,
        });
    }

    let lmagic = read_u32(labels_path, &lbl_bytes, 0)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: labels_path.display().to_string(),
            expected: IDX_LABELS_MAGIC,
            found: lmagic,
            offset: 0,
        });
    }
    let ln = read_u32(labels_path, &lbl_bytes, 4)? as usize;
    if ln != n {
        return Err(Error::CountMismatch {
            images_path: images_path.display().to_string(),
            labels_path: labels_path.display().to_string(),
            image_count: n,
            label_count: ln,
        });
    }
    if lbl_bytes.len() < 8 + n {
        return Err(Error::Truncated {
            path: labels_path.display().to_string(),
            needed: 8 + n - lbl_bytes.len(),
            offset: lbl_bytes.len() as u64,
        });
    }

    let pixels: Vec<f64> = img_bytes[16..16 + n * h * w]
        .iter()
        .map(|b| *b as f64 / 255.0)
        .collect();
    let labels: Vec<u32> = lbl_bytes[8..8 + n].iter().map(|b| *b as u32 + 1).collect();
    let images = Tensor::new(vec![n, 1, h, w], pixels)?;
    LabeledDataset::new(images, labels, k)
}

/// Write a dataset as an IDX image/label pair. Pixels are quantized back to
/// u8 with rounding, so data that originated from u8 round-trips exactly.
/// Only single-channel datasets fit the format.
pub fn write_idx(data: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let [c, h, w] = data.image_shape();
    if c != 1 {
        return Err(Error::InvalidParameter {
            name: "dataset",
            why: format!("IDX stores single-channel images, got {c} channels"),
        });
    }
    let n = data.len();
    let mut img = Vec::with_capacity(16 + n * h * w);
    for v in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(
        data.images()
            .data()
            .iter()
            .map(|p| (p * 255.0).round() as u8),
    );

    let mut lbl = Vec::with_capacity(8 + n);
    for v in [IDX_LABELS_MAGIC, n as u32] {
        lbl.extend_from_slice(&v.to_be_bytes());
    }
    lbl.extend(data.labels().iter().map(|y| (y - 1) as u8));

    let mut f =
        fs::File::create(images_path).map_err(|e| Error::io(images_path.display().to_string(), e))?;
    f.write_all(&img)
        .map_err(|e| Error::io(images_path.display().to_string(), e))?;
    let mut f =
        fs::File::create(labels_path).map_err(|e| Error::io(labels_path.display().to_string(), e))?;
    f.write_all(&lbl)
        .map_err(|e| Error::io(labels_path.display().to_string(), e))?;
    Ok(())
}

/// Load CIFAR-10 binary batches: 3073-byte records of one label byte plus
/// a 3072-byte 3x32x32 image in R,G,B plane order.
pub fn load_cifar_binary(path: &Path) -> Result<LabeledDataset> {
    const RECORD: usize = 3073;
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(Error::BadContainer {
            path: path.display().to_string(),
            why: format!("file size {} not a positive multiple of {RECORD}", bytes.len()),
        });
    }
    let n = bytes.len() / RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3072);
    for rec in bytes.chunks_exact(RECORD) {
        labels.push(rec[0] as u32 + 1);
        pixels.extend(rec[1..].iter().map(|b| *b as f64 / 255.0));
    }
    let images = Tensor::new(vec![n, 3, 32, 32], pixels)?;
    LabeledDataset::new(images, labels, 10)
}
