//! IDX image/label ingestion (the MNIST container format): big-endian
//! magic + dimensions, unsigned-byte payload. Pixels are rescaled to
//! [-1, 1]; labels become `Condition::Labeled`.

use std::fs;
use std::path::Path;

use super::{PairedDataset, Provenance};
use crate::error::{Error, Result};
use crate::models::Condition;
use crate::numcore::Tensor;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], off: usize, what: &str) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("truncated IDX file while reading {what}")))
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<PairedDataset> {
    let img_bytes = fs::read(images_path)?;
    let lbl_bytes = fs::read(labels_path)?;

    let magic = read_u32_be(&img_bytes, 0, "image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}"
        )));
    }
    let count = read_u32_be(&img_bytes, 4, "image count")? as usize;
    let rows = read_u32_be(&img_bytes, 8, "row count")? as usize;
    let cols = read_u32_be(&img_bytes, 12, "column count")? as usize;
    let expected = 16 + count * rows * cols;
    if img_bytes.len() != expected {
        return Err(Error::Format(format!(
            "image payload is {} bytes, header implies {expected}",
            img_bytes.len()
        )));
    }

    let lmagic = read_u32_be(&lbl_bytes, 0, "label magic")?;
    if lmagic != IDX_LABEL_MAGIC {
        return Err(Error::Format(format!(
            "label magic {lmagic:#010x}, expected {IDX_LABEL_MAGIC:#010x}"
        )));
    }
    let lcount = read_u32_be(&lbl_bytes, 4, "label count")? as usize;
    if lcount != count {
        return Err(Error::Format(format!(
            "{count} images but {lcount} labels"
        )));
    }
    if lbl_bytes.len() != 8 + lcount {
        return Err(Error::Format(format!(
            "label payload is {} bytes, header implies {}",
            lbl_bytes.len(),
            8 + lcount
        )));
    }

    let mut examples = Vec::with_capacity(count);
    for i in 0..count {
        let off = 16 + i * rows * cols;
        let pixels: Vec<f32> = img_bytes[off..off + rows * cols]
            .iter()
            .map(|&b| b as f32 / 255.0 * 2.0 - 1.0)
            .collect();
        let tensor = Tensor::new(&[1, rows, cols], pixels)?;
        let label = lbl_bytes[8 + i];
        examples.push((tensor, Condition::labeled(label as u32)));
    }
    Ok(PairedDataset {
        examples,
        provenance: Provenance::Real,
    })
}
