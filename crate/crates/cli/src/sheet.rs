//! Sample sheets: tile grayscale images into a single P5 (binary PGM)
//! file, mapping [-1, 1] affinely onto [0, 255].

use std::path::Path;

use anyhow::{bail, Context, Result};
use rclab_core::numcore::Tensor;

pub fn emit_sample_sheet(
    images: &[Tensor<f32>],
    cols: usize,
    rows: usize,
    path: &Path,
) -> Result<()> {
    if images.is_empty() || cols == 0 || rows == 0 {
        bail!("sample sheet needs images and a positive grid");
    }
    if images.len() > cols * rows {
        bail!(
            "{} images exceed the {cols}x{rows} grid capacity",
            images.len()
        );
    }
    let shape = images[0].shape().to_vec();
    if shape.len() != 3 || shape[0] != 1 {
        bail!("sample sheets take [1, h, w] images, got {shape:?}");
    }
    let (h, w) = (shape[1], shape[2]);
    for img in images {
        if img.shape() != shape.as_slice() {
            bail!("mixed image shapes in sheet");
        }
    }
    let (width, height) = (cols * w, rows * h);
    let mut pixels = vec![0u8; width * height];
    for (i, img) in images.iter().enumerate() {
        let (gr, gc) = (i / cols, i % cols);
        for y in 0..h {
            for x in 0..w {
                let v = img.data()[y * w + x].clamp(-1.0, 1.0);
                let byte = ((v + 1.0) * 0.5 * 255.0).round() as u8;
                pixels[(gr * h + y) * width + gc * w + x] = byte;
            }
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    std::fs::write(path, out).with_context(|| format!("write sheet {path:?}"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_negative_images_are_zero_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.pgm");
        let imgs: Vec<Tensor<f32>> = (0..4).map(|_| Tensor::full(&[1, 3, 3], -1.0)).collect();
        emit_sample_sheet(&imgs, 2, 2, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_end = bytes.iter().filter(|&&b| b == b'\n').count();
        assert!(header_end >= 3);
        let payload_start = bytes.len() - 36;
        assert!(bytes[payload_start..].iter().all(|&b| b == 0));
    }

    #[test]
    fn grid_dimensions_in_header() {
        // 2 rows x 5 cols of 28x28 -> 140x56.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.pgm");
        let imgs: Vec<Tensor<f32>> = (0..10).map(|_| Tensor::zeros(&[1, 28, 28])).collect();
        emit_sample_sheet(&imgs, 5, 2, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n140 56\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 140 * 56);
    }

    #[test]
    fn over_capacity_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let imgs: Vec<Tensor<f32>> = (0..5).map(|_| Tensor::zeros(&[1, 4, 4])).collect();
        assert!(emit_sample_sheet(&imgs, 2, 2, &dir.path().join("s.pgm")).is_err());
    }

    #[test]
    fn midpoint_maps_to_mid_gray() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.pgm");
        let imgs = vec![Tensor::full(&[1, 2, 2], 0.0f32)];
        emit_sample_sheet(&imgs, 1, 1, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes[bytes.len() - 4..].iter().all(|&b| b == 128));
    }
}
