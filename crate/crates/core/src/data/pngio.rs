//! PNG I/O for masks (8-bit grayscale) and images (8-bit RGB).

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::{ColorType, DynamicImage, ImageEncoder, ImageFormat};

use crate::diffcore::Tensor;
use crate::error::{CrmError, Result};

fn bad(path: &Path, reason: impl Into<String>) -> CrmError {
    CrmError::BadImage {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Write a 1 x H x W soft mask as an 8-bit grayscale PNG.
///
/// Value `v` is stored as `round(v * 255)`; binary masks round-trip exactly.
pub fn write_mask_png(mask: &Tensor<f32>, path: &Path) -> Result<()> {
    let s = mask.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(CrmError::shape(format!(
            "write_mask_png: expected 1 x H x W, got {s:?}"
        )));
    }
    let data = mask.data();
    if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(CrmError::invalid(
            "write_mask_png: mask values must lie in [0, 1]",
        ));
    }
    let bytes: Vec<u8> = data.iter().map(|&v| (v * 255.0).round() as u8).collect();
    write_png(path, &bytes, s[2] as u32, s[1] as u32, ColorType::L8.into())
}

/// Read an 8-bit grayscale PNG as a 1 x H x W soft mask (byte b -> b/255).
pub fn read_mask_png(path: &Path) -> Result<Tensor<f32>> {
    let img = open_png(path)?;
    match img {
        DynamicImage::ImageLuma8(gray) => {
            let (w, h) = (gray.width() as usize, gray.height() as usize);
            let data: Vec<f32> = gray.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
            Ok(Tensor::from_vec(vec![1, h, w], data))
        }
        other => Err(bad(
            path,
            format!(
                "expected single-channel 8-bit mask, found {:?}",
                other.color()
            ),
        )),
    }
}

/// Write a 3 x H x W image in [0, 1] as an 8-bit RGB PNG.
pub fn write_image_png(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(CrmError::shape(format!(
            "write_image_png: expected 3 x H x W, got {s:?}"
        )));
    }
    let (h, w) = (s[1], s[2]);
    let data = image.data();
    let plane = h * w;
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            bytes.push((data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write_png(path, &bytes, w as u32, h as u32, ColorType::Rgb8.into())
}

/// Read an 8-bit RGB PNG as a 3 x H x W tensor in [0, 1].
pub fn read_image_png(path: &Path) -> Result<Tensor<f32>> {
    let img = open_png(path)?;
    match img {
        DynamicImage::ImageRgb8(rgb) => {
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let raw = rgb.into_raw();
            let plane = h * w;
            let mut data = vec![0f32; 3 * plane];
            for i in 0..plane {
                for c in 0..3 {
                    data[c * plane + i] = raw[i * 3 + c] as f32 / 255.0;
                }
            }
            Ok(Tensor::from_vec(vec![3, h, w], data))
        }
        other => Err(bad(
            path,
            format!("expected 8-bit RGB image, found {:?}", other.color()),
        )),
    }
}

fn open_png(path: &Path) -> Result<DynamicImage> {
    let file = File::open(path).map_err(|e| bad(path, format!("cannot open: {e}")))?;
    image::load(BufReader::new(file), ImageFormat::Png)
        .map_err(|e| bad(path, format!("not a readable PNG: {e}")))
}

fn write_png(
    path: &Path,
    bytes: &[u8],
    w: u32,
    h: u32,
    color: image::ExtendedColorType,
) -> Result<()> {
    // Atomic write: encode to a sibling temp file, then rename into place.
    let tmp = path.with_extension("png.tmp");
    {
        let file = File::create(&tmp)?;
        let encoder = image::codecs::png::PngEncoder::new(BufWriter::new(file));
        encoder
            .write_image(bytes, w, h, color)
            .map_err(CrmError::Image)?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::mask::BinaryMask;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn binary_mask_roundtrips_exactly() {
        let dir = tmpdir();
        let path = dir.path().join("m.png");
        let mask = BinaryMask::new(3, 4, vec![0, 1, 1, 0, 1, 0, 0, 1, 1, 1, 0, 0]);
        write_mask_png(&mask.to_tensor(), &path).unwrap();
        let back = read_mask_png(&path).unwrap();
        assert_eq!(BinaryMask::from_tensor(&back, 0.5).unwrap(), mask);
        assert!(back
            .data()
            .iter()
            .all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn soft_value_quantization() {
        let dir = tmpdir();
        let path = dir.path().join("soft.png");
        let soft = Tensor::from_vec(vec![1, 1, 1], vec![0.5f32]);
        write_mask_png(&soft, &path).unwrap();
        let back = read_mask_png(&path).unwrap();
        // 0.5 -> byte 128 -> 128/255
        assert!((back.item() - 128.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn rgb_file_as_mask_is_error() {
        let dir = tmpdir();
        let path = dir.path().join("rgb.png");
        let img = Tensor::from_vec(vec![3, 2, 2], vec![0.5f32; 12]);
        write_image_png(&img, &path).unwrap();
        let err = read_mask_png(&path).unwrap_err();
        assert!(matches!(err, CrmError::BadImage { .. }), "{err}");
    }

    #[test]
    fn non_png_is_error() {
        let dir = tmpdir();
        let path = dir.path().join("bogus.png");
        std::fs::write(&path, b"definitely not a png").unwrap();
        assert!(read_mask_png(&path).is_err());
        assert!(read_image_png(&path).is_err());
    }

    #[test]
    fn image_roundtrip_within_quantization() {
        let dir = tmpdir();
        let path = dir.path().join("img.png");
        let img = Tensor::from_vec(
            vec![3, 2, 2],
            (0..12).map(|i| i as f32 / 11.0).collect(),
        );
        write_image_png(&img, &path).unwrap();
        let back = read_image_png(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data().iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
