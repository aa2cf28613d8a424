//! Single-channel image I/O: 8-bit grayscale PNGs on disk, `[0,1]` f64
//! arrays in memory.

use std::path::Path;

use image::{GrayImage, ImageReader, Luma};
use ndarray::Array2;

use crate::error::{Error, Result};

/// Read a grayscale image into an H x W array scaled to [0, 1].
///
/// Non-grayscale inputs are converted by luma weighting.
pub fn read_gray_image(path: &Path) -> Result<Array2<f64>> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for (x, y, Luma([v])) in img.enumerate_pixels() {
        out[(y as usize, x as usize)] = *v as f64 / 255.0;
    }
    Ok(out)
}

/// Write a [0, 1] array as an 8-bit grayscale PNG (values clamped, rounded).
pub fn write_gray_image(path: &Path, pixels: &Array2<f64>) -> Result<()> {
    let (h, w) = pixels.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for ((y, x), v) in pixels.indexed_iter() {
        let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        img.put_pixel(x as u32, y as u32, Luma([q]));
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn quantized_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let src = Array2::from_shape_fn((5, 7), |(y, x)| ((y * 7 + x) as f64) / 34.0);
        write_gray_image(&path, &src).unwrap();
        let back = read_gray_image(&path).unwrap();
        assert_eq!(back.dim(), (5, 7));
        for (a, b) in src.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
