//! Conversions between `(H·W)×3` matrices in `[-1, 1]` and encoded images.

use std::io::Cursor;
use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tape::Mat;

fn to_byte(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

pub fn to_rgb8(rgb: &Mat, res: usize) -> RgbImage {
    RgbImage::from_fn(res as u32, res as u32, |x, y| {
        let r = rgb.row(y as usize * res + x as usize);
        image::Rgb([to_byte(r[0]), to_byte(r[1]), to_byte(r[2])])
    })
}

pub fn from_rgb8(img: &RgbImage) -> Mat {
    let (w, h) = img.dimensions();
    Mat::from_shape_fn(((w * h) as usize, 3), |(i, c)| {
        let p = img.get_pixel(i as u32 % w, i as u32 / w);
        p[c] as f64 / 127.5 - 1.0
    })
}

/// Grayscale-as-RGB image of `values` mapped linearly from `[lo, hi]`.
pub fn scalar_map(values: &[f64], res: usize, lo: f64, hi: f64) -> Mat {
    let span = if hi > lo { hi - lo } else { 1.0 };
    Mat::from_shape_fn((res * res, 3), |(i, _)| 2.0 * ((values[i] - lo) / span) - 1.0)
}

pub fn encode_png(rgb: &Mat, res: usize) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    to_rgb8(rgb, res).write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn encode_jpeg(rgb: &Mat, res: usize, quality: u8) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality);
    to_rgb8(rgb, res).write_with_encoder(enc)?;
    Ok(buf)
}

pub fn save_png(rgb: &Mat, res: usize, path: &Path) -> Result<()> {
    std::fs::write(path, encode_png(rgb, res)?)?;
    Ok(())
}

/// Center-crops to a square (when asked) and resizes to `res`.
pub fn square_resize(img: DynamicImage, res: usize, center_crop: bool) -> Mat {
    let img = if center_crop {
        let (w, h) = (img.width(), img.height());
        let side = w.min(h);
        img.crop_imm((w - side) / 2, (h - side) / 2, side, side)
    } else {
        img
    };
    let img = img.resize_exact(res as u32, res as u32, FilterType::Triangle);
    from_rgb8(&img.to_rgb8())
}

pub fn load_square(path: &Path, res: usize, center_crop: bool) -> Result<Mat> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(square_resize(img, res, center_crop))
}

/// Images side by side in one row.
pub fn contact_sheet(images: &[Mat], res: usize) -> Mat {
    let n = images.len().max(1);
    let w = res * n;
    Mat::from_shape_fn((res * w, 3), |(i, c)| {
        let (y, x) = (i / w, i % w);
        images
            .get(x / res)
            .map_or(-1.0, |m| m[[y * res + x % res, c]])
    })
}
