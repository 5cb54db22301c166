use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};

use super::Image;
use crate::error::{Error, Result};

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads an 8- or 16-bit RGB(A) PNG; alpha is dropped and values are scaled
/// to `[0, 1]`.
pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    if reader.format() != Some(ImageFormat::Png) {
        return Err(image_err(path, "not a PNG file"));
    }
    let dynamic = reader.decode().map_err(|e| image_err(path, e))?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    let mut img = Image::zeros(h, w);
    match dynamic {
        DynamicImage::ImageRgb8(buf) => copy_pixels(&mut img, buf.pixels().map(|p| p.0.map(f32::from)), 255.0),
        DynamicImage::ImageRgba8(buf) => {
            copy_pixels(&mut img, buf.pixels().map(|p| [p.0[0], p.0[1], p.0[2]].map(f32::from)), 255.0)
        }
        DynamicImage::ImageRgb16(buf) => copy_pixels(&mut img, buf.pixels().map(|p| p.0.map(f32::from)), 65535.0),
        DynamicImage::ImageRgba16(buf) => copy_pixels(
            &mut img,
            buf.pixels().map(|p| [p.0[0], p.0[1], p.0[2]].map(f32::from)),
            65535.0,
        ),
        other => {
            return Err(image_err(
                path,
                format!("unsupported pixel layout {:?}; expected RGB or RGBA", other.color()),
            ))
        }
    }
    Ok(img)
}

fn copy_pixels(img: &mut Image, pixels: impl Iterator<Item = [f32; 3]>, max: f32) {
    let w = img.width();
    for (i, px) in pixels.enumerate() {
        let (y, x) = (i / w, i % w);
        for (c, v) in px.into_iter().enumerate() {
            img.set(c, y, x, v / max);
        }
    }
}

/// Round-half-up quantization of a `[0, 1]` value to 8 bits.
pub(crate) fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

/// Writes an 8-bit RGB PNG; values are clamped to `[0, 1]` first.
pub fn save_png(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = image.dims();
    let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([0, 1, 2].map(|c| quantize8(image.get(c, y, x))))
    });
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

/// Writes a single-channel 16-bit PNG, mapping `[0, max]` linearly onto the
/// full 16-bit range.
pub fn save_gray16_png(values: &[f64], height: usize, width: usize, max: f64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if values.len() != height * width {
        return Err(Error::shape(format!(
            "heat map of {} values does not fill {height}x{width}",
            values.len()
        )));
    }
    let scale = if max > 0.0 { 65535.0 / max } else { 0.0 };
    let buf = ImageBuffer::<Luma<u16>, _>::from_fn(width as u32, height as u32, |x, y| {
        let v = values[y as usize * width + x as usize];
        Luma([(v * scale).round().clamp(0.0, 65535.0) as u16])
    });
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}
