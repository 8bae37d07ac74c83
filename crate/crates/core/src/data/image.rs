//! Image and mask files. Decoding and encoding go through the `image` crate
//! (PNG, binary PGM/PPM).

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageReader};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| image_err(path, e))
}

/// Reads an image as `[C, H, W]` with values in `[0, 1]`. Gray images give
/// one channel, color images three; alpha is dropped.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb32f();
        let px = rgb.as_raw();
        Ok(Tensor::from_fn(vec![3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            px[p * 3 + c]
        }))
    } else {
        let luma = img.to_luma32f();
        Tensor::new(vec![1, h, w], luma.into_raw())
    }
}

/// Reads a mask as `[1, H, W]`, binarized at 0.5 (color masks use their
/// luma).
pub fn read_mask(path: &Path) -> Result<Tensor<f32>> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let luma = img.to_luma32f();
    let data = luma
        .into_raw()
        .into_iter()
        .map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![1, h, w], data)
}

/// Converts `[C, H, W]` to `channels` channels: gray is replicated to
/// color, color is averaged to gray.
pub fn adapt_channels(img: Tensor<f32>, channels: usize) -> Result<Tensor<f32>> {
    let [c, h, w] = match img.shape() {
        &[c, h, w] => [c, h, w],
        s => return Err(Error::shape("adapt_channels", format!("expected [C,H,W], got {:?}", s))),
    };
    if c == channels {
        return Ok(img);
    }
    let plane = h * w;
    let d = img.data();
    match (c, channels) {
        (1, k) => Ok(Tensor::from_fn(vec![k, h, w], |i| d[i % plane])),
        (_, 1) => Ok(Tensor::from_fn(vec![1, h, w], |p| {
            (0..c).map(|ch| d[ch * plane + p]).sum::<f32>() / c as f32
        })),
        _ => Err(Error::shape(
            "adapt_channels",
            format!("cannot convert {} channels to {}", c, channels),
        )),
    }
}

/// 8-bit quantization used for probability maps.
pub fn quantize(p: f32) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Saves 8-bit pixels. `.pgm`/`.ppm` are written as binary P5/P6 (the
/// `image` crate would otherwise pick PAM); other extensions go through
/// the crate's format detection.
fn save(path: &Path, w: usize, h: usize, raw: &[u8], color: ExtendedColorType) -> Result<()> {
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    let subtype = match ext.as_str() {
        "pgm" => Some(PnmSubtype::Graymap(SampleEncoding::Binary)),
        "ppm" => Some(PnmSubtype::Pixmap(SampleEncoding::Binary)),
        _ => None,
    };
    match subtype {
        Some(sub) => {
            let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut out = std::io::BufWriter::new(file);
            PnmEncoder::new(&mut out)
                .with_subtype(sub)
                .write_image(raw, w as u32, h as u32, color)
                .map_err(|e| image_err(path, e))
        }
        None => image::save_buffer(path, raw, w as u32, h as u32, color).map_err(|e| image_err(path, e)),
    }
}

fn save_gray(path: &Path, w: usize, h: usize, data: Vec<u8>) -> Result<()> {
    if data.len() != w * h {
        return Err(image_err(path, "buffer size does not match dimensions"));
    }
    save(path, w, h, &data, ExtendedColorType::L8)
}

/// Writes an 8-bit gray image; the format follows the file extension.
pub fn write_gray(path: &Path, w: usize, h: usize, values: &[f32]) -> Result<()> {
    if values.len() != w * h {
        return Err(Error::shape(
            "write_gray",
            format!("{} values for a {}x{} image", values.len(), w, h),
        ));
    }
    save_gray(path, w, h, values.iter().map(|&v| quantize(v)).collect())
}

/// Writes a binary mask (255 = foreground).
pub fn write_mask(path: &Path, w: usize, h: usize, mask: &[bool]) -> Result<()> {
    if mask.len() != w * h {
        return Err(Error::shape(
            "write_mask",
            format!("{} values for a {}x{} image", mask.len(), w, h),
        ));
    }
    save_gray(path, w, h, mask.iter().map(|&m| if m { 255 } else { 0 }).collect())
}

/// Writes `[3, H, W]` or `[1, H, W]` values in `[0, 1]` as PPM/PNG/PGM.
pub fn write_image(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = match img.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::shape("write_image", format!("expected [C,H,W], got {:?}", s))),
    };
    let plane = h * w;
    let d = img.data();
    match c {
        1 => write_gray(path, w, h, d),
        3 => {
            let mut raw = Vec::with_capacity(3 * plane);
            for p in 0..plane {
                for ch in 0..3 {
                    raw.push(quantize(d[ch * plane + p]));
                }
            }
            save(path, w, h, &raw, ExtendedColorType::Rgb8)
        }
        _ => Err(Error::shape("write_image", format!("cannot encode {} channels", c))),
    }
}
